//! `sitestream`: generate synthetic site streams, run continual-learning
//! methods over them, and summarize the results.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use sitestream_core::harness::{
    compare_report, run_ft_reference, run_stream, sequence_length_study, RunConfig, RunOptions,
    IMAGE_SIDE,
};
use sitestream_core::metrics::{backward_measure, forward_measure};
use sitestream_core::sitegen::{default_stream, export_site, generate_site};
use sitestream_core::{EngineError, Result};

#[derive(Parser)]
#[command(
    name = "sitestream",
    version,
    about = "Continual-learning experiments on synthetic multi-site segmentation streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic site stream as site_<id>.bin files
    GenData(GenDataArgs),
    /// Execute (or resume) one training run from a JSON config
    Run(RunArgs),
    /// Train the forward-transfer reference round for a completed run
    FtReference(FtReferenceArgs),
    /// Run a stream and extract the first-site and held-out accuracy curves
    SeqStudy(SeqStudyArgs),
    /// Summarize completed runs into one comparison table (CSV + JSON)
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of sites to generate
    #[arg(long)]
    sites: usize,
    /// Base data seed; per-site seeds are derived from it
    #[arg(long)]
    seed: u64,
    /// Directory to write the site files into
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output_dir
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the last completed round if artifacts exist
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct FtReferenceArgs {
    /// Completed run directory
    #[arg(long)]
    run: PathBuf,
    /// Override the reference round's iteration count (0 skips training,
    /// making the reference equal the forward measure)
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct SeqStudyArgs {
    /// Run configuration (JSON); the stream needs at least 3 sites
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output_dir
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the last completed round if artifacts exist
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Completed run directories
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Output CSV path; a .json sibling is written next to it
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Run(a) => run(a),
        Command::FtReference(a) => ft_reference(a),
        Command::SeqStudy(a) => seq_study(a),
        Command::Compare(a) => compare(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    for spec in default_stream(a.sites, a.seed) {
        let ds = generate_site(&spec, IMAGE_SIDE, IMAGE_SIDE)?;
        let path = a.out.join(format!("site_{}.bin", spec.site_id));
        export_site(&path, &ds)?;
        println!(
            "site {}: {} subjects ({} train / {} val / {} test) -> {}",
            spec.site_id,
            ds.n_subjects(),
            ds.train.len(),
            ds.val.len(),
            ds.test.len(),
            path.display()
        );
    }
    Ok(())
}

fn resolve_out(cli_out: Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    cli_out.or_else(|| config.output_dir.clone()).ok_or_else(|| {
        EngineError::Config(
            "no output directory: pass --out or set output_dir in the config".into(),
        )
    })
}

fn run(a: RunArgs) -> Result<()> {
    let config = RunConfig::from_json_file(&a.config)?;
    let out = resolve_out(a.out, &config)?;
    if a.resume && !out.join("manifest.json").exists() {
        println!("no manifest in {}, starting fresh", out.display());
    }
    let options = RunOptions {
        resume: a.resume,
        ..RunOptions::default()
    };
    let outcome = run_stream(&config, &out, &options)?;
    let t = outcome.manifest.rounds.len();
    println!(
        "{}: {} rounds complete -> {}",
        config.method,
        t,
        out.display()
    );
    let bm = backward_measure(&outcome.matrix, &config.stream, t)?;
    let fm = forward_measure(&outcome.matrix, &config.stream, config.held_out, t)?;
    println!("BM(DSC) {:.4}  FM(DSC) {:.4}", bm.dsc, fm.dsc);
    Ok(())
}

fn ft_reference(a: FtReferenceArgs) -> Result<()> {
    let r = run_ft_reference(&a.run, a.iterations)?;
    let asd = r
        .asd
        .map(|v| format!("{v:.4}"))
        .unwrap_or_else(|| "undefined".into());
    println!(
        "reference on the held-out site: DSC {:.4}, ASD {asd} ({} iterations)",
        r.dsc, r.iterations
    );
    Ok(())
}

fn seq_study(a: SeqStudyArgs) -> Result<()> {
    let config = RunConfig::from_json_file(&a.config)?;
    let out = resolve_out(a.out, &config)?;
    let options = RunOptions {
        resume: a.resume,
        ..RunOptions::default()
    };
    let rows = sequence_length_study(&config, &out, &options)?;
    println!(
        "{} rounds -> {}",
        rows.len(),
        out.join("seq_study.csv").display()
    );
    for row in &rows {
        println!(
            "round {}: first-site DSC {:.4}, held-out DSC {:.4}",
            row.round, row.first_site_dsc, row.held_out_dsc
        );
    }
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let report = compare_report(&a.runs, &a.out)?;
    println!(
        "{} runs -> {} (+ .json sibling)",
        report.rows.len(),
        a.out.display()
    );
    for row in &report.rows {
        println!(
            "{:>13}  BM(DSC) {:.4}  BT(DSC) {}  FM(DSC) {:.4}  FT(DSC) {}",
            row.method.to_string(),
            row.bm_dsc,
            fmt_opt(row.bt_dsc),
            row.fm_dsc,
            fmt_opt(row.ft_dsc)
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:+.4}")).unwrap_or_else(|| "--".into())
}
