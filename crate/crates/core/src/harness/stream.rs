//! Round-by-round execution of one run, plus the follow-up operations that
//! reuse its artifacts (forward-transfer reference round, sequence-length
//! study).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::dualmeta::{
    meta_optimize_round, IterationLog, MetaStepConfig, RoundConfig, HVP_EPSILON,
};
use crate::error::{EngineError, Result};
use crate::harness::access::{AccessLog, SubjectRead};
use crate::harness::config::RunConfig;
use crate::metrics::{
    aggregate_scores, asd, binarize, dice, AccuracyMatrix, MetricPair, Split,
};
use crate::model::{load_checkpoint, save_checkpoint, Network, ParamVector, Subject};
use crate::replay::{
    select_exemplars, update_buffer, BufferManifest, Exemplar, ReplayBuffer, SiteExemplars,
};
use crate::sitegen::{default_stream, generate_site, import_site, mix_seed, SiteDataset};

/// Side length of generated images; matches the default network input.
pub const IMAGE_SIDE: usize = 16;

/// One completed round in the manifest. `previous_reads` is the audit of
/// every non-incoming-site subject training touched this round; for any
/// buffered method it must stay within the previous round's buffer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub site_id: u32,
    pub checkpoint: String,
    pub buffer: BufferManifest,
    pub train_ms: u64,
    pub previous_reads: Vec<SubjectRead>,
}

/// Full record of a run: enough, together with the checkpoints next to it,
/// to resume or audit the run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub version: String,
    pub layout_id: u64,
    pub config: RunConfig,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Continue a run found in the output directory instead of starting
    /// over. Ignored (fresh start) when there is no manifest yet.
    pub resume: bool,
    /// Stop after this round completes; used to exercise resume paths.
    pub stop_after_round: Option<usize>,
}

/// What a `run_stream` invocation produced. `round_logs` covers only the
/// rounds executed by this invocation (a resume does not replay old logs).
#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub matrix: AccuracyMatrix,
    pub access: AccessLog,
    pub round_logs: Vec<(usize, Vec<IterationLog>)>,
    pub params: ParamVector,
    pub out_dir: PathBuf,
}

/// Generate (or load and verify) every site of the configured pool.
pub fn load_stream_data(config: &RunConfig) -> Result<Vec<SiteDataset>> {
    let specs = default_stream(config.n_sites, config.data_seed);
    match &config.data_dir {
        Some(dir) => specs
            .iter()
            .map(|spec| {
                let path = dir.join(format!("site_{}.bin", spec.site_id));
                let ds = import_site(&path)?;
                if ds.spec != *spec {
                    return Err(EngineError::Config(format!(
                        "{} was generated with different parameters than data_seed {} \
                         implies (file: {:?}, expected: {:?})",
                        path.display(),
                        config.data_seed,
                        ds.spec,
                        spec
                    )));
                }
                Ok(ds)
            })
            .collect(),
        None => specs
            .iter()
            .map(|spec| generate_site(spec, IMAGE_SIDE, IMAGE_SIDE))
            .collect(),
    }
}

/// Per-subject (dice, asd) of a model over one split.
pub fn evaluate_split(
    net: &Network,
    params: &ParamVector,
    subjects: &[Subject],
) -> Result<Vec<(f64, Option<f64>)>> {
    let refs: Vec<&Subject> = subjects.iter().collect();
    let probs = net.forward(params, &refs)?;
    probs
        .iter()
        .zip(subjects)
        .map(|(p, s)| {
            let pred = binarize(p);
            Ok((dice(&pred, &s.mask)?.value, asd(&pred, &s.mask)?))
        })
        .collect()
}

fn round_config(config: &RunConfig) -> RoundConfig {
    let (gamma, beta) = config
        .method
        .effective_weights(config.gamma, config.beta);
    RoundConfig {
        route: config.method.route(),
        step: MetaStepConfig {
            gamma,
            beta,
            meta_lr: config.meta_lr,
            adam: Default::default(),
        },
        batch_size: config.batch_size,
        iterations: config.iterations_per_round,
        // Buffered methods always log alignment (the diagnostics feed the
        // comparison report); plain training only on explicit request,
        // because the diagnostic draws read buffer data.
        log_alignment: config.method.samples_buffer() || config.log_buffer_alignment,
        hvp_epsilon: HVP_EPSILON,
    }
}

fn checkpoint_name(round: usize) -> String {
    format!("checkpoints/round_{round:03}.bin")
}

pub(crate) fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EngineError::Integrity(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| EngineError::Integrity(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Execute (or resume) a full stream run into `out_dir`. Every round:
/// train on the incoming site (and buffer, per method), quantize the
/// parameters to f32, checkpoint, select exemplars into the buffer, then
/// evaluate all sites on val and test. Artifacts are flushed after every
/// round, so an aborted run resumes at the next round boundary.
pub fn run_stream(config: &RunConfig, out_dir: &Path, options: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    let config = config.resolved(out_dir);
    let net = Network::default();
    let sites = load_stream_data(&config)?;
    for ds in &sites {
        if ds.h != net.h || ds.w != net.w {
            return Err(EngineError::Config(format!(
                "site {} images are {}x{}, the model expects {}x{}",
                ds.spec.site_id, ds.h, ds.w, net.h, net.w
            )));
        }
    }
    std::fs::create_dir_all(out_dir.join("checkpoints"))?;
    let manifest_path = out_dir.join("manifest.json");
    let metrics_path = out_dir.join("metrics.csv");
    let alignment_path = out_dir.join("alignment.csv");

    let (mut params, mut buffer, mut manifest, mut matrix) =
        if options.resume && manifest_path.exists() {
            resume_state(&config, out_dir, &net, &sites)?
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
            let params = net.init(&mut rng);
            save_checkpoint(&out_dir.join(checkpoint_name(0)), &params)?;
            config.to_json_file(&out_dir.join("config.json"))?;
            std::fs::write(&alignment_path, "")?;
            let manifest = RunManifest {
                version: env!("CARGO_PKG_VERSION").to_string(),
                layout_id: net.layout_id(),
                config: config.clone(),
                rounds: Vec::new(),
            };
            (
                params,
                ReplayBuffer::default(),
                manifest,
                AccuracyMatrix::default(),
            )
        };

    let mut access = AccessLog::default();
    let mut round_logs = Vec::new();
    let start_round = manifest.rounds.len() + 1;

    for t in start_round..=config.stream.len() {
        let incoming_id = config.stream[t - 1];
        let incoming = &sites[incoming_id as usize];
        let pool = buffer.subject_pool();
        let train_refs: Vec<&Subject> = incoming.train.iter().collect();
        let cfg = round_config(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.train_seed, t as u64));
        let t0 = Instant::now();
        let outcome = meta_optimize_round(&net, &params, &train_refs, &pool, &cfg, &mut rng, |s| {
            access.note(t, s)
        })?;
        let train_ms = t0.elapsed().as_millis() as u64;
        params = outcome.params;
        params.quantize_f32();
        let checkpoint = checkpoint_name(t);
        save_checkpoint(&out_dir.join(&checkpoint), &params)?;

        if config.rescore_buffer_features {
            for site in &mut buffer.sites {
                for e in &mut site.exemplars {
                    access.note(t, &e.subject);
                    e.feature = net.bottleneck_features(&params, &e.subject)?;
                }
            }
        }
        for s in &incoming.train {
            access.note(t, s);
        }
        let chosen = select_exemplars(
            &net,
            &params,
            &incoming.train,
            &buffer,
            config.method.selection_mode(config.lambda),
            config.n_exemplars,
        )?;
        update_buffer(&mut buffer, chosen)?;

        for ds in &sites {
            for (split, subjects) in [(Split::Val, &ds.val), (Split::Test, &ds.test)] {
                let scores = evaluate_split(&net, &params, subjects)?;
                matrix.push(aggregate_scores(t, ds.spec.site_id, split, &scores)?);
            }
        }

        append_alignment_rows(&alignment_path, t, &outcome.log)?;
        matrix.to_csv(&metrics_path)?;
        manifest.rounds.push(RoundRecord {
            round: t,
            site_id: incoming_id,
            checkpoint,
            buffer: buffer.manifest(t),
            train_ms,
            previous_reads: access.previous_site_reads(t, incoming_id),
        });
        write_json(&manifest_path, &manifest)?;
        round_logs.push((t, outcome.log));
        if options.stop_after_round == Some(t) {
            break;
        }
    }

    Ok(RunOutcome {
        manifest,
        matrix,
        access,
        round_logs,
        params,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Restore (params, buffer, manifest, matrix) as of the last completed
/// round. Exemplar features are recomputed from the checkpoints they were
/// originally computed with, so a resumed run is bit-identical to an
/// uninterrupted one.
fn resume_state(
    config: &RunConfig,
    out_dir: &Path,
    net: &Network,
    sites: &[SiteDataset],
) -> Result<(ParamVector, ReplayBuffer, RunManifest, AccuracyMatrix)> {
    let manifest = read_manifest(&out_dir.join("manifest.json"))?;
    if manifest.config != *config {
        return Err(EngineError::Config(
            "cannot resume: the stored run used a different configuration".into(),
        ));
    }
    if manifest.layout_id != net.layout_id() {
        return Err(EngineError::Integrity(
            "cannot resume: the stored run used a different model layout".into(),
        ));
    }
    let k = manifest.rounds.len();
    let params = load_checkpoint(&out_dir.join(checkpoint_name(k)), net)?;
    let matrix = if k == 0 {
        AccuracyMatrix::default()
    } else {
        AccuracyMatrix::from_csv(&out_dir.join("metrics.csv"))?
    };
    let buffer = match manifest.rounds.last() {
        Some(last) => rebuild_buffer(config, out_dir, net, sites, &last.buffer)?,
        None => ReplayBuffer::default(),
    };
    Ok((params, buffer, manifest, matrix))
}

/// Reconstruct the buffer a manifest describes. Default (cached) feature
/// mode recomputes each site's features with the checkpoint of the round
/// that selected it; rescoring mode uses the last completed round's
/// checkpoint, matching the refresh that ran there.
fn rebuild_buffer(
    config: &RunConfig,
    out_dir: &Path,
    net: &Network,
    sites: &[SiteDataset],
    bm: &BufferManifest,
) -> Result<ReplayBuffer> {
    let mut buffer = ReplayBuffer::default();
    for msite in &bm.sites {
        let position = config
            .stream
            .iter()
            .position(|&s| s == msite.site_id)
            .ok_or_else(|| {
                EngineError::Integrity(format!(
                    "buffer manifest lists site {} which is not in the stream",
                    msite.site_id
                ))
            })?;
        let feature_round = if config.rescore_buffer_features {
            bm.round
        } else {
            position + 1
        };
        let p = load_checkpoint(&out_dir.join(checkpoint_name(feature_round)), net)?;
        let dataset = &sites[msite.site_id as usize];
        let mut exemplars = Vec::with_capacity(msite.exemplars.len());
        for me in &msite.exemplars {
            let subject = dataset
                .subject(me.subject_id)
                .ok_or_else(|| {
                    EngineError::Integrity(format!(
                        "buffer manifest lists subject {} which site {} does not contain",
                        me.subject_id, msite.site_id
                    ))
                })?
                .clone();
            let feature = net.bottleneck_features(&p, &subject)?;
            exemplars.push(Exemplar {
                subject,
                feature,
                r: me.r,
                v: me.v,
                h: me.h,
            });
        }
        buffer.sites.push(SiteExemplars {
            site_id: msite.site_id,
            exemplars,
        });
    }
    Ok(buffer)
}

/// One `alignment.csv` row; a flattened [`IterationLog`] tagged with its
/// round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub round: usize,
    pub iteration: usize,
    pub loss_d: f64,
    pub loss_p: Option<f64>,
    pub loss_ctr: Option<f64>,
    pub loss_cte: Option<f64>,
    pub dp_inner: Option<f64>,
    pub ctr_cte_inner: Option<f64>,
    pub dp_cosine: Option<f64>,
    pub ctr_cte_cosine: Option<f64>,
    pub degenerate: bool,
    pub grad_norm: f64,
    pub step_ms: f64,
}

fn append_alignment_rows(path: &Path, round: usize, log: &[IterationLog]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file);
    for l in log {
        let row = AlignmentRow {
            round,
            iteration: l.iteration,
            loss_d: l.loss_d,
            loss_p: l.loss_p,
            loss_ctr: l.loss_ctr,
            loss_cte: l.loss_cte,
            dp_inner: l.dp_inner,
            ctr_cte_inner: l.ctr_cte_inner,
            dp_cosine: l.dp_cosine,
            ctr_cte_cosine: l.ctr_cte_cosine,
            degenerate: l.degenerate,
            grad_norm: l.grad_norm,
            step_ms: l.step_ms,
        };
        w.serialize(row)
            .map_err(|e| EngineError::Integrity(format!("alignment csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_alignment(path: &Path) -> Result<Vec<AlignmentRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| EngineError::Integrity(format!("alignment csv: {e}")))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<AlignmentRow>, _>>()
        .map_err(|e| EngineError::Integrity(format!("alignment csv: {e}")))
}

/// Reference accuracy for forward transfer: the held-out site's test score
/// after one extra training round on its train split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FtReference {
    pub iterations: usize,
    pub dsc: f64,
    pub asd: Option<f64>,
    pub asd_skipped: usize,
    pub checkpoint: String,
}

impl FtReference {
    pub fn as_pair(&self) -> MetricPair {
        MetricPair {
            dsc: self.dsc,
            asd: self.asd,
            asd_skipped: self.asd_skipped,
        }
    }
}

/// Continue a completed run for one extra round on the held-out site, with
/// the same method and the final buffer, and record its test accuracy as
/// the forward-transfer reference. Zero iterations skip training, making
/// the reference equal FM by construction.
pub fn run_ft_reference(run_dir: &Path, iterations_override: Option<usize>) -> Result<FtReference> {
    let manifest = read_manifest(&run_dir.join("manifest.json"))?;
    let config = manifest.config.clone();
    config.validate()?;
    if manifest.rounds.len() != config.stream.len() {
        return Err(EngineError::Config(format!(
            "run completed {} of {} rounds; finish the stream before the reference round",
            manifest.rounds.len(),
            config.stream.len()
        )));
    }
    let net = Network::default();
    if manifest.layout_id != net.layout_id() {
        return Err(EngineError::Integrity(
            "run used a different model layout".into(),
        ));
    }
    let sites = load_stream_data(&config)?;
    let last = manifest.rounds.last().expect("validated stream is non-empty");
    let mut params = load_checkpoint(&run_dir.join(&last.checkpoint), &net)?;
    let held = &sites[config.held_out as usize];
    let iterations = iterations_override.unwrap_or(config.iterations_per_round);
    let round = config.stream.len() + 1;
    if iterations > 0 {
        let buffer = rebuild_buffer(&config, run_dir, &net, &sites, &last.buffer)?;
        let pool = buffer.subject_pool();
        let train_refs: Vec<&Subject> = held.train.iter().collect();
        let mut cfg = round_config(&config);
        cfg.iterations = iterations;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.train_seed, round as u64));
        let outcome =
            meta_optimize_round(&net, &params, &train_refs, &pool, &cfg, &mut rng, |_| {})?;
        params = outcome.params;
        params.quantize_f32();
    }
    let checkpoint = "checkpoints/ft_reference.bin".to_string();
    save_checkpoint(&run_dir.join(&checkpoint), &params)?;
    let scores = evaluate_split(&net, &params, &held.test)?;
    let e = aggregate_scores(round, config.held_out, Split::Test, &scores)?;
    let reference = FtReference {
        iterations,
        dsc: e.dsc,
        asd: e.asd,
        asd_skipped: e.asd_undefined,
        checkpoint,
    };
    write_json(&run_dir.join("ft_reference.json"), &reference)?;
    Ok(reference)
}

/// Accuracy curves the sequence-length study extracts: a fixed previous
/// site (the first of the stream) and the held-out site, after every round.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeqStudyRow {
    pub round: usize,
    pub first_site_dsc: f64,
    pub first_site_asd: Option<f64>,
    pub held_out_dsc: f64,
    pub held_out_asd: Option<f64>,
}

/// Run the stream and emit the two per-round curves as `seq_study.csv`.
pub fn sequence_length_study(
    config: &RunConfig,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<Vec<SeqStudyRow>> {
    if config.stream.len() < 3 {
        return Err(EngineError::Config(format!(
            "the sequence-length study needs a stream of at least 3 sites, got {}",
            config.stream.len()
        )));
    }
    let outcome = run_stream(config, out_dir, options)?;
    let rounds = outcome.manifest.rounds.len();
    let rows: Vec<SeqStudyRow> = (1..=rounds)
        .map(|t| {
            let first = outcome.matrix.require_test(t, config.stream[0])?;
            let held = outcome.matrix.require_test(t, config.held_out)?;
            Ok(SeqStudyRow {
                round: t,
                first_site_dsc: first.dsc,
                first_site_asd: first.asd,
                held_out_dsc: held.dsc,
                held_out_asd: held.asd,
            })
        })
        .collect::<Result<_>>()?;
    let mut w = csv::Writer::from_path(out_dir.join("seq_study.csv"))
        .map_err(|e| EngineError::Integrity(format!("seq study csv: {e}")))?;
    for row in &rows {
        w.serialize(row)
            .map_err(|e| EngineError::Integrity(format!("seq study csv: {e}")))?;
    }
    w.flush()?;
    Ok(rows)
}
