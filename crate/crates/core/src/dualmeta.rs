//! Meta-optimization of the aligned objective.
//!
//! Differentiating `-gamma * (G_D . G_P)` directly needs Hessian-vector
//! products. The dual-meta route avoids them: take a virtual inner step
//! against one gradient of each pair, then evaluate the partner loss at the
//! shifted parameters. To first order in the step size,
//!
//! ```text
//! L_D(t) + L_P(t - gamma * G_D) + L_Ctr(t) + L_Cte(t - beta * G_Ctr)
//! ```
//!
//! has the same gradient as the aligned objective, and its gradient needs
//! only four first-order evaluations (the inner step is not differentiated
//! through). [`direct_sga_grad`] implements the second-order route with
//! central-difference Hessian-vector products; it exists as the reference
//! the cheap route is validated against, and as the `sga-direct` method.

use rand_chacha::ChaCha8Rng;
use std::time::Instant;

use crate::error::{EngineError, Result};
use crate::model::{Network, ParamVector, Subject};
use crate::objectives::{alignment_report, four_gradients, MinibatchQuad, sample_batch};

/// Central-difference step for Hessian-vector products.
pub const HVP_EPSILON: f64 = 1e-4;

/// Anything that can report a loss and its exact gradient at given
/// parameters. Training uses network batches; tests use closed-form
/// quadratic objectives.
pub trait Objective {
    fn loss(&self, params: &ParamVector) -> Result<f64>;
    fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)>;
}

/// Mean BCE of one batch as an [`Objective`].
pub struct BatchObjective<'a> {
    pub net: &'a Network,
    pub batch: &'a [&'a Subject],
}

impl Objective for BatchObjective<'_> {
    fn loss(&self, params: &ParamVector) -> Result<f64> {
        self.net.batch_loss(params, self.batch)
    }

    fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        self.net.loss_and_grad(params, self.batch)
    }
}

/// One virtual step: params - step * g.
pub fn inner_update(params: &ParamVector, g: &ParamVector, step: f64) -> Result<ParamVector> {
    if params.layout_id != g.layout_id || params.len() != g.len() {
        return Err(EngineError::Shape(
            "inner update: gradient does not match parameter layout".into(),
        ));
    }
    let mut out = params.clone();
    out.add_scaled(g, -step);
    Ok(out)
}

/// Step-size and optimizer settings for one meta-update.
#[derive(Debug, Clone, Copy)]
pub struct MetaStepConfig {
    pub gamma: f64,
    pub beta: f64,
    pub meta_lr: f64,
    pub adam: AdamParams,
}

impl Default for MetaStepConfig {
    fn default() -> Self {
        MetaStepConfig {
            gamma: 5e-4,
            beta: 5e-4,
            meta_lr: 5e-4,
            adam: AdamParams::default(),
        }
    }
}

/// First-order meta-gradient plus the at-theta pieces callers log.
#[derive(Debug, Clone)]
pub struct DualMetaGrad {
    pub grad: ParamVector,
    pub loss_d: f64,
    pub loss_ctr: f64,
    pub g_d: ParamVector,
    pub g_ctr: ParamVector,
    pub loss_p_shifted: f64,
    pub loss_cte_shifted: f64,
}

/// Gradient of the dual meta-objectives. Summation order is fixed
/// (G_D, then the shifted G_P, then G_Ctr, then the shifted G_Cte) so the
/// result is bit-reproducible.
pub fn dual_meta_grad(
    params: &ParamVector,
    d: &dyn Objective,
    p: &dyn Objective,
    ctr: &dyn Objective,
    cte: &dyn Objective,
    gamma: f64,
    beta: f64,
) -> Result<DualMetaGrad> {
    let (loss_d, g_d) = d.loss_and_grad(params)?;
    let theta_d = inner_update(params, &g_d, gamma)?;
    let (loss_p_shifted, g_p_shifted) = p.loss_and_grad(&theta_d)?;
    let (loss_ctr, g_ctr) = ctr.loss_and_grad(params)?;
    let theta_ctr = inner_update(params, &g_ctr, beta)?;
    let (loss_cte_shifted, g_cte_shifted) = cte.loss_and_grad(&theta_ctr)?;
    let mut grad = g_d.clone();
    grad.add_scaled(&g_p_shifted, 1.0);
    grad.add_scaled(&g_ctr, 1.0);
    grad.add_scaled(&g_cte_shifted, 1.0);
    Ok(DualMetaGrad {
        grad,
        loss_d,
        loss_ctr,
        g_d,
        g_ctr,
        loss_p_shifted,
        loss_cte_shifted,
    })
}

/// Hessian-vector product H_obj * v by central differences along v.
/// A zero vector maps to the zero vector.
pub fn hvp(
    obj: &dyn Objective,
    params: &ParamVector,
    v: &ParamVector,
    epsilon: f64,
) -> Result<ParamVector> {
    let norm = v.norm();
    if norm == 0.0 {
        return Ok(v.zeros_like());
    }
    let mut plus = params.clone();
    plus.add_scaled(v, epsilon / norm);
    let mut minus = params.clone();
    minus.add_scaled(v, -(epsilon / norm));
    let (_, g_plus) = obj.loss_and_grad(&plus)?;
    let (_, g_minus) = obj.loss_and_grad(&minus)?;
    let scale = norm / (2.0 * epsilon);
    let mut out = g_plus;
    out.add_scaled(&g_minus, -1.0);
    for val in out.values.iter_mut() {
        *val *= scale;
    }
    if !out.all_finite() {
        return Err(EngineError::Numeric(
            "hessian-vector product is not finite".into(),
        ));
    }
    Ok(out)
}

/// Second-order gradient of the aligned objective plus the at-theta pieces.
#[derive(Debug, Clone)]
pub struct DirectSgaGrad {
    pub grad: ParamVector,
    pub loss_d: f64,
    pub loss_p: f64,
    pub loss_ctr: f64,
    pub loss_cte: f64,
    pub g_d: ParamVector,
    pub g_p: ParamVector,
    pub g_ctr: ParamVector,
    pub g_cte: ParamVector,
}

/// grad(sga) = (G_D + G_P + G_Ctr + G_Cte)
///             - gamma * (H_D G_P + H_P G_D) - beta * (H_Ctr G_Cte + H_Cte G_Ctr)
pub fn direct_sga_grad(
    params: &ParamVector,
    d: &dyn Objective,
    p: &dyn Objective,
    ctr: &dyn Objective,
    cte: &dyn Objective,
    gamma: f64,
    beta: f64,
    epsilon: f64,
) -> Result<DirectSgaGrad> {
    let (loss_d, g_d) = d.loss_and_grad(params)?;
    let (loss_p, g_p) = p.loss_and_grad(params)?;
    let (loss_ctr, g_ctr) = ctr.loss_and_grad(params)?;
    let (loss_cte, g_cte) = cte.loss_and_grad(params)?;
    let mut grad = g_d.clone();
    grad.add_scaled(&g_p, 1.0);
    grad.add_scaled(&g_ctr, 1.0);
    grad.add_scaled(&g_cte, 1.0);
    if gamma != 0.0 {
        grad.add_scaled(&hvp(d, params, &g_p, epsilon)?, -gamma);
        grad.add_scaled(&hvp(p, params, &g_d, epsilon)?, -gamma);
    }
    if beta != 0.0 {
        grad.add_scaled(&hvp(ctr, params, &g_cte, epsilon)?, -beta);
        grad.add_scaled(&hvp(cte, params, &g_ctr, epsilon)?, -beta);
    }
    Ok(DirectSgaGrad {
        grad,
        loss_d,
        loss_p,
        loss_ctr,
        loss_cte,
        g_d,
        g_p,
        g_ctr,
        g_cte,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam. State is per-round: every round starts a fresh
/// optimizer, which is what makes round-boundary resume exact.
pub struct Adam {
    p: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, p: AdamParams) -> Adam {
        Adam {
            p,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut ParamVector, grad: &ParamVector, lr: f64) {
        debug_assert_eq!(theta.len(), grad.len());
        self.t += 1;
        let b1 = self.p.beta1;
        let b2 = self.p.beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..theta.values.len() {
            let g = grad.values[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta.values[i] -= lr * m_hat / (v_hat.sqrt() + self.p.epsilon);
        }
    }
}

/// Which gradient estimator drives the round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientRoute {
    /// Incoming-site gradient only (finetuning; also every method's round 1).
    Plain,
    /// First-order dual-meta gradient.
    DualMeta,
    /// Second-order gradient with Hessian-vector products.
    DirectSga,
}

#[derive(Debug, Clone, Copy)]
pub struct RoundConfig {
    pub route: GradientRoute,
    pub step: MetaStepConfig,
    pub batch_size: usize,
    pub iterations: usize,
    /// Log per-iteration losses and gradient alignment of all four batches
    /// at theta. For buffered routes the d/ctr pieces are free; p/cte cost
    /// two extra gradient evaluations per iteration. With `Plain` this also
    /// draws (and therefore reads) buffer batches purely for diagnostics.
    pub log_alignment: bool,
    pub hvp_epsilon: f64,
}

/// Per-iteration training log row. Buffer-dependent fields are `None` in
/// degenerate rounds (empty buffer) and for unlogged plain rounds.
#[derive(Debug, Clone)]
pub struct IterationLog {
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

pub struct RoundOutcome {
    pub params: ParamVector,
    pub log: Vec<IterationLog>,
}

/// Run one round of meta-optimization: sample batches, form the configured
/// gradient, take an Adam step, `iterations` times. `on_read` observes every
/// subject drawn into a batch (the harness hangs access tracing on it).
///
/// An empty `buffer` falls back to plain incoming-site training regardless
/// of the route (round 1 has nothing to align against).
pub fn meta_optimize_round(
    net: &Network,
    start: &ParamVector,
    incoming: &[&Subject],
    buffer: &[&Subject],
    cfg: &RoundConfig,
    rng: &mut ChaCha8Rng,
    mut on_read: impl FnMut(&Subject),
) -> Result<RoundOutcome> {
    if cfg.iterations == 0 {
        return Err(EngineError::Config("iterations must be at least 1".into()));
    }
    if incoming.is_empty() {
        return Err(EngineError::Config("incoming site pool is empty".into()));
    }
    if !start.all_finite() {
        return Err(EngineError::Numeric("starting parameters are not finite".into()));
    }
    let mut theta = start.clone();
    let mut adam = Adam::new(theta.len(), cfg.step.adam);
    let mut log = Vec::with_capacity(cfg.iterations);
    // The plain route only touches the buffer when alignment logging
    // explicitly asks for diagnostic draws.
    let buffered = !buffer.is_empty()
        && (cfg.route != GradientRoute::Plain || cfg.log_alignment);

    for iteration in 0..cfg.iterations {
        let t0 = Instant::now();
        let row = if !buffered {
            let batch = sample_batch(incoming, cfg.batch_size, rng)?;
            for s in &batch {
                on_read(s);
            }
            let (loss_d, g_d) = net.loss_and_grad(&theta, &batch)?;
            let grad_norm = g_d.norm();
            adam.step(&mut theta, &g_d, cfg.step.meta_lr);
            IterationLog {
                iteration,
                loss_d,
                loss_p: None,
                loss_ctr: None,
                loss_cte: None,
                dp_inner: None,
                ctr_cte_inner: None,
                dp_cosine: None,
                ctr_cte_cosine: None,
                degenerate: false,
                grad_norm,
                step_ms: 0.0,
            }
        } else {
            let quad = MinibatchQuad::sample(incoming, buffer, cfg.batch_size, rng)?;
            for s in quad.d.iter().chain(quad.p.iter()) {
                on_read(s);
            }
            let (grad, losses, report) = quad_gradient(net, &theta, &quad, cfg)?;
            let grad_norm = grad.norm();
            adam.step(&mut theta, &grad, cfg.step.meta_lr);
            IterationLog {
                iteration,
                loss_d: losses.0,
                loss_p: losses.1,
                loss_ctr: losses.2,
                loss_cte: losses.3,
                dp_inner: report.map(|r| r.dp_inner),
                ctr_cte_inner: report.map(|r| r.ctr_cte_inner),
                dp_cosine: report.map(|r| r.dp_cosine),
                ctr_cte_cosine: report.map(|r| r.ctr_cte_cosine),
                degenerate: report.map(|r| r.degenerate).unwrap_or(false),
                grad_norm,
                step_ms: 0.0,
            }
        };
        if !theta.all_finite() {
            return Err(EngineError::Numeric(format!(
                "parameters became non-finite at iteration {iteration}"
            )));
        }
        let mut row = row;
        row.step_ms = t0.elapsed().as_secs_f64() * 1e3;
        log.push(row);
    }
    Ok(RoundOutcome { params: theta, log })
}

type QuadLosses = (f64, Option<f64>, Option<f64>, Option<f64>);

/// The update gradient for one buffered iteration plus optional diagnostics.
fn quad_gradient(
    net: &Network,
    theta: &ParamVector,
    quad: &MinibatchQuad,
    cfg: &RoundConfig,
) -> Result<(ParamVector, QuadLosses, Option<crate::objectives::AlignmentReport>)> {
    match cfg.route {
        GradientRoute::Plain => {
            // diagnostics-only buffer use: update with G_D alone
            let q = four_gradients(net, theta, quad)?;
            let report = alignment_report(&q.g_d, &q.g_p, &q.g_ctr, &q.g_cte);
            Ok((
                q.g_d.clone(),
                (q.loss_d, Some(q.loss_p), Some(q.loss_ctr), Some(q.loss_cte)),
                Some(report),
            ))
        }
        GradientRoute::DualMeta => {
            let d = BatchObjective { net, batch: &quad.d };
            let p = BatchObjective { net, batch: &quad.p };
            let ctr = BatchObjective { net, batch: &quad.ctr };
            let cte = BatchObjective { net, batch: &quad.cte };
            let dm = dual_meta_grad(theta, &d, &p, &ctr, &cte, cfg.step.gamma, cfg.step.beta)?;
            if cfg.log_alignment {
                let (loss_p, g_p) = p.loss_and_grad(theta)?;
                let (loss_cte, g_cte) = cte.loss_and_grad(theta)?;
                let report = alignment_report(&dm.g_d, &g_p, &dm.g_ctr, &g_cte);
                Ok((
                    dm.grad,
                    (dm.loss_d, Some(loss_p), Some(dm.loss_ctr), Some(loss_cte)),
                    Some(report),
                ))
            } else {
                Ok((dm.grad, (dm.loss_d, None, Some(dm.loss_ctr), None), None))
            }
        }
        GradientRoute::DirectSga => {
            let d = BatchObjective { net, batch: &quad.d };
            let p = BatchObjective { net, batch: &quad.p };
            let ctr = BatchObjective { net, batch: &quad.ctr };
            let cte = BatchObjective { net, batch: &quad.cte };
            let ds = direct_sga_grad(
                theta,
                &d,
                &p,
                &ctr,
                &cte,
                cfg.step.gamma,
                cfg.step.beta,
                cfg.hvp_epsilon,
            )?;
            let report = alignment_report(&ds.g_d, &ds.g_p, &ds.g_ctr, &ds.g_cte);
            Ok((
                ds.grad,
                (ds.loss_d, Some(ds.loss_p), Some(ds.loss_ctr), Some(ds.loss_cte)),
                Some(report),
            ))
        }
    }
}
