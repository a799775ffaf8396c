//! Joint-minimization and gradient-alignment objectives over minibatch quads.
//!
//! Each training iteration draws four batches: `d` from the incoming site,
//! `p` from the replay buffer, and `ctr`/`cte` as a fresh random split of
//! their union. The joint objectives are plain sums (L_D + L_P and
//! L_Ctr + L_Cte); the aligned objective additionally rewards agreement
//! between the gradient pairs:
//!
//! ```text
//! sga = (L_D + L_P) + (L_Ctr + L_Cte) - gamma * (G_D . G_P) - beta * (G_Ctr . G_Cte)
//! ```
//!
//! `G_D . G_P` orients learning so the incoming site's step also descends on
//! the buffer sites (memorizability); `G_Ctr . G_Cte` aligns two arbitrary
//! halves of the pooled batch, rewarding steps that generalize across any
//! site composition (generalizability).

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{EngineError, Result};
use crate::model::{Network, ParamVector, Subject};

/// The four batches of one training iteration. `ctr`/`cte` partition the
/// pooled `d` and `p` draws; a fresh split is drawn every iteration.
#[derive(Debug)]
pub struct MinibatchQuad<'a> {
    pub d: Vec<&'a Subject>,
    pub p: Vec<&'a Subject>,
    pub ctr: Vec<&'a Subject>,
    pub cte: Vec<&'a Subject>,
}

/// Draw `n` subjects uniformly: without replacement when the pool is large
/// enough, with replacement otherwise (small replay buffers).
pub fn sample_batch<'a>(
    pool: &[&'a Subject],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<&'a Subject>> {
    if pool.is_empty() || n == 0 {
        return Err(EngineError::Config(
            "batch sampling needs a non-empty pool and batch size".into(),
        ));
    }
    if pool.len() >= n {
        let picked = rand::seq::index::sample(rng, pool.len(), n);
        Ok(picked.iter().map(|i| pool[i]).collect())
    } else {
        Ok((0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect())
    }
}

impl<'a> MinibatchQuad<'a> {
    /// Sample one quad: `batch_size` from the incoming pool, `batch_size`
    /// from the buffer pool, and a uniformly random half/half (+-1) split of
    /// their union into `ctr`/`cte`.
    pub fn sample(
        incoming: &[&'a Subject],
        buffer: &[&'a Subject],
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<MinibatchQuad<'a>> {
        let d = sample_batch(incoming, batch_size, rng)?;
        let p = sample_batch(buffer, batch_size, rng)?;
        let mut pooled: Vec<&Subject> = d.iter().chain(p.iter()).copied().collect();
        pooled.shuffle(rng);
        let cut = pooled.len().div_ceil(2);
        let cte = pooled.split_off(cut);
        Ok(MinibatchQuad {
            d,
            p,
            ctr: pooled,
            cte,
        })
    }
}

/// Losses and gradients of all four batches at the same parameters.
#[derive(Debug, Clone)]
pub struct QuadGradients {
    pub loss_d: f64,
    pub loss_p: f64,
    pub loss_ctr: f64,
    pub loss_cte: f64,
    pub g_d: ParamVector,
    pub g_p: ParamVector,
    pub g_ctr: ParamVector,
    pub g_cte: ParamVector,
}

pub fn four_gradients(
    net: &Network,
    params: &ParamVector,
    quad: &MinibatchQuad,
) -> Result<QuadGradients> {
    let (loss_d, g_d) = net.loss_and_grad(params, &quad.d)?;
    let (loss_p, g_p) = net.loss_and_grad(params, &quad.p)?;
    let (loss_ctr, g_ctr) = net.loss_and_grad(params, &quad.ctr)?;
    let (loss_cte, g_cte) = net.loss_and_grad(params, &quad.cte)?;
    Ok(QuadGradients {
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

/// The two joint-minimization sums (L_D + L_P, L_Ctr + L_Cte), forward
/// passes only.
pub fn jm_losses(net: &Network, params: &ParamVector, quad: &MinibatchQuad) -> Result<(f64, f64)> {
    let incoming = net.batch_loss(params, &quad.d)? + net.batch_loss(params, &quad.p)?;
    let split = net.batch_loss(params, &quad.ctr)? + net.batch_loss(params, &quad.cte)?;
    Ok((incoming, split))
}

/// Value of the aligned objective. With gamma = beta = 0 this is exactly the
/// sum of the two joint objectives.
pub fn sga_value(
    net: &Network,
    params: &ParamVector,
    quad: &MinibatchQuad,
    gamma: f64,
    beta: f64,
) -> Result<f64> {
    let q = four_gradients(net, params, quad)?;
    Ok(sga_value_from(&q, gamma, beta))
}

pub fn sga_value_from(q: &QuadGradients, gamma: f64, beta: f64) -> f64 {
    q.loss_d + q.loss_p + q.loss_ctr + q.loss_cte
        - gamma * q.g_d.dot(&q.g_p)
        - beta * q.g_ctr.dot(&q.g_cte)
}

/// Inner products and cosines of the two gradient pairs. A zero-norm
/// gradient makes the cosine undefined; it is reported as 0 with the
/// `degenerate` flag set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentReport {
    pub dp_inner: f64,
    pub ctr_cte_inner: f64,
    pub dp_cosine: f64,
    pub ctr_cte_cosine: f64,
    pub degenerate: bool,
}

pub fn alignment_report(
    g_d: &ParamVector,
    g_p: &ParamVector,
    g_ctr: &ParamVector,
    g_cte: &ParamVector,
) -> AlignmentReport {
    let cosine = |a: &ParamVector, b: &ParamVector| -> (f64, bool) {
        let na = a.norm();
        let nb = b.norm();
        if na == 0.0 || nb == 0.0 {
            (0.0, true)
        } else {
            (a.dot(b) / (na * nb), false)
        }
    };
    let (dp_cosine, deg1) = cosine(g_d, g_p);
    let (ctr_cte_cosine, deg2) = cosine(g_ctr, g_cte);
    AlignmentReport {
        dp_inner: g_d.dot(g_p),
        ctr_cte_inner: g_ctr.dot(g_cte),
        dp_cosine,
        ctr_cte_cosine,
        degenerate: deg1 || deg2,
    }
}
