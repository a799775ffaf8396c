//! Fully-connected segmentation network with exact reverse-mode gradients.
//!
//! The network maps a flattened intensity grid through an encoder to a
//! narrow bottleneck and back out to one logit per pixel:
//!
//! ```text
//! h*w --(relu)--> encoder --(relu)--> bottleneck --(relu)--> decoder --> h*w logits
//! ```
//!
//! Logits are clamped to [-LOGIT_CLAMP, +LOGIT_CLAMP] before the sigmoid so
//! the per-pixel binary cross-entropy never sees a 0 or 1 probability. All
//! arithmetic is f64; parameters are quantized to f32 at round boundaries so
//! the checkpoint format (f32 little-endian) round-trips losslessly.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{EngineError, Result};

/// Logits are clamped to this magnitude before the sigmoid. sigmoid(30) is
/// within 1e-13 of 1.0, so the clamp does not affect healthy training while
/// keeping ln(p) and ln(1-p) finite.
pub const LOGIT_CLAMP: f64 = 30.0;

const CHECKPOINT_MAGIC: &[u8; 8] = b"SSCKPT01";

/// One generated case: an intensity image and its foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub site_id: u32,
    pub subject_id: u32,
    pub image: Array2<f64>,
    pub mask: Array2<u8>,
}

impl Subject {
    /// Size of this subject in the on-disk encoding (f32 image + u8 mask).
    /// Access tracing counts previous-site reads in these units.
    pub fn payload_bytes(&self) -> u64 {
        let n = self.image.len() as u64;
        n * 4 + n
    }
}

/// Bottleneck activation vector used for exemplar scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Flat parameter vector tagged with the layout it was created for, so that
/// vectors from different architectures cannot be mixed up silently.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub layout_id: u64,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            layout_id: self.layout_id,
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.layout_id, other.layout_id);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// self += c * other
    pub fn add_scaled(&mut self, other: &ParamVector, c: f64) {
        debug_assert_eq!(self.layout_id, other.layout_id);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Round every entry to the nearest f32. Applied at round boundaries so
    /// that checkpoints (stored as f32) reproduce the in-memory state exactly.
    pub fn quantize_f32(&mut self) {
        for v in self.values.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Architecture description. `encoder`/`bottleneck`/`decoder` are hidden
/// widths; input and output are both `h * w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Network {
    pub h: usize,
    pub w: usize,
    pub encoder: usize,
    pub bottleneck: usize,
    pub decoder: usize,
}

impl Default for Network {
    fn default() -> Self {
        Network {
            h: 16,
            w: 16,
            encoder: 64,
            bottleneck: 16,
            decoder: 64,
        }
    }
}

/// Offsets of each weight matrix / bias vector inside the flat vector.
/// Order: W1, b1, W2, b2, W3, b3, W4, b4 with row-major (out x in) matrices.
struct Layout {
    dims: [(usize, usize); 4],
    offsets: [usize; 8],
    total: usize,
    id: u64,
}

impl Network {
    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    fn layout(&self) -> Layout {
        let io = self.pixels();
        let dims = [
            (self.encoder, io),
            (self.bottleneck, self.encoder),
            (self.decoder, self.bottleneck),
            (io, self.decoder),
        ];
        let mut offsets = [0usize; 8];
        let mut at = 0usize;
        for (l, (out, inp)) in dims.iter().enumerate() {
            offsets[2 * l] = at;
            at += out * inp;
            offsets[2 * l + 1] = at;
            at += out;
        }
        // FNV-1a over the dimension list: a stable identifier for "which
        // architecture does this flat vector belong to".
        let mut id: u64 = 0xcbf2_9ce4_8422_2325;
        for d in [self.h, self.w, self.encoder, self.bottleneck, self.decoder] {
            for byte in (d as u64).to_le_bytes() {
                id ^= byte as u64;
                id = id.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        Layout {
            dims,
            offsets,
            total: at,
            id,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    pub fn layout_id(&self) -> u64 {
        self.layout().id
    }

    /// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer,
    /// quantized to f32 so the initial state survives a checkpoint exactly.
    pub fn init(&self, rng: &mut impl rand::Rng) -> ParamVector {
        let layout = self.layout();
        let mut values = vec![0.0f64; layout.total];
        for (l, (out, inp)) in layout.dims.iter().enumerate() {
            let bound = 1.0 / (*inp as f64).sqrt();
            let w0 = layout.offsets[2 * l];
            for v in values[w0..w0 + out * inp].iter_mut() {
                *v = rng.random_range(-bound..=bound);
            }
            // biases start at zero
        }
        let mut params = ParamVector {
            layout_id: layout.id,
            values,
        };
        params.quantize_f32();
        params
    }

    fn check_params(&self, layout: &Layout, params: &ParamVector) -> Result<()> {
        if params.layout_id != layout.id || params.values.len() != layout.total {
            return Err(EngineError::Shape(format!(
                "parameter vector (layout {:#x}, len {}) does not match network layout {:#x} (len {})",
                params.layout_id,
                params.values.len(),
                layout.id,
                layout.total
            )));
        }
        Ok(())
    }

    fn check_subject(&self, s: &Subject) -> Result<()> {
        if s.image.dim() != (self.h, self.w) || s.mask.dim() != (self.h, self.w) {
            return Err(EngineError::Shape(format!(
                "subject {}/{} is {:?}, network expects ({}, {})",
                s.site_id,
                s.subject_id,
                s.image.dim(),
                self.h,
                self.w
            )));
        }
        Ok(())
    }

    /// Per-pixel foreground probabilities for each subject in the batch.
    pub fn forward(&self, params: &ParamVector, batch: &[&Subject]) -> Result<Vec<Array2<f64>>> {
        let layout = self.layout();
        self.check_params(&layout, params)?;
        let mut scratch = Scratch::new(self);
        let mut out = Vec::with_capacity(batch.len());
        for s in batch {
            self.check_subject(s)?;
            scratch.forward(self, &layout, &params.values, s);
            let probs = scratch
                .p
                .iter()
                .map(|&z| sigmoid(z))
                .collect::<Vec<f64>>();
            out.push(Array2::from_shape_vec((self.h, self.w), probs).expect("h*w probabilities"));
        }
        Ok(out)
    }

    /// Mean per-pixel binary cross-entropy over the batch (forward only).
    pub fn batch_loss(&self, params: &ParamVector, batch: &[&Subject]) -> Result<f64> {
        if batch.is_empty() {
            return Err(EngineError::Config("empty batch".into()));
        }
        let layout = self.layout();
        self.check_params(&layout, params)?;
        let mut scratch = Scratch::new(self);
        let mut total = 0.0;
        for s in batch {
            self.check_subject(s)?;
            scratch.forward(self, &layout, &params.values, s);
            total += scratch.subject_loss(s);
        }
        let loss = total / batch.len() as f64;
        if !loss.is_finite() {
            return Err(EngineError::Numeric("batch loss is not finite".into()));
        }
        Ok(loss)
    }

    /// Loss plus its exact gradient.
    pub fn loss_and_grad(
        &self,
        params: &ParamVector,
        batch: &[&Subject],
    ) -> Result<(f64, ParamVector)> {
        if batch.is_empty() {
            return Err(EngineError::Config("empty batch".into()));
        }
        let layout = self.layout();
        self.check_params(&layout, params)?;
        let mut grad = vec![0.0f64; layout.total];
        let mut scratch = Scratch::new(self);
        let inv_batch = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for s in batch {
            self.check_subject(s)?;
            scratch.forward(self, &layout, &params.values, s);
            total += scratch.subject_loss(s);
            scratch.backward(self, &layout, &params.values, s, inv_batch, &mut grad);
        }
        let loss = total * inv_batch;
        let grad = ParamVector {
            layout_id: layout.id,
            values: grad,
        };
        if !loss.is_finite() || !grad.all_finite() {
            return Err(EngineError::Numeric(
                "loss or gradient is not finite".into(),
            ));
        }
        Ok((loss, grad))
    }

    /// Bottleneck activation for one subject; the replay buffer scores
    /// exemplars in this space.
    pub fn bottleneck_features(&self, params: &ParamVector, s: &Subject) -> Result<FeatureVector> {
        let layout = self.layout();
        self.check_params(&layout, params)?;
        self.check_subject(s)?;
        let mut scratch = Scratch::new(self);
        scratch.forward_to_bottleneck(self, &layout, &params.values, s);
        Ok(FeatureVector {
            values: scratch.a2.clone(),
        })
    }
}

/// Reused activation buffers so the per-iteration loop does not allocate.
struct Scratch {
    x: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    z3: Vec<f64>,
    a3: Vec<f64>,
    /// raw (unclamped) logits
    z4: Vec<f64>,
    /// clamped logits
    p: Vec<f64>,
    d4: Vec<f64>,
    d3: Vec<f64>,
    d2: Vec<f64>,
    d1: Vec<f64>,
}

impl Scratch {
    fn new(net: &Network) -> Scratch {
        let io = net.pixels();
        Scratch {
            x: vec![0.0; io],
            z1: vec![0.0; net.encoder],
            a1: vec![0.0; net.encoder],
            z2: vec![0.0; net.bottleneck],
            a2: vec![0.0; net.bottleneck],
            z3: vec![0.0; net.decoder],
            a3: vec![0.0; net.decoder],
            z4: vec![0.0; io],
            p: vec![0.0; io],
            d4: vec![0.0; io],
            d3: vec![0.0; net.decoder],
            d2: vec![0.0; net.bottleneck],
            d1: vec![0.0; net.encoder],
        }
    }

    fn load_input(&mut self, s: &Subject) {
        let flat = s.image.as_slice().expect("row-major image");
        self.x.copy_from_slice(flat);
    }

    fn forward_to_bottleneck(&mut self, net: &Network, layout: &Layout, p: &[f64], s: &Subject) {
        self.load_input(s);
        affine(layout, p, 0, &self.x, &mut self.z1);
        relu(&self.z1, &mut self.a1);
        affine(layout, p, 1, &self.a1, &mut self.z2);
        relu(&self.z2, &mut self.a2);
        let _ = net;
    }

    fn forward(&mut self, net: &Network, layout: &Layout, p: &[f64], s: &Subject) {
        self.forward_to_bottleneck(net, layout, p, s);
        affine(layout, p, 2, &self.a2, &mut self.z3);
        relu(&self.z3, &mut self.a3);
        affine(layout, p, 3, &self.a3, &mut self.z4);
        for (out, &z) in self.p.iter_mut().zip(self.z4.iter()) {
            *out = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        }
    }

    /// Mean BCE over pixels; `forward` must have run for this subject.
    fn subject_loss(&self, s: &Subject) -> f64 {
        let mask = s.mask.as_slice().expect("row-major mask");
        let mut sum = 0.0;
        for (&z, &y) in self.p.iter().zip(mask.iter()) {
            let p = sigmoid(z);
            sum += if y != 0 { -p.ln() } else { -(1.0 - p).ln() };
        }
        sum / self.p.len() as f64
    }

    /// Accumulate d(batch loss)/d(params) for this subject into `grad`.
    /// `inv_batch` is the 1/B factor of the batch mean.
    fn backward(
        &mut self,
        net: &Network,
        layout: &Layout,
        p: &[f64],
        s: &Subject,
        inv_batch: f64,
        grad: &mut [f64],
    ) {
        let mask = s.mask.as_slice().expect("row-major mask");
        let scale = inv_batch / self.p.len() as f64;
        // d(BCE)/d(logit) = p - y; zero where the clamp is active since the
        // clamped logit no longer moves with the parameters.
        for j in 0..self.p.len() {
            let prob = sigmoid(self.p[j]);
            let y = if mask[j] != 0 { 1.0 } else { 0.0 };
            let pass = if self.z4[j].abs() <= LOGIT_CLAMP { 1.0 } else { 0.0 };
            self.d4[j] = scale * (prob - y) * pass;
        }
        affine_backward(layout, p, 3, &self.a3, &self.d4, grad, &mut self.d3);
        relu_backward(&self.z3, &mut self.d3);
        affine_backward(layout, p, 2, &self.a2, &self.d3, grad, &mut self.d2);
        relu_backward(&self.z2, &mut self.d2);
        affine_backward(layout, p, 1, &self.a1, &self.d2, grad, &mut self.d1);
        relu_backward(&self.z1, &mut self.d1);
        affine_backward_input_only(layout, 0, &self.x, &self.d1, grad);
        let _ = net;
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn relu(z: &[f64], a: &mut [f64]) {
    for (out, &v) in a.iter_mut().zip(z.iter()) {
        *out = if v > 0.0 { v } else { 0.0 };
    }
}

fn relu_backward(z: &[f64], d: &mut [f64]) {
    for (dv, &v) in d.iter_mut().zip(z.iter()) {
        if v <= 0.0 {
            *dv = 0.0;
        }
    }
}

/// z = W_l * input + b_l
fn affine(layout: &Layout, p: &[f64], l: usize, input: &[f64], z: &mut [f64]) {
    let (out, inp) = layout.dims[l];
    let w0 = layout.offsets[2 * l];
    let b0 = layout.offsets[2 * l + 1];
    for o in 0..out {
        let row = &p[w0 + o * inp..w0 + (o + 1) * inp];
        let mut acc = p[b0 + o];
        for (wi, xi) in row.iter().zip(input.iter()) {
            acc += wi * xi;
        }
        z[o] = acc;
    }
}

/// Given d(loss)/dz for layer `l`, accumulate dW and db into `grad` and
/// compute d(loss)/d(input) into `d_input`.
fn affine_backward(
    layout: &Layout,
    p: &[f64],
    l: usize,
    input: &[f64],
    dz: &[f64],
    grad: &mut [f64],
    d_input: &mut [f64],
) {
    let (out, inp) = layout.dims[l];
    let w0 = layout.offsets[2 * l];
    let b0 = layout.offsets[2 * l + 1];
    d_input.iter_mut().for_each(|v| *v = 0.0);
    for o in 0..out {
        let d = dz[o];
        if d == 0.0 {
            continue;
        }
        let row = &p[w0 + o * inp..w0 + (o + 1) * inp];
        let grow = &mut grad[w0 + o * inp..w0 + (o + 1) * inp];
        for i in 0..inp {
            grow[i] += d * input[i];
            d_input[i] += d * row[i];
        }
        grad[b0 + o] += d;
    }
}

/// Same as `affine_backward` for the first layer, where d(input) is unused.
fn affine_backward_input_only(
    layout: &Layout,
    l: usize,
    input: &[f64],
    dz: &[f64],
    grad: &mut [f64],
) {
    let (out, inp) = layout.dims[l];
    let w0 = layout.offsets[2 * l];
    let b0 = layout.offsets[2 * l + 1];
    for o in 0..out {
        let d = dz[o];
        if d == 0.0 {
            continue;
        }
        let grow = &mut grad[w0 + o * inp..w0 + (o + 1) * inp];
        for i in 0..inp {
            grow[i] += d * input[i];
        }
        grad[b0 + o] += d;
    }
}

/// Write `params` as magic + layout id + count (u64 LE) + f32 LE values.
/// Call sites are expected to pass f32-quantized vectors; round-tripping a
/// non-quantized vector would silently lose precision, so that is an error.
pub fn save_checkpoint(path: &Path, params: &ParamVector) -> Result<()> {
    for v in &params.values {
        if (*v as f32 as f64) != *v {
            return Err(EngineError::Integrity(
                "refusing to checkpoint non-f32-quantized parameters".into(),
            ));
        }
    }
    let mut buf = Vec::with_capacity(8 + 8 + 8 + params.values.len() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&params.layout_id.to_le_bytes());
    buf.extend_from_slice(&(params.values.len() as u64).to_le_bytes());
    for v in &params.values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, net: &Network) -> Result<ParamVector> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(EngineError::Integrity(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let layout_id = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let layout = net.layout();
    if layout_id != layout.id || count != layout.total {
        return Err(EngineError::Integrity(format!(
            "checkpoint {} has layout {:#x} / {} params, expected {:#x} / {}",
            path.display(),
            layout_id,
            count,
            layout.id,
            layout.total
        )));
    }
    if bytes.len() != 24 + count * 4 {
        return Err(EngineError::Integrity(format!(
            "checkpoint {} is truncated",
            path.display()
        )));
    }
    let values = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(ParamVector {
        layout_id: layout.id,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_subject(net: &Network, seed: u64) -> Subject {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Array2::from_shape_fn((net.h, net.w), |_| rng.random_range(0.0..1.0));
        let mask = Array2::from_shape_fn((net.h, net.w), |_| u8::from(rng.random_bool(0.4)));
        Subject {
            site_id: 0,
            subject_id: seed as u32,
            image,
            mask,
        }
    }

    fn small_net() -> Network {
        Network {
            h: 4,
            w: 4,
            encoder: 8,
            bottleneck: 4,
            decoder: 8,
        }
    }

    #[test]
    fn zero_params_give_half_probability_everywhere() {
        let net = small_net();
        let params = ParamVector {
            layout_id: net.layout_id(),
            values: vec![0.0; net.param_count()],
        };
        let s = toy_subject(&net, 1);
        let probs = net.forward(&params, &[&s]).unwrap();
        assert!(probs[0].iter().all(|&p| p == 0.5));
    }

    #[test]
    fn probabilities_stay_strictly_inside_unit_interval() {
        let net = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = net.init(&mut rng);
        // blow the weights up so raw logits would saturate without the clamp
        for v in params.values.iter_mut() {
            *v *= 1.0e6;
        }
        let s = toy_subject(&net, 2);
        let probs = net.forward(&params, &[&s]).unwrap();
        assert!(probs[0].iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(net.batch_loss(&params, &[&s]).unwrap().is_finite());
    }

    #[test]
    fn perfect_logits_give_vanishing_loss_and_gradient() {
        let net = small_net();
        let s = toy_subject(&net, 3);
        // all weights zero, decoder bias +/-20 matching the mask, so the
        // output is sigmoid(+/-20) at exactly the right pixels
        let layout = net.layout();
        let mut values = vec![0.0; layout.total];
        let b4 = layout.offsets[7];
        let mask = s.mask.as_slice().unwrap();
        for (j, &y) in mask.iter().enumerate() {
            values[b4 + j] = if y != 0 { 20.0 } else { -20.0 };
        }
        let params = ParamVector {
            layout_id: layout.id,
            values,
        };
        let (loss, grad) = net.loss_and_grad(&params, &[&s]).unwrap();
        assert!(loss < 1e-8, "loss {loss} should be ~sigmoid(-20)");
        assert!(grad.norm() < 1e-6, "gradient norm {} should vanish", grad.norm());
    }

    #[test]
    fn forward_is_deterministic() {
        let net = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = net.init(&mut rng);
        let s = toy_subject(&net, 4);
        let a = net.forward(&params, &[&s]).unwrap();
        let b = net.forward(&params, &[&s]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicated_batch_preserves_loss_and_gradient() {
        let net = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = net.init(&mut rng);
        let s1 = toy_subject(&net, 5);
        let s2 = toy_subject(&net, 6);
        let (l1, g1) = net.loss_and_grad(&params, &[&s1, &s2]).unwrap();
        let (l2, g2) = net
            .loss_and_grad(&params, &[&s1, &s2, &s1, &s2])
            .unwrap();
        assert!((l1 - l2).abs() <= 1e-12 * l1.abs().max(1.0));
        for (a, b) in g1.values.iter().zip(&g2.values) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn batch_order_does_not_change_the_loss() {
        let net = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = net.init(&mut rng);
        let subjects: Vec<Subject> = (0..5).map(|i| toy_subject(&net, 20 + i)).collect();
        let fwd: Vec<&Subject> = subjects.iter().collect();
        let rev: Vec<&Subject> = subjects.iter().rev().collect();
        let a = net.batch_loss(&params, &fwd).unwrap();
        let b = net.batch_loss(&params, &rev).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let net = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let params = net.init(&mut rng);
        let subjects: Vec<Subject> = (0..3).map(|i| toy_subject(&net, 30 + i)).collect();
        let batch: Vec<&Subject> = subjects.iter().collect();
        let (_, grad) = net.loss_and_grad(&params, &batch).unwrap();
        let h = 1e-4;
        for k in 0..30 {
            let i = (k * 37) % params.len();
            let mut plus = params.clone();
            plus.values[i] += h;
            let mut minus = params.clone();
            minus.values[i] -= h;
            let fd = (net.batch_loss(&plus, &batch).unwrap()
                - net.batch_loss(&minus, &batch).unwrap())
                / (2.0 * h);
            let denom = grad.values[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                (grad.values[i] - fd).abs() / denom < 1e-4,
                "coordinate {i}: analytic {} vs fd {fd}",
                grad.values[i]
            );
        }
    }

    #[test]
    fn bottleneck_features_have_declared_width() {
        let net = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = net.init(&mut rng);
        let s = toy_subject(&net, 40);
        let f = net.bottleneck_features(&params, &s).unwrap();
        assert_eq!(f.values.len(), net.bottleneck);
        let again = net.bottleneck_features(&params, &s).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn zero_params_give_zero_feature_vector() {
        // relu(0 * x + 0) is the zero vector; downstream scoring rejects it
        let net = small_net();
        let params = ParamVector {
            layout_id: net.layout_id(),
            values: vec![0.0; net.param_count()],
        };
        let f = net
            .bottleneck_features(&params, &toy_subject(&net, 41))
            .unwrap();
        assert!(f.values.iter().all(|&v| v == 0.0));
        assert_eq!(f.norm(), 0.0);
    }

    #[test]
    fn init_respects_fan_in_bounds_and_seed() {
        let net = Network::default();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let a = net.init(&mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let b = net.init(&mut rng);
        assert_eq!(a, b, "same seed must give identical init");
        assert_eq!(a.len(), 35216);
        let bound = 1.0 / 16.0; // first layer fan_in = 256
        assert!(a.values[..64 * 256].iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = small_net();
        let other = Network::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = other.init(&mut rng);
        let s = toy_subject(&net, 50);
        let err = net.batch_loss(&params, &[&s]).unwrap_err();
        assert!(matches!(err, EngineError::Shape(_)));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let net = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let params = net.init(&mut rng);
        assert!(matches!(
            net.batch_loss(&params, &[]),
            Err(EngineError::Config(_))
        ));
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let net = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let params = net.init(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round_1.ckpt");
        save_checkpoint(&path, &params).unwrap();
        let loaded = load_checkpoint(&path, &net).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn corrupted_checkpoint_is_an_integrity_error() {
        let net = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let params = net.init(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round_1.ckpt");
        save_checkpoint(&path, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path, &net),
            Err(EngineError::Integrity(_))
        ));
        // wrong architecture is rejected too
        std::fs::write(&path, {
            bytes[0] ^= 0xff;
            &bytes
        })
        .unwrap();
        assert!(matches!(
            load_checkpoint(&path, &Network::default()),
            Err(EngineError::Integrity(_))
        ));
    }

    #[test]
    fn unquantized_params_cannot_be_checkpointed() {
        let net = small_net();
        let mut params = ParamVector {
            layout_id: net.layout_id(),
            values: vec![0.1f64 + 1e-12; net.param_count()],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        assert!(matches!(
            save_checkpoint(&path, &params),
            Err(EngineError::Integrity(_))
        ));
        params.quantize_f32();
        save_checkpoint(&path, &params).unwrap();
    }
}
