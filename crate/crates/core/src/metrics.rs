//! Segmentation scoring and the round-by-site accuracy matrix.
//!
//! Per subject: Dice overlap and average surface distance (ASD) between the
//! binarized prediction and the ground-truth mask. Per run: an
//! [`AccuracyMatrix`] with one entry per (round, site, split), from which the
//! stream-level aggregates are read:
//!
//! - `BM` (backward measure): mean accuracy over all sites seen so far,
//!   evaluated after the current round — how well the model kept everything;
//! - `BT` (backward transfer): mean change on previously-learned sites
//!   relative to when they were learned — forgetting shows up negative;
//! - `FM` (forward measure): accuracy on the held-out site after the final
//!   round — generalization to an unseen protocol;
//! - `FT` (forward transfer): FM minus a reference obtained by actually
//!   training on the held-out site — how much of that headroom was captured.
//!
//! Sign convention: Dice is higher-better and ASD lower-better, so BT's ASD
//! component is sign-inverted in reporting; degradation is negative for both
//! metrics. FT stays a plain difference for both.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{EngineError, Result};

pub const BINARIZATION_THRESHOLD: f64 = 0.5;

/// Probabilities >= 0.5 become foreground.
pub fn binarize(probs: &Array2<f64>) -> Array2<u8> {
    probs.mapv(|p| u8::from(p >= BINARIZATION_THRESHOLD))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceResult {
    pub value: f64,
    /// Set when both masks are empty; the value is 1 by convention then.
    pub both_empty: bool,
}

/// Dice overlap 2|A n B| / (|A| + |B|).
pub fn dice(pred: &Array2<u8>, truth: &Array2<u8>) -> Result<DiceResult> {
    if pred.dim() != truth.dim() {
        return Err(EngineError::Shape(format!(
            "dice: {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let mut inter = 0u64;
    let mut total = 0u64;
    for (&a, &b) in pred.iter().zip(truth.iter()) {
        let a = u64::from(a != 0);
        let b = u64::from(b != 0);
        inter += a & b;
        total += a + b;
    }
    if total == 0 {
        return Ok(DiceResult {
            value: 1.0,
            both_empty: true,
        });
    }
    Ok(DiceResult {
        value: 2.0 * inter as f64 / total as f64,
        both_empty: false,
    })
}

/// Foreground pixels with at least one background 4-neighbor; the grid edge
/// counts as background.
fn boundary(mask: &Array2<u8>) -> Vec<(i64, i64)> {
    let (h, w) = mask.dim();
    let bg = |y: i64, x: i64| -> bool {
        y < 0 || x < 0 || y >= h as i64 || x >= w as i64 || mask[(y as usize, x as usize)] == 0
    };
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if mask[(y as usize, x as usize)] != 0
                && (bg(y - 1, x) || bg(y + 1, x) || bg(y, x - 1) || bg(y, x + 1))
            {
                out.push((y, x));
            }
        }
    }
    out
}

fn mean_min_distance(from: &[(i64, i64)], to: &[(i64, i64)]) -> f64 {
    let mut sum = 0.0;
    for a in from {
        let mut best = f64::INFINITY;
        for b in to {
            let dy = (a.0 - b.0) as f64;
            let dx = (a.1 - b.1) as f64;
            let d2 = dy * dy + dx * dx;
            if d2 < best {
                best = d2;
            }
        }
        sum += best.sqrt();
    }
    sum / from.len() as f64
}

/// Average surface distance: the mean of the two directed average
/// boundary-to-boundary distances. `None` when either mask has no
/// foreground (the distance is undefined then).
pub fn asd(pred: &Array2<u8>, truth: &Array2<u8>) -> Result<Option<f64>> {
    if pred.dim() != truth.dim() {
        return Err(EngineError::Shape(format!(
            "asd: {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let bp = boundary(pred);
    let bt = boundary(truth);
    if bp.is_empty() || bt.is_empty() {
        return Ok(None);
    }
    Ok(Some(
        (mean_min_distance(&bp, &bt) + mean_min_distance(&bt, &bp)) / 2.0,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Val,
    Test,
}

/// One accuracy-matrix entry: site-level mean scores on one split after one
/// round. `asd` is `None` when every subject's ASD was undefined;
/// `asd_undefined` counts the skipped subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub round: usize,
    pub site_id: u32,
    pub split: Split,
    pub dsc: f64,
    pub asd: Option<f64>,
    pub asd_undefined: usize,
}

/// Per-subject scores rolled up into one matrix entry.
pub fn aggregate_scores(
    round: usize,
    site_id: u32,
    split: Split,
    scores: &[(f64, Option<f64>)],
) -> Result<MatrixEntry> {
    if scores.is_empty() {
        return Err(EngineError::Config("no subjects to aggregate".into()));
    }
    let dsc = scores.iter().map(|(d, _)| d).sum::<f64>() / scores.len() as f64;
    let defined: Vec<f64> = scores.iter().filter_map(|(_, a)| *a).collect();
    let asd_undefined = scores.len() - defined.len();
    let asd = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(MatrixEntry {
        round,
        site_id,
        split,
        dsc,
        asd,
        asd_undefined,
    })
}

/// Every (round, site, split) entry of a run, in evaluation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyMatrix {
    pub entries: Vec<MatrixEntry>,
}

impl AccuracyMatrix {
    pub fn push(&mut self, entry: MatrixEntry) {
        self.entries.push(entry);
    }

    pub fn get(&self, round: usize, site_id: u32, split: Split) -> Option<&MatrixEntry> {
        self.entries
            .iter()
            .find(|e| e.round == round && e.site_id == site_id && e.split == split)
    }

    /// Test-split entry that the aggregates are defined over; missing
    /// entries are an integrity failure of the run artifacts.
    pub fn require_test(&self, round: usize, site_id: u32) -> Result<&MatrixEntry> {
        self.get(round, site_id, Split::Test).ok_or_else(|| {
            EngineError::Integrity(format!(
                "accuracy matrix is missing (round {round}, site {site_id}, test)"
            ))
        })
    }

    pub fn last_round(&self) -> Option<usize> {
        self.entries.iter().map(|e| e.round).max()
    }

    /// CSV with one row per entry. f64 fields are written in shortest
    /// round-trip form, so write-then-read is bit-identical.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for e in &self.entries {
            w.serialize(e).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_csv(path: &Path) -> Result<AccuracyMatrix> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let entries = r
            .deserialize()
            .collect::<std::result::Result<Vec<MatrixEntry>, _>>()
            .map_err(csv_err)?;
        Ok(AccuracyMatrix { entries })
    }
}

fn csv_err(e: csv::Error) -> EngineError {
    EngineError::Integrity(format!("accuracy matrix csv: {e}"))
}

/// A Dice/ASD aggregate pair. `asd_skipped` counts entries (or entry pairs)
/// that had to be excluded because the ASD side was undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricPair {
    pub dsc: f64,
    pub asd: Option<f64>,
    pub asd_skipped: usize,
}

/// Mean test accuracy over the first `t` stream sites after round `t`.
pub fn backward_measure(m: &AccuracyMatrix, stream: &[u32], t: usize) -> Result<MetricPair> {
    if t == 0 || t > stream.len() {
        return Err(EngineError::Config(format!(
            "backward measure round {t} outside the {}-site stream",
            stream.len()
        )));
    }
    let entries: Vec<&MatrixEntry> = stream[..t]
        .iter()
        .map(|&s| m.require_test(t, s))
        .collect::<Result<_>>()?;
    let dsc = entries.iter().map(|e| e.dsc).sum::<f64>() / entries.len() as f64;
    let defined: Vec<f64> = entries.iter().filter_map(|e| e.asd).collect();
    Ok(MetricPair {
        dsc,
        asd: if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        },
        asd_skipped: entries.len() - defined.len(),
    })
}

/// Mean change on already-learned sites: (1/(t-1)) * sum_i (M[t,i] - M[i,i])
/// over i < t. The ASD side is sign-inverted so that degradation is negative
/// for both metrics.
pub fn backward_transfer(m: &AccuracyMatrix, stream: &[u32], t: usize) -> Result<MetricPair> {
    if t < 2 || t > stream.len() {
        return Err(EngineError::Config(format!(
            "backward transfer needs 2 <= t <= {}, got {t}",
            stream.len()
        )));
    }
    let mut dsc_sum = 0.0;
    let mut asd_deltas = Vec::new();
    let mut skipped = 0usize;
    for (i, &site) in stream[..t - 1].iter().enumerate() {
        let then = m.require_test(i + 1, site)?;
        let now = m.require_test(t, site)?;
        dsc_sum += now.dsc - then.dsc;
        match (now.asd, then.asd) {
            (Some(a), Some(b)) => asd_deltas.push(a - b),
            _ => skipped += 1,
        }
    }
    let n = (t - 1) as f64;
    Ok(MetricPair {
        dsc: dsc_sum / n,
        asd: if asd_deltas.is_empty() {
            None
        } else {
            Some(-(asd_deltas.iter().sum::<f64>() / asd_deltas.len() as f64))
        },
        asd_skipped: skipped,
    })
}

/// Held-out-site test accuracy after the final round.
pub fn forward_measure(
    m: &AccuracyMatrix,
    stream: &[u32],
    held_out: u32,
    final_round: usize,
) -> Result<MetricPair> {
    if stream.contains(&held_out) {
        return Err(EngineError::Config(format!(
            "held-out site {held_out} is part of the stream"
        )));
    }
    let e = m.require_test(final_round, held_out)?;
    Ok(MetricPair {
        dsc: e.dsc,
        asd: e.asd,
        asd_skipped: usize::from(e.asd.is_none()),
    })
}

/// FM minus the reference accuracy (what one extra round of training on the
/// held-out site achieves). Plain difference for both metrics.
pub fn forward_transfer(fm: &MetricPair, reference: &MetricPair) -> MetricPair {
    MetricPair {
        dsc: fm.dsc - reference.dsc,
        asd: match (fm.asd, reference.asd) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        },
        asd_skipped: fm.asd_skipped + reference.asd_skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, fg: &[(usize, usize)]) -> Array2<u8> {
        let mut m = Array2::zeros((h, w));
        for &(y, x) in fg {
            m[(y, x)] = 1;
        }
        m
    }

    #[test]
    fn dice_on_identical_disjoint_and_half_overlapping_masks() {
        let a = mask(4, 4, &[(1, 1), (1, 2)]);
        assert_eq!(dice(&a, &a).unwrap().value, 1.0);

        let b = mask(4, 4, &[(3, 3), (3, 2)]);
        assert_eq!(dice(&a, &b).unwrap().value, 0.0);

        // |A| = |B| = 2, intersection 1: dice = 2*1/4 = 0.5
        let c = mask(4, 4, &[(1, 2), (1, 3)]);
        assert_eq!(dice(&a, &c).unwrap().value, 0.5);
    }

    #[test]
    fn dice_of_two_empty_masks_is_one_flagged() {
        let empty = mask(4, 4, &[]);
        let r = dice(&empty, &empty).unwrap();
        assert_eq!(r.value, 1.0);
        assert!(r.both_empty);
        // one-sided empties are plain zeros
        let a = mask(4, 4, &[(0, 0)]);
        let r = dice(&a, &empty).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(!r.both_empty);
    }

    #[test]
    fn asd_of_identical_masks_is_zero() {
        let a = mask(6, 6, &[(2, 2), (2, 3), (3, 2), (3, 3)]);
        assert_eq!(asd(&a, &a).unwrap(), Some(0.0));
    }

    #[test]
    fn asd_of_single_pixels_is_their_distance() {
        let a = mask(8, 8, &[(2, 2)]);
        let b = mask(8, 8, &[(2, 5)]);
        assert_eq!(asd(&a, &b).unwrap(), Some(3.0));
    }

    #[test]
    fn asd_of_shifted_squares_matches_the_frozen_value() {
        // 4x4 solid squares shifted horizontally by one pixel. Expected
        // value frozen from an exhaustive pairwise-distance computation:
        // each boundary has 12 pixels, 6 of which sit at distance 1 from
        // the other boundary, so both directed means are 0.5.
        let sq = |x0: usize| {
            let mut fg = Vec::new();
            for y in 2..6 {
                for x in x0..x0 + 4 {
                    fg.push((y, x));
                }
            }
            mask(10, 10, &fg)
        };
        let a = sq(2);
        let b = sq(3);
        assert_eq!(asd(&a, &b).unwrap(), Some(0.5));
    }

    #[test]
    fn asd_is_symmetric() {
        let a = mask(8, 8, &[(1, 1), (1, 2), (2, 1), (5, 5)]);
        let b = mask(8, 8, &[(3, 3), (3, 4), (6, 1)]);
        assert_eq!(asd(&a, &b).unwrap(), asd(&b, &a).unwrap());
    }

    #[test]
    fn asd_with_an_empty_mask_is_undefined() {
        let a = mask(4, 4, &[(1, 1)]);
        let empty = mask(4, 4, &[]);
        assert_eq!(asd(&a, &empty).unwrap(), None);
        assert_eq!(asd(&empty, &a).unwrap(), None);
        assert_eq!(asd(&empty, &empty).unwrap(), None);
    }

    #[test]
    fn interior_pixels_are_not_boundary() {
        // 3x3 block: 8 boundary pixels, center excluded
        let fg: Vec<(usize, usize)> = (1..4).flat_map(|y| (1..4).map(move |x| (y, x))).collect();
        let m = mask(6, 6, &fg);
        let b = boundary(&m);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
        // a pixel on the grid edge is boundary even if surrounded in-grid
        let m = mask(2, 2, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(boundary(&m).len(), 4);
    }

    fn entry(round: usize, site_id: u32, dsc: f64, asd: Option<f64>) -> MatrixEntry {
        MatrixEntry {
            round,
            site_id,
            split: Split::Test,
            dsc,
            asd,
            asd_undefined: 0,
        }
    }

    #[test]
    fn aggregate_scores_averages_and_counts_undefined() {
        let e = aggregate_scores(
            2,
            1,
            Split::Test,
            &[(0.8, Some(1.0)), (0.6, None), (1.0, Some(3.0))],
        )
        .unwrap();
        assert!((e.dsc - 0.8).abs() < 1e-15);
        assert_eq!(e.asd, Some(2.0));
        assert_eq!(e.asd_undefined, 1);
    }

    #[test]
    fn backward_measure_averages_the_current_row() {
        let mut m = AccuracyMatrix::default();
        m.push(entry(1, 10, 0.9, Some(1.0)));
        m.push(entry(2, 10, 0.8, Some(2.0)));
        m.push(entry(2, 11, 0.6, Some(4.0)));
        let stream = [10, 11];
        let bm1 = backward_measure(&m, &stream, 1).unwrap();
        assert_eq!(bm1.dsc, 0.9);
        let bm2 = backward_measure(&m, &stream, 2).unwrap();
        assert!((bm2.dsc - 0.7).abs() < 1e-15);
        assert_eq!(bm2.asd, Some(3.0));
    }

    #[test]
    fn backward_transfer_is_zero_without_degradation() {
        let mut m = AccuracyMatrix::default();
        m.push(entry(1, 10, 0.75, Some(2.0)));
        m.push(entry(2, 10, 0.75, Some(2.0)));
        m.push(entry(2, 11, 0.9, Some(1.0)));
        let bt = backward_transfer(&m, &[10, 11], 2).unwrap();
        assert_eq!(bt.dsc, 0.0);
        assert_eq!(bt.asd, Some(0.0));
    }

    #[test]
    fn backward_transfer_shows_forgetting_as_negative_for_both_metrics() {
        let mut m = AccuracyMatrix::default();
        m.push(entry(1, 10, 0.8, Some(1.0)));
        m.push(entry(2, 10, 0.7, Some(1.5))); // dice down, asd up: degraded
        m.push(entry(2, 11, 0.9, Some(1.0)));
        let bt = backward_transfer(&m, &[10, 11], 2).unwrap();
        assert!((bt.dsc + 0.1).abs() < 1e-12);
        assert_eq!(bt.asd, Some(-0.5), "asd growth reports as negative");
    }

    #[test]
    fn missing_matrix_entries_are_integrity_errors() {
        let m = AccuracyMatrix::default();
        assert!(matches!(
            backward_measure(&m, &[1, 2], 1),
            Err(EngineError::Integrity(_))
        ));
        assert!(matches!(
            backward_measure(&m, &[1, 2], 3),
            Err(EngineError::Config(_))
        ));
    }

    #[test]
    fn forward_measure_rejects_a_held_out_site_inside_the_stream() {
        let mut m = AccuracyMatrix::default();
        m.push(entry(2, 99, 0.7, Some(2.0)));
        assert!(matches!(
            forward_measure(&m, &[1, 99], 99, 2),
            Err(EngineError::Config(_))
        ));
        let fm = forward_measure(&m, &[1, 2], 99, 2).unwrap();
        assert_eq!(fm.dsc, 0.7);
    }

    #[test]
    fn forward_transfer_is_fm_minus_reference() {
        let fm = MetricPair { dsc: 0.70, asd: Some(2.5), asd_skipped: 0 };
        let same = forward_transfer(&fm, &fm);
        assert_eq!(same.dsc, 0.0);
        assert_eq!(same.asd, Some(0.0));
        let reference = MetricPair { dsc: 0.85, asd: Some(2.0), asd_skipped: 0 };
        let ft = forward_transfer(&fm, &reference);
        assert!((ft.dsc + 0.15).abs() < 1e-15);
        assert_eq!(ft.asd, Some(0.5));
    }

    #[test]
    fn matrix_csv_round_trips_bit_identically() {
        let mut m = AccuracyMatrix::default();
        m.push(MatrixEntry {
            round: 1,
            site_id: 3,
            split: Split::Val,
            dsc: 0.123456789012345678,
            asd: Some(1.0 / 3.0),
            asd_undefined: 0,
        });
        m.push(MatrixEntry {
            round: 2,
            site_id: 4,
            split: Split::Test,
            dsc: f64::MIN_POSITIVE,
            asd: None,
            asd_undefined: 7,
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        m.to_csv(&path).unwrap();
        let back = AccuracyMatrix::from_csv(&path).unwrap();
        assert_eq!(m, back);
        // byte-identical when rewritten
        let bytes = std::fs::read(&path).unwrap();
        back.to_csv(&path).unwrap();
        assert_eq!(bytes, std::fs::read(&path).unwrap());
    }
}
