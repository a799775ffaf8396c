//! Exemplar selection and the replay buffer.
//!
//! At the end of each round the current site's train split is scored in
//! feature space and the top `n_e` subjects are frozen into the buffer:
//!
//! - representativeness `R`: cosine similarity to the site prototype (the
//!   mean feature of the candidates), so exemplars sit near the site's
//!   center of mass;
//! - diversity `V`: mean over buffered sites of the minimum dissimilarity
//!   (-cosine) to that site's exemplars, so new exemplars avoid duplicating
//!   what the buffer already covers;
//! - hybrid `H = R + lambda * V`, ties broken by ascending subject id.
//!
//! Features are cached at selection time with the end-of-round parameters
//! and never re-scored afterwards; later rounds compare against the buffer
//! exactly as it was frozen.

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::model::{FeatureVector, Network, ParamVector, Subject};

/// One frozen exemplar: the subject payload, its cached feature, and the
/// scores it was selected with.
#[derive(Debug, Clone)]
pub struct Exemplar {
    pub subject: Subject,
    pub feature: FeatureVector,
    pub r: f64,
    pub v: f64,
    pub h: f64,
}

#[derive(Debug, Clone)]
pub struct SiteExemplars {
    pub site_id: u32,
    pub exemplars: Vec<Exemplar>,
}

/// Buffer of exemplars for every site seen so far, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    pub sites: Vec<SiteExemplars>,
}

impl ReplayBuffer {
    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn total_exemplars(&self) -> usize {
        self.sites.iter().map(|s| s.exemplars.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn contains_site(&self, site_id: u32) -> bool {
        self.sites.iter().any(|s| s.site_id == site_id)
    }

    /// All exemplar subjects, flattened in site insertion order; the
    /// training loop draws its buffer batches from this pool.
    pub fn subject_pool(&self) -> Vec<&Subject> {
        self.sites
            .iter()
            .flat_map(|s| s.exemplars.iter().map(|e| &e.subject))
            .collect()
    }
}

/// Mean feature of a non-empty candidate set.
pub fn site_prototype(features: &[FeatureVector]) -> Result<FeatureVector> {
    let first = features
        .first()
        .ok_or_else(|| EngineError::Config("prototype of an empty feature set".into()))?;
    let dim = first.values.len();
    let mut mean = vec![0.0; dim];
    for f in features {
        if f.values.len() != dim {
            return Err(EngineError::Shape("mixed feature widths".into()));
        }
        for (m, v) in mean.iter_mut().zip(&f.values) {
            *m += v;
        }
    }
    let n = features.len() as f64;
    for m in mean.iter_mut() {
        *m /= n;
    }
    Ok(FeatureVector { values: mean })
}

fn cosine(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return Err(EngineError::Shape("mixed feature widths".into()));
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(EngineError::Numeric(
            "degenerate (zero-norm) feature vector in similarity".into(),
        ));
    }
    Ok(a.dot(b) / (na * nb))
}

/// Cosine similarity of a feature to the site prototype.
pub fn representativeness(f: &FeatureVector, prototype: &FeatureVector) -> Result<f64> {
    cosine(f, prototype)
}

/// Mean over buffered sites of min_j(-cos(f, f_j)). An empty buffer
/// contributes nothing and scores 0 (the round-1 path).
pub fn diversity(f: &FeatureVector, buffer: &ReplayBuffer) -> Result<f64> {
    if buffer.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for site in &buffer.sites {
        let mut min = f64::INFINITY;
        for e in &site.exemplars {
            let dsim = -cosine(f, &e.feature)?;
            if dsim < min {
                min = dsim;
            }
        }
        if !min.is_finite() {
            return Err(EngineError::Config(format!(
                "buffered site {} has no exemplars",
                site.site_id
            )));
        }
        total += min;
    }
    Ok(total / buffer.n_sites() as f64)
}

/// How candidates are ranked: plain representativeness, or the hybrid score
/// that also rewards covering what the buffer lacks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionMode {
    RepresentativenessOnly,
    Hybrid { lambda: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub subject_id: u32,
    pub r: f64,
    pub v: f64,
    pub h: f64,
}

/// Score every candidate feature against the prototype of the whole set and
/// (in hybrid mode) the buffer.
pub fn score_candidates(
    features: &[(u32, FeatureVector)],
    buffer: &ReplayBuffer,
    mode: SelectionMode,
) -> Result<Vec<ScoredCandidate>> {
    let all: Vec<FeatureVector> = features.iter().map(|(_, f)| f.clone()).collect();
    let prototype = site_prototype(&all)?;
    features
        .iter()
        .map(|(subject_id, f)| {
            let r = representativeness(f, &prototype)?;
            let (v, h) = match mode {
                SelectionMode::RepresentativenessOnly => (0.0, r),
                SelectionMode::Hybrid { lambda } => {
                    let v = diversity(f, buffer)?;
                    (v, r + lambda * v)
                }
            };
            Ok(ScoredCandidate {
                subject_id: *subject_id,
                r,
                v,
                h,
            })
        })
        .collect()
}

/// Ids of the top `n_e` candidates by hybrid score, ties resolved toward
/// the smaller subject id.
pub fn top_exemplars(scored: &[ScoredCandidate], n_e: usize) -> Vec<u32> {
    let mut ranked: Vec<&ScoredCandidate> = scored.iter().collect();
    ranked.sort_by(|a, b| {
        b.h.partial_cmp(&a.h)
            .expect("scores are finite")
            .then(a.subject_id.cmp(&b.subject_id))
    });
    ranked.iter().take(n_e).map(|c| c.subject_id).collect()
}

/// Select `n_e` exemplars from a site's train split with the given
/// parameters, freezing the features they were scored with.
pub fn select_exemplars(
    net: &Network,
    params: &ParamVector,
    candidates: &[Subject],
    buffer: &ReplayBuffer,
    mode: SelectionMode,
    n_e: usize,
) -> Result<SiteExemplars> {
    if n_e == 0 || n_e > candidates.len() {
        return Err(EngineError::Config(format!(
            "cannot select {n_e} exemplars from {} candidates",
            candidates.len()
        )));
    }
    let site_id = candidates[0].site_id;
    if candidates.iter().any(|s| s.site_id != site_id) {
        return Err(EngineError::Config(
            "exemplar candidates must come from a single site".into(),
        ));
    }
    let features: Vec<(u32, FeatureVector)> = candidates
        .iter()
        .map(|s| Ok((s.subject_id, net.bottleneck_features(params, s)?)))
        .collect::<Result<_>>()?;
    let scored = score_candidates(&features, buffer, mode)?;
    let chosen = top_exemplars(&scored, n_e);
    let exemplars = chosen
        .iter()
        .map(|id| {
            let idx = candidates
                .iter()
                .position(|s| s.subject_id == *id)
                .expect("chosen id is a candidate");
            let sc = scored
                .iter()
                .find(|c| c.subject_id == *id)
                .expect("chosen id was scored");
            Exemplar {
                subject: candidates[idx].clone(),
                feature: features[idx].1.clone(),
                r: sc.r,
                v: sc.v,
                h: sc.h,
            }
        })
        .collect();
    Ok(SiteExemplars { site_id, exemplars })
}

/// Append a site's exemplars to the buffer; a site can only be added once.
pub fn update_buffer(buffer: &mut ReplayBuffer, site: SiteExemplars) -> Result<()> {
    if buffer.contains_site(site.site_id) {
        return Err(EngineError::Config(format!(
            "site {} is already in the replay buffer",
            site.site_id
        )));
    }
    if site.exemplars.is_empty() {
        return Err(EngineError::Config(
            "refusing to buffer an empty exemplar set".into(),
        ));
    }
    buffer.sites.push(site);
    Ok(())
}

/// On-disk record of the buffer after a round: per site, which subjects are
/// frozen and the scores they were selected with.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BufferManifest {
    pub round: usize,
    pub sites: Vec<ManifestSite>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestSite {
    pub site_id: u32,
    pub exemplars: Vec<ManifestExemplar>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestExemplar {
    pub subject_id: u32,
    pub r: f64,
    pub v: f64,
    pub h: f64,
}

impl ReplayBuffer {
    pub fn manifest(&self, round: usize) -> BufferManifest {
        BufferManifest {
            round,
            sites: self
                .sites
                .iter()
                .map(|s| ManifestSite {
                    site_id: s.site_id,
                    exemplars: s
                        .exemplars
                        .iter()
                        .map(|e| ManifestExemplar {
                            subject_id: e.subject.subject_id,
                            r: e.r,
                            v: e.v,
                            h: e.h,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}
