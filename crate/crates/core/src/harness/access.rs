//! Data-access audit. Every subject drawn into a training batch (or scored
//! as an exemplar candidate) is noted here with the round it was read in,
//! deduplicated per round. The storage contract is checked against this
//! log: in round t, the only previous-site subjects a method may touch are
//! the exemplars its buffer manifest lists.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::model::Subject;

/// One unique subject read, in the on-disk payload size of that subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRead {
    pub site_id: u32,
    pub subject_id: u32,
    pub bytes: u64,
}

/// Unique (site, subject) reads per round, in deterministic id order.
#[derive(Debug, Clone, Default)]
pub struct AccessLog {
    rounds: BTreeMap<usize, BTreeMap<(u32, u32), u64>>,
}

impl AccessLog {
    pub fn note(&mut self, round: usize, s: &Subject) {
        self.rounds
            .entry(round)
            .or_default()
            .entry((s.site_id, s.subject_id))
            .or_insert_with(|| s.payload_bytes());
    }

    pub fn reads(&self, round: usize) -> Vec<SubjectRead> {
        self.rounds
            .get(&round)
            .map(|m| {
                m.iter()
                    .map(|(&(site_id, subject_id), &bytes)| SubjectRead {
                        site_id,
                        subject_id,
                        bytes,
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Reads of any site other than the one being trained this round.
    pub fn previous_site_reads(&self, round: usize, incoming: u32) -> Vec<SubjectRead> {
        self.reads(round)
            .into_iter()
            .filter(|r| r.site_id != incoming)
            .collect()
    }

    pub fn previous_site_bytes(&self, round: usize, incoming: u32) -> u64 {
        self.previous_site_reads(round, incoming)
            .iter()
            .map(|r| r.bytes)
            .sum()
    }
}
