//! Protocol conformance suite for external scorers, plus the echo fixture
//! it uses as its oracle.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ExternalScorer, Scorer};
use crate::protocol::Handler;
use crate::raster::{Patch, Raster};
use crate::rng::seeded;

pub const CONFORMANCE_BATCHES: [usize; 3] = [1, 32, 100];

/// FNV-1a over the raw patch bytes, as 16 lowercase hex digits.
pub fn patch_checksum(patch: &Patch) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in patch.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Maps patch checksums to the probabilities a scorer must return.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EchoFixture {
    pub name: String,
    pub entries: BTreeMap<String, [f64; 2]>,
}

impl EchoFixture {
    pub fn lookup(&self, patch: &Patch) -> Option<[f64; 2]> {
        self.entries.get(&patch_checksum(patch)).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fixture serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

impl Handler for EchoFixture {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&mut self, patches: &[Patch]) -> Result<Vec<[f64; 2]>, String> {
        patches
            .iter()
            .map(|p| {
                self.lookup(p)
                    .ok_or_else(|| format!("no fixture entry for patch {}", patch_checksum(p)))
            })
            .collect()
    }
}

/// Random patches in the conformance batch sizes and a fixture assigning
/// each one a random point on the simplex.
pub fn build_fixture(seed: u64, patch_size: usize) -> (Vec<Vec<Patch>>, EchoFixture) {
    let mut rng = seeded(seed);
    let mut fixture = EchoFixture {
        name: "echo-fixture".into(),
        entries: BTreeMap::new(),
    };
    let batches = CONFORMANCE_BATCHES
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| {
                    let bytes = (0..patch_size * patch_size * 3).map(|_| rng.random::<u8>()).collect();
                    let patch = Raster::from_vec(patch_size, patch_size, bytes).expect("sized");
                    // multiples of 1/1024 keep p0 + p1 exactly 1
                    let p1 = rng.random_range(0..=1024u32) as f64 / 1024.0;
                    fixture.entries.insert(patch_checksum(&patch), [1.0 - p1, p1]);
                    patch
                })
                .collect()
        })
        .collect();
    (batches, fixture)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub scorer: String,
    pub checks: Vec<Check>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }
}

/// Drive an already handshaken scorer through the batches, comparing every
/// reply to `expected`, then shut it down.
pub fn run_conformance(
    mut scorer: ExternalScorer,
    batches: &[Vec<Patch>],
    expected: impl Fn(&Patch) -> Option<[f64; 2]>,
) -> ConformanceReport {
    let mut report = ConformanceReport {
        scorer: scorer.name().to_string(),
        ..Default::default()
    };
    report.push(
        "handshake",
        !report.scorer.is_empty(),
        format!("ready from {:?}", report.scorer),
    );
    for (i, batch) in batches.iter().enumerate() {
        let id = scorer.channel().next_id();
        let name = format!("batch {i} (size {}, id {id})", batch.len());
        match scorer.score_batch(batch) {
            Err(e) => report.push(name, false, e.to_string()),
            Ok(probs) => {
                let mismatch = batch
                    .iter()
                    .zip(&probs)
                    .position(|(p, got)| expected(p).is_none_or(|want| want != got.as_array()));
                match mismatch {
                    None if probs.len() == batch.len() => report.push(name, true, "ids, count and values match"),
                    None => report.push(name, false, format!("{} replies", probs.len())),
                    Some(k) => report.push(name, false, format!("patch {k}: got {:?}", probs[k].as_array())),
                }
            }
        }
    }
    match scorer.close() {
        Ok(()) => report.push("shutdown", true, "bye acknowledged"),
        Err(e) => report.push("shutdown", false, e.to_string()),
    }
    report
}
