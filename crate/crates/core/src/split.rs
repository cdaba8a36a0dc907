//! Role assignment of volume ids to train / validation / test.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

fn unique(pool: &[String]) -> Result<BTreeSet<&str>> {
    let mut seen = BTreeSet::new();
    let mut dup = Vec::new();
    for id in pool {
        if !seen.insert(id.as_str()) {
            dup.push(id.clone());
        }
    }
    if dup.is_empty() {
        Ok(seen)
    } else {
        Err(Error::OverlappingRoles(dup))
    }
}

/// Seeded shuffle of `ids` cut into the requested role sizes.
pub fn make_split(ids: &[String], sizes: SplitSizes, seed: u64) -> Result<SplitManifest> {
    unique(ids)?;
    let need = sizes.train + sizes.validation + sizes.test;
    if need > ids.len() {
        return Err(Error::Config(format!(
            "split needs {need} volumes but only {} are available",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = shuffled.into_iter();
    let mut take = |n: usize| -> Vec<String> { it.by_ref().take(n).collect() };
    Ok(SplitManifest {
        train: take(sizes.train),
        validation: take(sizes.validation),
        test: take(sizes.test),
    })
}

impl SplitManifest {
    /// Explicit assignment, checked against the pool.
    pub fn explicit(pool: &[String], train: &[&str], validation: &[&str], test: &[&str]) -> Result<Self> {
        let m = SplitManifest {
            train: train.iter().map(|s| s.to_string()).collect(),
            validation: validation.iter().map(|s| s.to_string()).collect(),
            test: test.iter().map(|s| s.to_string()).collect(),
        };
        m.validate(pool)?;
        Ok(m)
    }

    /// Every id exists in `pool` and no id holds two roles.
    pub fn validate(&self, pool: &[String]) -> Result<()> {
        let known = unique(pool)?;
        let mut seen = BTreeSet::new();
        let mut overlap = Vec::new();
        for id in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !known.contains(id.as_str()) {
                return Err(Error::UnknownId(id.clone()));
            }
            if !seen.insert(id.as_str()) {
                overlap.push(id.clone());
            }
        }
        if overlap.is_empty() {
            Ok(())
        } else {
            Err(Error::OverlappingRoles(overlap))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
