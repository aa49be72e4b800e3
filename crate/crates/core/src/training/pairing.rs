//! View pairing: joins surface and section patches into training pairs.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PatchDataset;
use crate::data_model::ViewKind;
use crate::error::{Error, Result};
use crate::numeric::Scalar;
use crate::seed::rng_for_step;

/// How surface and section patches are matched into pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingPolicy {
    /// Prefer a section patch of the same specimen; fall back to same class.
    SpecimenFirst,
    /// Uniformly random section patch of the same class.
    ClassRandom,
}

impl PairingPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            PairingPolicy::SpecimenFirst => "specimen_first",
            PairingPolicy::ClassRandom => "class_random",
        }
    }
}

impl FromStr for PairingPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "specimen_first" => Ok(PairingPolicy::SpecimenFirst),
            "class_random" => Ok(PairingPolicy::ClassRandom),
            other => Err(Error::Config(format!("unknown pairing policy {other:?}"))),
        }
    }
}

/// One surface/section pair sharing a label. Indices refer to the dataset
/// the pairs were built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPair {
    pub surface: usize,
    pub section: usize,
    pub label_code: usize,
    /// True when both patches come from the same specimen.
    pub specimen_match: bool,
}

/// Pairs every surface patch in the dataset with exactly one section patch
/// per the policy. Deterministic given `(seed, surface patch_id)`, so the
/// result does not depend on dataset ordering.
pub fn pair_views<T: Scalar>(
    dataset: &PatchDataset<T>,
    policy: PairingPolicy,
    seed: u64,
) -> Result<Vec<PatchPair>> {
    // class code -> section indices; (class, specimen) -> section indices
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut by_specimen: BTreeMap<(usize, &str), Vec<usize>> = BTreeMap::new();
    for (idx, item) in dataset.items.iter().enumerate() {
        if item.view == ViewKind::Section {
            by_class.entry(item.class_code).or_default().push(idx);
            by_specimen
                .entry((item.class_code, item.specimen_id.as_str()))
                .or_default()
                .push(idx);
        }
    }

    let mut pairs = Vec::new();
    for (idx, item) in dataset.items.iter().enumerate() {
        if item.view != ViewKind::Surface {
            continue;
        }
        let class_pool = by_class.get(&item.class_code).ok_or_else(|| {
            Error::Pairing(format!(
                "class {:?} has surface patches but no section patches",
                dataset.class_set.labels()[item.class_code].as_str()
            ))
        })?;
        let specimen_pool = by_specimen
            .get(&(item.class_code, item.specimen_id.as_str()))
            .filter(|pool| !pool.is_empty());

        let (pool, specimen_match) = match (policy, specimen_pool) {
            (PairingPolicy::SpecimenFirst, Some(pool)) => (pool, true),
            _ => (class_pool, false),
        };
        let mut rng = rng_for_step(seed, &format!("pair/{}", item.patch_id));
        let section = pool[rng.random_range(0..pool.len())];
        // Fallback picks can still land on the same specimen by chance.
        let specimen_match =
            specimen_match || dataset.items[section].specimen_id == item.specimen_id;
        pairs.push(PatchPair {
            surface: idx,
            section,
            label_code: item.class_code,
            specimen_match,
        });
    }
    Ok(pairs)
}
