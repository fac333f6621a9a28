//! Target/auxiliary partitioning and reference-model training sets.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NUM_REFERENCE_MODELS: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub target_ids: Vec<String>,
    pub auxiliary_ids: Vec<String>,
    /// Target-model training set (half of `target_ids`).
    pub member_ids: Vec<String>,
    pub nonmember_ids: Vec<String>,
    /// Shadow-model training set (half of `auxiliary_ids`).
    pub shadow_member_ids: Vec<String>,
    pub shadow_nonmember_ids: Vec<String>,
    /// Training set of each reference model: every target sample is
    /// included independently with probability 1/2.
    pub reference_partitions: Vec<BTreeSet<String>>,
    pub seed: u64,
}

impl SplitPlan {
    /// Re-check the structural invariants.
    pub fn check(&self) -> Result<()> {
        let target: BTreeSet<&String> = self.target_ids.iter().collect();
        if self.auxiliary_ids.iter().any(|id| target.contains(id)) {
            return Err(Error::validation("split", "target and auxiliary sets overlap"));
        }
        let halves: BTreeSet<&String> = self.member_ids.iter().chain(&self.nonmember_ids).collect();
        if halves != target || self.member_ids.len() + self.nonmember_ids.len() != target.len() {
            return Err(Error::validation("split", "member/non-member halves do not partition the target set"));
        }
        if self.member_ids.len().abs_diff(self.nonmember_ids.len()) > 1 {
            return Err(Error::validation("split", "member/non-member halves are unbalanced"));
        }
        Ok(())
    }
}

/// Split in two after a shuffle; the first part gets the extra element.
fn halve(ids: &mut [String], rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
    ids.shuffle(rng);
    let mid = ids.len().div_ceil(2);
    (ids[..mid].to_vec(), ids[mid..].to_vec())
}

pub fn plan_splits(sample_ids: &[String], num_reference_models: usize, seed: u64) -> Result<SplitPlan> {
    if sample_ids.len() < 4 {
        return Err(Error::validation(
            "samples",
            format!("need at least 4 samples to split, got {}", sample_ids.len()),
        ));
    }
    let unique: BTreeSet<&String> = sample_ids.iter().collect();
    if unique.len() != sample_ids.len() {
        return Err(Error::validation("sample_id", "duplicate sample ids"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = sample_ids.to_vec();
    let (mut target_ids, mut auxiliary_ids) = halve(&mut all, &mut rng);
    let (member_ids, nonmember_ids) = halve(&mut target_ids, &mut rng);
    let (shadow_member_ids, shadow_nonmember_ids) = halve(&mut auxiliary_ids, &mut rng);
    // Sorted so the inclusion draws do not depend on the shuffle order.
    target_ids.sort();
    auxiliary_ids.sort();
    let reference_partitions = (0..num_reference_models)
        .map(|_| target_ids.iter().filter(|_| rng.random_bool(0.5)).cloned().collect())
        .collect();
    let plan = SplitPlan {
        target_ids,
        auxiliary_ids,
        member_ids,
        nonmember_ids,
        shadow_member_ids,
        shadow_nonmember_ids,
        reference_partitions,
        seed,
    };
    plan.check()?;
    Ok(plan)
}
