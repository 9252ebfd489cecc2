use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Share of the non-test scans used for training; the rest validates.
pub const TRAIN_SHARE: f64 = 0.7;

/// Scan-level split for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl FoldPlan {
    /// Every scan of the plan, test scans last.
    pub fn all_scans(&self) -> Vec<String> {
        self.train.iter().chain(&self.val).chain(&self.test).cloned().collect()
    }

    pub fn development_scans(&self) -> Vec<String> {
        self.train.iter().chain(&self.val).cloned().collect()
    }
}

/// Test scans are `subsets[fold]`; the remaining scans are shuffled under
/// `seed` and split 70/30 into training and validation.
pub fn make_fold_plan(subsets: &[Vec<String>], fold: usize, seed: u64) -> Result<FoldPlan> {
    if fold >= subsets.len() {
        return Err(Error::Parameter(format!(
            "fold {fold} out of range for {} subsets",
            subsets.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for (i, s) in subsets.iter().enumerate() {
        for id in s {
            if !seen.insert(id.as_str()) {
                return Err(Error::Contract(format!("scan {id} appears twice (again in subset {i})")));
            }
        }
    }
    let test = subsets[fold].clone();
    let mut rest: Vec<String> = subsets
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != fold)
        .flat_map(|(_, s)| s.iter().cloned())
        .collect();
    rest.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rest.shuffle(&mut rng);
    let n_train = (rest.len() as f64 * TRAIN_SHARE).round() as usize;
    let val = rest.split_off(n_train);
    Ok(FoldPlan {
        fold,
        train: rest,
        val,
        test,
    })
}

/// Deals sorted scan ids round-robin into `n` subsets.
pub fn assign_subsets(scan_ids: &[String], n: usize) -> Result<Vec<Vec<String>>> {
    if n == 0 || n > scan_ids.len() {
        return Err(Error::Parameter(format!("cannot split {} scans into {n} subsets", scan_ids.len())));
    }
    let mut ids = scan_ids.to_vec();
    ids.sort();
    let mut out = vec![Vec::new(); n];
    for (i, id) in ids.into_iter().enumerate() {
        out[i % n].push(id);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ten_by_ten() -> Vec<Vec<String>> {
        (0..10).map(|s| (0..10).map(|i| format!("scan-{s}-{i}")).collect()).collect()
    }

    #[test]
    fn hundred_scans_split_63_27_10() {
        let p = make_fold_plan(&ten_by_ten(), 0, 42).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (63, 27, 10));
        assert_eq!(p.test, ten_by_ten()[0]);
    }

    #[test]
    fn plan_is_deterministic_under_seed() {
        let a = make_fold_plan(&ten_by_ten(), 3, 1).unwrap();
        let b = make_fold_plan(&ten_by_ten(), 3, 1).unwrap();
        assert_eq!(a, b);
        let c = make_fold_plan(&ten_by_ten(), 3, 2).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn fold_out_of_range_is_a_parameter_error() {
        assert!(matches!(make_fold_plan(&ten_by_ten(), 10, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn overlapping_subsets_are_rejected() {
        let mut s = ten_by_ten();
        s[4].push("scan-0-0".into());
        assert!(matches!(make_fold_plan(&s, 0, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn every_scan_is_tested_exactly_once_across_folds() {
        let subsets = ten_by_ten();
        let mut tested = Vec::new();
        for f in 0..10 {
            let p = make_fold_plan(&subsets, f, 5).unwrap();
            let mut all = p.all_scans();
            all.sort();
            let mut expected: Vec<String> = subsets.iter().flatten().cloned().collect();
            expected.sort();
            assert_eq!(all, expected);
            tested.extend(p.test);
        }
        tested.sort();
        tested.dedup();
        assert_eq!(tested.len(), 100);
    }

    proptest! {
        #[test]
        fn plan_partitions_the_scans(n_subsets in 2usize..8, per in 1usize..6, fold_pick in 0usize..8, seed in any::<u64>()) {
            let fold = fold_pick % n_subsets;
            let subsets: Vec<Vec<String>> =
                (0..n_subsets).map(|s| (0..per).map(|i| format!("{s}/{i}")).collect()).collect();
            let p = make_fold_plan(&subsets, fold, seed).unwrap();
            let mut all = p.all_scans();
            let n = all.len();
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n);
            prop_assert_eq!(n, n_subsets * per);
            let rest = n - per;
            prop_assert_eq!(p.train.len(), (rest as f64 * 0.7).round() as usize);
        }
    }

    #[test]
    fn round_robin_assignment_covers_everything() {
        let ids: Vec<String> = (0..7).map(|i| format!("s{i}")).collect();
        let s = assign_subsets(&ids, 3).unwrap();
        assert_eq!(s.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 2, 2]);
        assert!(assign_subsets(&ids, 0).is_err());
    }
}
