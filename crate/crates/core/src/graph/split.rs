//! Train/valid/test partitions: repeated random k-fold, scaffold-based
//! out-of-distribution, and a plain random split.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::PairDataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitMode {
    RandomKfold { k: usize, fold: usize, repeat: usize },
    ScaffoldOod { c: usize },
    Random { train: f64, valid: f64 },
}

/// Pairwise-disjoint index lists into a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub mode: SplitMode,
}

impl SplitPlan {
    /// Everything not used for training: validation plus test.
    pub fn held_out(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.valid.iter().chain(&self.test).copied().collect();
        v.sort_unstable();
        v
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        self.train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .all(|&i| seen.insert(i))
    }
}

/// Carves a validation slice off the front of an already shuffled held-out set.
fn carve_valid(mut held: Vec<usize>, valid_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n_valid = (valid_fraction * held.len() as f64).floor() as usize;
    let mut test = held.split_off(n_valid);
    let mut valid = held;
    valid.sort_unstable();
    test.sort_unstable();
    (valid, test)
}

fn check_fraction(name: &str, f: f64) -> Result<()> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(Error::Split(format!("{name} fraction {f} outside [0, 1]")))
    }
}

/// `repeats` independent random partitions of `0..n` into `k` folds; each
/// plan holds one fold out, with a `valid_fraction` slice of that fold used
/// for validation and the rest for test.
pub fn kfold_splits(n: usize, k: usize, repeats: usize, valid_fraction: f64, seed: u64) -> Result<Vec<SplitPlan>> {
    if k < 2 {
        return Err(Error::Split(format!("k = {k}, need at least 2 folds")));
    }
    if n < k {
        return Err(Error::Split(format!("{n} samples cannot fill {k} folds")));
    }
    check_fraction("validation", valid_fraction)?;
    let mut plans = Vec::with_capacity(k * repeats);
    for repeat in 0..repeats {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(seed, &[0x6b66, repeat as u64]));
        let mut bounds = Vec::with_capacity(k + 1);
        bounds.push(0);
        for f in 0..k {
            bounds.push(bounds[f] + n / k + usize::from(f < n % k));
        }
        for fold in 0..k {
            let held = perm[bounds[fold]..bounds[fold + 1]].to_vec();
            let mut train: Vec<usize> = perm[..bounds[fold]]
                .iter()
                .chain(&perm[bounds[fold + 1]..])
                .copied()
                .collect();
            train.sort_unstable();
            let (valid, test) = carve_valid(held, valid_fraction);
            plans.push(SplitPlan {
                train,
                valid,
                test,
                mode: SplitMode::RandomKfold { k, fold, repeat },
            });
        }
    }
    Ok(plans)
}

/// Scaffold classes ordered by descending graph count, ties by class id.
pub(crate) fn scaffold_ranking(dataset: &PairDataset) -> Result<Vec<(u64, usize)>> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for g in dataset.unique_graphs() {
        let s = g
            .scaffold
            .ok_or_else(|| Error::Split(format!("graph '{}' has no scaffold id", g.id)))?;
        *counts.entry(s).or_default() += 1;
    }
    let mut ranked: Vec<(u64, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// In-distribution graphs are those in the `c` most frequent scaffold
/// classes. Train = pairs with both graphs in-distribution; every other pair
/// is held out, and a `valid_fraction` of those becomes validation.
pub fn scaffold_ood_split(dataset: &PairDataset, c: usize, valid_fraction: f64, seed: u64) -> Result<SplitPlan> {
    check_fraction("validation", valid_fraction)?;
    let ranked = scaffold_ranking(dataset)?;
    let s = ranked.len();
    if c == 0 || c >= s {
        return Err(Error::Split(format!(
            "c = {c} must be in 1..{s} so both sides are non-empty ({s} scaffold classes)"
        )));
    }
    let in_dist: HashSet<u64> = ranked[..c].iter().map(|&(id, _)| id).collect();
    let is_id = |g: &super::Graph| g.scaffold.is_some_and(|s| in_dist.contains(&s));
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, p) in dataset.pairs.iter().enumerate() {
        if is_id(&p.g1) && is_id(&p.g2) {
            train.push(i);
        } else {
            held.push(i);
        }
    }
    held.shuffle(&mut rng::stream(seed, &[0x00d]));
    let (valid, test) = carve_valid(held, valid_fraction);
    Ok(SplitPlan {
        train,
        valid,
        test,
        mode: SplitMode::ScaffoldOod { c },
    })
}

/// Shuffled split with the given train and validation fractions; the rest is test.
pub fn random_split(n: usize, train_fraction: f64, valid_fraction: f64, seed: u64) -> Result<SplitPlan> {
    check_fraction("train", train_fraction)?;
    check_fraction("validation", valid_fraction)?;
    if train_fraction + valid_fraction > 1.0 {
        return Err(Error::Split("train + validation fractions exceed 1".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, &[0x7261]));
    let n_train = (train_fraction * n as f64).round() as usize;
    let n_valid = (valid_fraction * n as f64).round() as usize;
    let mut train = perm[..n_train].to_vec();
    let mut valid = perm[n_train..(n_train + n_valid).min(n)].to_vec();
    let mut test = perm[(n_train + n_valid).min(n)..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        train,
        valid,
        test,
        mode: SplitMode::Random {
            train: train_fraction,
            valid: valid_fraction,
        },
    })
}
