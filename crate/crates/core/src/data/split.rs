//! Grouped train/test splits.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_groups: usize,
    /// The first `train_groups` groups train; the rest test.
    pub train_groups: usize,
    /// Inclusive range of images per group.
    pub group_size: [usize; 2],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_groups: 34,
            train_groups: 32,
            group_size: [18, 26],
            seed: 0,
        }
    }
}

/// Sample indices per group and the resulting train/test index lists.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub groups: Vec<Vec<usize>>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Group id of every sample.
    pub fn group_of(&self, n: usize) -> Vec<usize> {
        let mut g = vec![0; n];
        for (id, members) in self.groups.iter().enumerate() {
            for &i in members {
                g[i] = id;
            }
        }
        g
    }
}

/// Splits `n` samples into groups with explicit sizes. Membership is a
/// seeded shuffle cut into consecutive runs.
pub fn split_with_sizes(
    n: usize,
    sizes: &[usize],
    train_groups: usize,
    seed: u64,
) -> Result<Split> {
    let total: usize = sizes.iter().sum();
    if total != n {
        return Err(Error::Data(format!(
            "group sizes cover {total} samples, have {n}"
        )));
    }
    if train_groups > sizes.len() {
        return Err(Error::Data(format!(
            "{train_groups} training groups requested from {} groups",
            sizes.len()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &s in sizes {
        let mut g = order[at..at + s].to_vec();
        g.sort_unstable();
        groups.push(g);
        at += s;
    }
    let mut train: Vec<usize> = groups[..train_groups].concat();
    let mut test: Vec<usize> = groups[train_groups..].concat();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        groups,
        train,
        test,
    })
}

/// Splits `n` samples into `cfg.n_groups` groups with sizes drawn from
/// `cfg.group_size` so that every sample is used exactly once.
pub fn make_split(n: usize, cfg: &SplitConfig) -> Result<Split> {
    let [lo, hi] = cfg.group_size;
    if cfg.n_groups == 0 || lo == 0 || lo > hi || cfg.train_groups > cfg.n_groups {
        return Err(Error::Config(format!(
            "invalid split configuration {cfg:?}"
        )));
    }
    let (min, max) = (lo * cfg.n_groups, hi * cfg.n_groups);
    if n < min {
        return Err(Error::Data(format!(
            "insufficient samples: {n} < {min} needed for {} groups of at least {lo}",
            cfg.n_groups
        )));
    }
    if n > max {
        return Err(Error::Data(format!(
            "{n} samples exceed {max}, the most {} groups of at most {hi} can hold",
            cfg.n_groups
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sizes = vec![lo; cfg.n_groups];
    for _ in min..n {
        let open: Vec<usize> = (0..cfg.n_groups).filter(|&g| sizes[g] < hi).collect();
        sizes[open[rng.gen_range(0..open.len())]] += 1;
    }
    split_with_sizes(n, &sizes, cfg.train_groups, rng.gen())
}
