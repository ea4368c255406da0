use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

pub const SPLIT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];
pub const MIN_SPLIT_PATIENTS: usize = 10;

/// Split sizes for `n` patients by largest-remainder rounding of 70:15:15.
/// Remainder ties go to the earlier split.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let exact: Vec<f64> = SPLIT_FRACTIONS.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut short = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if short == 0 {
            break;
        }
        sizes[i] += 1;
        short -= 1;
    }
    [sizes[0], sizes[1], sizes[2]]
}

/// Patient-level random partition; entry `i` is patient `i`'s split.
pub fn split_assignment(n: usize, seed: u64) -> Result<Vec<Split>> {
    if n < MIN_SPLIT_PATIENTS {
        return Err(Error::input(format!("need at least {MIN_SPLIT_PATIENTS} patients to split, got {n}")));
    }
    let [train, val, _] = split_sizes(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let mut out = vec![Split::Test; n];
    for (rank, &p) in idx.iter().enumerate() {
        out[p] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    Ok(out)
}
