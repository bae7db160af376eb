use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, DatasetSplit, Session, Vocabulary};

/// Relative sizes of the train, validation and test splits, e.g. `8:1:1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatio {
    pub train: u32,
    pub validation: u32,
    pub test: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            train: 8,
            validation: 1,
            test: 1,
        }
    }
}

impl FromStr for SplitRatio {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<u32> = s
            .split(':')
            .map(|p| p.trim().parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|_| DataError::Contract(format!("split `{s}` is not of the form a:b:c")))?;
        match parts[..] {
            [train, validation, test] if train + validation + test > 0 && train > 0 => Ok(Self {
                train,
                validation,
                test,
            }),
            _ => Err(DataError::Contract(format!(
                "split `{s}` needs three parts with a positive train share"
            ))),
        }
    }
}

impl std::fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.validation, self.test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitBy {
    /// Earliest sessions train, latest test.
    Chronological,
    /// Seeded random assignment; each split keeps the input order.
    Random { seed: u64 },
}

/// Splits sessions by count. Train and validation sizes are rounded down;
/// test takes the remainder.
pub fn split_sessions(sessions: Vec<Session>, vocabulary: Vocabulary, ratio: SplitRatio, by: SplitBy) -> DatasetSplit {
    let n = sessions.len();
    let total = (ratio.train + ratio.validation + ratio.test) as usize;
    let n_train = n * ratio.train as usize / total;
    let n_val = n * ratio.validation as usize / total;

    let mut assignment: Vec<usize> = (0..n).collect();
    if let SplitBy::Random { seed } = by {
        assignment.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut bucket = vec![2u8; n];
    for (rank, &i) in assignment.iter().enumerate() {
        bucket[i] = if rank < n_train {
            0
        } else if rank < n_train + n_val {
            1
        } else {
            2
        };
    }

    let mut out = DatasetSplit {
        train: Vec::with_capacity(n_train),
        validation: Vec::with_capacity(n_val),
        test: Vec::new(),
        vocabulary,
    };
    for (s, b) in sessions.into_iter().zip(bucket) {
        match b {
            0 => out.train.push(s),
            1 => out.validation.push(s),
            _ => out.test.push(s),
        }
    }
    out
}
