//! Session datasets: ingestion, filtering, prefix unrolling, synthesis,
//! batching and the prepared-dataset container.

mod batch;
mod ingest;
mod prepared;
mod split;
mod synth;

use std::collections::HashMap;

pub use batch::{batch, Batch, PAD};
pub use ingest::{ingest, ingest_reader, write_csv, FilterConfig};
pub use prepared::{load_prepared, read_prepared, save_prepared, write_prepared, PREPARED_MAGIC};
pub use split::{split_sessions, SplitBy, SplitRatio};
pub use synth::{synthesize, SynthConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("no sessions survive filtering")]
    EmptyDataset,
    #[error("{0}")]
    Contract(String),
    #[error("item index {index} outside vocabulary of {size}")]
    UnknownIndex { index: usize, size: usize },
    #[error("not a prepared dataset (bad magic)")]
    BadMagic,
    #[error("prepared dataset version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("prepared dataset is truncated")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One user's ordered interaction window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    /// Vocabulary indices in time-ascending order.
    pub items: Vec<usize>,
    pub timestamps: Option<Vec<i64>>,
}

impl Session {
    pub fn new(id: impl Into<String>, items: Vec<usize>) -> Self {
        Self {
            id: id.into(),
            items,
            timestamps: None,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Bijective item-id ↔ dense-index map with click counts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    frequency: Vec<u64>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Items named `"0"`, `"1"`, … with zero counts. Used for synthetic data
    /// whose indices are already dense.
    pub fn identity(n: usize) -> Self {
        let mut v = Self::new();
        for i in 0..n {
            v.insert(&i.to_string());
        }
        v
    }

    /// Returns the index for `id`, adding it if absent.
    pub fn insert(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        self.frequency.push(0);
        i
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id_of(&self, index: usize) -> Option<&str> {
        self.ids.get(index).map(String::as_str)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn frequency(&self, index: usize) -> u64 {
        self.frequency[index]
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.frequency
    }

    pub fn set_frequency(&mut self, index: usize, count: u64) {
        self.frequency[index] = count;
    }

    /// Resets counts to the number of clicks in `sessions`.
    pub fn count_from(&mut self, sessions: &[Session]) {
        self.frequency.iter_mut().for_each(|f| *f = 0);
        for s in sessions {
            for &i in &s.items {
                self.frequency[i] += 1;
            }
        }
    }

    /// Maps raw ids to indices, dropping unknown ones. Returns the indices
    /// and the ids that were dropped.
    pub fn encode_lossy<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> (Vec<usize>, Vec<String>) {
        let mut known = Vec::new();
        let mut unknown = Vec::new();
        for id in ids {
            match self.index_of(id) {
                Some(i) => known.push(i),
                None => unknown.push(id.to_owned()),
            }
        }
        (known, unknown)
    }

    /// Stable digest of the id list, used to tie checkpoints to a vocabulary.
    pub fn fingerprint(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update((id.len() as u64).to_le_bytes());
            h.update(id.as_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
    }
}

/// A session prefix paired with its true next item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixExample {
    pub prefix: Vec<usize>,
    pub target: usize,
    pub is_repeat: bool,
}

impl PrefixExample {
    pub fn new(prefix: Vec<usize>, target: usize) -> Self {
        let is_repeat = prefix.contains(&target);
        Self {
            prefix,
            target,
            is_repeat,
        }
    }
}

/// Every prefix of every session, each paired with the item that follows it.
pub fn unroll(sessions: &[Session]) -> Vec<PrefixExample> {
    sessions
        .iter()
        .flat_map(|s| (1..s.items.len()).map(move |k| PrefixExample::new(s.items[..k].to_vec(), s.items[k])))
        .collect()
}

/// Fraction of examples whose target already occurs in the prefix.
pub fn repeat_ratio(examples: &[PrefixExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let repeats = examples.iter().filter(|e| e.is_repeat).count();
    Ok(repeats as f64 / examples.len() as f64)
}

/// Train/validation/test sessions over one shared vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Session>,
    pub validation: Vec<Session>,
    pub test: Vec<Session>,
    pub vocabulary: Vocabulary,
}

impl DatasetSplit {
    /// Checks that every item index is inside the vocabulary.
    pub fn validate(&self) -> Result<()> {
        let size = self.vocabulary.len();
        for s in self.train.iter().chain(&self.validation).chain(&self.test) {
            if let Some(&index) = s.items.iter().find(|&&i| i >= size) {
                return Err(DataError::UnknownIndex { index, size });
            }
        }
        Ok(())
    }

    pub fn splits(&self) -> [(&'static str, &[Session]); 3] {
        [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }
}

/// Per-split counts in the shape of a dataset statistics table.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitStats {
    pub name: &'static str,
    pub sessions: usize,
    pub examples: usize,
    /// `None` for an empty split.
    pub repeat_ratio: Option<f64>,
}

pub fn split_stats(split: &DatasetSplit) -> Vec<SplitStats> {
    split
        .splits()
        .into_iter()
        .map(|(name, sessions)| {
            let ex = unroll(sessions);
            SplitStats {
                name,
                sessions: sessions.len(),
                examples: ex.len(),
                repeat_ratio: repeat_ratio(&ex).ok(),
            }
        })
        .collect()
}
