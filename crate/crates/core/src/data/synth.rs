use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, Result, Session};

/// Parameters of the synthetic session generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_items: usize,
    pub num_sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Chance that each next item is copied from the current prefix.
    pub repeat_prob: f64,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_items: 50,
            num_sessions: 1000,
            min_len: 3,
            max_len: 10,
            repeat_prob: 0.5,
            zipf_exponent: 1.0,
            seed: 42,
        }
    }
}

/// Generates sessions over items `0..num_items`.
///
/// The first item and every explore step draw from a Zipf popularity law
/// (item 0 most popular); repeat steps pick uniformly among prefix positions.
/// Timestamps are strictly increasing across the whole output.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<Session>> {
    if !(0.0..=1.0).contains(&cfg.repeat_prob) {
        return Err(DataError::Contract(format!("repeat-prob {} outside [0, 1]", cfg.repeat_prob)));
    }
    if cfg.num_items < 2 {
        return Err(DataError::Contract("synth needs at least 2 items".into()));
    }
    if cfg.min_len < 2 || cfg.min_len > cfg.max_len {
        return Err(DataError::Contract(format!(
            "session length range ({}, {}) must satisfy 2 <= min <= max",
            cfg.min_len, cfg.max_len
        )));
    }
    if !(cfg.zipf_exponent.is_finite() && cfg.zipf_exponent >= 0.0) {
        return Err(DataError::Contract(format!("zipf exponent {} is invalid", cfg.zipf_exponent)));
    }

    let weights = (1..=cfg.num_items).map(|rank| (rank as f64).powf(-cfg.zipf_exponent));
    let popularity = WeightedIndex::new(weights).map_err(|e| DataError::Contract(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clock = 0i64;

    let sessions = (0..cfg.num_sessions)
        .map(|s| {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let mut items = Vec::with_capacity(len);
            items.push(popularity.sample(&mut rng));
            while items.len() < len {
                let next = if rng.gen_bool(cfg.repeat_prob) {
                    items[rng.gen_range(0..items.len())]
                } else {
                    popularity.sample(&mut rng)
                };
                items.push(next);
            }
            let timestamps = (0..len)
                .map(|_| {
                    clock += 1;
                    clock
                })
                .collect();
            Session {
                id: format!("s{s}"),
                items,
                timestamps: Some(timestamps),
            }
        })
        .collect();
    Ok(sessions)
}
