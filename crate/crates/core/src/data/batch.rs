use super::PrefixExample;

/// Default padding sentinel. Never a valid vocabulary index.
pub const PAD: usize = usize::MAX;

/// Right-padded prefixes of several examples, `size × steps` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<usize>,
    /// `true` at real positions, `false` at padding.
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub targets: Vec<usize>,
    pub is_repeat: Vec<bool>,
    pub size: usize,
    pub steps: usize,
    pub pad: usize,
}

impl Batch {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a PrefixExample>, pad: usize) -> Self {
        let examples: Vec<&PrefixExample> = examples.into_iter().collect();
        let size = examples.len();
        let steps = examples.iter().map(|e| e.prefix.len()).max().unwrap_or(0);
        let mut items = vec![pad; size * steps];
        let mut mask = vec![false; size * steps];
        for (b, e) in examples.iter().enumerate() {
            items[b * steps..b * steps + e.prefix.len()].copy_from_slice(&e.prefix);
            mask[b * steps..b * steps + e.prefix.len()].iter_mut().for_each(|m| *m = true);
        }
        Self {
            items,
            mask,
            lengths: examples.iter().map(|e| e.prefix.len()).collect(),
            targets: examples.iter().map(|e| e.target).collect(),
            is_repeat: examples.iter().map(|e| e.is_repeat).collect(),
            size,
            steps,
            pad,
        }
    }

    /// The unpadded prefix of row `b`.
    pub fn prefix(&self, b: usize) -> &[usize] {
        &self.items[b * self.steps..b * self.steps + self.lengths[b]]
    }

    /// Validity of every position at step `t`, one entry per row.
    pub fn step_mask(&self, t: usize) -> Vec<bool> {
        (0..self.size).map(|b| self.mask[b * self.steps + t]).collect()
    }
}

/// Groups examples into batches of at most `batch_size`, ordered by prefix
/// length (stable) so each batch pads only to its own longest prefix.
pub fn batch(examples: &[PrefixExample], batch_size: usize, pad: usize) -> impl Iterator<Item = Batch> + '_ {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| examples[i].prefix.len());
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks
        .into_iter()
        .map(move |idx| Batch::from_examples(idx.iter().map(|&i| &examples[i]), pad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(len: usize) -> PrefixExample {
        PrefixExample::new((0..len).collect(), 99)
    }

    #[test]
    fn pads_to_batch_max() {
        let examples = vec![ex(5), ex(2), ex(2)];
        let batches: Vec<Batch> = batch(&examples, 2, PAD).collect();
        assert_eq!(batches.iter().map(|b| b.steps).collect::<Vec<_>>(), vec![2, 5]);
        assert_eq!(batches[1].size, 1);
    }

    #[test]
    fn mask_marks_real_positions() {
        let b = Batch::from_examples([&ex(2), &ex(5)], PAD);
        assert_eq!(&b.mask[..5], &[true, true, false, false, false]);
        assert_eq!(&b.items[..5], &[0, 1, PAD, PAD, PAD]);
        assert_eq!(b.prefix(0), &[0, 1]);
        assert_eq!(b.step_mask(3), vec![false, true]);
    }

    #[test]
    fn single_example_single_batch() {
        let examples = vec![ex(3)];
        let batches: Vec<Batch> = batch(&examples, 1024, PAD).collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].size, 1);
        assert!(batches[0].mask.iter().all(|&m| m));
    }
}
