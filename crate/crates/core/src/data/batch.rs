use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::PairedExample;
use crate::tensor::Rng;

/// Tag value written at padded positions.
pub const IGNORE_TAG: usize = usize::MAX;

/// A group of examples. The model runs each sentence at its own length, so
/// padding is only materialized on request.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub examples: Vec<&'a PairedExample>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(|e| e.len()).max().unwrap_or(0)
    }

    /// Token ids padded with `pad` to the longest sentence.
    pub fn padded_ids(&self, pad: usize) -> Vec<Vec<usize>> {
        let n = self.max_len();
        self.examples
            .iter()
            .map(|e| {
                let mut v = e.ids.clone();
                v.resize(n, pad);
                v
            })
            .collect()
    }

    /// Tags padded with [`IGNORE_TAG`].
    pub fn padded_tags(&self) -> Vec<Vec<usize>> {
        let n = self.max_len();
        self.examples
            .iter()
            .map(|e| {
                let mut v = e.tags.clone();
                v.resize(n, IGNORE_TAG);
                v
            })
            .collect()
    }
}

/// Consecutive batches of at most `batch_size` examples, shuffled first
/// when a seed is given.
///
/// # Panics
/// If `batch_size` is zero.
pub fn batch_iter(
    examples: &[PairedExample],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> impl Iterator<Item = Batch<'_>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut Rng::seed_from_u64(seed));
    }
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |c| Batch {
        examples: c.into_iter().map(|i| &examples[i]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(n: usize) -> PairedExample {
        PairedExample {
            ids: vec![5; n],
            tags: vec![0; n],
            patches: None,
            has_image: false,
        }
    }

    #[test]
    fn sizes_and_padding() {
        let data: Vec<_> = (1..=5).map(ex).collect();
        let sizes: Vec<usize> = batch_iter(&data, 2, None).map(|b| b.len()).collect();
        assert_eq!(sizes, [2, 2, 1]);
        let b = batch_iter(&data, 2, None).next().unwrap();
        assert_eq!(b.padded_ids(0), vec![vec![5, 0], vec![5, 5]]);
        assert_eq!(b.padded_tags()[0], vec![0, IGNORE_TAG]);
    }

    #[test]
    fn shuffle_is_seeded() {
        let data: Vec<_> = (1..=20).map(ex).collect();
        let order = |s| -> Vec<usize> {
            batch_iter(&data, 3, Some(s))
                .flat_map(|b| b.examples.iter().map(|e| e.len()).collect::<Vec<_>>())
                .collect()
        };
        assert_eq!(order(4), order(4));
        assert_ne!(order(4), order(5));
        let mut sorted = order(4);
        sorted.sort();
        assert_eq!(sorted, (1..=20).collect::<Vec<_>>());
    }
}
