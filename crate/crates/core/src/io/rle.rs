//! Column-major run-length mask codec. Runs alternate starting with a
//! zero run, so a mask whose first pixel is set begins with a `0` count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BinaryMask;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let (h, w) = (mask.height(), mask.width());
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for c in 0..w {
        for r in 0..h {
            let v = mask.get(r, c);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleMask {
        size: [h, w],
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask> {
    let [h, w] = rle.size;
    let total: u64 = rle.counts.iter().sum();
    if total != (h * w) as u64 {
        return Err(Error::CorruptMask(format!(
            "counts sum to {total}, expected {}",
            h * w
        )));
    }
    if rle.counts.iter().skip(1).any(|&c| c == 0) {
        return Err(Error::CorruptMask("zero-length run after the first".into()));
    }
    let mut mask = BinaryMask::empty(h, w);
    let mut i = 0usize;
    for (k, &n) in rle.counts.iter().enumerate() {
        let on = k % 2 == 1;
        for _ in 0..n {
            if on {
                mask.set(i % h, i / h, true);
            }
            i += 1;
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_masks() {
        assert_eq!(rle_encode(&BinaryMask::empty(3, 4)).counts, vec![12]);
        let ones = BinaryMask::from_fn(3, 4, |_, _| true);
        assert_eq!(rle_encode(&ones).counts, vec![0, 12]);
        assert_eq!(rle_decode(&rle_encode(&ones)).unwrap(), ones);
    }

    #[test]
    fn column_major_order() {
        // 2×2 with only the top-right pixel set: column-major index 2
        let m = BinaryMask::from_fn(2, 2, |r, c| r == 0 && c == 1);
        assert_eq!(rle_encode(&m).counts, vec![2, 1, 1]);
    }

    #[test]
    fn corrupt_counts_rejected() {
        let bad_sum = RleMask { size: [2, 2], counts: vec![1, 2] };
        assert!(matches!(rle_decode(&bad_sum), Err(Error::CorruptMask(_))));
        let inner_zero = RleMask { size: [2, 2], counts: vec![1, 0, 3] };
        assert!(matches!(rle_decode(&inner_zero), Err(Error::CorruptMask(_))));
    }

    proptest! {
        #[test]
        fn round_trip(bits in prop::collection::vec(any::<bool>(), 13 * 9)) {
            let m = BinaryMask::from_vec(13, 9, bits).unwrap();
            let rle = rle_encode(&m);
            prop_assert_eq!(rle.counts.iter().sum::<u64>(), 117);
            prop_assert_eq!(rle_decode(&rle).unwrap(), m);
        }
    }
}
