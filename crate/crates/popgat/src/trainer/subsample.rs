//! Equidistant slice-stack subsampling along the axial (z) axis.
//!
//! A volume of `z` slices is divided into `⌊z/s⌋` disjoint stacks of `s`
//! consecutive slices.  When `z` is not a multiple of `s` the remainder is
//! cut from the volume ends: `⌊(z mod s)/2⌋` slices from the start, the
//! rest from the end (odd remainders lose one more slice at the end).
//! During training a patient contributes one uniformly chosen stack per
//! epoch; at test time every slice of the volume is used.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

/// Slice ranges of all stacks, in axial order.
pub fn equidistant_stacks(z: usize, s: usize) -> Result<Vec<Range<usize>>> {
    if s == 0 {
        return Err(Error::InvalidArgument {
            op: "equidistant_stacks",
            reason: "stack size must be positive".into(),
        });
    }
    if z < s {
        return Err(Error::InvalidArgument {
            op: "equidistant_stacks",
            reason: format!("volume has {z} slices, fewer than the stack size {s}"),
        });
    }
    let count = z / s;
    let left_cut = (z % s) / 2;
    Ok((0..count)
        .map(|m| left_cut + m * s..left_cut + (m + 1) * s)
        .collect())
}

/// The stack covering the middle of the volume (lower-middle when the
/// stack count is even); used for per-epoch validation.
pub fn central_stack(z: usize, s: usize) -> Result<Range<usize>> {
    let stacks = equidistant_stacks(z, s)?;
    Ok(stacks[(stacks.len() - 1) / 2].clone())
}

/// One uniformly chosen stack for a training epoch.
pub fn random_stack(z: usize, s: usize, rng: &mut ChaCha8Rng) -> Result<Range<usize>> {
    let stacks = equidistant_stacks(z, s)?;
    Ok(stacks[rng.random_range(0..stacks.len())].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn ninety_six_slices_in_tens_gives_nine_stacks() {
        let stacks = equidistant_stacks(96, 10).unwrap();
        assert_eq!(stacks.len(), 9);
        assert_eq!(stacks[0], 3..13);
        assert_eq!(stacks[8], 83..93);
        // 3 cut at the start, 3 at the end.
        assert_eq!(stacks.last().unwrap().end, 96 - 3);
    }

    #[test]
    fn exact_fit_is_one_stack() {
        assert_eq!(equidistant_stacks(10, 10).unwrap(), vec![0..10]);
    }

    #[test]
    fn odd_remainder_cuts_less_at_the_start() {
        // 7 slices in threes: remainder 1 is cut entirely from the end.
        assert_eq!(equidistant_stacks(7, 3).unwrap(), vec![0..3, 3..6]);
    }

    #[test]
    fn too_few_slices_is_an_error() {
        assert!(equidistant_stacks(4, 5).is_err());
        assert!(equidistant_stacks(4, 0).is_err());
    }

    #[test]
    fn central_stack_sits_in_the_middle() {
        assert_eq!(central_stack(96, 10).unwrap(), 43..53);
        assert_eq!(central_stack(32, 4).unwrap(), 12..16);
        assert_eq!(central_stack(10, 10).unwrap(), 0..10);
    }

    #[test]
    fn random_stack_is_seeded_and_covers_all_choices() {
        let mut rng = stream(3, "stack-test");
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..60 {
            let r = random_stack(32, 4, &mut rng).unwrap();
            assert_eq!(r.len(), 4);
            seen.insert(r.start);
        }
        assert_eq!(seen.len(), 8, "every stack should be drawn eventually");
        let a: Vec<_> = (0..5)
            .map(|_| random_stack(32, 4, &mut stream(9, "stack-det")).unwrap())
            .collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }
}
