//! Segmentation accuracy and wire-volume accounting.

use crate::error::{Error, Result};
use crate::numerics::Grid;

/// Mean IoU in percent over classes that appear in `pred` or `gt`.
pub fn miou(pred: &Grid<u16>, gt: &Grid<u16>, num_classes: usize) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut tp = vec![0u64; num_classes];
    let mut fp = vec![0u64; num_classes];
    let mut fn_ = vec![0u64; num_classes];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(Error::Parameter(format!(
                "label {} >= num_classes {num_classes}",
                p.max(g)
            )));
        }
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let (sum, present) = (0..num_classes)
        .filter_map(|c| {
            let denom = tp[c] + fp[c] + fn_[c];
            (denom > 0).then(|| tp[c] as f64 / denom as f64)
        })
        .fold((0.0, 0usize), |(s, n), iou| (s + iou, n + 1));
    Ok(if present == 0 { 0.0 } else { 100.0 * sum / present as f64 })
}

/// Bytes to ship an `h x w` refinement: a 2-byte label and a 4-byte
/// probability per pixel.
pub fn volume_refinement(h: usize, w: usize) -> u64 {
    (h * w * 6) as u64
}

/// Bytes to ship one mean and one variance per channel at 2 bytes each.
pub fn volume_stats(total_channels: usize) -> u64 {
    (total_channels * 4) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(v: &[u16]) -> Grid<u16> {
        Grid::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn miou_examples() {
        let gt = g(&[0, 0, 1, 1]);
        assert_eq!(miou(&gt, &gt, 2).unwrap(), 100.0);
        let m = miou(&g(&[0, 1, 1, 1]), &gt, 2).unwrap();
        assert!((m - (0.5 + 2.0 / 3.0) / 2.0 * 100.0).abs() < 1e-12);
        assert!((m - 58.33).abs() < 0.01);
        assert_eq!(miou(&g(&[1, 1]), &g(&[0, 0]), 2).unwrap(), 0.0);
        assert!(miou(&g(&[0]), &g(&[0, 0]), 2).is_err());
        assert!(miou(&g(&[3]), &g(&[0]), 2).is_err());
    }

    #[test]
    fn volume_examples() {
        assert_eq!(volume_refinement(600, 400), 1_440_000);
        assert_eq!(volume_refinement(400, 300), 720_000);
        assert_eq!(volume_refinement(1, 1), 6);
        assert_eq!(volume_stats(17872), 71_488);
        assert_eq!(volume_stats(1), 4);
        assert_eq!(2 * volume_stats(17872), 142_976);
    }

    proptest! {
        #[test]
        fn miou_bounded_and_relabel_invariant(
            pairs in proptest::collection::vec((0u16..4, 0u16..4), 1..64),
            perm in Just([0u16, 1, 2, 3]).prop_shuffle(),
        ) {
            let pred = g(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let gt = g(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            let m = miou(&pred, &gt, 4).unwrap();
            prop_assert!((0.0..=100.0).contains(&m));
            let relabeled = miou(&pred.map(|v| perm[v as usize]), &gt.map(|v| perm[v as usize]), 4).unwrap();
            prop_assert!((m - relabeled).abs() < 1e-9);
        }

        #[test]
        fn two_class_symmetry(pairs in proptest::collection::vec((0u16..2, 0u16..2), 1..64)) {
            let pred = g(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let gt = g(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            prop_assert!((miou(&pred, &gt, 2).unwrap() - miou(&gt, &pred, 2).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn volumes_are_linear(h in 1usize..2000, w in 1usize..2000, c in 1usize..100_000) {
            prop_assert_eq!(volume_refinement(h, w), 6 * (h * w) as u64);
            prop_assert_eq!(volume_refinement(2 * h, w), 2 * volume_refinement(h, w));
            prop_assert_eq!(volume_stats(2 * c), 2 * volume_stats(c));
        }
    }
}
