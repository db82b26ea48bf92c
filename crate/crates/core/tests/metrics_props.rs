use proptest::prelude::*;

use segkit::metrics::{class_frequencies, metrics, rareness_weights, ClassStats, ConfusionMatrix};
use segkit::tensor::LabelMap;

fn matrix(classes: usize) -> impl Strategy<Value = Vec<Vec<u64>>> {
    prop::collection::vec(prop::collection::vec(0u64..50, classes), classes)
}

fn prediction(classes: u8) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(0..classes, 12).prop_map(|d| LabelMap::new(3, 4, d).unwrap())
}

fn label_map(classes: u8) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(prop_oneof![8 => 0..classes, 1 => Just(255u8)], 12)
        .prop_map(|d| LabelMap::new(3, 4, d).unwrap())
}

#[test]
fn two_class_reference_values() {
    let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![0, 4]]).unwrap();
    let m = metrics(&cm).unwrap();
    assert_eq!((m.pixel_acc, m.mean_acc, m.mean_iou), (0.875, 0.875, 0.775));
}

proptest! {
    #[test]
    fn metrics_are_scale_invariant(rows in matrix(3), k in 2u64..7) {
        let cm = ConfusionMatrix::from_rows(&rows).unwrap();
        prop_assume!(cm.total() > 0);
        let scaled: Vec<Vec<u64>> = rows.iter().map(|r| r.iter().map(|v| v * k).collect()).collect();
        let a = metrics(&cm).unwrap();
        let b = metrics(&ConfusionMatrix::from_rows(&scaled).unwrap()).unwrap();
        prop_assert!((a.pixel_acc - b.pixel_acc).abs() < 1e-12);
        prop_assert!((a.mean_acc - b.mean_acc).abs() < 1e-12);
        prop_assert!((a.mean_iou - b.mean_iou).abs() < 1e-12);
    }

    #[test]
    fn metrics_lie_in_unit_interval_and_hit_one_only_on_diagonals(rows in matrix(3)) {
        let cm = ConfusionMatrix::from_rows(&rows).unwrap();
        prop_assume!(cm.total() > 0);
        let m = metrics(&cm).unwrap();
        for v in [m.pixel_acc, m.mean_acc, m.mean_iou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let diagonal = (0..3).all(|i| (0..3).all(|j| i == j || rows[i][j] == 0));
        prop_assert_eq!(m.pixel_acc == 1.0 && m.mean_acc == 1.0 && m.mean_iou == 1.0, diagonal);
    }

    #[test]
    fn image_order_does_not_change_the_confusion(pairs in prop::collection::vec((prediction(3), label_map(3)), 1..6),
                                                 rot in 0usize..6) {
        let mut a = ConfusionMatrix::new(3);
        for (p, t) in &pairs {
            a.accumulate(p, t, 255).unwrap();
        }
        let mut b = ConfusionMatrix::new(3);
        let n = pairs.len();
        for i in (0..n).rev().map(|i| (i + rot) % n) {
            b.accumulate(&pairs[i].0, &pairs[i].1, 255).unwrap();
        }
        prop_assert_eq!(a, b);
    }

    #[test]
    fn void_pixels_are_never_counted(maps in prop::collection::vec(label_map(3), 1..4)) {
        let mut cm = ConfusionMatrix::new(3);
        let mut non_void = 0u64;
        for m in &maps {
            let pred = LabelMap::new(3, 4, m.data.iter().map(|&v| if v == 255 { 0 } else { v }).collect()).unwrap();
            cm.accumulate(&pred, m, 255).unwrap();
            non_void += m.data.iter().filter(|&&v| v != 255).count() as u64;
        }
        prop_assert_eq!(cm.total(), non_void);
        if non_void > 0 {
            let f = class_frequencies(maps.iter(), 3, 255).unwrap();
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_theta_never_lowers_a_weight(freq in prop::collection::vec(1e-5f64..1.0, 2..6), theta in 1e-4f64..0.45) {
        let total: f64 = freq.iter().sum();
        let freq: Vec<f64> = freq.iter().map(|f| f / total).collect();
        let lo = rareness_weights(&freq, theta, 10.0);
        let hi = rareness_weights(&freq, 2.0 * theta, 10.0);
        for (a, b) in lo.iter().zip(&hi) {
            prop_assert!(b >= a);
        }
        let stats = ClassStats::new(freq.clone(), theta, 10.0).unwrap();
        for (c, &f) in freq.iter().enumerate() {
            prop_assert_eq!(stats.rare.contains(&c), f < theta);
            if f >= theta {
                prop_assert_eq!(stats.weights[c], 1.0);
            }
        }
    }
}
