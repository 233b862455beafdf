//! Frame F1 against a counting oracle, and frame/segment round trips.

use nxsg::distill::LabeledSegments;
use nxsg::evalseg::{frame_f1, frames_to_segments, segments_to_frames};
use nxsg::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_binary(rows: usize, cols: usize, density: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| if rng.gen_bool(density) { 1.0 } else { 0.0 })
}

/// Textbook F1 from explicit frame lists.
fn oracle_f1(pred: &[f64], reference: &[f64]) -> (f64, f64, f64) {
    let predicted: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] == 1.0).collect();
    let actual: Vec<usize> = (0..reference.len()).filter(|&i| reference[i] == 1.0).collect();
    let hits = predicted.iter().filter(|i| actual.contains(i)).count() as f64;
    let p = if predicted.is_empty() { 0.0 } else { hits / predicted.len() as f64 };
    let r = if actual.is_empty() { 0.0 } else { hits / actual.len() as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

#[test]
fn f1_matches_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let t = rng.gen_range(1..60);
        let density = rng.gen_range(0.0..1.0);
        let pred = random_binary(4, t, density, &mut rng);
        let reference = random_binary(4, t, rng.gen_range(0.0..1.0), &mut rng);
        let available: Vec<bool> = (0..4).map(|_| rng.gen_bool(0.8)).collect();
        let labels = LabeledSegments::new(reference.clone(), available.clone()).unwrap();
        let report = frame_f1(&pred, &labels).unwrap();
        for c in 0..4 {
            match (&report.classes[c], available[c]) {
                (Some(k), true) => {
                    let (p, r, f) = oracle_f1(pred.row(c), reference.row(c));
                    assert!((k.precision() - p).abs() < 1e-12);
                    assert!((k.recall() - r).abs() < 1e-12);
                    assert!((k.f1() - f).abs() < 1e-12);
                    assert!((0.0..=1.0).contains(&k.f1()));
                }
                (None, false) => {}
                other => panic!("availability mismatch: {other:?}"),
            }
        }
    }
}

#[test]
fn swapping_roles_swaps_precision_and_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let t = rng.gen_range(1..40);
        let a = random_binary(4, t, 0.5, &mut rng);
        let b = random_binary(4, t, 0.5, &mut rng);
        let ab = frame_f1(&a, &LabeledSegments::fully_labeled(b.clone()).unwrap()).unwrap();
        let ba = frame_f1(&b, &LabeledSegments::fully_labeled(a.clone()).unwrap()).unwrap();
        for c in 0..4 {
            let (x, y) = (ab.classes[c].unwrap(), ba.classes[c].unwrap());
            assert_eq!(x.precision(), y.recall());
            assert_eq!(x.recall(), y.precision());
            assert!((x.f1() - y.f1()).abs() < 1e-15);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn frames_segments_round_trip(bits in prop::collection::vec(any::<bool>(), 0..200), step in prop::sample::select(vec![0.01, 0.02, 0.032])) {
        let t = bits.len();
        let row = Tensor::new(vec![1, t], bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        let segs = frames_to_segments(&row, step, 0.0).unwrap();
        for w in segs.classes[0].windows(2) {
            prop_assert!(w[0].1 < w[1].0);
        }
        for &(on, off) in &segs.classes[0] {
            prop_assert!(off > on);
        }
        prop_assert_eq!(segments_to_frames(&segs, t, step), row);
    }
}
