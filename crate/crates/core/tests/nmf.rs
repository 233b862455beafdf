//! Oracle checks for the sparse NMF solver.

use nxsg::dsp::Spectrogram;
use nxsg::nmf::{
    infer_activations, objective, pretrain, pretrain_dictionary, relative_error, sparse_nmf,
    ClassMix, Dictionary, NmfConfig, PoolSegment, PretrainConfig,
};
use nxsg::tensor::Tensor;
use nxsg::{Class, Error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_nonneg(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(0.0..1.0))
}

fn planted(f: usize, t: usize, k: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_nonneg(f, k, &mut rng);
    let h = random_nonneg(k, t, &mut rng);
    (w.matmul(&h).unwrap(), w, h)
}

fn assert_monotone(trace: &[f64]) {
    for (i, pair) in trace.windows(2).enumerate() {
        assert!(
            pair[1] <= pair[0] + 1e-10,
            "objective rose at iteration {}: {} -> {}",
            i + 1,
            pair[0],
            pair[1]
        );
    }
}

#[test]
fn planted_rank_two_is_recovered() {
    for seed in 0..5 {
        let (x, _, _) = planted(8, 20, 2, seed);
        let fit = sparse_nmf(
            &x,
            &NmfConfig {
                rank: 2,
                lambda: 0.0,
                iters: 500,
                seed,
                ..NmfConfig::default()
            },
        )
        .unwrap();
        let err = relative_error(&x, fit.dictionary.atoms(), &fit.activations).unwrap();
        assert!(err < 0.05, "seed {seed}: relative error {err}");
    }
}

#[test]
fn trace_is_monotone_on_random_16_by_40() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_nonneg(16, 40, &mut rng);
    let fit = sparse_nmf(
        &x,
        &NmfConfig {
            rank: 5,
            lambda: 0.1,
            iters: 200,
            seed: 3,
            ..NmfConfig::default()
        },
    )
    .unwrap();
    assert_eq!(fit.objective_trace.len(), 200);
    assert_monotone(&fit.objective_trace);
    assert!(fit.objective_trace[199] < fit.objective_trace[0]);
}

#[test]
fn trace_agrees_with_residual_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_nonneg(10, 30, &mut rng);
    for iters in [1, 7, 40] {
        let fit = sparse_nmf(
            &x,
            &NmfConfig {
                rank: 3,
                lambda: 0.3,
                iters,
                seed: 4,
                ..NmfConfig::default()
            },
        )
        .unwrap();
        let direct = objective(&x, fit.dictionary.atoms(), &fit.activations, 0.3).unwrap();
        let recorded = *fit.objective_trace.last().unwrap();
        assert!((direct - recorded).abs() < 1e-9, "{direct} vs {recorded}");
    }
}

fn full_rank_error(seed: u64, f: usize, t: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_nonneg(f, t, &mut rng);
    let fit = sparse_nmf(
        &x,
        &NmfConfig {
            rank: f.min(t),
            lambda: 0.0,
            iters: 1000,
            seed,
            ..NmfConfig::default()
        },
    )
    .unwrap();
    relative_error(&x, fit.dictionary.atoms(), &fit.activations).unwrap()
}

#[test]
fn full_rank_without_sparsity_fits_closely() {
    for (seed, f, t) in [(13, 6, 9), (1, 8, 8), (2, 4, 12), (3, 10, 20)] {
        let err = full_rank_error(seed, f, t);
        assert!(err < 0.01, "{f}x{t} seed {seed}: relative error {err}");
    }
}

/// Multiplicative updates can stall at a non-global stationary point, so the
/// full-rank fit is checked as a rate over many random problems.
#[test]
fn full_rank_fit_rate_over_random_problems() {
    let mut hits = 0;
    let n = 60;
    for seed in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let f = rng.gen_range(2..9);
        let t = rng.gen_range(2..13);
        if full_rank_error(1000 + seed, f, t) < 0.01 {
            hits += 1;
        }
    }
    assert!(hits * 10 >= n * 9, "only {hits}/{n} full-rank fits below 0.01");
}

#[test]
fn same_seed_same_factors() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random_nonneg(8, 12, &mut rng);
    let cfg = NmfConfig {
        rank: 3,
        lambda: 0.1,
        iters: 50,
        seed: 9,
        ..NmfConfig::default()
    };
    let a = sparse_nmf(&x, &cfg).unwrap();
    let b = sparse_nmf(&x, &cfg).unwrap();
    assert_eq!(a.dictionary, b.dictionary);
    assert_eq!(a.activations, b.activations);
    assert_eq!(a.objective_trace, b.objective_trace);
}

#[test]
fn frozen_true_dictionary_reconstructs() {
    let (x, w, _) = planted(12, 30, 3, 21);
    let dict = Dictionary::new(w).unwrap();
    let h = infer_activations(&x, &dict, 0.0, 500).unwrap();
    assert!(h.data().iter().all(|&v| v >= 0.0));
    let err = relative_error(&x, dict.atoms(), &h).unwrap();
    assert!(err < 0.05, "relative error {err}");
}

fn pool_segment(class: Class, frames: usize, rng: &mut ChaCha8Rng) -> PoolSegment {
    // Each class gets its own band so the pool is separable.
    let band = match class {
        Class::Sad => 0..5,
        Class::Md => 5..10,
        _ => 10..40,
    };
    let bins = Tensor::from_fn(40, frames, |r, _| {
        if band.contains(&r) {
            rng.gen_range(0.5..1.5)
        } else {
            rng.gen_range(0.0..0.05)
        }
    });
    PoolSegment {
        class,
        spectrogram: Spectrogram {
            bins,
            bin_hz: 15.625,
            frame_step_s: 0.02,
            frame_len_s: 0.064,
        },
    }
}

fn desk_pool(per_class: usize, rng: &mut ChaCha8Rng) -> Vec<PoolSegment> {
    let mut pool = Vec::new();
    for class in [Class::Sad, Class::Md, Class::Nd] {
        for i in 0..per_class {
            // 1.0 s .. 2.4 s
            let frames = 50 + (i % 8) * 10;
            pool.push(pool_segment(class, frames, rng));
        }
    }
    pool
}

#[test]
fn desk_pretraining_yields_unit_norm_dictionary() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let pool = desk_pool(30, &mut rng);
    let config = PretrainConfig {
        nmf: NmfConfig {
            rank: 32,
            lambda: 0.1,
            iters: 60,
            seed: 2,
            ..NmfConfig::default()
        },
        pool_size: 60,
        ..PretrainConfig::default()
    };
    let fit = pretrain(&pool, &config).unwrap();
    assert_monotone(&fit.objective_trace);
    let d = fit.dictionary;
    assert_eq!(d.rank(), 32);
    for k in 0..32 {
        let col = d.column(k);
        assert!(col.iter().all(|&v| v >= 0.0));
        let norm: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9, "column {k} norm {norm}");
    }
    assert_eq!(pretrain_dictionary(&pool, &config).unwrap(), d);
}

#[test]
fn undersized_pool_lists_deficits() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut pool = desk_pool(5, &mut rng);
    // Too short to be eligible.
    pool.push(pool_segment(Class::Md, 40, &mut rng));
    let config = PretrainConfig {
        pool_size: 60,
        mix: ClassMix::default(),
        ..PretrainConfig::default()
    };
    match pretrain(&pool, &config) {
        Err(Error::Sampling(msg)) => {
            assert!(msg.contains("SAD: need 10, have 5"), "{msg}");
            assert!(msg.contains("MD: need 25, have 5"), "{msg}");
            assert!(msg.contains("ND"), "{msg}");
        }
        other => panic!("expected sampling error, got {other:?}"),
    }
}

#[test]
fn dictionary_checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let d = Dictionary::new(random_nonneg(9, 4, &mut rng)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dict.ckpt");
    d.save(&path).unwrap();
    assert_eq!(Dictionary::load(&path).unwrap(), d);
    let mut csv = Vec::new();
    d.write_csv(&mut csv, 15.625).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(text.starts_with("hz,atom_0,atom_1,atom_2,atom_3"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn traces_never_increase(seed in 0u64..10_000, f in 2usize..12, t in 2usize..16, lambda in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_nonneg(f, t, &mut rng);
        let rank = rng.gen_range(1..=f.min(t));
        let fit = sparse_nmf(&x, &NmfConfig { rank, lambda, iters: 60, seed, ..NmfConfig::default() }).unwrap();
        for pair in fit.objective_trace.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-10);
        }
        prop_assert!(fit.activations.data().iter().all(|&v| v >= 0.0));
        prop_assert!(fit.dictionary.atoms().data().iter().all(|&v| v >= 0.0));
    }
}
