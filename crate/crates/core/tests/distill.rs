//! Loss oracles and small training runs.

use nxsg::distill::{
    composite_graph, composite_loss, distill_proxy, kd_divergence, masked_bce, nmf_graph,
    nmf_loss, train_teacher, Example, LabeledSegments, LossWeights, Reduction, TrainConfig,
};
use nxsg::nmf::Dictionary;
use nxsg::segnet::{ProxyConfig, ProxyModel, TcnConfig, TeacherModel};
use nxsg::tensor::{AdamConfig, Graph, ParamSet, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const F: usize = 6;
const K: usize = 3;

fn tiny_tcn(output_dim: usize) -> TcnConfig {
    TcnConfig {
        input_dim: F,
        bottleneck_channels: 4,
        hidden_channels: 6,
        blocks: 1,
        layers_per_block: 2,
        kernel_len: 3,
        output_dim,
    }
}

fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
}

fn dictionary(seed: u64) -> Dictionary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dictionary::new(random(F, K, 0.0, 1.0, &mut rng)).unwrap()
}

fn proxy(w_trainable: bool, seed: u64) -> ProxyModel {
    let cfg = ProxyConfig {
        psi: tiny_tcn(K),
        num_classes: 4,
        w_trainable,
    };
    ProxyModel::new(cfg, dictionary(seed), seed).unwrap()
}

/// Toy examples: class `c` is active where band `c` of the input is loud.
fn toy_examples(n: usize, frames: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let active: Vec<Vec<bool>> = (0..4)
                .map(|_| {
                    let on = rng.gen_range(0..frames);
                    let off = rng.gen_range(on..=frames);
                    (0..frames).map(|t| t >= on && t < off).collect()
                })
                .collect();
            let input = Tensor::from_fn(F, frames, |r, t| {
                let c = r.min(3);
                let base = if active[c][t] { 2.0 } else { 0.1 };
                base + rng.gen_range(0.0..0.2)
            });
            let labels = Tensor::from_fn(4, frames, |c, t| if active[c][t] { 1.0 } else { 0.0 });
            Example {
                input,
                target: LabeledSegments::fully_labeled(labels).unwrap(),
            }
        })
        .collect()
}

fn perturbed(params: &ParamSet, i: usize, j: usize, delta: f64) -> ParamSet {
    let mut p = params.clone();
    p.get_mut(i).data_mut()[j] += delta;
    p
}

fn composite_grad_error(w_trainable: bool, reduction: Reduction, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = proxy(w_trainable, seed);
    let input = random(F, 4, 0.0, 2.0, &mut rng);
    let teacher_p = random(4, 4, 0.05, 0.95, &mut rng);
    let weights = LossWeights {
        nmf_reduction: reduction,
        ..LossWeights::default()
    };

    let mut g = Graph::new();
    let p = g.bind(model.params(), true);
    let x = g.constant(input.clone());
    let out = model.forward_graph(&mut g, &p, x).unwrap();
    let (loss, _) = composite_graph(&mut g, &out, &teacher_p, &input, &weights).unwrap();
    let grads = g.backward(loss).unwrap().collect(&g, &p);

    let step = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..model.params().len() {
        for j in 0..model.params().get(i).numel() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                *m.params_mut() = perturbed(model.params(), i, j, delta);
                composite_loss(&m, &input, &teacher_p, &weights).unwrap().total
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            let a = grads[i].data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

#[test]
fn composite_gradient_matches_finite_differences() {
    for seed in 0..4 {
        let reduction = if seed < 2 { Reduction::Sum } else { Reduction::Mean };
        let err = composite_grad_error(seed % 2 == 1, reduction, seed);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn nmf_gradient_is_two_wt_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random(F, K, 0.0, 1.0, &mut rng);
    let h = random(K, 5, 0.0, 1.0, &mut rng);
    let x = random(F, 5, 0.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let wv = g.constant(w.clone());
    let hv = g.param(&h);
    let rec = g.matmul(wv, hv).unwrap();
    let loss = nmf_graph(&mut g, &x, rec).unwrap();
    let grad = g.backward(loss).unwrap().get(hv).unwrap().clone();

    // Closed form 2·Wᵀ(WH − X).
    let resid = Tensor::from_fn(F, 5, |r, c| {
        (0..K).map(|k| w.at(r, k) * h.at(k, c)).sum::<f64>() - x.at(r, c)
    });
    let closed = Tensor::from_fn(K, 5, |k, c| {
        2.0 * (0..F).map(|r| w.at(r, k) * resid.at(r, c)).sum::<f64>()
    });
    assert!(grad.max_abs_diff(&closed) < 1e-12);

    // And central differences.
    let step = 1e-6;
    for j in 0..h.numel() {
        let eval = |d: f64| {
            let mut hp = h.clone();
            hp.data_mut()[j] += d;
            nxsg::distill::nmf_loss(&x, &w, &hp).unwrap()
        };
        let numeric = (eval(step) - eval(-step)) / (2.0 * step);
        let a = grad.data()[j];
        assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3) < 1e-6);
    }
}

#[test]
fn pure_kd_weights_reduce_to_kd() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = proxy(false, 4);
    let input = random(F, 7, 0.0, 2.0, &mut rng);
    let teacher_p = random(4, 7, 0.0, 1.0, &mut rng);
    let weights = LossWeights {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
        ..LossWeights::default()
    };
    let parts = composite_loss(&model, &input, &teacher_p, &weights).unwrap();
    let out = model.forward(&input).unwrap();
    let kd = kd_divergence(&teacher_p, &out.probs).unwrap();
    assert!((parts.total - kd).abs() < 1e-12);
    assert!((parts.kd - kd).abs() < 1e-12);
}

#[test]
fn mean_reduction_divides_by_entry_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = proxy(false, 12);
    let input = random(F, 6, 0.0, 2.0, &mut rng);
    let teacher_p = random(4, 6, 0.0, 1.0, &mut rng);
    let only_nmf = |r| LossWeights {
        alpha: 0.0,
        beta: 1.0,
        gamma: 0.0,
        nmf_reduction: r,
    };
    let sum = composite_loss(&model, &input, &teacher_p, &only_nmf(Reduction::Sum)).unwrap();
    let mean = composite_loss(&model, &input, &teacher_p, &only_nmf(Reduction::Mean)).unwrap();
    let out = model.forward(&input).unwrap();
    let direct = nmf_loss(&input, &model.effective_dictionary(), &out.h).unwrap();
    assert!((sum.total - direct).abs() < 1e-9 * direct);
    assert!((mean.total - direct / (F * 6) as f64).abs() < 1e-12 * direct);
    assert_eq!(mean.nmf, mean.total);
}

#[test]
fn components_are_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..20 {
        let model = proxy(seed % 2 == 0, seed);
        let input = random(F, 9, 0.0, 3.0, &mut rng);
        let teacher_p = random(4, 9, 0.0, 1.0, &mut rng);
        let parts = composite_loss(&model, &input, &teacher_p, &LossWeights::default()).unwrap();
        assert!(parts.kd >= 0.0 && parts.nmf >= 0.0 && parts.l1 >= 0.0, "{parts:?}");
    }
}

#[test]
fn spurious_unavailable_row_never_changes_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let t = rng.gen_range(1..12);
        let logits = random(2, t, -4.0, 4.0, &mut rng);
        let y = Tensor::from_fn(2, t, |_, _| rng.gen_range(0..2) as f64);
        let base = masked_bce(&logits, &LabeledSegments::fully_labeled(y.clone()).unwrap()).unwrap();
        let extra_logit = random(1, t, -9.0, 9.0, &mut rng);
        let extra_y = Tensor::from_fn(1, t, |_, _| rng.gen_range(0..2) as f64);
        let stack = |a: &Tensor, b: &Tensor| {
            Tensor::new(vec![3, t], [a.data(), b.data()].concat()).unwrap()
        };
        let masked = LabeledSegments::new(stack(&y, &extra_y), vec![true, true, false]).unwrap();
        let with_row = masked_bce(&stack(&logits, &extra_logit), &masked).unwrap();
        assert_eq!(base, with_row);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kd_is_non_negative(p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
        let kd = kd_divergence(&Tensor::full(&[1, 1], p), &Tensor::full(&[1, 1], q)).unwrap();
        prop_assert!(kd >= -1e-15);
        let same = kd_divergence(&Tensor::full(&[1, 1], p), &Tensor::full(&[1, 1], p)).unwrap();
        prop_assert!(same.abs() < 1e-15);
    }
}

fn small_train_config(batch: usize, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: batch,
        crop_frames: 20,
        adam: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        patience: 100,
        seed,
        checkpoint_dir: None,
    }
}

#[test]
fn teacher_training_is_deterministic() {
    let data = toy_examples(4, 30, 7);
    let run = || {
        let model = TeacherModel::new(tiny_tcn(4), 1).unwrap();
        train_teacher(model, &data, &[], &small_train_config(4, 1, 2)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log.steps, b.log.steps);
    assert_eq!(a.model.params().tensors(), b.model.params().tensors());
}

#[test]
fn teacher_loss_drops_on_toy_data() {
    let data = toy_examples(16, 30, 8);
    let model = TeacherModel::new(tiny_tcn(4), 1).unwrap();
    let trained = train_teacher(model, &data, &[], &small_train_config(8, 40, 3)).unwrap();
    let first = trained.log.epochs[0].train_loss;
    let last = trained.log.epochs.last().unwrap().train_loss;
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn too_few_segments_for_a_batch() {
    let data = toy_examples(3, 30, 9);
    let model = TeacherModel::new(tiny_tcn(4), 1).unwrap();
    assert!(train_teacher(model, &data, &[], &small_train_config(4, 1, 0)).is_err());
}

#[test]
fn distillation_keeps_teacher_frozen_and_fits_one_batch() {
    let data = toy_examples(4, 20, 10);
    let teacher = TeacherModel::new(tiny_tcn(4), 11).unwrap();
    let before: Vec<Tensor> = teacher.params().tensors().to_vec();
    let weights = LossWeights {
        alpha: 10.0,
        beta: 0.0,
        gamma: 0.0,
        ..LossWeights::default()
    };
    let cfg = ProxyConfig {
        psi: tiny_tcn(K),
        num_classes: 4,
        w_trainable: false,
    };
    let trained = distill_proxy(
        &teacher,
        dictionary(12),
        cfg,
        &data,
        &[],
        &weights,
        &small_train_config(4, 400, 13),
    )
    .unwrap();
    assert_eq!(teacher.params().tensors(), &before[..]);
    let kd_col = trained.log.header.iter().position(|h| *h == "kd").unwrap();
    let last_kd = trained.log.steps.last().unwrap()[kd_col];
    assert!(last_kd < 0.01, "kd after overfitting {last_kd}");
}

#[test]
fn distillation_rejects_rank_mismatch() {
    let data = toy_examples(4, 20, 10);
    let teacher = TeacherModel::new(tiny_tcn(4), 11).unwrap();
    let cfg = ProxyConfig {
        psi: tiny_tcn(K + 1),
        num_classes: 4,
        w_trainable: false,
    };
    let err = distill_proxy(
        &teacher,
        dictionary(12),
        cfg,
        &data,
        &[],
        &LossWeights::default(),
        &small_train_config(4, 1, 13),
    );
    assert!(matches!(err, Err(nxsg::Error::Config(_))));
}

#[test]
fn checkpoints_written_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_examples(4, 30, 7);
    let model = TeacherModel::new(tiny_tcn(4), 1).unwrap();
    let cfg = TrainConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..small_train_config(4, 3, 2)
    };
    let trained = train_teacher(model, &data, &data, &cfg).unwrap();
    for e in 1..=3 {
        assert!(dir.path().join(format!("teacher_epoch{e:03}.ckpt")).exists());
    }
    let mut csv = Vec::new();
    trained.log.write_steps_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("step,epoch,bce,lr\n1,1,"));
}
