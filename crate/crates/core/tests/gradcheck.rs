//! Central finite-difference checks for every differentiable primitive.

use nxsg::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Builds the scalar `f(inputs)` and returns it with the analytic gradients.
fn analytic<F>(inputs: &[Tensor], f: &F) -> (f64, Vec<Tensor>)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    (g.value(out).data()[0], grads.collect(&g, &vars))
}

fn eval<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).data()[0]
}

/// Largest relative error between analytic and central-difference gradients,
/// using `max(|a|, |n|, 1e-3)` as the denominator.
fn max_rel_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let (_, grads) = analytic(inputs, &f);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus, &f) - eval(&minus, &f)) / (2.0 * STEP);
            let a = grads[i].data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Sum of `out ⊙ weights` so every output entry gets a distinct sensitivity.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(out));
    let wv = g.constant(w);
    let p = g.mul(out, wv).unwrap();
    g.sum(p)
}

/// Keeps values away from kinks so finite differences are meaningful.
fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
}

#[test]
fn matmul_gradient_of_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let err = max_rel_error(&[a, b], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        g.sum(y)
    });
    assert!(err < 1e-6, "matmul relative error {err}");
}

#[test]
fn conv1d_dilated_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2, 8]);
    let k = random(&mut rng, &[3, 2, 3]);
    let err = max_rel_error(&[x, k], |g, v| {
        let y = g.conv1d_dilated(v[0], v[1], 2).unwrap();
        weighted_sum(g, y, 20)
    });
    assert!(err < 1e-5, "conv relative error {err}");
}

#[test]
fn every_primitive_over_random_configurations() {
    for cfg in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + cfg);
        let rows = rng.gen_range(1..4);
        let cols = rng.gen_range(1..6);
        let a = away_from_zero(random(&mut rng, &[rows, cols]));
        let b = away_from_zero(random(&mut rng, &[rows, cols]));
        let s = away_from_zero(random(&mut rng, &[1]));
        let dil = rng.gen_range(1..4);
        let kernel = random(&mut rng, &[2, rows, 3]);
        let dw = random(&mut rng, &[rows, 3]);
        let bias = random(&mut rng, &[rows]);
        let inner = rng.gen_range(1..4);
        let m = random(&mut rng, &[cols, inner]);

        let checks: Vec<(&str, f64)> = vec![
            ("add", max_rel_error(&[a.clone(), b.clone()], |g, v| {
                let y = g.add(v[0], v[1]).unwrap();
                weighted_sum(g, y, cfg)
            })),
            ("sub", max_rel_error(&[a.clone(), s.clone()], |g, v| {
                let y = g.sub(v[0], v[1]).unwrap();
                weighted_sum(g, y, cfg)
            })),
            ("mul", max_rel_error(&[a.clone(), b.clone()], |g, v| {
                let y = g.mul(v[0], v[1]).unwrap();
                weighted_sum(g, y, cfg)
            })),
            ("mul-scalar", max_rel_error(&[s.clone(), b.clone()], |g, v| {
                let y = g.mul(v[0], v[1]).unwrap();
                weighted_sum(g, y, cfg)
            })),
            ("relu", max_rel_error(std::slice::from_ref(&a), |g, v| {
                let y = g.relu(v[0]);
                weighted_sum(g, y, cfg)
            })),
            ("sigmoid", max_rel_error(std::slice::from_ref(&a), |g, v| {
                let y = g.sigmoid(v[0]);
                weighted_sum(g, y, cfg)
            })),
            ("log", max_rel_error(&[a.map(|x| x.abs() + 0.2)], |g, v| {
                let y = g.log(v[0]);
                weighted_sum(g, y, cfg)
            })),
            ("abs", max_rel_error(std::slice::from_ref(&a), |g, v| {
                let y = g.abs(v[0]);
                weighted_sum(g, y, cfg)
            })),
            ("clamp", max_rel_error(std::slice::from_ref(&a), |g, v| {
                let y = g.clamp(v[0], -0.97, 1.03);
                weighted_sum(g, y, cfg)
            })),
            ("mean", max_rel_error(std::slice::from_ref(&a), |g, v| {
                let y = g.scale(v[0], 1.7);
                let y = g.offset(y, 0.3);
                let sq = g.mul(y, y).unwrap();
                g.mean(sq)
            })),
            ("matmul", max_rel_error(&[a.clone(), m.clone()], |g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                weighted_sum(g, y, cfg)
            })),
            ("transpose", max_rel_error(std::slice::from_ref(&a), |g, v| {
                let y = g.transpose(v[0]).unwrap();
                weighted_sum(g, y, cfg)
            })),
            ("conv1d", max_rel_error(&[a.clone(), kernel.clone()], |g, v| {
                let y = g.conv1d_dilated(v[0], v[1], dil).unwrap();
                weighted_sum(g, y, cfg)
            })),
            ("depthwise", max_rel_error(&[a.clone(), dw.clone()], |g, v| {
                let y = g.depthwise_conv1d(v[0], v[1], dil).unwrap();
                weighted_sum(g, y, cfg)
            })),
            ("add_bias", max_rel_error(&[a.clone(), bias.clone()], |g, v| {
                let y = g.add_bias(v[0], v[1]).unwrap();
                weighted_sum(g, y, cfg)
            })),
        ];
        for (name, err) in checks {
            assert!(err < 1e-4, "config {cfg}: {name} relative error {err}");
        }
    }
}

#[test]
fn chain_conv_relu_matmul_sigmoid_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[3, 6]);
    let k = random(&mut rng, &[4, 3, 3]);
    let theta = random(&mut rng, &[4, 2]);
    let target = Tensor::from_fn(2, 6, |r, c| ((r + c) % 2) as f64);
    let err = max_rel_error(&[x, k, theta], |g, v| {
        let h = g.conv1d_dilated(v[0], v[1], 2).unwrap();
        let h = g.relu(h);
        let tt = g.transpose(v[2]).unwrap();
        let logits = g.matmul(tt, h).unwrap();
        let p = g.sigmoid(logits);
        let y = g.constant(target.clone());
        let d = g.sub(p, y).unwrap();
        let sq = g.mul(d, d).unwrap();
        g.mean(sq)
    });
    assert!(err < 1e-4, "chain relative error {err}");
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[3, 10]);
    let k = random(&mut rng, &[5, 3, 3]);
    let run = || {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let y = g.conv1d_dilated(xv, kv, 4).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}
