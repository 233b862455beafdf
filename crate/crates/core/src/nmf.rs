//! Sparse NMF with unit-norm dictionary atoms.
//!
//! Minimizes `‖X − WH‖² + λ‖H‖₁` over non-negative `W` (`F × K`) and `H`
//! (`K × T`) with alternating multiplicative updates. The L1 term makes the
//! problem scale-degenerate, so after every dictionary update the columns of
//! `W` are renormalized to unit Euclidean norm and the rows of `H` rescaled
//! by the same factors, which leaves `WH` unchanged.
//!
//! The activation update is a majorize-minimize step and never increases the
//! objective. The dictionary update followed by renormalization can, because
//! the rescaled activations change `λ‖H‖₁`; it is therefore damped by
//! halving its step until the objective does not increase, and skipped if no
//! damped step qualifies. The recorded objective trace is non-increasing.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classes::Class;
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::tensor::{gemm, load_checkpoint, save_checkpoint, MatMut, MatRef, ParamSet, Tensor};

/// Checkpoint entry name of the dictionary.
pub const CHECKPOINT_NAME: &str = "nmf.W";

/// Floor for every multiplicative-update denominator.
pub const DENOM_FLOOR: f64 = 1e-12;

const MAX_HALVINGS: usize = 6;

/// Non-negative `F × K` dictionary with unit-norm columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary {
    atoms: Tensor,
}

impl Dictionary {
    /// Validates non-negativity and normalizes every column to unit norm.
    /// All-zero columns become the uniform unit vector.
    pub fn new(atoms: Tensor) -> Result<Self> {
        atoms.require_rank2("dictionary")?;
        if atoms.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Domain("dictionary has negative or non-finite entries".into()));
        }
        let (f, k) = (atoms.rows(), atoms.cols());
        let norms = column_norms(&atoms);
        let uniform = 1.0 / (f as f64).sqrt();
        let atoms = Tensor::from_fn(f, k, |r, c| {
            if norms[c] > 0.0 {
                atoms.at(r, c) / norms[c]
            } else {
                uniform
            }
        });
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &Tensor {
        &self.atoms
    }

    pub fn rank(&self) -> usize {
        self.atoms.cols()
    }

    pub fn num_bins(&self) -> usize {
        self.atoms.rows()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.num_bins()).map(|r| self.atoms.at(r, k)).collect()
    }

    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.push(CHECKPOINT_NAME, self.atoms.clone());
        p
    }

    /// Restores a stored dictionary bit-exactly; columns must already be
    /// unit-norm.
    pub fn from_params(params: &ParamSet) -> Result<Self> {
        let atoms = params
            .by_name(CHECKPOINT_NAME)
            .ok_or_else(|| Error::Checkpoint(format!("missing `{CHECKPOINT_NAME}`")))?;
        let normalized = Self::new(atoms.clone())?;
        if normalized.atoms.max_abs_diff(atoms) > 1e-9 {
            return Err(Error::Checkpoint("dictionary columns are not unit-norm".into()));
        }
        Ok(Self {
            atoms: atoms.clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        save_checkpoint(path, &self.to_params())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_params(&load_checkpoint(path)?)
    }

    /// `bins × rank` table with a header row.
    pub fn write_csv<W: Write>(&self, mut w: W, bin_hz: f64) -> Result<()> {
        write!(w, "hz")?;
        for k in 0..self.rank() {
            write!(w, ",atom_{k}")?;
        }
        writeln!(w)?;
        for r in 0..self.num_bins() {
            write!(w, "{}", r as f64 * bin_hz)?;
            for v in self.atoms.row(r) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NmfConfig {
    pub rank: usize,
    pub lambda: f64,
    pub iters: usize,
    pub seed: u64,
    /// Multiplicative updates per factor within one alternation. The
    /// co-factor products are reused, so extra inner steps are cheap.
    pub inner_steps: usize,
}

impl Default for NmfConfig {
    fn default() -> Self {
        Self {
            rank: 256,
            lambda: 0.1,
            iters: 500,
            seed: 0,
            inner_steps: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NmfFit {
    pub dictionary: Dictionary,
    pub activations: Tensor,
    /// Objective after each iteration.
    pub objective_trace: Vec<f64>,
}

fn column_norms(m: &Tensor) -> Vec<f64> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut norms = vec![0.0; cols];
    for r in 0..rows {
        for (c, v) in m.row(r).iter().enumerate() {
            norms[c] += v * v;
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt());
    norms
}

fn check_target(x: &Tensor) -> Result<()> {
    x.require_rank2("nmf target")?;
    if let Some(v) = x.data().iter().find(|&&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Domain(format!(
            "NMF target must be finite and non-negative, found {v}"
        )));
    }
    Ok(())
}

/// `‖X − WH‖² + λ Σ H`, evaluated directly from the residual.
pub fn objective(x: &Tensor, w: &Tensor, h: &Tensor, lambda: f64) -> Result<f64> {
    let wh = w.matmul(h)?;
    if wh.shape() != x.shape() {
        return Err(Error::Shape {
            op: "objective",
            left: x.shape().to_vec(),
            right: wh.shape().to_vec(),
        });
    }
    let rec: f64 = x.data().iter().zip(wh.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(rec + lambda * h.sum())
}

/// Rescales columns of `w` to unit norm and rows of `h` by the inverse
/// factors, so `w·h` is unchanged.
pub fn normalize_columns(w: &mut Tensor, h: &mut Tensor) {
    let norms = column_norms(w);
    let k = w.cols();
    for row in w.data_mut().chunks_mut(k) {
        for (v, &n) in row.iter_mut().zip(&norms) {
            if n > 0.0 {
                *v /= n;
            }
        }
    }
    let t = h.cols();
    for (row, &n) in h.data_mut().chunks_mut(t).zip(&norms) {
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v *= n);
        }
    }
}

fn mm(a: MatRef<'_>, b: MatRef<'_>, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    gemm(a, b, MatMut::row_major(&mut out, rows, cols), false);
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram-form objective: `‖X‖² − 2⟨W, XHᵀ⟩ + ⟨WᵀW, HHᵀ⟩ + λ Σ H`.
struct Objective {
    x_sq: f64,
    lambda: f64,
}

impl Objective {
    fn eval(&self, w_dot_xht: f64, wtw: &[f64], hht: &[f64], h_sum: f64) -> f64 {
        (self.x_sq - 2.0 * w_dot_xht + dot(wtw, hht)).max(0.0) + self.lambda * h_sum
    }
}

struct Factors<'a> {
    x: &'a Tensor,
    f: usize,
    k: usize,
    t: usize,
}

impl Factors<'_> {
    fn xht(&self, h: &[f64]) -> Vec<f64> {
        mm(
            MatRef::row_major(self.x.data(), self.f, self.t),
            MatRef::row_major(h, self.k, self.t).t(),
            self.f,
            self.k,
        )
    }

    fn wtx(&self, w: &[f64]) -> Vec<f64> {
        mm(
            MatRef::row_major(w, self.f, self.k).t(),
            MatRef::row_major(self.x.data(), self.f, self.t),
            self.k,
            self.t,
        )
    }

    fn hht(&self, h: &[f64]) -> Vec<f64> {
        mm(
            MatRef::row_major(h, self.k, self.t),
            MatRef::row_major(h, self.k, self.t).t(),
            self.k,
            self.k,
        )
    }

    fn wtw(&self, w: &[f64]) -> Vec<f64> {
        mm(
            MatRef::row_major(w, self.f, self.k).t(),
            MatRef::row_major(w, self.f, self.k),
            self.k,
            self.k,
        )
    }

    /// One multiplicative activation update against fixed `w`.
    fn update_h(&self, wtx: &[f64], wtw: &[f64], h: &[f64], lambda: f64) -> Vec<f64> {
        let denom = mm(
            MatRef::row_major(wtw, self.k, self.k),
            MatRef::row_major(h, self.k, self.t),
            self.k,
            self.t,
        );
        h.iter()
            .zip(wtx)
            .zip(&denom)
            .map(|((&hv, &num), &den)| hv * num / (den + 0.5 * lambda).max(DENOM_FLOOR))
            .collect()
    }
}

/// Sparse NMF of a non-negative `F × T` matrix.
pub fn sparse_nmf(x: &Tensor, config: &NmfConfig) -> Result<NmfFit> {
    check_target(x)?;
    let (f, t) = (x.rows(), x.cols());
    let k = config.rank;
    if k == 0 || config.iters == 0 || config.inner_steps == 0 {
        return Err(Error::Config("rank and iteration count must be at least 1".into()));
    }
    if k > f.min(t) {
        return Err(Error::Config(format!(
            "rank {k} exceeds min(F, T) = {}",
            f.min(t)
        )));
    }
    if config.lambda < 0.0 {
        return Err(Error::Config("sparsity weight must be non-negative".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w = Tensor::from_fn(f, k, |_, _| rng.gen_range(0.1..1.1));
    let mut h = Tensor::from_fn(k, t, |_, _| rng.gen_range(0.1..1.1));
    normalize_columns(&mut w, &mut h);

    let fac = Factors { x, f, k, t };
    let obj = Objective {
        x_sq: dot(x.data(), x.data()),
        lambda: config.lambda,
    };
    let mut wv = w.into_vec();
    let mut hv = h.into_vec();
    let mut wtw = fac.wtw(&wv);
    let mut hht = fac.hht(&hv);
    let mut current = obj.eval(dot(&wv, &fac.xht(&hv)), &wtw, &hht, hv.iter().sum());
    let mut trace = Vec::with_capacity(config.iters);

    for _ in 0..config.iters {
        // Dictionary step, damped until the objective does not increase.
        let xht = fac.xht(&hv);
        let mut w_mm = wv.clone();
        for _ in 0..config.inner_steps {
            let whht = mm(
                MatRef::row_major(&w_mm, f, k),
                MatRef::row_major(&hht, k, k),
                f,
                k,
            );
            w_mm = w_mm
                .iter()
                .zip(&xht)
                .zip(&whht)
                .map(|((&w, &num), &den)| w * num / den.max(DENOM_FLOOR))
                .collect();
        }
        let mut step = 1.0;
        for _ in 0..MAX_HALVINGS {
            let mut cand_w = Tensor::new(
                vec![f, k],
                wv.iter()
                    .zip(&w_mm)
                    .map(|(&old, &new)| (1.0 - step) * old + step * new)
                    .collect(),
            )?;
            let mut cand_h = Tensor::new(vec![k, t], hv.clone())?;
            normalize_columns(&mut cand_w, &mut cand_h);
            let (cw, ch) = (cand_w.into_vec(), cand_h.into_vec());
            let c_wtw = fac.wtw(&cw);
            let c_hht = fac.hht(&ch);
            let value = obj.eval(dot(&cw, &fac.xht(&ch)), &c_wtw, &c_hht, ch.iter().sum());
            if value <= current {
                wv = cw;
                hv = ch;
                wtw = c_wtw;
                hht = c_hht;
                current = value;
                break;
            }
            step *= 0.5;
        }

        // Activation step.
        let wtx = fac.wtx(&wv);
        let mut new_h = fac.update_h(&wtx, &wtw, &hv, config.lambda);
        for _ in 1..config.inner_steps {
            new_h = fac.update_h(&wtx, &wtw, &new_h, config.lambda);
        }
        let new_hht = fac.hht(&new_h);
        let value = obj.eval(dot(&wtx, &new_h), &wtw, &new_hht, new_h.iter().sum());
        if value <= current {
            hv = new_h;
            hht = new_hht;
            current = value;
        }
        trace.push(current);
    }

    Ok(NmfFit {
        dictionary: Dictionary {
            atoms: Tensor::new(vec![f, k], wv)?,
        },
        activations: Tensor::new(vec![k, t], hv)?,
        objective_trace: trace,
    })
}

/// Activations for `x` against a frozen dictionary.
pub fn infer_activations(
    x: &Tensor,
    dictionary: &Dictionary,
    lambda: f64,
    iters: usize,
) -> Result<Tensor> {
    check_target(x)?;
    let w = dictionary.atoms();
    if x.rows() != w.rows() {
        return Err(Error::Shape {
            op: "infer_activations",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let (f, k, t) = (w.rows(), w.cols(), x.cols());
    let fac = Factors { x, f, k, t };
    let wtx = fac.wtx(w.data());
    let wtw = fac.wtw(w.data());
    let mut h = vec![1.0; k * t];
    for _ in 0..iters {
        h = fac.update_h(&wtx, &wtw, &h, lambda);
    }
    Tensor::new(vec![k, t], h)
}

/// Relative reconstruction error `‖X − WH‖ / ‖X‖`.
pub fn relative_error(x: &Tensor, w: &Tensor, h: &Tensor) -> Result<f64> {
    let rec = objective(x, w, h, 0.0)?;
    let norm = dot(x.data(), x.data());
    Ok(if norm > 0.0 { (rec / norm).sqrt() } else { rec.sqrt() })
}

/// Share of each class in the pretraining pool.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMix {
    pub speech: f64,
    pub music: f64,
    pub noise: f64,
}

impl Default for ClassMix {
    fn default() -> Self {
        Self {
            speech: 0.16,
            music: 0.42,
            noise: 0.42,
        }
    }
}

impl ClassMix {
    /// Per-class segment counts summing to `pool_size`.
    pub fn counts(&self, pool_size: usize) -> [(Class, usize); 3] {
        let total = self.speech + self.music + self.noise;
        let n = |p: f64| ((p / total) * pool_size as f64).round() as usize;
        let speech = n(self.speech).min(pool_size);
        let music = n(self.music).min(pool_size - speech);
        let noise = pool_size - speech - music;
        [(Class::Sad, speech), (Class::Md, music), (Class::Nd, noise)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub nmf: NmfConfig,
    pub pool_size: usize,
    pub mix: ClassMix,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            nmf: NmfConfig::default(),
            pool_size: 1200,
            mix: ClassMix::default(),
            min_duration_s: 1.0,
            max_duration_s: 4.0,
        }
    }
}

/// A single-class candidate segment for dictionary pretraining.
#[derive(Clone, Debug)]
pub struct PoolSegment {
    pub class: Class,
    pub spectrogram: Spectrogram,
}

impl PoolSegment {
    pub fn duration_s(&self) -> f64 {
        let s = &self.spectrogram;
        (s.num_frames().saturating_sub(1)) as f64 * s.frame_step_s + s.frame_len_s
    }
}

/// Learns a dictionary from a segment pool; see [`pretrain`].
pub fn pretrain_dictionary(pool: &[PoolSegment], config: &PretrainConfig) -> Result<Dictionary> {
    pretrain(pool, config).map(|fit| fit.dictionary)
}

/// Samples `pool_size` segments according to the class mix, concatenates
/// them along time and factorizes the result.
pub fn pretrain(pool: &[PoolSegment], config: &PretrainConfig) -> Result<NmfFit> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.nmf.seed ^ 0x5eed_d1c7);
    let mut selected: Vec<&Spectrogram> = Vec::with_capacity(config.pool_size);
    let mut deficits = Vec::new();
    for (class, wanted) in config.mix.counts(config.pool_size) {
        let mut eligible: Vec<&PoolSegment> = pool
            .iter()
            .filter(|s| {
                let d = s.duration_s();
                s.class == class
                    && d >= config.min_duration_s - 1e-9
                    && d <= config.max_duration_s + 1e-9
            })
            .collect();
        if eligible.len() < wanted {
            deficits.push(format!("{class}: need {wanted}, have {}", eligible.len()));
            continue;
        }
        eligible.shuffle(&mut rng);
        selected.extend(eligible[..wanted].iter().map(|s| &s.spectrogram));
    }
    if !deficits.is_empty() {
        return Err(Error::Sampling(deficits.join("; ")));
    }
    let x = Spectrogram::concat(&selected)?;
    sparse_nmf(&x.bins, &config.nmf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_nonneg(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn zero_target_gives_zero_activations() {
        let x = Tensor::zeros(&[6, 10]);
        let fit = sparse_nmf(
            &x,
            &NmfConfig {
                rank: 3,
                lambda: 0.1,
                iters: 50,
                seed: 1,
                ..NmfConfig::default()
            },
        )
        .unwrap();
        assert!(fit.activations.data().iter().all(|&v| v == 0.0));
        assert_eq!(*fit.objective_trace.last().unwrap(), 0.0);
    }

    #[test]
    fn rejects_negative_target_and_oversized_rank() {
        let mut x = random_nonneg(4, 5, 2);
        let cfg = NmfConfig {
            rank: 5,
            ..NmfConfig::default()
        };
        assert!(matches!(sparse_nmf(&x, &cfg), Err(Error::Config(_))));
        x.data_mut()[3] = -0.1;
        let cfg = NmfConfig {
            rank: 2,
            ..NmfConfig::default()
        };
        assert!(matches!(sparse_nmf(&x, &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn normalization_preserves_product() {
        let mut w = random_nonneg(7, 3, 3).map(|v| v * 4.0);
        let mut h = random_nonneg(3, 9, 4);
        let before = w.matmul(&h).unwrap();
        normalize_columns(&mut w, &mut h);
        let after = w.matmul(&h).unwrap();
        assert!(before.max_abs_diff(&after) < 1e-12);
        for n in column_norms(&w) {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trace_matches_direct_objective() {
        let x = random_nonneg(16, 40, 5);
        let cfg = NmfConfig {
            rank: 4,
            lambda: 0.1,
            iters: 30,
            seed: 6,
            ..NmfConfig::default()
        };
        let fit = sparse_nmf(&x, &cfg).unwrap();
        let direct = objective(&x, fit.dictionary.atoms(), &fit.activations, 0.1).unwrap();
        let last = *fit.objective_trace.last().unwrap();
        assert!((direct - last).abs() < 1e-9 * direct.max(1.0));
    }

    #[test]
    fn infer_matches_exact_atom() {
        let w = Dictionary::new(random_nonneg(12, 4, 8)).unwrap();
        for j in 0..4 {
            let x = Tensor::new(vec![12, 1], w.column(j)).unwrap();
            let h = infer_activations(&x, &w, 0.01, 300).unwrap();
            let argmax = (0..4).max_by(|&a, &b| h.at(a, 0).total_cmp(&h.at(b, 0))).unwrap();
            assert_eq!(argmax, j);
        }
        let h = infer_activations(&Tensor::zeros(&[12, 3]), &w, 0.1, 10).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn infer_rejects_bin_mismatch() {
        let w = Dictionary::new(random_nonneg(12, 4, 8)).unwrap();
        assert!(matches!(
            infer_activations(&Tensor::zeros(&[10, 3]), &w, 0.1, 10),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn mix_counts_sum_to_pool() {
        let counts = ClassMix::default().counts(1200);
        assert_eq!(counts[0], (Class::Sad, 192));
        assert_eq!(counts[1], (Class::Md, 504));
        assert_eq!(counts[2], (Class::Nd, 504));
        let small: usize = ClassMix::default().counts(61).iter().map(|c| c.1).sum();
        assert_eq!(small, 61);
    }

    #[test]
    fn dictionary_columns_are_unit_norm() {
        let mut raw = random_nonneg(5, 3, 9);
        for r in 0..5 {
            raw.data_mut()[r * 3 + 1] = 0.0;
        }
        let d = Dictionary::new(raw).unwrap();
        for n in column_norms(d.atoms()) {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
