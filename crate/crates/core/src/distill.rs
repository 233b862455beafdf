//! Training objectives and loops for the teacher and the distilled proxy.
//!
//! The teacher is trained with a masked binary cross-entropy against frame
//! labels. The proxy is trained against the frozen teacher's probabilities
//! with `α·KD + β·‖X − WH‖² + γ·mean|H|`, where KD is the binary KL
//! divergence with the teacher as the reference distribution.
//!
//! Every loss exists twice: as graph operations for training, and as plain
//! evaluators on tensors. The graph forms are what the optimizer sees; the
//! plain forms are used for reporting and as test oracles.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classes::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::nmf::Dictionary;
use crate::segnet::{ProxyConfig, ProxyModel, ProxyVars, TeacherModel};
use crate::tensor::{Adam, AdamConfig, Graph, ParamSet, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// How the reconstruction error is reduced before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// Sum of squared entries.
    #[default]
    Sum,
    /// Mean over the `F × T` entries.
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::Config(format!("unknown reduction `{other}` (sum or mean)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub nmf_reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 5.0,
            gamma: 0.1,
            nmf_reduction: Reduction::Sum,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }
}

/// Binary frame labels (`C × T`) with per-class annotation availability.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSegments {
    pub labels: Tensor,
    pub available: Vec<bool>,
}

impl LabeledSegments {
    pub fn new(labels: Tensor, available: Vec<bool>) -> Result<Self> {
        labels.require_rank2("labels")?;
        if available.len() != labels.rows() {
            return Err(Error::Shape {
                op: "labels",
                left: labels.shape().to_vec(),
                right: vec![available.len()],
            });
        }
        if labels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain("labels must be 0 or 1".into()));
        }
        Ok(Self { labels, available })
    }

    /// All classes annotated.
    pub fn fully_labeled(labels: Tensor) -> Result<Self> {
        let c = labels.rows();
        Self::new(labels, vec![true; c])
    }

    pub fn num_frames(&self) -> usize {
        self.labels.cols()
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        Self {
            labels: slice_cols(&self.labels, start, end),
            available: self.available.clone(),
        }
    }
}

fn slice_cols(t: &Tensor, start: usize, end: usize) -> Tensor {
    let cols = t.cols();
    Tensor::from_fn(t.rows(), end - start, |r, c| t.data()[r * cols + start + c])
}

/// One training segment: input spectrogram bins (`F × T`) and labels.
#[derive(Clone, Debug)]
pub struct Example {
    pub input: Tensor,
    pub target: LabeledSegments,
}

impl Example {
    pub fn num_frames(&self) -> usize {
        self.input.cols()
    }

    pub fn crop(&self, start: usize, len: usize) -> Example {
        let end = (start + len).min(self.num_frames());
        Example {
            input: slice_cols(&self.input, start, end),
            target: self.target.slice_frames(start, end),
        }
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Masked BCE on the graph. Returns the mean over available-class frames.
pub fn masked_bce_graph(g: &mut Graph, logits: Var, target: &LabeledSegments) -> Result<Var> {
    check_same_shape("masked_bce", g.value(logits), &target.labels)?;
    let t = target.num_frames();
    let rows = target.available.iter().filter(|&&a| a).count();
    if rows == 0 {
        return Err(Error::DegenerateBatch("no class is annotated".into()));
    }
    let c = target.labels.rows();
    let mask = |r: usize| if target.available[r] { 1.0 } else { 0.0 };
    let pos = Tensor::from_fn(c, t, |r, col| mask(r) * target.labels.at(r, col));
    let neg = Tensor::from_fn(c, t, |r, col| mask(r) * (1.0 - target.labels.at(r, col)));

    let p = g.sigmoid(logits);
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = g.log(p);
    let q = g.scale(p, -1.0);
    let q = g.offset(q, 1.0);
    let log_q = g.log(q);
    let pos = g.constant(pos);
    let neg = g.constant(neg);
    let a = g.mul(pos, log_p)?;
    let b = g.mul(neg, log_q)?;
    let ll = g.add(a, b)?;
    let total = g.sum(ll);
    Ok(g.scale(total, -1.0 / (rows * t).max(1) as f64))
}

/// Mean binary cross-entropy over available-class frames.
pub fn masked_bce(logits: &Tensor, target: &LabeledSegments) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = masked_bce_graph(&mut g, l, target)?;
    Ok(g.value(loss).data()[0])
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `Σ p ln p + (1−p) ln(1−p)` of the clamped teacher probabilities.
fn neg_entropy(teacher_p: &Tensor) -> f64 {
    teacher_p
        .data()
        .iter()
        .map(|&p| {
            let p = clamp_prob(p);
            p * p.ln() + (1.0 - p) * (1.0 - p).ln()
        })
        .sum()
}

/// Binary KL divergence `KL(teacher ‖ proxy)` on the graph, averaged over
/// classes and frames. `proxy_p` holds probabilities.
pub fn kd_graph(g: &mut Graph, teacher_p: &Tensor, proxy_p: Var) -> Result<Var> {
    check_same_shape("kd_divergence", teacher_p, g.value(proxy_p))?;
    let n = teacher_p.numel().max(1) as f64;
    let p = teacher_p.map(clamp_prob);
    let one_minus_p = p.map(|v| 1.0 - v);
    let q = g.clamp(proxy_p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_q = g.log(q);
    let r = g.scale(q, -1.0);
    let r = g.offset(r, 1.0);
    let log_r = g.log(r);
    let p = g.constant(p);
    let one_minus_p = g.constant(one_minus_p);
    let a = g.mul(p, log_q)?;
    let b = g.mul(one_minus_p, log_r)?;
    let cross = g.add(a, b)?;
    let cross = g.sum(cross);
    let kl = g.scale(cross, -1.0 / n);
    Ok(g.offset(kl, neg_entropy(teacher_p) / n))
}

/// Mean binary KL divergence with the teacher as reference distribution.
pub fn kd_divergence(teacher_p: &Tensor, proxy_p: &Tensor) -> Result<f64> {
    check_same_shape("kd_divergence", teacher_p, proxy_p)?;
    let n = teacher_p.numel().max(1) as f64;
    let total: f64 = teacher_p
        .data()
        .iter()
        .zip(proxy_p.data())
        .map(|(&p, &q)| {
            let (p, q) = (clamp_prob(p), clamp_prob(q));
            p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
        })
        .sum();
    Ok(total / n)
}

/// `‖X − X̃‖²` (sum of squares) on the graph.
pub fn nmf_graph(g: &mut Graph, x: &Tensor, x_rec: Var) -> Result<Var> {
    check_same_shape("nmf_loss", x, g.value(x_rec))?;
    let xv = g.constant(x.clone());
    let d = g.sub(xv, x_rec)?;
    let sq = g.mul(d, d)?;
    Ok(g.sum(sq))
}

/// `‖X − WH‖²` with `W` the dictionary atoms.
pub fn nmf_loss(x: &Tensor, w: &Tensor, h: &Tensor) -> Result<f64> {
    let rec = w.matmul(h)?;
    check_same_shape("nmf_loss", x, &rec)?;
    Ok(x.data().iter().zip(rec.data()).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Unweighted loss components (the reconstruction term after reduction)
/// and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub kd: f64,
    pub nmf: f64,
    pub l1: f64,
    pub total: f64,
}

impl LossParts {
    fn add_scaled(&mut self, other: &LossParts, s: f64) {
        self.kd += s * other.kd;
        self.nmf += s * other.nmf;
        self.l1 += s * other.l1;
        self.total += s * other.total;
    }
}

/// Composite distillation loss on the graph for one segment.
pub fn composite_graph(
    g: &mut Graph,
    out: &ProxyVars,
    teacher_p: &Tensor,
    x: &Tensor,
    weights: &LossWeights,
) -> Result<(Var, LossParts)> {
    let kd = kd_graph(g, teacher_p, out.probs)?;
    let nmf = nmf_graph(g, x, out.x_rec)?;
    let nmf = match weights.nmf_reduction {
        Reduction::Sum => nmf,
        Reduction::Mean => g.scale(nmf, 1.0 / x.numel().max(1) as f64),
    };
    let abs = g.abs(out.h);
    let l1 = g.mean(abs);
    let a = g.scale(kd, weights.alpha);
    let b = g.scale(nmf, weights.beta);
    let c = g.scale(l1, weights.gamma);
    let total = g.add(a, b)?;
    let total = g.add(total, c)?;
    let v = |g: &Graph, var: Var| g.value(var).data()[0];
    let parts = LossParts {
        kd: v(g, kd),
        nmf: v(g, nmf),
        l1: v(g, l1),
        total: v(g, total),
    };
    Ok((total, parts))
}

/// Composite loss of the proxy on one segment against teacher probabilities.
pub fn composite_loss(
    proxy: &ProxyModel,
    input: &Tensor,
    teacher_p: &Tensor,
    weights: &LossWeights,
) -> Result<LossParts> {
    let mut g = Graph::new();
    let p = g.bind(proxy.params(), false);
    let x = g.constant(input.clone());
    let out = proxy.forward_graph(&mut g, &p, x)?;
    Ok(composite_graph(&mut g, &out, teacher_p, input, weights)?.1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Upper bound on epochs; early stopping may end sooner.
    pub epochs: usize,
    pub batch_size: usize,
    /// Training crop length in frames.
    pub crop_frames: usize,
    pub adam: AdamConfig,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// When set, a checkpoint is written after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            crop_frames: 100,
            adam: AdamConfig::default(),
            patience: 5,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

/// Per-step metrics plus per-epoch summaries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub header: Vec<&'static str>,
    pub steps: Vec<Vec<f64>>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

impl TrainLog {
    fn new(header: Vec<&'static str>) -> Self {
        Self {
            header,
            ..Self::default()
        }
    }

    pub fn write_steps_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.header.join(","))?;
        for row in &self.steps {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, v)| if i == 0 { format!("{}", *v as u64) } else { format!("{v}") })
                .collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn write_epochs_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,train_loss,val_loss")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{}", e.epoch, e.train_loss, e.val_loss)?;
        }
        Ok(())
    }

    /// Mean of the `total`-like column (last before `lr`) over an epoch's steps.
    fn epoch_mean(&self, from: usize) -> f64 {
        let rows = &self.steps[from..];
        let col = self.header.len() - 2;
        rows.iter().map(|r| r[col]).sum::<f64>() / rows.len().max(1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct Trained<M> {
    pub model: M,
    pub log: TrainLog,
}

/// Sums per-example gradients in example order so the result does not
/// depend on thread scheduling.
fn reduce_grads(per_example: Vec<Vec<Tensor>>) -> Vec<Tensor> {
    let mut iter = per_example.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for grads in iter {
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
    acc
}

fn check_finite(epoch: usize, step: usize, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Training {
            epoch,
            step,
            reason: format!("loss is {value}"),
        });
    }
    Ok(())
}

/// Shuffled batches of `(example index, crop start)` for one epoch.
fn epoch_batches(
    lens: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<(usize, usize)>> {
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.shuffle(rng);
    let picks: Vec<(usize, usize)> = order
        .into_iter()
        .map(|i| {
            let slack = lens[i].saturating_sub(cfg.crop_frames);
            (i, if slack > 0 { rng.gen_range(0..=slack) } else { 0 })
        })
        .collect();
    picks
        .chunks(cfg.batch_size)
        .filter(|b| b.len() == cfg.batch_size)
        .map(|b| b.to_vec())
        .collect()
}

fn check_train_inputs(train: &[Example], cfg: &TrainConfig) -> Result<()> {
    if cfg.batch_size == 0 || cfg.crop_frames == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch size, crop length and epochs must be positive".into()));
    }
    if train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "{} training segments cannot fill a batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    Ok(())
}

struct EarlyStop {
    best: f64,
    best_epoch: usize,
    best_params: Option<ParamSet>,
    patience: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        Self {
            best: f64::INFINITY,
            best_epoch: 0,
            best_params: None,
            patience,
        }
    }

    /// Records an epoch; returns `true` when training should stop.
    fn observe(&mut self, epoch: usize, val: f64, params: &ParamSet) -> bool {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.best_params = Some(params.clone());
        }
        epoch - self.best_epoch >= self.patience
    }
}

/// Supervised teacher training with masked BCE and early stopping on the
/// validation loss. Returns the best-validation parameters.
pub fn train_teacher(
    mut model: TeacherModel,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
) -> Result<Trained<TeacherModel>> {
    check_train_inputs(train, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut log = TrainLog::new(vec!["step", "epoch", "bce", "lr"]);
    let mut stop = EarlyStop::new(cfg.patience);
    let lens: Vec<usize> = train.iter().map(Example::num_frames).collect();

    for epoch in 1..=cfg.epochs {
        let first_row = log.steps.len();
        for batch in epoch_batches(&lens, cfg, &mut rng) {
            let step = log.steps.len() + 1;
            let scale = 1.0 / batch.len() as f64;
            let results: Vec<Result<(f64, Vec<Tensor>)>> = batch
                .par_iter()
                .map(|&(i, start)| {
                    let ex = train[i].crop(start, cfg.crop_frames);
                    let mut g = Graph::new();
                    let p = g.bind(model.params(), true);
                    let x = g.constant(ex.input);
                    let logits = model.logits_graph(&mut g, &p, x)?;
                    let loss = masked_bce_graph(&mut g, logits, &ex.target)?;
                    let loss = g.scale(loss, scale);
                    let grads = g.backward(loss)?;
                    Ok((g.value(loss).data()[0], grads.collect(&g, &p)))
                })
                .collect();
            let mut total = 0.0;
            let mut per_example = Vec::with_capacity(results.len());
            for r in results {
                let (l, gr) = r?;
                total += l;
                per_example.push(gr);
            }
            check_finite(epoch, step, total)?;
            adam.step(model.params_mut(), &reduce_grads(per_example))?;
            log.steps.push(vec![step as f64, epoch as f64, total, cfg.adam.lr]);
        }
        let train_loss = log.epoch_mean(first_row);
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            mean_result(val.par_iter().map(|ex| {
                let s = model.forward(&ex.input)?;
                masked_bce(&s.logits, &ex.target)
            }))?
        };
        check_finite(epoch, log.steps.len(), val_loss)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if let Some(dir) = &cfg.checkpoint_dir {
            model.save(dir.join(format!("teacher_epoch{epoch:03}.ckpt")))?;
        }
        if stop.observe(epoch, val_loss, model.params()) {
            break;
        }
    }
    finish(model.params_mut(), stop, &mut log)?;
    Ok(Trained { model, log })
}

fn finish(params: &mut ParamSet, stop: EarlyStop, log: &mut TrainLog) -> Result<()> {
    log.best_epoch = stop.best_epoch;
    if let Some(best) = stop.best_params {
        params.load_from(&best)?;
    }
    Ok(())
}

fn mean_result<I>(iter: I) -> Result<f64>
where
    I: IndexedParallelIterator<Item = Result<f64>>,
{
    let values: Vec<Result<f64>> = iter.collect();
    let n = values.len();
    let mut sum = 0.0;
    for v in values {
        sum += v?;
    }
    Ok(sum / n.max(1) as f64)
}

/// Teacher probabilities for each example, computed once on the full segment.
pub fn teacher_targets(teacher: &TeacherModel, examples: &[Example]) -> Result<Vec<Tensor>> {
    examples
        .par_iter()
        .map(|ex| teacher.forward(&ex.input).map(|s| s.probs))
        .collect()
}

/// Knowledge distillation of a proxy from a frozen teacher. Labels in the
/// examples are ignored; only inputs and teacher probabilities are used.
pub fn distill_proxy(
    teacher: &TeacherModel,
    dictionary: Dictionary,
    config: ProxyConfig,
    train: &[Example],
    val: &[Example],
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> Result<Trained<ProxyModel>> {
    weights.validate()?;
    check_train_inputs(train, cfg)?;
    if dictionary.rank() != config.rank() {
        return Err(Error::Config(format!(
            "dictionary rank {} does not match proxy rank {}",
            dictionary.rank(),
            config.rank()
        )));
    }
    if config.num_classes != NUM_CLASSES {
        return Err(Error::Config(format!("proxy must emit {NUM_CLASSES} classes")));
    }
    let mut model = ProxyModel::new(config, dictionary, cfg.seed)?;
    let train_p = teacher_targets(teacher, train)?;
    let val_p = teacher_targets(teacher, val)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut log = TrainLog::new(vec!["step", "epoch", "kd", "nmf", "l1", "total", "lr"]);
    let mut stop = EarlyStop::new(cfg.patience);
    let lens: Vec<usize> = train.iter().map(Example::num_frames).collect();

    for epoch in 1..=cfg.epochs {
        let first_row = log.steps.len();
        for batch in epoch_batches(&lens, cfg, &mut rng) {
            let step = log.steps.len() + 1;
            let scale = 1.0 / batch.len() as f64;
            let results: Vec<Result<(LossParts, Vec<Tensor>)>> = batch
                .par_iter()
                .map(|&(i, start)| {
                    let ex = &train[i];
                    let end = (start + cfg.crop_frames).min(ex.num_frames());
                    let input = slice_cols(&ex.input, start, end);
                    let target = slice_cols(&train_p[i], start, end);
                    let mut g = Graph::new();
                    let p = g.bind(model.params(), true);
                    let x = g.constant(input.clone());
                    let out = model.forward_graph(&mut g, &p, x)?;
                    let (loss, parts) = composite_graph(&mut g, &out, &target, &input, weights)?;
                    let loss = g.scale(loss, scale);
                    let grads = g.backward(loss)?;
                    Ok((parts, grads.collect(&g, &p)))
                })
                .collect();
            let mut parts = LossParts::default();
            let mut per_example = Vec::with_capacity(results.len());
            for r in results {
                let (pp, gr) = r?;
                parts.add_scaled(&pp, scale);
                per_example.push(gr);
            }
            check_finite(epoch, step, parts.total)?;
            adam.step(model.params_mut(), &reduce_grads(per_example))?;
            log.steps.push(vec![
                step as f64,
                epoch as f64,
                parts.kd,
                parts.nmf,
                parts.l1,
                parts.total,
                cfg.adam.lr,
            ]);
        }
        let train_loss = log.epoch_mean(first_row);
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            mean_result(
                val.par_iter()
                    .zip(val_p.par_iter())
                    .map(|(ex, tp)| Ok(composite_loss(&model, &ex.input, tp, weights)?.total)),
            )?
        };
        check_finite(epoch, log.steps.len(), val_loss)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if let Some(dir) = &cfg.checkpoint_dir {
            model.save(dir.join(format!("proxy_epoch{epoch:03}.ckpt")))?;
        }
        if stop.observe(epoch, val_loss, model.params()) {
            break;
        }
    }
    finish(model.params_mut(), stop, &mut log)?;
    Ok(Trained { model, log })
}
