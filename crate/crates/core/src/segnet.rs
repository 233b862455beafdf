//! Temporal convolutional networks for the teacher and the proxy.
//!
//! Both models share one TCN body: a 1×1 bottleneck from `F` bins to `B`
//! channels, then `blocks × layers_per_block` residual layers, then a
//! kernel-`L` output convolution. Each layer is
//!
//! ```text
//! x + out(relu(dw_d(relu(in(x)))))
//! ```
//!
//! where `in` is 1×1 `B → H`, `dw_d` a depthwise convolution with dilation
//! `2^i` for layer `i` of its block, and `out` 1×1 `H → B`. All convolutions
//! use "same" zero padding so the frame count is preserved.
//!
//! The teacher maps the TCN output straight to `C` class logits. The proxy's
//! TCN emits `K` channels that pass through a ReLU to give the non-negative
//! embedding `H`; logits are `θᵀH` and the reconstruction is `W·H`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::NUM_CLASSES;
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::nmf::{self, Dictionary};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, ParamSet, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcnConfig {
    pub input_dim: usize,
    pub bottleneck_channels: usize,
    pub hidden_channels: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub kernel_len: usize,
    pub output_dim: usize,
}

impl TcnConfig {
    /// Teacher body: 64-channel bottleneck, 3 blocks of 5 layers.
    pub fn teacher(input_dim: usize) -> Self {
        Self {
            input_dim,
            bottleneck_channels: 64,
            hidden_channels: 768,
            blocks: 3,
            layers_per_block: 5,
            kernel_len: 3,
            output_dim: NUM_CLASSES,
        }
    }

    /// Proxy encoder: 128/256 channels, 4 blocks of 4 layers, `rank` outputs.
    pub fn proxy(input_dim: usize, rank: usize) -> Self {
        Self {
            input_dim,
            bottleneck_channels: 128,
            hidden_channels: 256,
            blocks: 4,
            layers_per_block: 4,
            kernel_len: 3,
            output_dim: rank,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("bottleneck_channels", self.bottleneck_channels),
            ("hidden_channels", self.hidden_channels),
            ("output_dim", self.output_dim),
            ("kernel_len", self.kernel_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.kernel_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_len must be odd, got {}",
                self.kernel_len
            )));
        }
        if self.layers_per_block > 30 {
            return Err(Error::Config("layers_per_block too large for 2^i dilation".into()));
        }
        Ok(())
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self)
    }

    pub fn num_params(&self) -> usize {
        let (f, b, h, l, o) = (
            self.input_dim,
            self.bottleneck_channels,
            self.hidden_channels,
            self.kernel_len,
            self.output_dim,
        );
        let layer = (h * b + h) + (h * l + h) + (b * h + b);
        (b * f + b) + self.blocks * self.layers_per_block * layer + (o * b * l + o)
    }
}

/// Frames of input context seen by one output frame of the TCN body.
pub fn receptive_field(cfg: &TcnConfig) -> usize {
    let per_block: usize = (0..cfg.layers_per_block)
        .map(|i| (cfg.kernel_len - 1) << i)
        .sum();
    1 + cfg.blocks * per_block
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

/// Registers the TCN parameters under `prefix` and returns the index of the
/// first one; the forward pass consumes them in the same order.
fn register_tcn(cfg: &TcnConfig, prefix: &str, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> usize {
    let (f, b, h, l, o) = (
        cfg.input_dim,
        cfg.bottleneck_channels,
        cfg.hidden_channels,
        cfg.kernel_len,
        cfg.output_dim,
    );
    let first = params.push(format!("{prefix}in.w"), uniform(&[b, f], f, rng));
    params.push(format!("{prefix}in.b"), uniform(&[b], f, rng));
    for blk in 0..cfg.blocks {
        for i in 0..cfg.layers_per_block {
            let p = format!("{prefix}b{blk}.l{i}.");
            params.push(format!("{p}in.w"), uniform(&[h, b], b, rng));
            params.push(format!("{p}in.b"), uniform(&[h], b, rng));
            params.push(format!("{p}dw.w"), uniform(&[h, l], l, rng));
            params.push(format!("{p}dw.b"), uniform(&[h], l, rng));
            params.push(format!("{p}out.w"), uniform(&[b, h], h, rng));
            params.push(format!("{p}out.b"), uniform(&[b], h, rng));
        }
    }
    params.push(format!("{prefix}head.w"), uniform(&[o, b, l], b * l, rng));
    params.push(format!("{prefix}head.b"), uniform(&[o], b * l, rng));
    first
}

fn tcn_param_count(cfg: &TcnConfig) -> usize {
    4 + 6 * cfg.blocks * cfg.layers_per_block
}

/// TCN body forward; `p` holds the bound parameters in registration order.
fn tcn_forward(cfg: &TcnConfig, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
    let mut next = p.iter().copied();
    let mut take = || next.next().expect("parameter list matches config");
    let (w, b) = (take(), take());
    let y = g.matmul(w, x)?;
    let mut y = g.add_bias(y, b)?;
    for _ in 0..cfg.blocks {
        for i in 0..cfg.layers_per_block {
            let (in_w, in_b, dw_w, dw_b, out_w, out_b) =
                (take(), take(), take(), take(), take(), take());
            let z = g.matmul(in_w, y)?;
            let z = g.add_bias(z, in_b)?;
            let z = g.relu(z);
            let z = g.depthwise_conv1d(z, dw_w, 1 << i)?;
            let z = g.add_bias(z, dw_b)?;
            let z = g.relu(z);
            let z = g.matmul(out_w, z)?;
            let z = g.add_bias(z, out_b)?;
            y = g.add(y, z)?;
        }
    }
    let (head_w, head_b) = (take(), take());
    let out = g.conv1d_dilated(y, head_w, 1)?;
    g.add_bias(out, head_b)
}

fn check_input(op: &'static str, s: &Tensor, bins: usize) -> Result<()> {
    if s.shape().len() != 2 || s.rows() != bins {
        return Err(Error::Shape {
            op,
            left: s.shape().to_vec(),
            right: vec![bins],
        });
    }
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_sidecar<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("cannot encode model config: {e}")))?;
    fs::write(sidecar(path), text + "\n")?;
    Ok(())
}

fn read_sidecar<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(sidecar(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad model config: {e}")))
}

/// Loads stored parameters into a freshly built set, checking names and shapes.
fn restore(params: &mut ParamSet, stored: &ParamSet) -> Result<()> {
    for (name, t) in params.iter() {
        match stored.by_name(name) {
            Some(s) if s.shape() == t.shape() => {}
            Some(s) => {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    s.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("missing `{name}`"))),
        }
    }
    params.load_from(stored)
}

/// Frame classifier producing `C` logits per frame.
#[derive(Clone, Debug)]
pub struct TeacherModel {
    config: TcnConfig,
    params: ParamSet,
}

/// Logits and sigmoid probabilities, both `C × T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub logits: Tensor,
    pub probs: Tensor,
}

impl TeacherModel {
    pub fn new(config: TcnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.output_dim != NUM_CLASSES {
            return Err(Error::Config(format!(
                "teacher output_dim must be {NUM_CLASSES}, got {}",
                config.output_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        register_tcn(&config, "", &mut params, &mut rng);
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &TcnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn receptive_field(&self) -> usize {
        self.config.receptive_field()
    }

    /// Records the forward pass on `g`; `p` are the bound parameters.
    pub fn logits_graph(&self, g: &mut Graph, p: &[Var], s: Var) -> Result<Var> {
        check_input("teacher_forward", g.value(s), self.config.input_dim)?;
        tcn_forward(&self.config, g, p, s)
    }

    pub fn forward(&self, s: &Tensor) -> Result<Scores> {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let x = g.constant(s.clone());
        let logits = self.logits_graph(&mut g, &p, x)?;
        let probs = g.sigmoid(logits);
        Ok(Scores {
            logits: g.value(logits).clone(),
            probs: g.value(probs).clone(),
        })
    }

    /// Writes the checkpoint and a JSON config next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_checkpoint(path, &self.params)?;
        write_sidecar(path, &self.config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let config: TcnConfig = read_sidecar(path)?;
        let mut model = Self::new(config, 0)?;
        restore(&mut model.params, &load_checkpoint(path)?)?;
        Ok(model)
    }
}

pub fn teacher_forward(s: &Spectrogram, model: &TeacherModel) -> Result<Scores> {
    model.forward(&s.bins)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub psi: TcnConfig,
    pub num_classes: usize,
    pub w_trainable: bool,
}

impl ProxyConfig {
    pub fn new(input_dim: usize, rank: usize) -> Self {
        Self {
            psi: TcnConfig::proxy(input_dim, rank),
            num_classes: NUM_CLASSES,
            w_trainable: false,
        }
    }

    pub fn rank(&self) -> usize {
        self.psi.output_dim
    }

    /// Trainable parameters: encoder, `θ`, and `W` when trainable.
    pub fn num_params(&self) -> usize {
        let w = if self.w_trainable {
            self.psi.input_dim * self.rank()
        } else {
            0
        };
        self.psi.num_params() + self.rank() * self.num_classes + w
    }
}

/// Encoder `Ψ`, linear classifier `θ` (`K × C`, no bias) and dictionary `W`.
#[derive(Clone, Debug)]
pub struct ProxyModel {
    config: ProxyConfig,
    params: ParamSet,
    dictionary: Dictionary,
}

/// Graph handles of one proxy forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ProxyVars {
    pub h: Var,
    pub logits: Var,
    pub probs: Var,
    pub x_rec: Var,
}

/// Embedding `K × T`, logits `C × T` and reconstruction `F × T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyOutput {
    pub h: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
    pub x_rec: Tensor,
}

pub const THETA: &str = "theta";
pub const W_PARAM: &str = "w";

impl ProxyModel {
    /// Builds a proxy around a pretrained dictionary. With `w_trainable` the
    /// dictionary seeds a trainable `W` that is passed through a ReLU.
    pub fn new(config: ProxyConfig, dictionary: Dictionary, seed: u64) -> Result<Self> {
        config.psi.validate()?;
        if config.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if dictionary.num_bins() != config.psi.input_dim || dictionary.rank() != config.rank() {
            return Err(Error::Shape {
                op: "proxy dictionary",
                left: vec![config.psi.input_dim, config.rank()],
                right: dictionary.atoms().shape().to_vec(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        register_tcn(&config.psi, "psi.", &mut params, &mut rng);
        let k = config.rank();
        params.push(THETA, uniform(&[k, config.num_classes], k, &mut rng));
        if config.w_trainable {
            params.push(W_PARAM, dictionary.atoms().clone());
        }
        Ok(Self {
            config,
            params,
            dictionary,
        })
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn rank(&self) -> usize {
        self.config.rank()
    }

    pub fn theta(&self) -> &Tensor {
        self.params.by_name(THETA).expect("theta registered")
    }

    /// The dictionary used for reconstruction: the frozen one, or
    /// `relu(W)` of the trainable parameter.
    pub fn effective_dictionary(&self) -> Tensor {
        match self.params.by_name(W_PARAM) {
            Some(w) => w.map(|v| v.max(0.0)),
            None => self.dictionary.atoms().clone(),
        }
    }

    /// The pretrained dictionary the model was built with.
    pub fn pretrained_dictionary(&self) -> &Dictionary {
        &self.dictionary
    }

    fn psi_len(&self) -> usize {
        tcn_param_count(&self.config.psi)
    }

    /// Logits `θᵀH` for an embedding already on the graph.
    pub fn classify_graph(&self, g: &mut Graph, p: &[Var], h: Var) -> Result<Var> {
        let theta = p[self.psi_len()];
        let tt = g.transpose(theta)?;
        g.matmul(tt, h)
    }

    /// Records the forward pass on `g`; `p` are the bound parameters.
    pub fn forward_graph(&self, g: &mut Graph, p: &[Var], s: Var) -> Result<ProxyVars> {
        check_input("proxy_forward", g.value(s), self.config.psi.input_dim)?;
        let z = tcn_forward(&self.config.psi, g, &p[..self.psi_len()], s)?;
        let h = g.relu(z);
        let logits = self.classify_graph(g, p, h)?;
        let probs = g.sigmoid(logits);
        let w = if self.config.w_trainable {
            let raw = p[self.psi_len() + 1];
            g.relu(raw)
        } else {
            g.constant(self.dictionary.atoms().clone())
        };
        let x_rec = g.matmul(w, h)?;
        Ok(ProxyVars {
            h,
            logits,
            probs,
            x_rec,
        })
    }

    pub fn forward(&self, s: &Tensor) -> Result<ProxyOutput> {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let x = g.constant(s.clone());
        let v = self.forward_graph(&mut g, &p, x)?;
        Ok(ProxyOutput {
            h: g.value(v.h).clone(),
            logits: g.value(v.logits).clone(),
            probs: g.value(v.probs).clone(),
            x_rec: g.value(v.x_rec).clone(),
        })
    }

    /// Scores an arbitrary embedding through `θ` along the same code path as
    /// [`ProxyModel::forward`].
    pub fn classify(&self, h: &Tensor) -> Result<Scores> {
        if h.shape().len() != 2 || h.rows() != self.rank() {
            return Err(Error::Shape {
                op: "classify",
                left: h.shape().to_vec(),
                right: vec![self.rank()],
            });
        }
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let hv = g.constant(h.clone());
        let logits = self.classify_graph(&mut g, &p, hv)?;
        let probs = g.sigmoid(logits);
        Ok(Scores {
            logits: g.value(logits).clone(),
            probs: g.value(probs).clone(),
        })
    }

    /// Writes parameters plus the pretrained dictionary (as `nmf.W`) and a
    /// JSON config next to the checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut all = self.params.clone();
        all.push(nmf::CHECKPOINT_NAME, self.dictionary.atoms().clone());
        save_checkpoint(path, &all)?;
        write_sidecar(path, &self.config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let config: ProxyConfig = read_sidecar(path)?;
        let stored = load_checkpoint(path)?;
        let dictionary = Dictionary::from_params(&stored)?;
        let mut model = Self::new(config, dictionary, 0)?;
        restore(&mut model.params, &stored)?;
        Ok(model)
    }
}

pub fn proxy_forward(s: &Spectrogram, model: &ProxyModel) -> Result<ProxyOutput> {
    model.forward(&s.bins)
}
