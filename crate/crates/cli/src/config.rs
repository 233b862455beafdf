//! Flat `key = value` run configuration.
//!
//! Values resolve in order: built-in defaults, config file, `NXSG_SEED`,
//! then `--set key=value` flags. The resolved table is written as `run.cfg`
//! next to every output and can be fed back with `--config`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use nxsg::corpus::{ClassPriors, CorpusConfig};
use nxsg::distill::{LossWeights, TrainConfig};
use nxsg::nmf::{ClassMix, NmfConfig, PretrainConfig};
use nxsg::segnet::{ProxyConfig, TcnConfig};
use nxsg::tensor::AdamConfig;

use crate::UsageError;

pub const SNAPSHOT_NAME: &str = "run.cfg";
pub const SEED_ENV: &str = "NXSG_SEED";

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("corpus_dir", "run/corpus"),
    ("nmf_dir", "run/nmf"),
    ("teacher_dir", "run/teacher"),
    ("proxy_dir", "run/proxy"),
    ("eval_dir", "run/eval"),
    ("corpus.train", "200"),
    ("corpus.val", "40"),
    ("corpus.test", "40"),
    ("corpus.scene_s", "4"),
    ("corpus.speech", "0.5"),
    ("corpus.music", "0.35"),
    ("corpus.noise", "0.35"),
    ("corpus.overlap", "0.15"),
    ("nmf.rank", "256"),
    ("nmf.lambda", "0.1"),
    ("nmf.iters", "500"),
    ("nmf.inner_steps", "10"),
    ("nmf.pool_size", "1200"),
    ("nmf.mix_speech", "0.16"),
    ("nmf.mix_music", "0.42"),
    ("nmf.mix_noise", "0.42"),
    ("teacher.bottleneck", "64"),
    ("teacher.hidden", "768"),
    ("teacher.blocks", "3"),
    ("teacher.layers", "5"),
    ("teacher.kernel", "3"),
    ("teacher.lr", "0.001"),
    ("teacher.epochs", "100"),
    ("proxy.bottleneck", "128"),
    ("proxy.hidden", "256"),
    ("proxy.blocks", "4"),
    ("proxy.layers", "4"),
    ("proxy.kernel", "3"),
    ("proxy.w_trainable", "false"),
    ("proxy.lr", "0.001"),
    ("proxy.epochs", "100"),
    ("alpha", "10"),
    ("beta", "5"),
    ("gamma", "0.1"),
    ("nmf_reduction", "sum"),
    ("batch", "64"),
    ("crop", "100"),
    ("patience", "5"),
    ("threshold", "0.5"),
    ("median", "1"),
    ("tau_grid", "20"),
];

/// Spectrogram height of the default analysis.
pub fn input_bins() -> usize {
    nxsg::dsp::Stft::new(nxsg::dsp::StftConfig::default(), nxsg::dsp::SAMPLE_RATE)
        .map(|s| s.num_bins())
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn parse_line(line: &str) -> Option<std::result::Result<(String, String), String>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return None;
    }
    Some(match line.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected `key = value`, got `{line}`")),
    })
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Resolves defaults, an optional file, the seed variable and overrides.
    pub fn load(file: Option<&Path>, env_seed: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)
                .with_context(|| format!("in {}", path.display()))?;
        }
        if let Some(seed) = env_seed {
            cfg.set("seed", seed)
                .with_context(|| format!("from {SEED_ENV}"))?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| UsageError(format!("--set expects key=value, got `{o}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            if let Some(kv) = parse_line(line) {
                let (k, v) = kv.map_err(|e| UsageError(format!("line {}: {e}", n + 1)))?;
                self.set(&k, &v)?;
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(UsageError(format!("unknown config key `{key}`")).into()),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse::<T>()
            .map_err(|e| UsageError(format!("config `{key} = {raw}`: {e}")).into())
    }

    /// Parses every key once so bad values fail before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.corpus()?;
        self.pretrain()?;
        self.teacher_net()?.validate().map_err(|e| UsageError(e.to_string()))?;
        self.proxy_net()?.psi.validate().map_err(|e| UsageError(e.to_string()))?;
        self.teacher_training()?;
        self.proxy_training()?;
        self.weights()?.validate().map_err(|e| UsageError(e.to_string()))?;
        self.threshold()?;
        self.median()?;
        self.tau_grid()?;
        Ok(())
    }

    /// `key = value` lines in key order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SNAPSHOT_NAME), self.to_text())
            .with_context(|| format!("writing config snapshot in {}", dir.display()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.raw(key))
    }

    pub fn corpus(&self) -> Result<CorpusConfig> {
        Ok(CorpusConfig {
            n_train: self.get("corpus.train")?,
            n_val: self.get("corpus.val")?,
            n_test: self.get("corpus.test")?,
            scene_duration_s: self.get("corpus.scene_s")?,
            priors: ClassPriors {
                speech: self.get("corpus.speech")?,
                music: self.get("corpus.music")?,
                noise: self.get("corpus.noise")?,
                overlap: self.get("corpus.overlap")?,
            },
            seed: self.seed()?,
        })
    }

    pub fn rank(&self) -> Result<usize> {
        self.get("nmf.rank")
    }

    pub fn pretrain(&self) -> Result<PretrainConfig> {
        Ok(PretrainConfig {
            nmf: NmfConfig {
                rank: self.rank()?,
                lambda: self.get("nmf.lambda")?,
                iters: self.get("nmf.iters")?,
                inner_steps: self.get("nmf.inner_steps")?,
                seed: self.seed()?,
            },
            pool_size: self.get("nmf.pool_size")?,
            mix: ClassMix {
                speech: self.get("nmf.mix_speech")?,
                music: self.get("nmf.mix_music")?,
                noise: self.get("nmf.mix_noise")?,
            },
            ..PretrainConfig::default()
        })
    }

    fn tcn(&self, prefix: &str, input_dim: usize, output_dim: usize) -> Result<TcnConfig> {
        Ok(TcnConfig {
            input_dim,
            bottleneck_channels: self.get(&format!("{prefix}.bottleneck"))?,
            hidden_channels: self.get(&format!("{prefix}.hidden"))?,
            blocks: self.get(&format!("{prefix}.blocks"))?,
            layers_per_block: self.get(&format!("{prefix}.layers"))?,
            kernel_len: self.get(&format!("{prefix}.kernel"))?,
            output_dim,
        })
    }

    pub fn teacher_net(&self) -> Result<TcnConfig> {
        self.tcn("teacher", input_bins(), nxsg::NUM_CLASSES)
    }

    pub fn proxy_net(&self) -> Result<ProxyConfig> {
        Ok(ProxyConfig {
            psi: self.tcn("proxy", input_bins(), self.rank()?)?,
            num_classes: nxsg::NUM_CLASSES,
            w_trainable: self.get("proxy.w_trainable")?,
        })
    }

    fn training(&self, prefix: &str, salt: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.get(&format!("{prefix}.epochs"))?,
            batch_size: self.get("batch")?,
            crop_frames: self.get("crop")?,
            adam: AdamConfig {
                lr: self.get(&format!("{prefix}.lr"))?,
                ..AdamConfig::default()
            },
            patience: self.get("patience")?,
            seed: self.seed()?.wrapping_add(salt),
            checkpoint_dir: None,
        })
    }

    pub fn teacher_training(&self) -> Result<TrainConfig> {
        self.training("teacher", 0x7e4c)
    }

    pub fn proxy_training(&self) -> Result<TrainConfig> {
        self.training("proxy", 0x960c)
    }

    pub fn weights(&self) -> Result<LossWeights> {
        Ok(LossWeights {
            alpha: self.get("alpha")?,
            beta: self.get("beta")?,
            gamma: self.get("gamma")?,
            nmf_reduction: self.get("nmf_reduction")?,
        })
    }

    pub fn threshold(&self) -> Result<f64> {
        self.get("threshold")
    }

    pub fn median(&self) -> Result<usize> {
        let w: usize = self.get("median")?;
        if w.is_multiple_of(2) {
            return Err(UsageError(format!("median width must be odd, got {w}")).into());
        }
        Ok(w)
    }

    pub fn tau_grid(&self) -> Result<usize> {
        self.get("tau_grid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.rank().unwrap(), 256);
        let w = cfg.weights().unwrap();
        assert_eq!((w.alpha, w.beta, w.gamma), (10.0, 5.0, 0.1));
    }

    #[test]
    fn precedence_and_snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("a.cfg");
        fs::write(&file, "# desk\nseed = 3\nnmf.rank = 32  # small\n").unwrap();
        let cfg = RunConfig::load(Some(&file), Some("9"), &["nmf.rank=16".into()]).unwrap();
        assert_eq!(cfg.seed().unwrap(), 9);
        assert_eq!(cfg.rank().unwrap(), 16);

        cfg.write_snapshot(dir.path()).unwrap();
        let again = RunConfig::load(Some(&dir.path().join(SNAPSHOT_NAME)), None, &[]).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn bad_input_is_a_usage_error() {
        for o in ["nope=1", "seed=x", "seed", "median=2"] {
            let err = RunConfig::load(None, None, &[o.to_string()]).unwrap_err();
            assert!(err.downcast_ref::<UsageError>().is_some(), "{o}: {err}");
        }
    }
}
