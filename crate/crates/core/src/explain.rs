//! Relevance of embedding components and their frequency-domain projection.
//!
//! For a segment with embedding `H` (`K × T`) the time-pooled activation
//! `z = mean_t H` is weighted by the class column of `θ` to give the relevance
//! `r_c = z ⊙ θ_c`. Thresholding at `τ` keeps the components with `r > τ`;
//! projecting the kept relevance through the dictionary, `W·R_c(τ)`, shows
//! which frequency bins drive the decision. Rescoring runs the classifier on
//! `H` with the discarded component rows zeroed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classes::{Class, NUM_CLASSES};
use crate::distill::LabeledSegments;
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::segnet::ProxyModel;
use crate::tensor::Tensor;

/// Number of thresholds in a score-vs-τ sweep.
pub const TAU_GRID_LEN: usize = 20;

/// Time-mean of every component row.
pub fn pool_embedding(h: &Tensor) -> Result<Vec<f64>> {
    h.require_rank2("pool_embedding")?;
    let t = h.cols();
    if t == 0 {
        return Err(Error::EmptyInput("embedding has no frames".into()));
    }
    Ok((0..h.rows())
        .map(|k| h.row(k).iter().sum::<f64>() / t as f64)
        .collect())
}

/// Unfiltered relevance `r = z ⊙ θ_c` of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceVector {
    pub class: Class,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
}

impl RelevanceVector {
    /// `theta` is the `K × C` classifier weight.
    pub fn new(z: Vec<f64>, theta: &Tensor, class: Class) -> Result<Self> {
        theta.require_rank2("theta")?;
        if theta.rows() != z.len() || theta.cols() <= class.index() {
            return Err(Error::Shape {
                op: "relevance",
                left: vec![z.len()],
                right: theta.shape().to_vec(),
            });
        }
        let r = z
            .iter()
            .enumerate()
            .map(|(k, zk)| zk * theta.at(k, class.index()))
            .collect();
        Ok(Self { class, z, r })
    }

    pub fn filter(&self, tau: f64) -> FilteredRelevance {
        FilteredRelevance::from_r(&self.r, tau)
    }
}

/// Relevance with every entry `r ≤ τ` removed.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredRelevance {
    pub tau: f64,
    /// `R(τ)`: kept entries equal `r`, the rest are zero.
    pub values: Vec<f64>,
    /// Components with `r > τ`.
    pub keep: Vec<bool>,
}

impl FilteredRelevance {
    pub fn from_r(r: &[f64], tau: f64) -> Self {
        let keep: Vec<bool> = r.iter().map(|&v| v > tau).collect();
        let values = r
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect();
        Self { tau, values, keep }
    }

    pub fn selected(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// `R_c(τ)` from pooled activations and one class column of `θ`.
pub fn relevance(z: &[f64], theta_c: &[f64], tau: f64) -> Result<FilteredRelevance> {
    if z.len() != theta_c.len() {
        return Err(Error::Shape {
            op: "relevance",
            left: vec![z.len()],
            right: vec![theta_c.len()],
        });
    }
    let r: Vec<f64> = z.iter().zip(theta_c).map(|(a, b)| a * b).collect();
    Ok(FilteredRelevance::from_r(&r, tau))
}

/// Frequency profile `W·R` of a filtered relevance vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyExplanation {
    pub x: Vec<f64>,
    pub bin_hz: f64,
}

impl FrequencyExplanation {
    /// Share of `Σ|x|` falling in bins `lo..=hi`.
    pub fn mass_fraction(&self, lo: usize, hi: usize) -> f64 {
        let total: f64 = self.x.iter().map(|v| v.abs()).sum();
        if total == 0.0 {
            return 0.0;
        }
        let hi = hi.min(self.x.len().saturating_sub(1));
        self.x[lo.min(hi)..=hi].iter().map(|v| v.abs()).sum::<f64>() / total
    }

    pub fn bin_of(&self, hz: f64) -> usize {
        (hz / self.bin_hz).round() as usize
    }
}

/// `W·R` for an `F × K` dictionary.
pub fn project_to_frequency(
    filtered: &FilteredRelevance,
    w: &Tensor,
    bin_hz: f64,
) -> Result<FrequencyExplanation> {
    w.require_rank2("dictionary")?;
    if w.cols() != filtered.values.len() {
        return Err(Error::Shape {
            op: "project_to_frequency",
            left: w.shape().to_vec(),
            right: vec![filtered.values.len()],
        });
    }
    let x = (0..w.rows())
        .map(|f| {
            w.row(f)
                .iter()
                .zip(&filtered.values)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    Ok(FrequencyExplanation { x, bin_hz })
}

/// Probabilities after filtering, plus their time-mean per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Rescored {
    pub probs: Tensor,
    pub mean_scores: Vec<f64>,
}

/// Classifies `H` with every component outside `filtered.keep` zeroed.
pub fn rescore_filtered(
    model: &ProxyModel,
    h: &Tensor,
    filtered: &FilteredRelevance,
) -> Result<Rescored> {
    h.require_rank2("rescore_filtered")?;
    if h.rows() != filtered.keep.len() {
        return Err(Error::Shape {
            op: "rescore_filtered",
            left: h.shape().to_vec(),
            right: vec![filtered.keep.len()],
        });
    }
    let mut hc = h.clone();
    let t = h.cols();
    for (k, &keep) in filtered.keep.iter().enumerate() {
        if !keep {
            hc.data_mut()[k * t..(k + 1) * t].fill(0.0);
        }
    }
    let probs = model.classify(&hc)?.probs;
    let mean_scores = (0..probs.rows())
        .map(|c| probs.row(c).iter().sum::<f64>() / t.max(1) as f64)
        .collect();
    Ok(Rescored { probs, mean_scores })
}

/// `n` evenly spaced quantiles (linear interpolation) of the positive
/// entries of `r`. The last threshold is `max(r)`, which prunes everything.
pub fn tau_grid(r: &[f64], n: usize) -> Vec<f64> {
    let mut pos: Vec<f64> = r.iter().copied().filter(|&v| v > 0.0).collect();
    if pos.is_empty() || n == 0 {
        return vec![0.0; n.min(1)];
    }
    pos.sort_by(f64::total_cmp);
    let last = (pos.len() - 1) as f64;
    (0..n)
        .map(|i| {
            let q = if n == 1 { 1.0 } else { i as f64 / (n - 1) as f64 };
            let x = q * last;
            let lo = x.floor() as usize;
            let hi = x.ceil() as usize;
            pos[lo] + (pos[hi] - pos[lo]) * (x - lo as f64)
        })
        .collect()
}

/// Threshold that keeps the `⌈fraction·K⌉` most relevant components (never
/// below zero, so negative relevance is not retained).
pub fn top_fraction_tau(r: &[f64], fraction: f64) -> f64 {
    let n = ((fraction * r.len() as f64).ceil() as usize).min(r.len());
    let mut sorted = r.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let next = sorted.get(n).copied().unwrap_or(f64::NEG_INFINITY);
    next.max(0.0)
}

/// Time-pooled target-class score at each threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreCurve {
    pub class: Class,
    pub taus: Vec<f64>,
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
}

pub fn score_curve(
    model: &ProxyModel,
    h: &Tensor,
    rel: &RelevanceVector,
    taus: &[f64],
) -> Result<ScoreCurve> {
    let mut scores = Vec::with_capacity(taus.len());
    let mut selected = Vec::with_capacity(taus.len());
    for &tau in taus {
        let f = rel.filter(tau);
        scores.push(rescore_filtered(model, h, &f)?.mean_scores[rel.class.index()]);
        selected.push(f.selected());
    }
    Ok(ScoreCurve {
        class: rel.class,
        taus: taus.to_vec(),
        scores,
        selected,
    })
}

/// Relevance of `class` for one input segment, with the embedding it came from.
pub fn segment_relevance(
    model: &ProxyModel,
    input: &Tensor,
    class: Class,
) -> Result<(RelevanceVector, Tensor)> {
    let out = model.forward(input)?;
    let z = pool_embedding(&out.h)?;
    Ok((RelevanceVector::new(z, model.theta(), class)?, out.h))
}

/// Mean of unfiltered relevance vectors.
pub fn global_relevance(vectors: &[RelevanceVector]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::EmptyInput("no segments for global relevance".into()))?;
    let k = first.r.len();
    let mut mean = vec![0.0; k];
    for v in vectors {
        if v.r.len() != k {
            return Err(Error::Shape {
                op: "global_relevance",
                left: vec![k],
                right: vec![v.r.len()],
            });
        }
        for (m, x) in mean.iter_mut().zip(&v.r) {
            *m += x;
        }
    }
    let n = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Class prototype `r̄_c` over segments that contain only `class`.
pub fn global_relevance_for(
    model: &ProxyModel,
    inputs: &[Tensor],
    class: Class,
) -> Result<Vec<f64>> {
    let vectors = inputs
        .iter()
        .map(|x| segment_relevance(model, x, class).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    global_relevance(&vectors)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// A speech-only clip with its per-frame activity.
#[derive(Clone, Debug)]
pub struct SpeechSource {
    pub clip: AudioClip,
    pub active: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Mixture {
    pub clip: AudioClip,
    pub labels: LabeledSegments,
    /// Indices of the two sources and the frame delay of the second.
    pub sources: (usize, usize),
    pub shift_frames: usize,
}

/// Two-speaker mixtures: source `a` plus source `b` delayed by a whole
/// number of frames, scaled by `1/√2` and peak-normalized if needed. SAD is
/// the union and OSD the intersection of the two activity tracks.
pub fn make_overlap_mixtures(
    sources: &[SpeechSource],
    count: usize,
    max_shift_frames: usize,
    hop: usize,
    seed: u64,
) -> Result<Vec<Mixture>> {
    if sources.len() < 2 {
        return Err(Error::EmptyInput(format!(
            "need at least 2 speech sources, got {}",
            sources.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let i = rng.gen_range(0..sources.len());
            let mut j = rng.gen_range(0..sources.len() - 1);
            if j >= i {
                j += 1;
            }
            let shift = rng.gen_range(0..=max_shift_frames);
            mix_pair(sources, i, j, shift, hop)
        })
        .collect()
}

/// Mixes `sources[i]` with `sources[j]` delayed by `shift` frames.
pub fn mix_pair(
    sources: &[SpeechSource],
    i: usize,
    j: usize,
    shift: usize,
    hop: usize,
) -> Result<Mixture> {
    let (a, b) = (&sources[i], &sources[j]);
    let offset = shift * hop;
    let sa = a.clip.samples();
    let sb = b.clip.samples();
    let samples: Vec<f64> = (0..sa.len())
        .map(|n| {
            let other = n.checked_sub(offset).and_then(|m| sb.get(m)).copied();
            (sa[n] + other.unwrap_or(0.0)) / std::f64::consts::SQRT_2
        })
        .collect();
    let clip = AudioClip::new(samples, a.clip.sample_rate())?;

    let t = a.active.len();
    let b_at = |f: usize| {
        f.checked_sub(shift)
            .and_then(|g| b.active.get(g))
            .copied()
            .unwrap_or(false)
    };
    let labels = Tensor::from_fn(NUM_CLASSES, t, |c, f| {
        let (sa, sb) = (a.active[f], b_at(f));
        let on = match Class::from_index(c) {
            Some(Class::Sad) => sa || sb,
            Some(Class::Osd) => sa && sb,
            _ => false,
        };
        if on {
            1.0
        } else {
            0.0
        }
    });
    Ok(Mixture {
        clip,
        labels: LabeledSegments::fully_labeled(labels)?,
        sources: (i, j),
        shift_frames: shift,
    })
}
