//! Synthetic labelled scenes: speech, music, noise and overlapped speech.
//!
//! Sources are built to be spectrally distinct. Speech is a harmonic series
//! on a drifting 100–300 Hz pitch, shaped by formant bumps below 1 kHz and
//! modulated at a syllabic rate. Music is a sustained 440 Hz note with
//! faint overtones. Noise is pink or brown filtered noise.
//!
//! A frame is labelled active when the event covers the centre of its
//! analysis window. Scene label files store those frame labels on the
//! frame grid, i.e. frame `t` spans `[t·step, (t+1)·step)`.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classes::{Class, NUM_CLASSES};
use crate::distill::{Example, LabeledSegments};
use crate::dsp::{read_wav, write_wav, AudioClip, Stft, StftConfig, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::evalseg::{frames_to_segments, parse_segments, write_segments};
use crate::explain::SpeechSource;
use crate::nmf::PoolSegment;
use crate::tensor::Tensor;

/// Music fundamental.
pub const MUSIC_HZ: f64 = 440.0;
const FADE_S: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseColor {
    Pink,
    Brown,
}

fn check_duration(dur_s: f64) -> Result<usize> {
    if !(dur_s > 0.0 && dur_s.is_finite()) {
        return Err(Error::Config(format!("duration must be positive, got {dur_s}")));
    }
    Ok((dur_s * SAMPLE_RATE as f64).round().max(1.0) as usize)
}

fn peak_normalized(mut samples: Vec<f64>) -> Result<AudioClip> {
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|s| *s /= peak);
    }
    AudioClip::new(samples, SAMPLE_RATE)
}

fn bump(f: f64, centre: f64, width: f64) -> f64 {
    (-((f - centre) / width).powi(2)).exp()
}

/// Voiced speech-like signal, peak 1.
pub fn synth_speech(dur_s: f64, seed: u64) -> Result<AudioClip> {
    let n = check_duration(dur_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = SAMPLE_RATE as f64;
    let f0_base = rng.gen_range(115.0..260.0);
    let drift_hz = rng.gen_range(0.3..1.2);
    let drift_phase = rng.gen_range(0.0..2.0 * PI);
    let syllable_hz = rng.gen_range(3.0..5.0);
    let syllable_phase = rng.gen_range(0.0..2.0 * PI);
    let f1 = rng.gen_range(380.0..520.0);
    let f2 = rng.gen_range(650.0..800.0);
    let harmonic_phase: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();

    let mut phase = 0.0;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let f0 = (f0_base * (1.0 + 0.12 * (2.0 * PI * drift_hz * t + drift_phase).sin()))
                .clamp(100.0, 300.0);
            phase += 2.0 * PI * f0 / sr;
            let syl = 0.5 + 0.5 * (2.0 * PI * syllable_hz * t + syllable_phase).sin();
            let am = 0.3 + 0.7 * syl * syl;
            let mut v = 0.0;
            for (h, ph) in harmonic_phase.iter().enumerate() {
                let f = (h + 1) as f64 * f0;
                if f > 2000.0 {
                    break;
                }
                let g = bump(f, f1, 220.0) + 0.6 * bump(f, f2, 150.0) + 0.3 * bump(f, 0.0, 300.0);
                v += g * ((h + 1) as f64 * phase + ph).sin();
            }
            am * v
        })
        .collect();
    peak_normalized(samples)
}

/// Sustained note at `fundamental_hz` with light vibrato, slow tremolo and
/// weak second and third partials, peak 1.
pub fn synth_music_at(dur_s: f64, fundamental_hz: f64, seed: u64) -> Result<AudioClip> {
    let n = check_duration(dur_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = SAMPLE_RATE as f64;
    let vib_phase = rng.gen_range(0.0..2.0 * PI);
    let trem_hz = rng.gen_range(0.3..0.8);
    let trem_phase = rng.gen_range(0.0..2.0 * PI);
    let partials = [(1.0, 1.0), (2.0, 0.03), (3.0, 0.01)];
    let offsets: Vec<f64> = partials.iter().map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let mut phase = 0.0;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let f = fundamental_hz * (1.0 + 0.002 * (2.0 * PI * 5.0 * t + vib_phase).sin());
            phase += 2.0 * PI * f / sr;
            let env = 0.8 + 0.2 * (2.0 * PI * trem_hz * t + trem_phase).sin();
            env * partials
                .iter()
                .zip(&offsets)
                .map(|(&(k, a), ph)| a * (k * phase + ph).sin())
                .sum::<f64>()
        })
        .collect();
    peak_normalized(samples)
}

/// [`synth_music_at`] on the 440 Hz note.
pub fn synth_music(dur_s: f64, seed: u64) -> Result<AudioClip> {
    synth_music_at(dur_s, MUSIC_HZ, seed)
}

/// Filtered uniform white noise, peak 1.
pub fn synth_noise(dur_s: f64, color: NoiseColor, seed: u64) -> Result<AudioClip> {
    let n = check_duration(dur_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = [0.0f64; 7];
    let mut level = 0.0;
    let samples = (0..n)
        .map(|_| {
            let w: f64 = rng.gen_range(-1.0..1.0);
            match color {
                NoiseColor::Pink => {
                    // Paul Kellet's refined pink filter.
                    b[0] = 0.99886 * b[0] + w * 0.0555179;
                    b[1] = 0.99332 * b[1] + w * 0.0750759;
                    b[2] = 0.96900 * b[2] + w * 0.1538520;
                    b[3] = 0.86650 * b[3] + w * 0.3104856;
                    b[4] = 0.55000 * b[4] + w * 0.5329522;
                    b[5] = -0.7616 * b[5] - w * 0.0168980;
                    let out = b.iter().sum::<f64>() + w * 0.5362;
                    b[6] = w * 0.115926;
                    out
                }
                NoiseColor::Brown => {
                    level = 0.995 * level + 0.1 * w;
                    level
                }
            }
        })
        .collect();
    peak_normalized(samples)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Source {
    Speech,
    Music,
    Noise(NoiseColor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub source: Source,
    pub onset_s: f64,
    pub offset_s: f64,
    pub gain: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub duration_s: f64,
    pub events: Vec<Event>,
    pub seed: u64,
}

/// Centre time of each analysis frame for a clip of `num_samples`.
fn frame_centres(num_samples: usize) -> Result<Vec<f64>> {
    let stft = Stft::new(StftConfig::default(), SAMPLE_RATE)?;
    let t = stft
        .num_frames(num_samples)
        .ok_or(Error::InputTooShort {
            needed: stft.frame_len(),
            got: num_samples,
        })?;
    let sr = SAMPLE_RATE as f64;
    Ok((0..t)
        .map(|i| (i * stft.hop()) as f64 / sr + stft.frame_len() as f64 / (2.0 * sr))
        .collect())
}

impl SceneSpec {
    pub fn num_samples(&self) -> usize {
        (self.duration_s * SAMPLE_RATE as f64).round() as usize
    }

    /// Frame labels: SAD where any speech event is active, OSD where two or
    /// more are, MD and ND from music and noise events.
    pub fn labels(&self) -> Result<LabeledSegments> {
        let centres = frame_centres(self.num_samples())?;
        let t = centres.len();
        let mut labels = vec![0.0; NUM_CLASSES * t];
        for (f, &c) in centres.iter().enumerate() {
            let active = |e: &&Event| e.onset_s <= c && c < e.offset_s;
            let speakers = self
                .events
                .iter()
                .filter(active)
                .filter(|e| e.source == Source::Speech)
                .count();
            let mut set = |class: Class, on: bool| {
                if on {
                    labels[class.index() * t + f] = 1.0;
                }
            };
            set(Class::Sad, speakers >= 1);
            set(Class::Osd, speakers >= 2);
            for e in self.events.iter().filter(active) {
                match e.source {
                    Source::Music => set(Class::Md, true),
                    Source::Noise(_) => set(Class::Nd, true),
                    Source::Speech => {}
                }
            }
        }
        LabeledSegments::fully_labeled(Tensor::new(vec![NUM_CLASSES, t], labels)?)
    }

    pub fn render(&self) -> Result<(AudioClip, LabeledSegments)> {
        let n = self.num_samples();
        let sr = SAMPLE_RATE as f64;
        let mut mix = vec![0.0; n];
        for e in &self.events {
            let start = ((e.onset_s * sr).round() as usize).min(n);
            let end = ((e.offset_s * sr).round() as usize).min(n);
            if end <= start {
                continue;
            }
            let dur = (end - start) as f64 / sr;
            let clip = match e.source {
                Source::Speech => synth_speech(dur, e.seed)?,
                Source::Music => synth_music(dur, e.seed)?,
                Source::Noise(color) => synth_noise(dur, color, e.seed)?,
            };
            let len = end - start;
            let fade = ((FADE_S * sr) as usize).min(len / 2).max(1);
            for (i, s) in clip.samples().iter().take(len).enumerate() {
                let edge = i.min(len - 1 - i);
                let w = if edge < fade {
                    0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos()
                } else {
                    1.0
                };
                mix[start + i] += e.gain * w * s;
            }
        }
        Ok((AudioClip::new(mix, SAMPLE_RATE)?, self.labels()?))
    }
}

/// Requested fraction of frames with each label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassPriors {
    pub speech: f64,
    pub music: f64,
    pub noise: f64,
    pub overlap: f64,
}

impl Default for ClassPriors {
    fn default() -> Self {
        Self {
            speech: 0.5,
            music: 0.35,
            noise: 0.35,
            overlap: 0.15,
        }
    }
}

impl ClassPriors {
    pub fn get(&self, class: Class) -> f64 {
        match class {
            Class::Sad => self.speech,
            Class::Md => self.music,
            Class::Nd => self.noise,
            Class::Osd => self.overlap,
        }
    }
}

/// Chance that a class has an event in a scene.
const PRESENCE: f64 = 0.8;

/// Event length as a fraction of the scene, with the given mean.
fn draw_fraction(mean: f64, rng: &mut ChaCha8Rng) -> f64 {
    let m = mean.clamp(0.02, 0.98);
    let half = 0.6 * m.min(1.0 - m);
    rng.gen_range(m - half..=m + half)
}

fn place(dur: f64, span: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let on = rng.gen_range(0.0..=(span - dur).max(0.0));
    (on, on + dur)
}

/// Draws a random scene whose expected frame coverage follows `priors`.
pub fn sample_scene(duration_s: f64, priors: &ClassPriors, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    let speech_mean = (priors.speech / PRESENCE).min(0.95);
    if rng.gen_bool(PRESENCE) && priors.speech > 0.0 {
        let dur = draw_fraction(speech_mean, &mut rng) * duration_s;
        let (on, off) = place(dur, duration_s, &mut rng);
        events.push(Event {
            source: Source::Speech,
            onset_s: on,
            offset_s: off,
            gain: rng.gen_range(0.35..0.6),
            seed: rng.gen(),
        });
        // A second speaker inside the first, covering about half of it.
        let p_overlap = (priors.overlap / (0.5 * PRESENCE * speech_mean)).clamp(0.0, 1.0);
        if rng.gen_bool(p_overlap) {
            let d2 = dur * rng.gen_range(0.3..0.7);
            let on2 = on + rng.gen_range(0.0..=(dur - d2));
            events.push(Event {
                source: Source::Speech,
                onset_s: on2,
                offset_s: on2 + d2,
                gain: rng.gen_range(0.35..0.6),
                seed: rng.gen(),
            });
        }
    }
    if rng.gen_bool(PRESENCE) && priors.music > 0.0 {
        let dur = draw_fraction(priors.music / PRESENCE, &mut rng) * duration_s;
        let (on, off) = place(dur, duration_s, &mut rng);
        events.push(Event {
            source: Source::Music,
            onset_s: on,
            offset_s: off,
            gain: rng.gen_range(0.15..0.35),
            seed: rng.gen(),
        });
    }
    if rng.gen_bool(PRESENCE) && priors.noise > 0.0 {
        let dur = draw_fraction(priors.noise / PRESENCE, &mut rng) * duration_s;
        let (on, off) = place(dur, duration_s, &mut rng);
        let color = if rng.gen_bool(0.5) {
            NoiseColor::Pink
        } else {
            NoiseColor::Brown
        };
        events.push(Event {
            source: Source::Noise(color),
            onset_s: on,
            offset_s: off,
            gain: rng.gen_range(0.08..0.2),
            seed: rng.gen(),
        });
    }
    SceneSpec {
        duration_s,
        events,
        seed,
    }
}

/// Mixes `key` into `seed` (splitmix64 finalizer).
pub fn rng_seed(seed: u64, key: u64) -> u64 {
    let mut z = seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A segment holding one class for its whole length. Overlap segments hold
/// two concurrent speakers (so SAD is active too).
pub fn single_class_segment(class: Class, dur_s: f64, seed: u64) -> Result<(AudioClip, LabeledSegments)> {
    check_duration(dur_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut event = |source| Event {
        source,
        onset_s: 0.0,
        offset_s: dur_s,
        gain: 0.5,
        seed: rng.gen(),
    };
    let events = match class {
        Class::Sad => vec![event(Source::Speech)],
        Class::Md => vec![event(Source::Music)],
        Class::Nd => {
            let color = if seed.is_multiple_of(2) {
                NoiseColor::Pink
            } else {
                NoiseColor::Brown
            };
            vec![event(Source::Noise(color))]
        }
        Class::Osd => vec![event(Source::Speech), event(Source::Speech)],
    };
    SceneSpec {
        duration_s: dur_s,
        events,
        seed,
    }
    .render()
}

/// At least `min_fraction` of frames carry `class` and no frame carries any
/// other class (SAD is allowed alongside OSD).
pub fn is_exclusive(labels: &LabeledSegments, class: Class, min_fraction: f64) -> bool {
    let t = labels.num_frames();
    if t == 0 {
        return false;
    }
    let row = |c: Class| labels.labels.row(c.index());
    let on = row(class).iter().filter(|&&v| v == 1.0).count();
    let others_clear = Class::ALL
        .iter()
        .filter(|&&c| c != class && !(class == Class::Osd && c == Class::Sad))
        .all(|&c| row(c).iter().all(|&v| v == 0.0));
    on as f64 >= min_fraction * t as f64 && others_clear
}

/// Single-class clips of 1–4 s for dictionary pretraining, `n` per class.
pub fn nmf_pool(counts: &[(Class, usize)], seed: u64) -> Result<Vec<PoolSegment>> {
    let stft = Stft::new(StftConfig::default(), SAMPLE_RATE)?;
    // Frames cover up to one hop less than the clip; keep coverage ≥ 1 s.
    let min_s = 1.0 + stft.hop() as f64 / SAMPLE_RATE as f64;
    let jobs: Vec<(Class, u64)> = counts
        .iter()
        .flat_map(|&(c, n)| (0..n as u64).map(move |i| (c, i)))
        .collect();
    jobs.par_iter()
        .map(|&(class, i)| {
            let s = rng_seed(seed, (class.index() as u64) << 32 | i);
            let dur = ChaCha8Rng::seed_from_u64(s).gen_range(min_s..4.0);
            let (clip, _) = single_class_segment(class, dur, s)?;
            Ok(PoolSegment {
                class,
                spectrogram: stft.log_spectrogram(&clip)?,
            })
        })
        .collect()
}

/// Speech-only clips with activity tracks, for overlap mixtures.
pub fn speech_sources(count: usize, dur_s: f64, seed: u64) -> Result<Vec<SpeechSource>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let (clip, labels) = single_class_segment(Class::Sad, dur_s, rng_seed(seed, i))?;
            let active = labels.labels.row(Class::Sad.index()).iter().map(|&v| v == 1.0).collect();
            Ok(SpeechSource { clip, active })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub scene_duration_s: f64,
    pub priors: ClassPriors,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_val: 40,
            n_test: 40,
            scene_duration_s: 4.0,
            priors: ClassPriors::default(),
            seed: 0,
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// One manifest line: label fractions of a generated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub split: &'static str,
    pub id: String,
    pub fractions: [f64; NUM_CLASSES],
}

pub fn scene_id(i: usize) -> String {
    format!("scene_{i:05}")
}

/// Seed of scene `i` in split `split`; splits use disjoint key ranges.
pub fn scene_seed(master: u64, split: usize, i: usize) -> u64 {
    rng_seed(master, ((split as u64) << 40) | i as u64)
}

/// Writes `root/{train,val,test}/{wav,labels}/scene_%05d.{wav,seg}` and
/// `root/manifest.csv`.
pub fn generate_corpus(root: &Path, cfg: &CorpusConfig) -> Result<Vec<ManifestRow>> {
    let counts = [cfg.n_train, cfg.n_val, cfg.n_test];
    if counts.contains(&0) {
        return Err(Error::Config("every split needs at least one scene".into()));
    }
    let stft = Stft::new(StftConfig::default(), SAMPLE_RATE)?;
    let mut rows = Vec::new();
    for (s, (&split, &n)) in SPLITS.iter().zip(&counts).enumerate() {
        let wav_dir = root.join(split).join("wav");
        let label_dir = root.join(split).join("labels");
        fs::create_dir_all(&wav_dir)?;
        fs::create_dir_all(&label_dir)?;
        let split_rows: Vec<ManifestRow> = (0..n)
            .into_par_iter()
            .map(|i| {
                let spec = sample_scene(cfg.scene_duration_s, &cfg.priors, scene_seed(cfg.seed, s, i));
                let (clip, labels) = spec.render()?;
                let id = scene_id(i);
                write_wav(wav_dir.join(format!("{id}.wav")), &clip)?;
                let segs = frames_to_segments(&labels.labels, stft.hop() as f64 / SAMPLE_RATE as f64, 0.0)?;
                let mut f = fs::File::create(label_dir.join(format!("{id}.seg")))?;
                write_segments(&mut f, &id, &segs)?;
                let t = labels.num_frames().max(1) as f64;
                let mut fractions = [0.0; NUM_CLASSES];
                for (c, v) in fractions.iter_mut().enumerate() {
                    *v = labels.labels.row(c).iter().sum::<f64>() / t;
                }
                Ok(ManifestRow {
                    split,
                    id,
                    fractions,
                })
            })
            .collect::<Result<_>>()?;
        rows.extend(split_rows);
    }
    let mut m = fs::File::create(root.join("manifest.csv"))?;
    writeln!(m, "split,scene,wav,sad,md,nd,osd")?;
    for r in &rows {
        let f = r.fractions;
        writeln!(
            m,
            "{},{},{}/wav/{}.wav,{:.4},{:.4},{:.4},{:.4}",
            r.split, r.id, r.split, r.id, f[0], f[1], f[2], f[3]
        )?;
    }
    Ok(rows)
}

/// A scene read back from disk.
#[derive(Clone, Debug)]
pub struct Scene {
    pub id: String,
    pub wav: PathBuf,
    pub clip: AudioClip,
    pub labels: LabeledSegments,
}

/// Loads every scene of a split, sorted by id.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<Scene>> {
    let wav_dir = root.join(split).join("wav");
    let mut ids: Vec<String> = fs::read_dir(&wav_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".wav").map(str::to_string)
        })
        .collect();
    ids.sort();
    let stft = Stft::new(StftConfig::default(), SAMPLE_RATE)?;
    let step = stft.hop() as f64 / SAMPLE_RATE as f64;
    ids.into_par_iter()
        .map(|id| {
            let wav = wav_dir.join(format!("{id}.wav"));
            let clip = read_wav(&wav)?;
            let frames = stft.num_frames(clip.len()).ok_or(Error::InputTooShort {
                needed: stft.frame_len(),
                got: clip.len(),
            })?;
            let text = fs::read_to_string(root.join(split).join("labels").join(format!("{id}.seg")))?;
            let labels = parse_segments(&text)?.labels(&id, frames, step)?;
            Ok(Scene {
                id,
                wav,
                clip,
                labels,
            })
        })
        .collect()
}

/// Spectrogram/label pairs for training and evaluation.
pub fn to_examples(scenes: &[Scene]) -> Result<Vec<Example>> {
    let stft = Stft::new(StftConfig::default(), SAMPLE_RATE)?;
    scenes
        .par_iter()
        .map(|s| {
            Ok(Example {
                input: stft.log_spectrogram(&s.clip)?.bins,
                target: s.labels.clone(),
            })
        })
        .collect()
}
