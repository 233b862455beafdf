//! Audio ingestion and log-compressed magnitude spectrograms.
//!
//! Spectrogram entries are `ln(1 + |STFT|)`, which keeps every entry
//! non-negative so the same matrix can serve as an NMF target. A plain log
//! of the magnitude would go negative for quiet bins.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Working sample rate; everything else is resampled on ingest.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    /// Wraps samples, rejecting non-finite values and rescaling by the peak
    /// when it exceeds 1.
    pub fn new(mut samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Domain("audio contains non-finite samples".into()));
        }
        let peak = peak(&samples);
        if peak > 1.0 {
            samples.iter_mut().for_each(|s| *s /= peak);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(duration_s: f64, sample_rate: u32) -> Self {
        let n = (duration_s * sample_rate as f64).round() as usize;
        Self {
            samples: vec![0.0; n],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        peak(&self.samples)
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    /// Linear-interpolation resampling.
    pub fn resample(&self, target_rate: u32) -> AudioClip {
        if target_rate == self.sample_rate || self.samples.is_empty() {
            return AudioClip {
                samples: self.samples.clone(),
                sample_rate: target_rate,
            };
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let n_out = ((self.samples.len() as f64) / ratio).floor().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..n_out)
            .map(|i| {
                let pos = i as f64 * ratio;
                let j = (pos.floor() as usize).min(last);
                let frac = pos - j as f64;
                let next = self.samples[(j + 1).min(last)];
                self.samples[j] * (1.0 - frac) + next * frac
            })
            .collect();
        AudioClip {
            samples,
            sample_rate: target_rate,
        }
    }
}

fn peak(samples: &[f64]) -> f64 {
    samples.iter().fold(0.0, |m, s| m.max(s.abs()))
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Format(other.to_string()),
    }
}

/// Reads a PCM WAV file (16-bit integer or 32-bit float, mono or stereo),
/// averages channels and resamples to [`SAMPLE_RATE`].
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::Format(format!("{} channels", spec.channels)));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(Error::Format(format!("{bits}-bit {fmt:?} samples")));
        }
    };
    let channels = spec.channels as usize;
    let mono = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok(AudioClip::new(mono, spec.sample_rate)?.resample(SAMPLE_RATE))
}

/// Writes mono 16-bit PCM.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_hound)?;
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)
}

/// Analysis window and hop, in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StftConfig {
    pub frame_len_s: f64,
    pub frame_step_s: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_len_s: 0.064,
            frame_step_s: 0.020,
        }
    }
}

/// Non-negative `F × T` log-magnitude spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub bins: Tensor,
    pub bin_hz: f64,
    pub frame_step_s: f64,
    pub frame_len_s: f64,
}

impl Spectrogram {
    pub fn num_bins(&self) -> usize {
        self.bins.rows()
    }

    pub fn num_frames(&self) -> usize {
        self.bins.cols()
    }

    /// Frames `[start, end)` as a new spectrogram.
    pub fn slice_frames(&self, start: usize, end: usize) -> Spectrogram {
        let t = self.num_frames();
        let end = end.min(t);
        let start = start.min(end);
        let f = self.num_bins();
        let bins = Tensor::from_fn(f, end - start, |r, c| self.bins.data()[r * t + start + c]);
        Spectrogram {
            bins,
            ..self.clone()
        }
    }

    /// Concatenates spectrograms with identical bin layout along time.
    pub fn concat(parts: &[&Spectrogram]) -> Result<Spectrogram> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyInput("no spectrograms to concatenate".into()))?;
        let f = first.num_bins();
        if let Some(bad) = parts.iter().find(|p| p.num_bins() != f) {
            return Err(Error::Shape {
                op: "concat",
                left: first.bins.shape().to_vec(),
                right: bad.bins.shape().to_vec(),
            });
        }
        let total: usize = parts.iter().map(|p| p.num_frames()).sum();
        let mut data = Vec::with_capacity(f * total);
        for r in 0..f {
            for p in parts {
                data.extend_from_slice(p.bins.row(r));
            }
        }
        Ok(Spectrogram {
            bins: Tensor::new(vec![f, total], data)?,
            ..(*first).clone()
        })
    }

    /// Writes one row per frequency bin: `hz,frame_0,frame_1,...`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let t = self.num_frames();
        write!(w, "hz")?;
        for c in 0..t {
            write!(w, ",frame_{c}")?;
        }
        writeln!(w)?;
        for r in 0..self.num_bins() {
            write!(w, "{}", r as f64 * self.bin_hz)?;
            for v in self.bins.row(r) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Short-time Fourier analysis with a periodic Hann window and a cached FFT
/// plan.
pub struct Stft {
    config: StftConfig,
    sample_rate: u32,
    frame_len: usize,
    hop: usize,
    fft_size: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(config: StftConfig, sample_rate: u32) -> Result<Self> {
        let frame_len = (config.frame_len_s * sample_rate as f64).round() as usize;
        let hop = (config.frame_step_s * sample_rate as f64).round() as usize;
        if frame_len == 0 || hop == 0 {
            return Err(Error::Config("frame length and step must be positive".into()));
        }
        let fft_size = frame_len.next_power_of_two();
        let window = (0..frame_len)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / frame_len as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        Ok(Self {
            config,
            sample_rate,
            frame_len,
            hop,
            fft_size,
            window,
            fft,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn bin_hz(&self) -> f64 {
        self.sample_rate as f64 / self.fft_size as f64
    }

    /// `1 + floor((N − frame_len) / hop)`, or `None` when the clip is
    /// shorter than one frame.
    pub fn num_frames(&self, num_samples: usize) -> Option<usize> {
        (num_samples >= self.frame_len).then(|| 1 + (num_samples - self.frame_len) / self.hop)
    }

    /// Linear magnitudes, `F × T`.
    pub fn magnitudes(&self, clip: &AudioClip) -> Result<Tensor> {
        if clip.sample_rate() != self.sample_rate {
            return Err(Error::Config(format!(
                "clip is {} Hz, analysis expects {} Hz",
                clip.sample_rate(),
                self.sample_rate
            )));
        }
        let t = self.num_frames(clip.len()).ok_or(Error::InputTooShort {
            needed: self.frame_len,
            got: clip.len(),
        })?;
        let f = self.num_bins();
        let mut out = vec![0.0; f * t];
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let samples = clip.samples();
        for frame in 0..t {
            let start = frame * self.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < self.frame_len {
                    Complex::new(samples[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (bin, v) in buf.iter().take(f).enumerate() {
                out[bin * t + frame] = v.norm();
            }
        }
        Tensor::new(vec![f, t], out)
    }

    /// `ln(1 + |STFT|)` spectrogram.
    pub fn log_spectrogram(&self, clip: &AudioClip) -> Result<Spectrogram> {
        let bins = self.magnitudes(clip)?.map(f64::ln_1p);
        Ok(Spectrogram {
            bins,
            bin_hz: self.bin_hz(),
            frame_step_s: self.config.frame_step_s,
            frame_len_s: self.config.frame_len_s,
        })
    }
}

/// One-shot convenience around [`Stft::log_spectrogram`].
pub fn log_spectrogram(clip: &AudioClip, config: StftConfig) -> Result<Spectrogram> {
    Stft::new(config, clip.sample_rate())?.log_spectrogram(clip)
}
