//! Synthetic tone corpora, resampling, and frame-level alignments.
//!
//! Utterances are sequences of random-length tone segments (one sinusoid per
//! segment, frequency drawn from the segment class's band) plus Gaussian
//! noise. Since every sample has a known generating class, frame-level
//! labels come for free and play the role a forced alignment would.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::FrameGeometry;
use crate::rng::stream;
use crate::wav;

/// Mono audio at 8 or 16 kHz, samples within [-1, 1].
#[derive(Debug, Clone)]
pub struct AudioBuffer {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl AudioBuffer {
    pub fn new(sample_rate: u32, samples: Vec<f32>) -> Result<Self> {
        if sample_rate != 8000 && sample_rate != 16000 {
            return Err(Error::InvalidArgument(format!(
                "sample rate {sample_rate} Hz unsupported (expected 8000 or 16000)"
            )));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty audio buffer".into()));
        }
        if !samples.iter().all(|s| s.is_finite() && (-1.0..=1.0).contains(s)) {
            return Err(Error::NonFinite("audio sample outside [-1, 1] or not finite".into()));
        }
        Ok(Self { sample_rate, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Nearest-neighbor 2x upsampling: out[n] = in[n/2].
pub fn nn_upsample_x2<T: Copy>(x: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len() * 2);
    for &v in x {
        out.push(v);
        out.push(v);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMethod {
    Nearest,
    Linear,
    WindowedSinc,
}

/// 33-tap Kaiser-windowed low-pass, unity DC gain.
/// `cutoff` and `fs` in Hz; the filter runs at rate `fs`.
fn kaiser_lowpass_taps(cutoff: f64, fs: f64) -> [f64; 33] {
    const BETA: f64 = 8.0;
    let m = 16.0;
    let fc = cutoff / fs; // cycles per sample
    let i0_beta = bessel_i0(BETA);
    let mut taps = [0.0f64; 33];
    let mut sum = 0.0;
    for (n, t) in taps.iter_mut().enumerate() {
        let k = n as f64 - m;
        let sinc = if k == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * k).sin() / (PI * k) };
        let r = k / m;
        let w = bessel_i0(BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
        *t = sinc * w;
        sum += *t;
    }
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

fn bessel_i0(x: f64) -> f64 {
    let mut total = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..40 {
        term *= (half / k as f64) * (half / k as f64);
        total += term;
        if term < 1e-14 * total {
            break;
        }
    }
    total
}

/// Resample by exactly 2x up or down.
pub fn resample(audio: &AudioBuffer, target_rate: u32, method: ResampleMethod) -> Result<AudioBuffer> {
    let src = audio.sample_rate;
    let x = &audio.samples;
    let out = if target_rate == src * 2 {
        match method {
            ResampleMethod::Nearest => nn_upsample_x2(x),
            ResampleMethod::Linear => {
                let mut out = Vec::with_capacity(x.len() * 2);
                for i in 0..x.len() {
                    out.push(x[i]);
                    let next = if i + 1 < x.len() { x[i + 1] } else { x[i] };
                    out.push(0.5 * (x[i] + next));
                }
                out
            }
            ResampleMethod::WindowedSinc => {
                let cutoff = 0.45 * src.min(target_rate) as f64;
                let taps = kaiser_lowpass_taps(cutoff, target_rate as f64);
                let n_out = x.len() * 2;
                let mut out = Vec::with_capacity(n_out);
                for n in 0..n_out {
                    let mut acc = 0.0f64;
                    for (j, &h) in taps.iter().enumerate() {
                        let idx = n as isize - 16 + j as isize;
                        // zero-stuffed input: nonzero only at even positions
                        if idx >= 0 && idx % 2 == 0 {
                            let s = (idx / 2) as usize;
                            if s < x.len() {
                                acc += h * x[s] as f64;
                            }
                        }
                    }
                    out.push((2.0 * acc) as f32);
                }
                out
            }
        }
    } else if src == target_rate * 2 {
        match method {
            ResampleMethod::Nearest | ResampleMethod::Linear => {
                x.iter().step_by(2).copied().collect()
            }
            ResampleMethod::WindowedSinc => {
                let cutoff = 0.45 * target_rate.min(src) as f64;
                let taps = kaiser_lowpass_taps(cutoff, src as f64);
                let n_out = x.len().div_ceil(2);
                let mut out = Vec::with_capacity(n_out);
                for n in 0..n_out {
                    let center = 2 * n;
                    let mut acc = 0.0f64;
                    for (j, &h) in taps.iter().enumerate() {
                        let idx = center as isize - 16 + j as isize;
                        if idx >= 0 && (idx as usize) < x.len() {
                            acc += h * x[idx as usize] as f64;
                        }
                    }
                    out.push(acc as f32);
                }
                out
            }
        }
    } else {
        return Err(Error::InvalidArgument(format!(
            "unsupported resample ratio {src} -> {target_rate} Hz (only 2x up or down)"
        )));
    };
    let clamped = out.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
    AudioBuffer::new(target_rate, clamped)
}

/// Low-pass an existing signal in place (telephony band limiting).
pub fn band_limit(samples: &mut [f32], sample_rate: u32, cutoff_hz: f64) {
    let taps = kaiser_lowpass_taps(cutoff_hz, sample_rate as f64);
    let src: Vec<f64> = samples.iter().map(|&s| s as f64).collect();
    for (n, out) in samples.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for (j, &h) in taps.iter().enumerate() {
            let idx = n as isize - 16 + j as isize;
            if idx >= 0 && (idx as usize) < src.len() {
                acc += h * src[idx as usize];
            }
        }
        *out = (acc as f32).clamp(-1.0, 1.0);
    }
}

// ---------------------------------------------------------------------------
// Corpus synthesis
// ---------------------------------------------------------------------------

/// One tone class: segment frequencies are drawn uniformly from this band.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToneClass {
    pub freq_lo: f64,
    pub freq_hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_utterances: usize,
    /// Utterance duration range in seconds.
    pub duration: (f64, f64),
    /// Tone segment duration range in seconds.
    #[serde(default = "default_segment_duration")]
    pub segment_duration: (f64, f64),
    pub sample_rate: u32,
    pub classes: Vec<ToneClass>,
    /// Gaussian noise standard deviation.
    pub noise_level: f64,
    /// Tone amplitude.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Low-pass everything to 0-4 kHz (telephony emulation).
    #[serde(default)]
    pub band_limit_4k: bool,
    pub seed: u64,
}

fn default_segment_duration() -> (f64, f64) {
    (0.1, 0.3)
}

fn default_amplitude() -> f64 {
    0.8
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_utterances == 0 {
            return Err(Error::InvalidArgument("num_utterances must be positive".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::InvalidArgument("at least one tone class required".into()));
        }
        if self.sample_rate != 8000 && self.sample_rate != 16000 {
            return Err(Error::InvalidArgument(format!(
                "sample rate {} Hz unsupported",
                self.sample_rate
            )));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for (i, c) in self.classes.iter().enumerate() {
            if !(c.freq_lo > 0.0 && c.freq_lo <= c.freq_hi && c.freq_hi < nyquist) {
                return Err(Error::InvalidArgument(format!(
                    "class {i} band [{}, {}] outside (0, nyquist {nyquist})",
                    c.freq_lo, c.freq_hi
                )));
            }
        }
        if !(self.duration.0 > 0.0 && self.duration.0 <= self.duration.1) {
            return Err(Error::InvalidArgument("bad duration range".into()));
        }
        if !(self.segment_duration.0 > 0.0 && self.segment_duration.0 <= self.segment_duration.1) {
            return Err(Error::InvalidArgument("bad segment duration range".into()));
        }
        if self.noise_level < 0.0 || self.amplitude <= 0.0 || self.amplitude + 4.0 * self.noise_level > 1.0 {
            return Err(Error::InvalidArgument(
                "amplitude/noise must keep samples within [-1, 1] (amplitude + 4*noise <= 1)".into(),
            ));
        }
        Ok(())
    }

    /// Evenly spaced class bands across 300-3400 Hz, telephony-safe at both rates.
    pub fn toy(num_classes: usize, num_utterances: usize, sample_rate: u32, seed: u64) -> Self {
        let lo = 300.0;
        let hi = 3400.0;
        let width = (hi - lo) / num_classes as f64;
        let classes = (0..num_classes)
            .map(|c| ToneClass {
                freq_lo: lo + c as f64 * width,
                freq_hi: lo + (c as f64 + 0.7) * width,
            })
            .collect();
        CorpusSpec {
            num_utterances,
            duration: (0.8, 1.1),
            segment_duration: default_segment_duration(),
            sample_rate,
            classes,
            noise_level: 0.02,
            amplitude: 0.8,
            band_limit_4k: false,
            seed,
        }
    }
}

/// A labeled span of samples; `end` is exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub sample_rate: u32,
    pub num_samples: usize,
    pub segments: Vec<Segment>,
}

/// An utterance loaded into memory.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub audio: AudioBuffer,
    pub segments: Vec<Segment>,
}

/// Generate one utterance's samples and segments, without touching disk.
pub fn synth_utterance(spec: &CorpusSpec, index: usize) -> (Vec<f32>, Vec<Segment>) {
    let mut rng = stream(spec.seed, "synth", &[index as u64]);
    let rate = spec.sample_rate as f64;
    let dur = spec.duration.0 + rng.gen::<f64>() * (spec.duration.1 - spec.duration.0);
    let n = (dur * rate) as usize;

    let mut segments = Vec::new();
    let mut tones = Vec::new(); // (freq, phase) per segment
    let mut pos = 0usize;
    while pos < n {
        let (smin, smax) = spec.segment_duration;
        let seg_dur = smin + rng.gen::<f64>() * (smax - smin);
        let mut end = pos + ((seg_dur * rate) as usize).max(1);
        // absorb a runt tail into the final segment
        if n.saturating_sub(end) < (smin * rate) as usize / 2 {
            end = n;
        }
        let end = end.min(n);
        let class = rng.gen_range(0..spec.classes.len());
        let band = &spec.classes[class];
        let freq = band.freq_lo + rng.gen::<f64>() * (band.freq_hi - band.freq_lo);
        let phase = rng.gen::<f64>() * 2.0 * PI;
        segments.push(Segment { start: pos, end, class });
        tones.push((freq, phase));
        pos = end;
    }

    let mut samples = vec![0.0f32; n];
    for (seg, &(freq, phase)) in segments.iter().zip(tones.iter()) {
        for k in seg.start..seg.end {
            let t = k as f64 / rate;
            samples[k] = (spec.amplitude * (2.0 * PI * freq * t + phase).sin()) as f32;
        }
    }
    if spec.noise_level > 0.0 {
        for s in samples.iter_mut() {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            *s += (spec.noise_level * z) as f32;
        }
    }
    if spec.band_limit_4k {
        band_limit(&mut samples, spec.sample_rate, 3600.0);
    }
    for s in samples.iter_mut() {
        *s = s.clamp(-1.0, 1.0);
    }
    (samples, segments)
}

/// Write WAV files plus `manifest.jsonl` under `out_dir`; returns the manifest path.
pub fn synth_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(spec.num_utterances);
    for i in 0..spec.num_utterances {
        let (samples, segments) = synth_utterance(spec, i);
        let id = format!("utt-{i:04}");
        let rel = format!("{id}.wav");
        wav::save_wav(&out_dir.join(&rel), spec.sample_rate, &samples)?;
        entries.push(ManifestEntry {
            id,
            path: rel,
            sample_rate: spec.sample_rate,
            num_samples: samples.len(),
            segments,
        });
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&manifest_path, &entries)?;
    Ok(manifest_path)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path)?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Config {
            path: format!("{}:{}", path.display(), i + 1),
            reason: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Load the WAV behind a manifest entry; `base` is the manifest's directory.
pub fn load_utterance(entry: &ManifestEntry, base: &Path) -> Result<Utterance> {
    let (rate, samples) = wav::load_wav(&base.join(&entry.path))?;
    if rate != entry.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "manifest says {} Hz but {} is {} Hz",
            entry.sample_rate, entry.path, rate
        )));
    }
    Ok(Utterance {
        id: entry.id.clone(),
        audio: AudioBuffer::new(rate, samples)?,
        segments: entry.segments.clone(),
    })
}

/// Per-frame class ids: frame t takes the class of the segment containing
/// its center sample; centers past the last segment reuse the final class.
pub fn frame_labels(segments: &[Segment], num_samples: usize, geometry: &FrameGeometry) -> Result<Vec<usize>> {
    if segments.is_empty() {
        return Err(Error::InvalidArgument("utterance has no segments".into()));
    }
    let frames = geometry.output_len(num_samples)?;
    let half_rf = geometry.receptive_field_samples / 2;
    let mut labels = Vec::with_capacity(frames);
    let mut seg = 0usize;
    for t in 0..frames {
        let center = geometry.start_index(t) + half_rf;
        while seg + 1 < segments.len() && center >= segments[seg].end {
            seg += 1;
        }
        labels.push(segments[seg].class);
    }
    Ok(labels)
}
