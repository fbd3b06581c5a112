//! MFCC, MFCC delta and spectral-flux onset features, one row per motion frame.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::sequence::AudioFeatureSequence;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Feature width used by the reference model at full scale.
pub const FULL_SCALE_AUDIO_DIMS: usize = 438;

const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioConfig {
    /// Target feature rate; must divide the sample rate.
    pub fps: f64,
    pub window: usize,
    pub n_mels: usize,
    pub mfcc_count: usize,
    /// Half-width of the delta regression.
    pub delta_width: usize,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            fps: 20.0,
            window: 512,
            n_mels: 26,
            mfcc_count: 8,
            delta_width: 2,
        }
    }
}

impl AudioConfig {
    /// `2 · mfcc_count + 1`.
    pub fn dims(&self) -> usize {
        2 * self.mfcc_count + 1
    }

    pub fn hop(&self, rate: f64) -> Result<usize> {
        let hop = rate / self.fps;
        if !(hop >= 1.0) || (hop - hop.round()).abs() > 1e-9 {
            return Err(Error::Audio(format!(
                "sample rate {rate} is not a whole multiple of the feature rate {}",
                self.fps
            )));
        }
        Ok(hop.round() as usize)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over `n_fft / 2 + 1` bins, 0 Hz to Nyquist.
fn mel_filterbank(n_mels: usize, n_fft: usize, rate: f64) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let top = hz_to_mel(rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64) * n_fft as f64 / rate)
        .collect();
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|b| {
                    let b = b as f64;
                    if b <= lo || b >= hi {
                        0.0
                    } else if b <= mid {
                        (b - lo) / (mid - lo)
                    } else {
                        (hi - b) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II, first `count` coefficients.
fn dct(x: &[f64], count: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..count)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos())
                .sum();
            let norm = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * norm
        })
        .collect()
}

/// Regression deltas with edge replication.
fn deltas(rows: &[Vec<f64>], width: usize) -> Vec<Vec<f64>> {
    let t = rows.len();
    let dims = rows.first().map_or(0, Vec::len);
    let denom: f64 = 2.0 * (1..=width).map(|n| (n * n) as f64).sum::<f64>();
    (0..t)
        .map(|i| {
            (0..dims)
                .map(|d| {
                    (1..=width)
                        .map(|n| {
                            let ahead = rows[(i + n).min(t - 1)][d];
                            let behind = rows[i.saturating_sub(n)][d];
                            n as f64 * (ahead - behind)
                        })
                        .sum::<f64>()
                        / denom
                })
                .collect()
        })
        .collect()
}

/// Columns are `[mfcc.., delta.., onset]`. Frame `i` is centered on sample `i · hop`
/// with zero padding outside the signal, giving `len / hop` frames.
pub fn extract_audio_features(samples: &[f64], rate: f64, config: &AudioConfig) -> Result<AudioFeatureSequence> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Audio(format!("sample rate must be positive, got {rate}")));
    }
    if config.window < 2 || config.mfcc_count == 0 || config.mfcc_count > config.n_mels {
        return Err(Error::Audio(format!(
            "bad analysis settings: window {}, {} mels, {} coefficients",
            config.window, config.n_mels, config.mfcc_count
        )));
    }
    if samples.len() < config.window {
        return Err(Error::Audio(format!(
            "window of {} samples is longer than the {}-sample signal",
            config.window,
            samples.len()
        )));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Audio("waveform contains non-finite samples".into()));
    }
    let hop = config.hop(rate)?;
    let frames = samples.len() / hop;
    let n = config.window;
    let hann: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect();
    let bank = mel_filterbank(config.n_mels, n, rate);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];

    let mut log_mel = Vec::with_capacity(frames);
    for f in 0..frames {
        let start = (f * hop) as isize - (n / 2) as isize;
        for (i, c) in buf.iter_mut().enumerate() {
            let idx = start + i as isize;
            let s = if idx >= 0 && (idx as usize) < samples.len() {
                samples[idx as usize]
            } else {
                0.0
            };
            *c = Complex::new(s * hann[i], 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        let mel: Vec<f64> = bank
            .iter()
            .map(|w| {
                let e: f64 = w.iter().zip(&power).map(|(a, b)| a * b).sum();
                (e + LOG_FLOOR).ln()
            })
            .collect();
        log_mel.push(mel);
    }

    let mfcc: Vec<Vec<f64>> = log_mel.iter().map(|m| dct(m, config.mfcc_count)).collect();
    let delta = deltas(&mfcc, config.delta_width);
    let onset = onset_strength(&log_mel);

    let dims = config.dims();
    let mut data = Vec::with_capacity(frames * dims);
    for i in 0..frames {
        data.extend_from_slice(&mfcc[i]);
        data.extend_from_slice(&delta[i]);
        data.push(onset[i]);
    }
    let features = Tensor::new(&[frames, dims], data)?;
    AudioFeatureSequence::new(rate / hop as f64, features, None)
}

/// Half-wave rectified frame-to-frame increase of the log-mel spectrum, summed over bands.
pub fn onset_strength(log_mel: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; log_mel.len()];
    for t in 1..log_mel.len() {
        out[t] = log_mel[t]
            .iter()
            .zip(&log_mel[t - 1])
            .map(|(a, b)| (a - b).max(0.0))
            .sum();
    }
    out
}

/// Frames that are local maxima of `onset`, at least `threshold` of the global peak,
/// and at least `min_gap` frames after the previous pick.
pub fn pick_onset_peaks(onset: &[f64], threshold: f64, min_gap: usize) -> Vec<usize> {
    let peak = onset.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Vec::new();
    }
    let mut picks: Vec<usize> = Vec::new();
    for t in 0..onset.len() {
        let v = onset[t];
        let left = if t > 0 { onset[t - 1] } else { f64::NEG_INFINITY };
        let right = onset.get(t + 1).copied().unwrap_or(f64::NEG_INFINITY);
        if v >= threshold * peak && v > left && v >= right {
            if picks.last().is_none_or(|&p| t - p >= min_gap) {
                picks.push(t);
            }
        }
    }
    picks
}

/// Beat times (seconds) estimated from the last feature column.
pub fn onset_beats(features: &AudioFeatureSequence) -> Vec<f64> {
    let col = features.dims() - 1;
    let onset: Vec<f64> = (0..features.frames()).map(|t| features.features().at(t, col)).collect();
    pick_onset_peaks(&onset, 0.3, 3)
        .into_iter()
        .map(|t| t as f64 / features.frame_rate)
        .collect()
}
