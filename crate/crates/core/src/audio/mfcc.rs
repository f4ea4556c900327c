use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Real, Tensor};

/// MFCC front-end settings. Frame and hop lengths are rounded to whole samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub frame_secs: f64,
    pub hop_secs: f64,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub pre_emphasis: f64,
    /// Floor applied to filterbank energies before the log.
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            frame_secs: 0.025,
            hop_secs: 0.010,
            n_mels: 40,
            n_mfcc: 20,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn frame_len(&self, sample_rate: u32) -> usize {
        (self.frame_secs * sample_rate as f64).round() as usize
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        (self.hop_secs * sample_rate as f64).round() as usize
    }

    /// FFT size: the smallest power of two holding one frame.
    pub fn fft_len(&self, sample_rate: u32) -> usize {
        self.frame_len(sample_rate).next_power_of_two()
    }

    fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.frame_len(sample_rate) < 2 || self.hop_len(sample_rate) == 0 {
            return Err(Error::Config(format!(
                "frame {}s / hop {}s too short at {sample_rate} Hz",
                self.frame_secs, self.hop_secs
            )));
        }
        if self.n_mels == 0 || self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::Config(format!(
                "need 0 < n_mfcc ({}) <= n_mels ({})",
                self.n_mfcc, self.n_mels
            )));
        }
        Ok(())
    }
}

/// Coefficient matrix `n_mfcc × n_frames` plus the framing that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct MfccDescriptor {
    pub coeffs: Tensor,
    pub frame_secs: f64,
    pub hop_secs: f64,
    pub n_mels: usize,
}

impl MfccDescriptor {
    pub fn n_mfcc(&self) -> usize {
        self.coeffs.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.coeffs.shape()[1]
    }

    /// Column `f` (one frame).
    pub fn frame(&self, f: usize) -> Vec<Real> {
        let n = self.n_frames();
        (0..self.n_mfcc()).map(|c| self.coeffs.data()[c * n + f]).collect()
    }

    pub(crate) fn with_frames(&self, frames: &[usize]) -> Self {
        let (n, rows) = (self.n_frames(), self.n_mfcc());
        let data = (0..rows)
            .flat_map(|c| frames.iter().map(move |&f| (c, f)))
            .map(|(c, f)| self.coeffs.data()[c * n + f])
            .collect();
        Self {
            coeffs: Tensor::new(&[rows, frames.len()], data).expect("shape matches"),
            frame_secs: self.frame_secs,
            hop_secs: self.hop_secs,
            n_mels: self.n_mels,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "mfcc",
            "frame_secs": self.frame_secs,
            "hop_secs": self.hop_secs,
            "n_mels": self.n_mels,
        }));
        ck.insert("coeffs", self.coeffs.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = || Error::Input("checkpoint does not hold an MFCC descriptor".into());
        let coeffs = ck.get("coeffs").ok_or_else(bad)?.clone();
        if coeffs.rank() != 2 {
            return Err(bad());
        }
        Ok(Self {
            coeffs,
            frame_secs: ck.meta["frame_secs"].as_f64().ok_or_else(bad)?,
            hop_secs: ck.meta["hop_secs"].as_f64().ok_or_else(bad)?,
            n_mels: ck.meta["n_mels"].as_u64().ok_or_else(bad)? as usize,
        })
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filter edges in Hz: `n_mels + 2` points evenly spaced on the
/// mel scale from 0 to Nyquist. Filter `i` peaks at `edges[i + 1]`.
pub fn mel_edges(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Filterbank weights `[n_mels][n_fft/2 + 1]`, evaluated at exact bin
/// frequencies `k·sr/n_fft`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let edges = mel_edges(n_mels, sample_rate);
    let bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

fn pre_emphasize(x: &[Real], coef: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut prev = 0.0;
    for &s in x {
        let s = s as f64;
        out.push(s - coef * prev);
        prev = s;
    }
    out
}

/// Mel filterbank energies (before the log), `[n_frames][n_mels]`.
pub fn mel_energies(w: &Waveform, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate(w.sample_rate)?;
    let (frame, hop, n_fft) = (
        cfg.frame_len(w.sample_rate),
        cfg.hop_len(w.sample_rate),
        cfg.fft_len(w.sample_rate),
    );
    if w.samples.len() < frame {
        return Err(Error::Input(format!(
            "waveform of {} samples is shorter than one {frame}-sample frame",
            w.samples.len()
        )));
    }
    let n_frames = (w.samples.len() - frame) / hop + 1;
    let signal = pre_emphasize(&w.samples, cfg.pre_emphasis);
    let window = hann(frame);
    let bank = mel_filterbank(cfg.n_mels, n_fft, w.sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let start = f * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < frame {
                Complex::new(signal[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        let mag: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm()).collect();
        out.push(
            bank.iter()
                .map(|filt| filt.iter().zip(&mag).map(|(a, b)| a * b).sum())
                .collect(),
        );
    }
    Ok(out)
}

/// Orthonormal DCT-II, first `keep` coefficients.
pub fn dct2(x: &[f64], keep: usize) -> Vec<f64> {
    let m = x.len() as f64;
    (0..keep)
        .map(|k| {
            let s = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            s * x
                .iter()
                .enumerate()
                .map(|(j, v)| v * (PI * k as f64 * (2 * j + 1) as f64 / (2.0 * m)).cos())
                .sum::<f64>()
        })
        .collect()
}

/// Waveform → MFCC matrix: pre-emphasis, Hann frames, magnitude spectrum,
/// mel filterbank, floored log, orthonormal DCT-II.
pub fn mfcc(w: &Waveform, cfg: &MfccConfig) -> Result<MfccDescriptor> {
    let energies = mel_energies(w, cfg)?;
    let n_frames = energies.len();
    let mut data = vec![0.0; cfg.n_mfcc * n_frames];
    for (f, e) in energies.iter().enumerate() {
        let logs: Vec<f64> = e.iter().map(|v| v.max(cfg.log_floor).ln()).collect();
        for (c, v) in dct2(&logs, cfg.n_mfcc).into_iter().enumerate() {
            data[c * n_frames + f] = v as Real;
        }
    }
    Ok(MfccDescriptor {
        coeffs: Tensor::new(&[cfg.n_mfcc, n_frames], data)?,
        frame_secs: cfg.frame_secs,
        hop_secs: cfg.hop_secs,
        n_mels: cfg.n_mels,
    })
}
