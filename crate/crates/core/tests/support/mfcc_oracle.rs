use std::f64::consts::PI;
use vaanet::audio::{MfccConfig, Waveform};

fn mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

fn hz(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

pub fn energies(w: &Waveform, cfg: &MfccConfig) -> Vec<Vec<f64>> {
    let sr = w.sample_rate as f64;
    let frame = (cfg.frame_secs * sr).round() as usize;
    let hop = (cfg.hop_secs * sr).round() as usize;
    let mut n_fft = 1;
    while n_fft < frame {
        n_fft *= 2;
    }
    let x = &w.samples;
    let emph: Vec<f64> = (0..x.len())
        .map(|i| x[i] - if i == 0 { 0.0 } else { cfg.pre_emphasis * x[i - 1] })
        .collect();
    let top = mel(sr / 2.0);
    let edge = |i: usize| hz(top * i as f64 / (cfg.n_mels + 1) as f64);
    let mut out = Vec::new();
    let mut start = 0;
    while start + frame <= x.len() {
        let seg: Vec<f64> = (0..frame)
            .map(|i| emph[start + i] * (1.0 - (2.0 * PI * i as f64 / frame as f64).cos()) / 2.0)
            .collect();
        let mag: Vec<f64> = (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, v) in seg.iter().enumerate() {
                    let a = -2.0 * PI * (k * i) as f64 / n_fft as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect();
        let row = (0..cfg.n_mels)
            .map(|m| {
                let (a, b, c) = (edge(m), edge(m + 1), edge(m + 2));
                mag.iter()
                    .enumerate()
                    .map(|(k, v)| {
                        let f = k as f64 * sr / n_fft as f64;
                        let tri = if f <= a || f >= c {
                            0.0
                        } else if f <= b {
                            (f - a) / (b - a)
                        } else {
                            (c - f) / (c - b)
                        };
                        tri * v
                    })
                    .sum()
            })
            .collect();
        out.push(row);
        start += hop;
    }
    out
}

pub fn mfcc(w: &Waveform, cfg: &MfccConfig) -> Vec<Vec<f64>> {
    energies(w, cfg)
        .into_iter()
        .map(|e| {
            let m = e.len() as f64;
            let logs: Vec<f64> = e.iter().map(|v| v.max(cfg.log_floor).ln()).collect();
            (0..cfg.n_mfcc)
                .map(|k| {
                    let norm = if k == 0 { 1.0 / m } else { 2.0 / m };
                    norm.sqrt()
                        * logs
                            .iter()
                            .enumerate()
                            .map(|(j, v)| v * (PI * k as f64 * (j as f64 + 0.5) / m).cos())
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}
