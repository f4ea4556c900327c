//! Synthetic audiovisual emotion dataset with a known generating rule.
//!
//! Class `c` of `C` draws a blob of hue `360°·c/C` moving in direction
//! `2π·c/C`, visible only inside temporal window `c mod windows`, over dim
//! grey noise. Its soundtrack is a sine at `base_hz + step_hz·c` plus noise.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::data::{FrameStack, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::loss::{EmotionTaxonomy, Polarity};
use crate::numerics::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Number of equal temporal windows; a class is visible in one of them.
    pub windows: usize,
    pub sample_rate: u32,
    pub duration_secs: f64,
    pub base_hz: f64,
    pub step_hz: f64,
    pub blob_radius: f64,
    pub speed: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 24,
            height: 32,
            width: 40,
            windows: 4,
            sample_rate: 16000,
            duration_secs: 1.0,
            base_hz: 400.0,
            step_hz: 300.0,
            blob_radius: 6.0,
            speed: 1.5,
        }
    }
}

impl SynthConfig {
    pub fn hue(&self, class: usize, classes: usize) -> f64 {
        360.0 * class as f64 / classes as f64
    }

    pub fn tone_hz(&self, class: usize) -> f64 {
        self.base_hz + self.step_hz * class as f64
    }

    /// Frames `[start, end)` in which class `c` is visible.
    pub fn window(&self, class: usize) -> (usize, usize) {
        let w = class % self.windows;
        (w * self.frames / self.windows, (w + 1) * self.frames / self.windows)
    }
}

/// Taxonomy for `n ≤ 8` synthetic classes, alternating negative and
/// positive emotions.
pub fn synth_taxonomy(n: usize) -> Result<EmotionTaxonomy> {
    const NEG: [&str; 4] = ["anger", "fear", "sadness", "disgust"];
    const POS: [&str; 4] = ["joy", "surprise", "trust", "anticipation"];
    if !(2..=8).contains(&n) {
        return Err(Error::Config(format!("synthetic datasets support 2 to 8 classes, got {n}")));
    }
    let mut classes = Vec::new();
    let mut polarity = BTreeMap::new();
    for i in 0..n {
        let (name, p) = if i % 2 == 0 {
            (NEG[i / 2], Polarity::Negative)
        } else {
            (POS[i / 2], Polarity::Positive)
        };
        classes.push(name.to_string());
        polarity.insert(name.to_string(), p);
    }
    EmotionTaxonomy::new(classes, &polarity)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let max = rgb.iter().cloned().fold(f64::MIN, f64::max);
    let min = rgb.iter().cloned().fold(f64::MAX, f64::min);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == rgb[0] {
        60.0 * (((rgb[1] - rgb[2]) / d).rem_euclid(6.0))
    } else if max == rgb[1] {
        60.0 * ((rgb[2] - rgb[0]) / d + 2.0)
    } else {
        60.0 * ((rgb[0] - rgb[1]) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

/// Renders one video of class `class`.
pub fn render_video<R: Rng>(cfg: &SynthConfig, class: usize, classes: usize, rng: &mut R) -> FrameStack {
    let (h, w) = (cfg.height, cfg.width);
    let color = hsv_to_rgb(cfg.hue(class, classes), 1.0, 1.0);
    let angle = 2.0 * PI * class as f64 / classes as f64;
    let (start, end) = cfg.window(class);
    let mut y = h as f64 / 2.0 + rng.gen_range(-3.0..3.0);
    let mut x = w as f64 / 2.0 + rng.gen_range(-3.0..3.0);
    let mut data = Vec::with_capacity(cfg.frames * h * w * 3);
    for f in 0..cfg.frames {
        let visible = (start..end).contains(&f);
        if visible {
            y = (y + cfg.speed * angle.sin()).clamp(cfg.blob_radius, h as f64 - cfg.blob_radius);
            x = (x + cfg.speed * angle.cos()).clamp(cfg.blob_radius, w as f64 - cfg.blob_radius);
        }
        for py in 0..h {
            for px in 0..w {
                let grey: f64 = rng.gen_range(0.0..0.15);
                let d2 = (py as f64 + 0.5 - y).powi(2) + (px as f64 + 0.5 - x).powi(2);
                let inside = visible && d2 <= cfg.blob_radius * cfg.blob_radius;
                for ch in 0..3 {
                    let v = if inside { color[ch] } else { grey };
                    data.push((v * 255.0).round() as u8);
                }
            }
        }
    }
    FrameStack::new(cfg.frames, h, w, data).expect("rendered shape")
}

/// Renders the soundtrack of one video of class `class`.
pub fn render_audio<R: Rng>(cfg: &SynthConfig, class: usize, rng: &mut R) -> Waveform {
    let n = (cfg.duration_secs * cfg.sample_rate as f64).round() as usize;
    let hz = cfg.tone_hz(class);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let amp = rng.gen_range(0.3..0.6);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / cfg.sample_rate as f64;
            (amp * (2.0 * PI * hz * t + phase).sin() + rng.gen_range(-0.05..0.05)) as Real
        })
        .collect();
    Waveform::new(samples, cfg.sample_rate).expect("non-empty soundtrack")
}

/// Writes `n_per_class` videos per class of `taxonomy` under `out`:
/// `manifest.jsonl`, `taxonomy.json` and `media/`. The first `⌈2n/3⌉`
/// videos of each class are tagged `train`, the rest `test`.
pub fn synth_dataset(out: &Path, cfg: &SynthConfig, taxonomy: &EmotionTaxonomy, n_per_class: usize, seed: u64) -> Result<Vec<ManifestEntry>> {
    if taxonomy.len() > 8 || n_per_class == 0 {
        return Err(Error::Config(format!(
            "synthetic datasets need 1..=8 classes and at least one video each, got {} × {n_per_class}",
            taxonomy.len()
        )));
    }
    std::fs::create_dir_all(out.join("media"))?;
    let classes = taxonomy.len();
    let train_n = (2 * n_per_class).div_ceil(3);
    let mut entries = Vec::new();
    for c in 0..classes {
        for i in 0..n_per_class {
            let index = c * n_per_class + i;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            let id = format!("{}_{i:03}", taxonomy.class_name(c).expect("class in range"));
            let frames = render_video(cfg, c, classes, &mut rng);
            let wave = render_audio(cfg, c, &mut rng);
            let frames_rel = format!("media/{id}.frames");
            let audio_rel = format!("media/{id}.wav");
            frames.save(out.join(&frames_rel))?;
            wave.write_wav(out.join(&audio_rel))?;
            entries.push(ManifestEntry {
                video_id: id,
                frames: frames_rel,
                audio: Some(audio_rel),
                label: taxonomy.class_name(c).expect("class in range").to_string(),
                split: Some(if i < train_n { Split::Train } else { Split::Test }),
            });
        }
    }
    std::fs::write(out.join("taxonomy.json"), taxonomy.to_json())?;
    crate::data::write_manifest(&out.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

/// Rule-based classifier that knows the generator: the dominant saturated
/// hue of the video and the spectral peak of the soundtrack, each mapped
/// to the nearest class. Returns `(by_hue, by_tone)`.
pub fn oracle_classify(cfg: &SynthConfig, classes: usize, frames: &FrameStack, wave: &Waveform) -> (Option<usize>, usize) {
    let mut hist = vec![0usize; classes];
    for px in frames.data.chunks_exact(3) {
        let (h, s, v) = rgb_to_hsv([px[0] as f64 / 255.0, px[1] as f64 / 255.0, px[2] as f64 / 255.0]);
        if s > 0.5 && v > 0.5 {
            let nearest = (0..classes)
                .min_by(|&a, &b| {
                    let d = |c: usize| {
                        let diff = (h - cfg.hue(c, classes)).abs();
                        diff.min(360.0 - diff)
                    };
                    d(a).total_cmp(&d(b))
                })
                .expect("at least one class");
            hist[nearest] += 1;
        }
    }
    let by_hue = (hist.iter().any(|&n| n > 0)).then(|| crate::loss::argmax(&hist.iter().map(|&n| n as Real).collect::<Vec<_>>()));

    let n = wave.samples.len();
    let mut buf: Vec<Complex<f64>> = wave.samples.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
    FftPlanner::<f64>::new().plan_fft_forward(n).process(&mut buf);
    let peak = (1..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap_or(0);
    let hz = peak as f64 * wave.sample_rate as f64 / n as f64;
    let by_tone = (0..classes)
        .min_by(|&a, &b| (hz - cfg.tone_hz(a)).abs().total_cmp(&(hz - cfg.tone_hz(b)).abs()))
        .expect("at least one class");
    (by_hue, by_tone)
}
