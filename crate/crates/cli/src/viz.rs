//! Attention export: a temporal color bar, spatial heatmaps over the
//! middle frame of each snippet, and the raw attention bundle.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vaanet::data::{resize_bilinear, Dataset, Sampling};
use vaanet::loss::argmax;
use vaanet::model::Vaanet;
use vaanet::numerics::{Real, Tensor};
use vaanet::{Error, Result};

/// Side of the square heatmap images.
pub const DISPLAY_SIZE: usize = 112;
/// Heatmap opacity over the frame.
pub const ALPHA: f64 = 0.5;

/// 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Binary PPM (`P6`).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Input("not a binary PPM image".into());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        if fields[0] != "P6" || num(&fields[3])? != 255 {
            return Err(bad());
        }
        let (width, height) = (num(&fields[1])?, num(&fields[2])?);
        let data = bytes.get(pos + 1..).ok_or_else(bad)?.to_vec();
        if data.len() != 3 * width * height {
            return Err(bad());
        }
        Ok(Self { width, height, data })
    }
}

/// Blue (0) to red (1) color ramp.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Min-max normalization to `[0, 1]`; a constant input maps to zeros.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 || !(hi - lo).is_finite() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Horizontal strip of `cell` pixels per weight, interpolating linearly
/// between cell centers.
pub fn color_bar(weights: &[f64], cell: usize, height: usize) -> Image {
    let norm = normalize(weights);
    let width = cell * weights.len();
    let mut data = Vec::with_capacity(3 * width * height);
    let row: Vec<[f64; 3]> = (0..width)
        .map(|x| {
            let pos = ((x as f64 + 0.5) / cell as f64 - 0.5).clamp(0.0, (norm.len() - 1) as f64);
            let i = pos.floor() as usize;
            let j = (i + 1).min(norm.len() - 1);
            let f = pos - i as f64;
            colormap(norm[i] * (1.0 - f) + norm[j] * f)
        })
        .collect();
    for _ in 0..height {
        for c in &row {
            data.extend(c.iter().map(|&v| to_byte(v)));
        }
    }
    Image { width, height, data }
}

/// Spatial attention over a `grid` of cells, min-max normalized, upsampled
/// to `size` and blended over `frame` (`[H, W, 3]` in `[0, 1]`).
pub fn heatmap(attention: &[f64], grid: [usize; 2], frame: &Tensor, size: usize) -> Result<Image> {
    if attention.len() != grid[0] * grid[1] {
        return Err(Error::Contract(format!(
            "{} attention values for a {}×{} grid",
            attention.len(),
            grid[0],
            grid[1]
        )));
    }
    let norm = normalize(attention);
    let map = Tensor::new(&[grid[0], grid[1], 1], norm.iter().map(|&v| v as Real).collect())?;
    let map = resize_bilinear(&map, size, size);
    let frame = resize_bilinear(frame, size, size);
    let mut data = Vec::with_capacity(3 * size * size);
    for p in 0..size * size {
        let c = colormap(map.data()[p] as f64);
        for ch in 0..3 {
            let base = frame.data()[3 * p + ch] as f64;
            data.push(to_byte((1.0 - ALPHA) * base + ALPHA * c[ch]));
        }
    }
    Ok(Image {
        width: size,
        height: size,
        data,
    })
}

/// Metadata written next to the images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VizMeta {
    pub video_id: String,
    pub label: String,
    pub predicted: String,
    /// Segment with the largest visual temporal weight.
    pub temporal_argmax: usize,
    pub display_size: usize,
    pub alpha: f64,
    pub normalization: String,
    pub files: Vec<String>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Writes `temporal.ppm`, `heatmap_XX.ppm` per segment, `bundle.json` and
/// `meta.json` for sample `index` of `data` into `out`.
pub fn visualize(model: &Vaanet, data: &Dataset, index: usize, out: &Path) -> Result<VizMeta> {
    let flags = model.cfg.attention;
    if !(flags.vs && flags.vt) {
        return Err(Error::Config(format!(
            "visualization needs visual spatial and temporal attention; checkpoint was trained with {flags}"
        )));
    }
    let batch = data.batch(&[index], Sampling::Eval, true)?;
    let (logits, bundles) = model.predict(&batch)?;
    let bundle = &bundles[0];
    let (spatial, temporal, grid) = match (&bundle.spatial, &bundle.temporal, bundle.grid) {
        (Some(s), Some(t), Some(g)) => (s, t, g),
        _ => return Err(Error::Contract("forward pass produced no spatial/temporal attention".into())),
    };
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let mut emit = |name: String, bytes: &[u8]| -> Result<()> {
        write(&out.join(&name), bytes)?;
        files.push(name);
        Ok(())
    };
    emit("temporal.ppm".into(), &color_bar(&temporal.data, 32, 16).to_ppm())?;
    let sample = data.sample(index, Sampling::Eval)?;
    let [t, k, crop] = [model.cfg.t, model.cfg.k, model.cfg.crop];
    for seg in 0..t {
        let start = (seg * k + k / 2) * crop * crop * 3;
        let frame = Tensor::new(&[crop, crop, 3], sample.snippets.data()[start..start + crop * crop * 3].to_vec())?;
        let img = heatmap(spatial.row(seg), grid, &frame, DISPLAY_SIZE)?;
        emit(format!("heatmap_{seg:02}.ppm"), &img.to_ppm())?;
    }
    emit("bundle.json".into(), bundle.to_json()?.as_bytes())?;
    let tax = &data.manifest.taxonomy;
    let name = |c: usize| tax.class_name(c).unwrap_or("?").to_string();
    let meta = VizMeta {
        video_id: sample.video_id.clone(),
        label: name(sample.label),
        predicted: name(argmax(logits.data())),
        temporal_argmax: argmax(&temporal.data.iter().map(|&v| v as Real).collect::<Vec<_>>()),
        display_size: DISPLAY_SIZE,
        alpha: ALPHA,
        normalization: "display only: heatmaps are min-max normalized per super-frame and the color bar over \
                        the t temporal weights; bundle.json holds the raw attention values"
            .into(),
        files: files.clone(),
    };
    let mut all = files;
    all.push("meta.json".into());
    let meta = VizMeta { files: all, ..meta };
    write(&out.join("meta.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = color_bar(&[0.1, 0.5, 0.2], 4, 2);
        assert_eq!((img.width, img.height), (12, 2));
        assert_eq!(Image::from_ppm(&img.to_ppm()).unwrap(), img);
    }

    #[test]
    fn flat_inputs_give_flat_images() {
        let bar = color_bar(&[0.3; 4], 8, 3);
        assert!(bar.data.chunks(3).all(|p| p == bar.pixel(0, 0)));
        let frame = Tensor::full(&[8, 8, 3], 0.4);
        let h = heatmap(&[0.25; 4], [2, 2], &frame, 16).unwrap();
        assert!(h.data.chunks(3).all(|p| p == h.pixel(0, 0)));
    }

    #[test]
    fn ramp_runs_blue_to_red() {
        assert_eq!(colormap(0.0).map(to_byte), [0, 0, 128]);
        assert_eq!(colormap(1.0).map(to_byte), [128, 0, 0]);
        let bar = color_bar(&[0.0, 1.0], 10, 1);
        assert!(bar.pixel(0, 0)[2] > bar.pixel(0, 0)[0]);
        assert!(bar.pixel(19, 0)[0] > bar.pixel(19, 0)[2]);
    }
}
