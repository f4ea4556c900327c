use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Frame range `[start, end)` of segment `i` out of `t` over `frames`.
pub fn segment_bounds(frames: usize, t: usize, i: usize) -> (usize, usize) {
    (i * frames / t, (i + 1) * frames / t)
}

fn check(frames: usize, t: usize, k: usize) -> Result<()> {
    if t == 0 || k == 0 || frames < t {
        return Err(Error::Input(format!(
            "cannot cut {frames} frames into {t} non-empty segments of {k}-frame snippets"
        )));
    }
    Ok(())
}

/// Random snippet start per segment, uniform over the starts that keep the
/// snippet inside its segment (the segment start when it is shorter than `k`).
pub fn sample_snippets<R: Rng>(frames: usize, t: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    check(frames, t, k)?;
    Ok((0..t)
        .map(|i| {
            let (s, e) = segment_bounds(frames, t, i);
            s + rng.gen_range(0..=(e - s).saturating_sub(k))
        })
        .collect())
}

/// Deterministic segment-center snippet starts.
pub fn center_snippets(frames: usize, t: usize, k: usize) -> Result<Vec<usize>> {
    check(frames, t, k)?;
    Ok((0..t)
        .map(|i| {
            let (s, e) = segment_bounds(frames, t, i);
            s + (e - s).saturating_sub(k) / 2
        })
        .collect())
}

/// Frame indices of the snippet of segment `i` starting at `start`: up to
/// `k` successive frames, clipped to the segment end and padded by
/// repeating the last one.
pub fn snippet_frames(frames: usize, t: usize, k: usize, i: usize, start: usize) -> Vec<usize> {
    let (_, e) = segment_bounds(frames, t, i);
    (0..k).map(|j| (start + j).min(e - 1)).collect()
}

/// Crop and flip decision shared by every frame of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropPlan {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

/// Size after resizing the short side to `short`, keeping the aspect ratio.
pub fn resized_dims(height: usize, width: usize, short: usize) -> (usize, usize) {
    if height <= width {
        (short, ((width * short) as f64 / height as f64).round() as usize)
    } else {
        (((height * short) as f64 / width as f64).round() as usize, short)
    }
}

impl CropPlan {
    /// Training: uniform crop offset and a fair coin flip.
    pub fn random<R: Rng>(height: usize, width: usize, crop: usize, rng: &mut R) -> Result<Self> {
        check_crop(height, width, crop)?;
        Ok(Self {
            top: rng.gen_range(0..=height - crop),
            left: rng.gen_range(0..=width - crop),
            flip: rng.gen_bool(0.5),
        })
    }

    /// Evaluation: center crop, no flip.
    pub fn center(height: usize, width: usize, crop: usize) -> Result<Self> {
        check_crop(height, width, crop)?;
        Ok(Self {
            top: (height - crop) / 2,
            left: (width - crop) / 2,
            flip: false,
        })
    }
}

fn check_crop(height: usize, width: usize, crop: usize) -> Result<()> {
    if crop == 0 || height < crop || width < crop {
        return Err(Error::Contract(format!("cannot crop {crop}×{crop} from {height}×{width}")));
    }
    Ok(())
}

/// Bilinear resize of `[H, W, C]` with half-pixel centers; same-size input
/// is returned unchanged.
pub fn resize_bilinear(img: &Tensor, height: usize, width: usize) -> Tensor {
    let s = img.shape();
    let (h0, w0, c) = (s[0], s[1], s[2]);
    if (h0, w0) == (height, width) {
        return img.clone();
    }
    let src = img.data();
    let coord = |o: usize, n_out: usize, n_in: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i = x.floor() as usize;
        let j = (i + 1).min(n_in - 1);
        (i, j, (x - i as f64) as Real)
    };
    let mut out = Vec::with_capacity(height * width * c);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, h0);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, width, w0);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w0 + xx) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[height, width, c], out).expect("resize shape")
}

/// Horizontal flip of `[H, W, C]`.
pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let s = img.shape();
    let (w, c) = (s[1], s[2]);
    let src = img.data();
    Tensor::from_fn(s, |i| {
        let (row, rest) = (i / (w * c), i % (w * c));
        let (x, ch) = (rest / c, rest % c);
        src[row * w * c + (w - 1 - x) * c + ch]
    })
}

/// Short-side resize to `crop`, then the planned crop and flip: `[crop, crop, C]`.
pub fn augment(img: &Tensor, crop: usize, plan: CropPlan) -> Result<Tensor> {
    let s = img.shape();
    let (h, w) = resized_dims(s[0], s[1], crop);
    check_crop(h, w, crop)?;
    if plan.top + crop > h || plan.left + crop > w {
        return Err(Error::Contract(format!("crop plan {plan:?} outside {h}×{w}")));
    }
    let r = resize_bilinear(img, h, w);
    let c = s[2];
    let src = r.data();
    let cropped = Tensor::from_fn(&[crop, crop, c], |i| {
        let (y, rest) = (i / (crop * c), i % (crop * c));
        src[((plan.top + y) * w) * c + plan.left * c + rest]
    });
    Ok(if plan.flip { flip_horizontal(&cropped) } else { cropped })
}
