//! Audio descriptors: WAV → MFCC → fixed-length window → `t` segments.

mod mfcc;
mod wav;

pub use mfcc::{
    dct2, hann, hz_to_mel, mel_edges, mel_energies, mel_filterbank, mel_to_hz, mfcc, MfccConfig,
    MfccDescriptor,
};
pub use wav::Waveform;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// How descriptors shorter than the target length are extended.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    /// Repeat the descriptor end to end, then center-crop.
    #[default]
    Cyclic,
    /// Center the descriptor between zero frames.
    Zero,
}

/// Smallest multiple of `segments` that is at least `frames`.
pub fn round_up_frames(frames: usize, segments: usize) -> usize {
    segments * frames.div_ceil(segments.max(1))
}

/// Center-crops (or pads) a descriptor to exactly `q` frames.
///
/// Longer descriptors keep frames `⌊(n−q)/2⌋ ..` onward. Shorter ones are
/// tiled the minimum number of times needed to reach `q` and then
/// center-cropped the same way (or zero-padded, with `PadMode::Zero`).
pub fn crop_or_pad(d: &MfccDescriptor, q: usize, mode: PadMode) -> Result<MfccDescriptor> {
    if q == 0 {
        return Err(Error::Config("target descriptor length must be positive".into()));
    }
    let n = d.n_frames();
    if n >= q {
        let off = (n - q) / 2;
        return Ok(d.with_frames(&(off..off + q).collect::<Vec<_>>()));
    }
    match mode {
        PadMode::Cyclic => {
            let tiled = n * q.div_ceil(n);
            let off = (tiled - q) / 2;
            let frames: Vec<usize> = (off..off + q).map(|i| i % n).collect();
            Ok(d.with_frames(&frames))
        }
        PadMode::Zero => {
            let left = (q - n) / 2;
            let rows = d.n_mfcc();
            let mut data = vec![0.0; rows * q];
            for c in 0..rows {
                for f in 0..n {
                    data[c * q + left + f] = d.coeffs.data()[c * n + f];
                }
            }
            Ok(MfccDescriptor {
                coeffs: Tensor::new(&[rows, q], data)?,
                ..d.clone()
            })
        }
    }
}

/// Splits a descriptor into `t` contiguous equal-width segments,
/// `[t, n_mfcc, n_frames / t]`.
pub fn segment_audio(d: &MfccDescriptor, t: usize) -> Result<Tensor> {
    let (rows, n) = (d.n_mfcc(), d.n_frames());
    if t == 0 || n % t != 0 {
        return Err(Error::Config(format!(
            "{n} descriptor frames cannot be split into {t} equal segments"
        )));
    }
    let w = n / t;
    let src = d.coeffs.data();
    let mut data = Vec::with_capacity(rows * n);
    for s in 0..t {
        for c in 0..rows {
            data.extend_from_slice(&src[c * n + s * w..][..w]);
        }
    }
    Tensor::new(&[t, rows, w], data)
}

/// Full audio path for one soundtrack: MFCC, crop/pad to `q`, split into `t`.
pub fn descriptor_segments(
    w: &Waveform,
    cfg: &MfccConfig,
    q: usize,
    t: usize,
    mode: PadMode,
) -> Result<Tensor> {
    let d = mfcc(w, cfg)?;
    segment_audio(&crop_or_pad(&d, q, mode)?, t)
}
