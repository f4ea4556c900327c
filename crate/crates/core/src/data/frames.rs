use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

const MAGIC: &[u8; 8] = b"VAAFRM01";

/// Decoded frames of one video, 8-bit RGB, row-major `[frame][y][x][c]`.
///
/// On disk: the magic `VAAFRM01`, then frame count, height and width as
/// little-endian `u32`, then the pixel bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameStack {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl FrameStack {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || data.len() != frames * height * width * 3 {
            return Err(Error::Input(format!(
                "{} bytes do not form {frames} frames of {height}×{width} RGB",
                data.len()
            )));
        }
        Ok(Self { frames, height, width, data })
    }

    pub fn frame(&self, f: usize) -> &[u8] {
        let n = self.height * self.width * 3;
        &self.data[f * n..(f + 1) * n]
    }

    /// Frame `f` as reals in `[0, 1]`, shape `[H, W, 3]`.
    pub fn frame_tensor(&self, f: usize) -> Tensor {
        let px = self.frame(f);
        Tensor::from_fn(&[self.height, self.width, 3], |i| px[i] as Real / 255.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [self.frames, self.height, self.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Input("not a raw-frame container".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
        Self::new(field(0), field(1), field(2), bytes[20..].to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        let s = FrameStack::new(2, 3, 4, (0..72).map(|v| v as u8).collect()).unwrap();
        assert_eq!(FrameStack::from_bytes(&s.to_bytes()).unwrap(), s);
        assert!(FrameStack::from_bytes(b"garbage").is_err());
        let mut truncated = s.to_bytes();
        truncated.pop();
        assert!(FrameStack::from_bytes(&truncated).is_err());
    }
}
