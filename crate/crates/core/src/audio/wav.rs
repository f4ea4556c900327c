use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Real;

/// Mono PCM signal with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<Real>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<Real>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Input("waveform has no samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads 8/16/24/32-bit integer or 32-bit float WAV; channels are averaged.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = hound::WavReader::open(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        let interleaved: Vec<Real> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .into_samples::<f32>()
                .map(|s| s.map(|v| v as Real))
                .collect::<std::result::Result<_, _>>()?,
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as Real;
                reader
                    .into_samples::<i32>()
                    .map(|s| s.map(|v| v as Real / scale))
                    .collect::<std::result::Result<_, _>>()?
            }
        };
        let ch = spec.channels.max(1) as usize;
        let samples = interleaved
            .chunks(ch)
            .map(|frame| frame.iter().sum::<Real>() / frame.len() as Real)
            .collect();
        Self::new(samples, spec.sample_rate)
    }

    /// Writes 16-bit mono PCM.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        w.finalize()?;
        Ok(())
    }
}
