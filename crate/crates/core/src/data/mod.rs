//! Dataset manifests, snippet sampling, augmentation and the synthetic
//! dataset generator.

mod frames;
mod sampling;
pub mod synth;

pub use frames::FrameStack;
pub use sampling::{
    augment, center_snippets, flip_horizontal, resize_bilinear, resized_dims, sample_snippets, segment_bounds,
    snippet_frames, CropPlan,
};

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{descriptor_segments, MfccConfig, PadMode, Waveform};
use crate::error::{Error, Result};
use crate::loss::EmotionTaxonomy;
use crate::model::{Batch, ModelConfig};
use crate::numerics::Tensor;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One line of a JSON-lines manifest. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    /// Raw-frame container.
    pub frames: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
    /// Class name in the taxonomy.
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// A manifest with its taxonomy and resolved labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub labels: Vec<usize>,
    pub taxonomy: EmotionTaxonomy,
}

impl DatasetManifest {
    /// Reads `path`; the taxonomy comes from `taxonomy` (a built-in name or
    /// a JSON path) or else from `taxonomy.json` beside the manifest.
    pub fn load(path: &Path, taxonomy: Option<&str>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let taxonomy = match taxonomy {
            Some(spec) => EmotionTaxonomy::resolve(spec)?,
            None => {
                let p = root.join("taxonomy.json");
                if !p.exists() {
                    return Err(Error::Input(format!(
                        "no taxonomy given and {} does not exist",
                        p.display()
                    )));
                }
                EmotionTaxonomy::load(p)?
            }
        };
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|err| Error::Input(format!("{}:{}: {err}", path.display(), n + 1)))?;
            entries.push(e);
        }
        Self::new(root, entries, taxonomy)
    }

    pub fn new(root: PathBuf, entries: Vec<ManifestEntry>, taxonomy: EmotionTaxonomy) -> Result<Self> {
        let mut labels = Vec::with_capacity(entries.len());
        for e in &entries {
            labels.push(taxonomy.index_of(&e.label).ok_or_else(|| {
                Error::Input(format!("{}: label {:?} is not in the taxonomy", e.video_id, e.label))
            })?);
            for p in std::iter::once(&e.frames).chain(e.audio.as_ref()) {
                if !root.join(p).exists() {
                    return Err(Error::Input(format!("{}: missing file {p}", e.video_id)));
                }
            }
        }
        Ok(Self { root, entries, labels, taxonomy })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry indices per class.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.taxonomy.len()];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Entry indices tagged with `split`.
    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].split == Some(split)).collect()
    }
}

/// Audio front-end settings shared by every sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioConfig {
    pub mfcc: MfccConfig,
    pub pad: PadMode,
}

/// Independent random stream for sample `index` in `epoch`.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// How snippets and crops are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Random snippets, crop and flip from `sample_rng(seed, epoch, index)`.
    Train { seed: u64, epoch: usize },
    /// Segment-center snippets, center crop.
    Eval,
}

/// Model inputs of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    /// `[t, k, crop, crop, 3]`
    pub snippets: Tensor,
    /// `[t, n_mfcc, q/t]`
    pub audio: Option<Tensor>,
    pub label: usize,
    pub video_id: String,
    /// Snippet start frame per segment.
    pub offsets: Vec<usize>,
}

/// A manifest with its media decoded and audio descriptors precomputed.
pub struct Dataset {
    pub manifest: DatasetManifest,
    clips: Vec<FrameStack>,
    audio: Vec<Option<Tensor>>,
    t: usize,
    k: usize,
    crop: usize,
}

impl Dataset {
    pub fn load(manifest: DatasetManifest, model: &ModelConfig, audio: &AudioConfig) -> Result<Self> {
        if audio.mfcc.n_mfcc != model.n_mfcc {
            return Err(Error::Config(format!(
                "MFCC config yields {} coefficients, model expects {}",
                audio.mfcc.n_mfcc, model.n_mfcc
            )));
        }
        let q = model.t * model.segment_frames;
        let loaded = par::map_indexed(manifest.len(), |i| -> Result<(FrameStack, Option<Tensor>)> {
            let e = &manifest.entries[i];
            let clip = FrameStack::load(manifest.root.join(&e.frames))?;
            if clip.frames < model.t {
                return Err(Error::Input(format!(
                    "{}: {} frames cannot fill {} segments",
                    e.video_id, clip.frames, model.t
                )));
            }
            let segs = match (&e.audio, model.uses_audio()) {
                (Some(p), true) => {
                    let w = Waveform::read_wav(manifest.root.join(p))?;
                    Some(descriptor_segments(&w, &audio.mfcc, q, model.t, audio.pad)?)
                }
                (None, true) => {
                    return Err(Error::Input(format!("{}: audio stream enabled but no soundtrack", e.video_id)))
                }
                _ => None,
            };
            Ok((clip, segs))
        });
        let mut clips = Vec::with_capacity(loaded.len());
        let mut descs = Vec::with_capacity(loaded.len());
        for r in loaded {
            let (c, a) = r?;
            clips.push(c);
            descs.push(a);
        }
        Ok(Self {
            manifest,
            clips,
            audio: descs,
            t: model.t,
            k: model.k,
            crop: model.crop,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.manifest.labels[i]
    }

    pub fn clip(&self, i: usize) -> &FrameStack {
        &self.clips[i]
    }

    pub fn sample(&self, i: usize, mode: Sampling) -> Result<VideoSample> {
        let clip = &self.clips[i];
        let (h, w) = resized_dims(clip.height, clip.width, self.crop);
        let (offsets, plan) = match mode {
            Sampling::Train { seed, epoch } => {
                let mut rng = sample_rng(seed, epoch, i);
                let offsets = sample_snippets(clip.frames, self.t, self.k, &mut rng)?;
                (offsets, CropPlan::random(h, w, self.crop, &mut rng)?)
            }
            Sampling::Eval => (
                center_snippets(clip.frames, self.t, self.k)?,
                CropPlan::center(h, w, self.crop)?,
            ),
        };
        let mut frames = Vec::with_capacity(self.t * self.k);
        for (s, &start) in offsets.iter().enumerate() {
            for f in snippet_frames(clip.frames, self.t, self.k, s, start) {
                frames.push(augment(&clip.frame_tensor(f), self.crop, plan)?);
            }
        }
        let snippets = Tensor::stack(&frames)?.reshape(&[self.t, self.k, self.crop, self.crop, 3])?;
        Ok(VideoSample {
            snippets,
            audio: self.audio[i].clone(),
            label: self.label(i),
            video_id: self.manifest.entries[i].video_id.clone(),
            offsets,
        })
    }

    /// Samples `indices` (in parallel, deterministically) into one batch.
    pub fn batch(&self, indices: &[usize], mode: Sampling, with_visual: bool) -> Result<Batch> {
        let samples = par::map_indexed(indices.len(), |j| self.sample(indices[j], mode))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let visual = if with_visual {
            Some(Tensor::stack(&samples.iter().map(|s| s.snippets.clone()).collect::<Vec<_>>())?)
        } else {
            None
        };
        let audio = match samples.iter().map(|s| s.audio.clone()).collect::<Option<Vec<_>>>() {
            Some(a) if !a.is_empty() => Some(Tensor::stack(&a)?),
            _ => None,
        };
        Ok(Batch {
            visual,
            audio,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }
}
