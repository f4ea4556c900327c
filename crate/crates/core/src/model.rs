//! The full network: backbones, stacked attention, fusion and the head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    channel_attention, fuse, spatial_attention, temporal_attention_audio, temporal_attention_visual,
    AttentionBundle, ShapedArray,
};
use crate::backbone::{audio_forward, reshape_to_superframes, visual_forward, AudioBackboneConfig, VisualBackboneConfig};
use crate::error::{Error, Result};
use crate::loss::classify;
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Binder, Init, ParamSpec, ParamStore};

/// Which attention sub-networks (and therefore which streams) are active.
///
/// The visual stream runs whenever `vs` is set; `vcw` and `vt` stack on top
/// of it. The audio stream runs whenever `at` is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionFlags {
    pub vs: bool,
    pub vcw: bool,
    pub vt: bool,
    pub at: bool,
}

impl AttentionFlags {
    pub const ALL: Self = Self { vs: true, vcw: true, vt: true, at: true };

    /// The five ablation configurations, in table order.
    pub fn ablation_rows() -> [Self; 5] {
        ["at", "vs", "vs+vcw", "vs+vcw+vt", "all"].map(|s| s.parse().expect("known preset"))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.vs && (self.vcw || self.vt) {
            return Err(Error::Config(format!(
                "attention {self}: channel-wise and temporal attention stack on spatial attention"
            )));
        }
        if !self.vs && !self.at {
            return Err(Error::Config("no stream enabled: need vs or at".into()));
        }
        Ok(())
    }
}

impl Default for AttentionFlags {
    fn default() -> Self {
        Self::ALL
    }
}

impl FromStr for AttentionFlags {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "all" {
            return Ok(Self::ALL);
        }
        let mut f = Self { vs: false, vcw: false, vt: false, at: false };
        for part in s.split('+') {
            match part.trim() {
                "vs" => f.vs = true,
                "vcw" => f.vcw = true,
                "vt" => f.vt = true,
                "at" => f.at = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown attention {other:?}; expected a '+'-joined subset of vs, vcw, vt, at, or all"
                    )))
                }
            }
        }
        f.validate()?;
        Ok(f)
    }
}

impl fmt::Display for AttentionFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.vs, "VS"), (self.vcw, "VCW"), (self.vt, "VT"), (self.at, "AT")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        write!(f, "{}", parts.join("+"))
    }
}

/// What the channel-wise attention consumes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelInput {
    /// The spatially attended map (stacked attention).
    #[default]
    SpatialOutput,
    /// The raw backbone map.
    RawBackbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Segments per video.
    pub t: usize,
    /// Frames per snippet.
    pub k: usize,
    /// Square crop side.
    pub crop: usize,
    /// MFCC coefficients per frame.
    pub n_mfcc: usize,
    /// Descriptor frames per audio segment (`q / t`).
    pub segment_frames: usize,
    pub classes: usize,
    pub visual: VisualBackboneConfig,
    pub audio: AudioBackboneConfig,
    pub attention: AttentionFlags,
    #[serde(default)]
    pub channel_input: ChannelInput,
}

impl ModelConfig {
    /// `t=10, k=16`, 112×112 crops, `q = 4800`.
    pub fn paper(classes: usize) -> Self {
        Self {
            t: 10,
            k: 16,
            crop: 112,
            n_mfcc: 20,
            segment_frames: 480,
            classes,
            visual: VisualBackboneConfig::default(),
            audio: AudioBackboneConfig::default(),
            attention: AttentionFlags::ALL,
            channel_input: ChannelInput::SpatialOutput,
        }
    }

    /// `t=4, k=4`, 32×32 crops, `q = 96`.
    pub fn desk(classes: usize) -> Self {
        Self {
            t: 4,
            k: 4,
            crop: 32,
            n_mfcc: 20,
            segment_frames: 24,
            classes,
            visual: VisualBackboneConfig::desk(),
            audio: AudioBackboneConfig::desk(),
            attention: AttentionFlags::ALL,
            channel_input: ChannelInput::SpatialOutput,
        }
    }

    /// `t=2, k=4`, 16×16 crops, 8×8 audio segments.
    pub fn micro(classes: usize) -> Self {
        Self {
            t: 2,
            k: 4,
            crop: 16,
            n_mfcc: 8,
            segment_frames: 8,
            classes,
            visual: VisualBackboneConfig::micro(),
            audio: AudioBackboneConfig::micro(),
            attention: AttentionFlags::ALL,
            channel_input: ChannelInput::SpatialOutput,
        }
    }

    pub fn with_attention(mut self, attention: AttentionFlags) -> Self {
        self.attention = attention;
        self
    }

    pub fn uses_visual(&self) -> bool {
        self.attention.vs
    }

    pub fn uses_audio(&self) -> bool {
        self.attention.at
    }

    /// Super-frame geometry `[h, w, n]`.
    pub fn visual_shape(&self) -> Result<[usize; 3]> {
        self.visual.output_shape(self.k, self.crop, self.crop)
    }

    /// Segment feature geometry `[h', w', n']`.
    pub fn audio_shape(&self) -> Result<[usize; 3]> {
        self.audio.output_shape(self.n_mfcc, self.segment_frames)
    }

    /// Length of the fused embedding.
    pub fn embedding_len(&self) -> Result<usize> {
        let v = if self.uses_visual() { self.visual_shape()?[2] } else { 0 };
        let a = if self.uses_audio() { self.audio_shape()?[2] } else { 0 };
        Ok(v + a)
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.t == 0 || self.k == 0 || self.classes < 2 {
            return Err(Error::Config(format!(
                "need t ≥ 1, k ≥ 1 and at least 2 classes (t={}, k={}, classes={})",
                self.t, self.k, self.classes
            )));
        }
        if self.uses_visual() {
            self.visual_shape()?;
        }
        if self.uses_audio() {
            self.audio_shape()?;
        }
        Ok(())
    }

    /// Every trainable parameter and buffer of the enabled configuration.
    pub fn specs(&self) -> Result<(Vec<ParamSpec>, Vec<ParamSpec>)> {
        self.validate()?;
        let (mut params, mut buffers) = (Vec::new(), Vec::new());
        let uniform = |name: &str, rows: usize, cols: usize| {
            ParamSpec::new(name, &[rows, cols], Init::Uniform { fan_in: cols })
        };
        if self.uses_visual() {
            let (p, b) = self.visual.specs();
            params.extend(p);
            buffers.extend(b);
            let [h, w, n] = self.visual_shape()?;
            let m = h * w;
            params.push(uniform("attention/spatial/w1", m, m));
            params.push(uniform("attention/spatial/w2", 1, n));
            if self.attention.vcw {
                params.push(uniform("attention/channel/w1", n, n));
                params.push(uniform("attention/channel/w2", 1, m));
            }
            if self.attention.vt {
                params.push(uniform("attention/temporal/w1", self.t, self.t));
                params.push(uniform("attention/temporal/w2", 1, n));
            }
        }
        if self.uses_audio() {
            let (p, b) = self.audio.specs();
            params.extend(p);
            buffers.extend(b);
            let n_a = self.audio_shape()?[2];
            params.push(uniform("attention/audio/w1", self.t, self.t));
            params.push(uniform("attention/audio/w2", 1, n_a));
        }
        let d = self.embedding_len()?;
        params.push(uniform("head/w", self.classes, d));
        params.push(ParamSpec::new("head/b", &[self.classes], Init::Const(0.0)));
        Ok((params, buffers))
    }
}

/// Model inputs for `B` videos.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, t, k, H, W, 3]`, values in `[0, 1]`.
    pub visual: Option<Tensor>,
    /// `[B, t, n_mfcc, q/t]`.
    pub audio: Option<Tensor>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, C]`
    pub logits: Var,
    /// `[B·t, m]`
    pub spatial: Option<Var>,
    /// `[B·t, n]`
    pub channel: Option<Var>,
    /// `[B, t]`
    pub temporal: Option<Var>,
    /// `[B, t]`
    pub audio: Option<Var>,
    pub grid: Option<[usize; 2]>,
}

impl ForwardOutput {
    /// Attention maps of video `b` of the batch.
    pub fn bundle(&self, g: &Graph, b: usize) -> AttentionBundle {
        let slice = |v: Option<Var>, rows_per: usize, tail: &[usize]| {
            v.map(|v| {
                let t = g.value(v);
                let inner: usize = t.shape()[1..].iter().product();
                let data = t.data()[b * rows_per * inner..(b + 1) * rows_per * inner].to_vec();
                let mut shape = vec![rows_per];
                shape.extend_from_slice(tail);
                ShapedArray::from_tensor(&Tensor::new(&shape, data).expect("slice shape"), &shape)
            })
        };
        let per_frame = |v: Option<Var>| {
            v.and_then(|v| {
                let s = g.shape(v);
                let t = s[0] / (g.shape(self.logits)[0]);
                slice(Some(v), t, &[s[1], 1])
            })
        };
        let per_video = |v: Option<Var>| {
            v.and_then(|v| {
                let s = g.shape(v);
                let t = s[1];
                let arr = slice(Some(v), 1, &[t])?;
                Some(ShapedArray {
                    shape: vec![t, 1],
                    data: arr.data,
                })
            })
        };
        AttentionBundle {
            spatial: per_frame(self.spatial),
            channel: per_frame(self.channel),
            temporal: per_video(self.temporal),
            audio: per_video(self.audio),
            grid: self.grid,
        }
    }
}

/// Parameters plus configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Vaanet {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

impl Vaanet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let (params, buffers) = cfg.specs()?;
        let store = ParamStore::init(&params, &buffers, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { cfg, store })
    }

    /// Trainable scalars whose names start with `prefix`.
    pub fn count_params(&self, prefix: &str) -> usize {
        self.store
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<crate::numerics::Checkpoint> {
        Ok(self.store.to_checkpoint(serde_json::json!({
            "model": serde_json::to_value(&self.cfg)?,
            "extra": extra,
        })))
    }

    /// Model and the `extra` metadata stored with it.
    pub fn from_checkpoint(ck: &crate::numerics::Checkpoint) -> Result<(Self, serde_json::Value)> {
        let (store, meta) = ParamStore::from_checkpoint(ck)?;
        let cfg: ModelConfig = serde_json::from_value(meta["model"].clone())
            .map_err(|e| Error::Input(format!("checkpoint model config: {e}")))?;
        let (specs, buffers) = cfg.specs()?;
        for s in specs.iter().chain(&buffers) {
            let t = store.get(&s.name).or_else(|_| store.buffer(&s.name)).map_err(|_| {
                Error::Input(format!("checkpoint is missing {}", s.name))
            })?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Input(format!(
                    "checkpoint tensor {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok((Self { cfg, store }, meta["extra"].clone()))
    }

    /// Records the forward pass on `g`, binding parameters through `b`.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, batch: &Batch) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let n_videos = batch.len();
        let t = cfg.t;
        let (mut spatial, mut channel, mut temporal, mut audio, mut grid) = (None, None, None, None, None);
        let mut parts = Vec::new();
        if cfg.uses_visual() {
            let x = batch
                .visual
                .as_ref()
                .ok_or_else(|| Error::Input("visual stream enabled but batch has no frames".into()))?;
            let want = [n_videos, t, cfg.k, cfg.crop, cfg.crop, 3];
            if x.shape() != want {
                return Err(Error::dim("forward", format!("frames {:?}, expected {want:?}", x.shape())));
            }
            let x = g.constant(x.clone().reshape(&[n_videos * t, cfg.k, cfg.crop, cfg.crop, 3])?);
            let f = visual_forward(g, b, &cfg.visual, x)?;
            let [h, w, _] = cfg.visual_shape()?;
            grid = Some([h, w]);
            let f = reshape_to_superframes(g, f)?;
            let (w1, w2) = (b.param(g, "attention/spatial/w1")?, b.param(g, "attention/spatial/w2")?);
            let (fs, a_s) = spatial_attention(g, f, w1, w2)?;
            spatial = Some(a_s);
            let x = match cfg.channel_input {
                ChannelInput::SpatialOutput => fs,
                ChannelInput::RawBackbone => f,
            };
            let gc = if cfg.attention.vcw {
                let (w1, w2) = (b.param(g, "attention/channel/w1")?, b.param(g, "attention/channel/w2")?);
                let (gc, a_c) = channel_attention(g, x, w1, w2)?;
                channel = Some(a_c);
                gc
            } else {
                g.permute(fs, &[0, 2, 1])?
            };
            let e_v = if cfg.attention.vt {
                let (w1, w2) = (b.param(g, "attention/temporal/w1")?, b.param(g, "attention/temporal/w2")?);
                let (e, a_t, _) = temporal_attention_visual(g, gc, t, w1, w2)?;
                temporal = Some(a_t);
                e
            } else {
                let n = g.shape(gc)[1];
                let p = g.mean_axis(gc, 2)?;
                let p = g.reshape(p, &[n_videos, t, n])?;
                g.mean_axis(p, 1)?
            };
            parts.push(e_v);
        }
        if cfg.uses_audio() {
            let x = batch
                .audio
                .as_ref()
                .ok_or_else(|| Error::Input("audio stream enabled but batch has no descriptors".into()))?;
            let want = [n_videos, t, cfg.n_mfcc, cfg.segment_frames];
            if x.shape() != want {
                return Err(Error::dim("forward", format!("audio {:?}, expected {want:?}", x.shape())));
            }
            let x = g.constant(x.clone().reshape(&[n_videos * t, cfg.n_mfcc, cfg.segment_frames])?);
            let f = audio_forward(g, b, &cfg.audio, x)?;
            let f = reshape_to_superframes(g, f)?;
            let pooled = g.mean_axis(f, 1)?;
            let n_a = g.shape(pooled)[1];
            let pooled = g.reshape(pooled, &[n_videos, t, n_a])?;
            let (w1, w2) = (b.param(g, "attention/audio/w1")?, b.param(g, "attention/audio/w2")?);
            let (e_a, a_a) = temporal_attention_audio(g, pooled, w1, w2)?;
            audio = Some(a_a);
            parts.push(e_a);
        }
        let e = if parts.len() == 2 { fuse(g, parts[0], parts[1])? } else { parts[0] };
        let (w, bias) = (b.param(g, "head/w")?, b.param(g, "head/b")?);
        Ok(ForwardOutput {
            logits: classify(g, e, w, bias)?,
            spatial,
            channel,
            temporal,
            audio,
            grid,
        })
    }

    /// Eval-mode logits `[B, C]` and per-video attention bundles.
    pub fn predict(&self, batch: &Batch) -> Result<(Tensor, Vec<AttentionBundle>)> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.store, false);
        let out = self.forward(&mut g, &mut b, batch)?;
        let bundles = (0..batch.len()).map(|i| out.bundle(&g, i)).collect();
        Ok((g.value(out.logits).clone(), bundles))
    }
}
