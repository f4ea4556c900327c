//! Reduced-depth residual feature extractors.
//!
//! The visual backbone is a 3D residual network applied to every `k`-frame
//! snippet independently; its remaining temporal extent is average-pooled
//! so each snippet becomes one super-frame `h×w×n`. The audio backbone is
//! the 2D analogue over MFCC segments, treated as one-channel images.
//!
//! Both run on a flattened batch: `N = B·t` snippets or segments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{conv_out_len, Graph, Var};
use crate::params::{bn_specs, Binder, Init, ParamSpec};

/// One residual stage: `blocks` basic blocks, the first applying `stride`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage<S> {
    pub channels: usize,
    pub blocks: usize,
    pub stride: S,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualBackboneConfig {
    pub stem_channels: usize,
    /// `[depth, height, width]`
    pub stem_stride: [usize; 3],
    /// Non-overlapping average pool after the stem.
    pub stem_pool: [usize; 3],
    pub stages: Vec<Stage<[usize; 3]>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioBackboneConfig {
    pub stem_channels: usize,
    /// `[coefficients, frames]`
    pub stem_stride: [usize; 2],
    pub stages: Vec<Stage<[usize; 2]>>,
}

fn stage3(channels: usize, stride: usize) -> Stage<[usize; 3]> {
    Stage {
        channels,
        blocks: 1,
        stride: [stride; 3],
    }
}

fn stage2(channels: usize, stride: usize) -> Stage<[usize; 2]> {
    Stage {
        channels,
        blocks: 1,
        stride: [stride; 2],
    }
}

impl Default for VisualBackboneConfig {
    /// `t×16×112×112×3` snippets → `t×4×4×256`.
    fn default() -> Self {
        Self {
            stem_channels: 64,
            stem_stride: [1, 2, 2],
            stem_pool: [1, 2, 2],
            stages: vec![stage3(64, 1), stage3(128, 2), stage3(256, 2), stage3(256, 2)],
        }
    }
}

impl VisualBackboneConfig {
    /// One block, `n = 8`: `4×16×16` snippets → `2×2×8`.
    pub fn micro() -> Self {
        Self {
            stem_channels: 8,
            stem_stride: [1, 2, 2],
            stem_pool: [1, 2, 2],
            stages: vec![stage3(8, 2)],
        }
    }

    /// Laptop-scale: `4×32×32` snippets → `4×4×16`.
    pub fn desk() -> Self {
        Self {
            stem_channels: 8,
            stem_stride: [1, 2, 2],
            stem_pool: [1, 2, 2],
            stages: vec![stage3(8, 1), stage3(16, 2)],
        }
    }

    fn net(&self) -> Net {
        Net {
            prefix: "visual",
            in_channels: 3,
            depth_kernel: 3,
            stem_channels: self.stem_channels,
            stem_stride: self.stem_stride,
            stem_pool: self.stem_pool,
            stages: self
                .stages
                .iter()
                .map(|s| (s.channels, s.blocks, s.stride))
                .collect(),
        }
    }

    /// Output channels `n`.
    pub fn channels(&self) -> usize {
        self.net().out_channels()
    }

    /// Super-frame shape `[h, w, n]` for `k×H×W` snippets.
    pub fn output_shape(&self, k: usize, height: usize, width: usize) -> Result<[usize; 3]> {
        let [_, h, w] = self.net().output_extent([k, height, width])?;
        Ok([h, w, self.channels()])
    }

    /// Smallest accepted `[k, H, W]`.
    pub fn min_input(&self) -> [usize; 3] {
        self.net().min_input()
    }

    pub fn specs(&self) -> (Vec<ParamSpec>, Vec<ParamSpec>) {
        self.net().specs()
    }
}

impl Default for AudioBackboneConfig {
    /// `20×48` segments → `3×6×128`.
    fn default() -> Self {
        Self {
            stem_channels: 32,
            stem_stride: [2, 2],
            stages: vec![stage2(32, 1), stage2(64, 2), stage2(128, 2)],
        }
    }
}

impl AudioBackboneConfig {
    /// One block, `n' = 8`.
    pub fn micro() -> Self {
        Self {
            stem_channels: 8,
            stem_stride: [2, 2],
            stages: vec![stage2(8, 2)],
        }
    }

    /// Laptop-scale: `20×24` segments → `5×6×16`.
    pub fn desk() -> Self {
        Self {
            stem_channels: 8,
            stem_stride: [2, 2],
            stages: vec![stage2(16, 2)],
        }
    }

    fn net(&self) -> Net {
        Net {
            prefix: "audio",
            in_channels: 1,
            depth_kernel: 1,
            stem_channels: self.stem_channels,
            stem_stride: [1, self.stem_stride[0], self.stem_stride[1]],
            stem_pool: [1, 1, 1],
            stages: self
                .stages
                .iter()
                .map(|s| (s.channels, s.blocks, [1, s.stride[0], s.stride[1]]))
                .collect(),
        }
    }

    /// Output channels `n'`.
    pub fn channels(&self) -> usize {
        self.net().out_channels()
    }

    /// Segment feature shape `[h', w', n']` for `rows×cols` segments.
    pub fn output_shape(&self, rows: usize, cols: usize) -> Result<[usize; 3]> {
        let [_, h, w] = self.net().output_extent([1, rows, cols])?;
        Ok([h, w, self.channels()])
    }

    /// Smallest accepted `[rows, cols]`.
    pub fn min_input(&self) -> [usize; 2] {
        let [_, h, w] = self.net().min_input();
        [h, w]
    }

    pub fn specs(&self) -> (Vec<ParamSpec>, Vec<ParamSpec>) {
        self.net().specs()
    }
}

/// Shared residual network over `[N, C, D, H, W]`; the audio variant has
/// depth 1 and a depth-1 kernel.
struct Net {
    prefix: &'static str,
    in_channels: usize,
    depth_kernel: usize,
    stem_channels: usize,
    stem_stride: [usize; 3],
    stem_pool: [usize; 3],
    stages: Vec<(usize, usize, [usize; 3])>,
}

impl Net {
    fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.0)
    }

    fn kernel(&self) -> [usize; 3] {
        [self.depth_kernel, 3, 3]
    }

    fn pad(&self) -> [usize; 3] {
        [self.depth_kernel / 2, 1, 1]
    }

    fn conv_spec(&self, name: String, c_out: usize, c_in: usize, kernel: [usize; 3]) -> ParamSpec {
        let fan_in = c_in * kernel.iter().product::<usize>();
        ParamSpec::new(name, &[c_out, c_in, kernel[0], kernel[1], kernel[2]], Init::He { fan_in })
    }

    /// Per stage, per block: `(name prefix, c_in, c_out, stride)`.
    fn blocks(&self) -> Vec<(String, usize, usize, [usize; 3])> {
        let mut out = Vec::new();
        let mut c_in = self.stem_channels;
        for (si, &(c, n, stride)) in self.stages.iter().enumerate() {
            for bi in 0..n {
                let s = if bi == 0 { stride } else { [1; 3] };
                out.push((format!("{}/stage{si}/block{bi}", self.prefix), c_in, c, s));
                c_in = c;
            }
        }
        out
    }

    fn specs(&self) -> (Vec<ParamSpec>, Vec<ParamSpec>) {
        let (mut params, mut buffers) = (Vec::new(), Vec::new());
        let mut bn = |p: &mut Vec<ParamSpec>, name: String, c: usize| {
            let (a, b) = bn_specs(&name, c);
            p.extend(a);
            buffers.extend(b);
        };
        let k = self.kernel();
        params.push(self.conv_spec(format!("{}/stem/conv", self.prefix), self.stem_channels, self.in_channels, k));
        bn(&mut params, format!("{}/stem/bn", self.prefix), self.stem_channels);
        for (name, c_in, c_out, stride) in self.blocks() {
            params.push(self.conv_spec(format!("{name}/conv1"), c_out, c_in, k));
            bn(&mut params, format!("{name}/bn1"), c_out);
            params.push(self.conv_spec(format!("{name}/conv2"), c_out, c_out, k));
            bn(&mut params, format!("{name}/bn2"), c_out);
            if c_in != c_out || stride != [1; 3] {
                params.push(self.conv_spec(format!("{name}/down/conv"), c_out, c_in, [1; 3]));
                bn(&mut params, format!("{name}/down/bn"), c_out);
            }
        }
        (params, buffers)
    }

    fn total_stride(&self) -> [usize; 3] {
        let mut s = [0; 3];
        for (a, v) in s.iter_mut().enumerate() {
            *v = self.stem_stride[a] * self.stem_pool[a] * self.stages.iter().map(|st| st.2[a]).product::<usize>();
        }
        s
    }

    fn min_input(&self) -> [usize; 3] {
        self.total_stride()
    }

    /// Extent after the last stage, before any temporal collapse.
    fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let min = self.min_input();
        if (0..3).any(|a| input[a] < min[a]) {
            return Err(Error::Config(format!(
                "{} backbone input {input:?} is smaller than its receptive field {min:?}",
                self.prefix
            )));
        }
        let (k, p) = (self.kernel(), self.pad());
        let conv = |e: [usize; 3], s: [usize; 3]| -> Result<[usize; 3]> {
            let mut o = [0; 3];
            for a in 0..3 {
                o[a] = conv_out_len(e[a], k[a], s[a], p[a])
                    .ok_or_else(|| Error::Config(format!("{} backbone: input {input:?} too small", self.prefix)))?;
            }
            Ok(o)
        };
        let mut e = conv(input, self.stem_stride)?;
        for a in 0..3 {
            e[a] /= self.stem_pool[a];
        }
        for (_, _, _, s) in self.blocks() {
            e = conv(e, s)?;
        }
        Ok(e)
    }

    fn conv_bn(&self, g: &mut Graph, b: &mut Binder, x: Var, name: &str, stride: [usize; 3], unit: bool) -> Result<Var> {
        let w = b.param(g, &format!("{name}/conv"))?;
        let pad = if unit { [0; 3] } else { self.pad() };
        let y = g.conv3d(x, w, stride, pad)?;
        b.batch_norm(g, y, &format!("{name}/bn"))
    }

    fn block(&self, g: &mut Graph, b: &mut Binder, x: Var, name: &str, c_in: usize, c_out: usize, stride: [usize; 3]) -> Result<Var> {
        let w1 = b.param(g, &format!("{name}/conv1"))?;
        let h = g.conv3d(x, w1, stride, self.pad())?;
        let h = b.batch_norm(g, h, &format!("{name}/bn1"))?;
        let h = g.relu(h)?;
        let w2 = b.param(g, &format!("{name}/conv2"))?;
        let h = g.conv3d(h, w2, [1; 3], self.pad())?;
        let h = b.batch_norm(g, h, &format!("{name}/bn2"))?;
        let skip = if c_in != c_out || stride != [1; 3] {
            self.conv_bn(g, b, x, &format!("{name}/down"), stride, true)?
        } else {
            x
        };
        let y = g.add(h, skip)?;
        g.relu(y)
    }

    /// `[N, C, D, H, W]` → `[N, n, D', H', W']`.
    fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 5 || s[1] != self.in_channels {
            return Err(Error::dim(
                "backbone",
                format!("{} input must be [N, {}, D, H, W], got {s:?}", self.prefix, self.in_channels),
            ));
        }
        self.output_extent([s[2], s[3], s[4]])?;
        let mut h = self.conv_bn(g, b, x, &format!("{}/stem", self.prefix), self.stem_stride, false)?;
        h = g.relu(h)?;
        if self.stem_pool != [1; 3] {
            h = g.avg_pool3d(h, self.stem_pool)?;
        }
        for (name, c_in, c_out, stride) in self.blocks() {
            h = self.block(g, b, h, &name, c_in, c_out, stride)?;
        }
        Ok(h)
    }
}

/// Visual features for `snippets[N, k, H, W, 3]`: `[N, h, w, n]`.
///
/// Each snippet is an independent sample of the 3D network; in training
/// mode batch statistics are shared across all `N` snippets.
pub fn visual_forward(g: &mut Graph, b: &mut Binder, cfg: &VisualBackboneConfig, snippets: Var) -> Result<Var> {
    let s = g.shape(snippets).to_vec();
    if s.len() != 5 || s[4] != 3 {
        return Err(Error::dim("visual_forward", format!("snippets must be [N, k, H, W, 3], got {s:?}")));
    }
    let x = g.permute(snippets, &[0, 4, 1, 2, 3])?;
    let y = cfg.net().forward(g, b, x)?;
    let ys = g.shape(y).to_vec();
    let y = g.avg_pool3d(y, [ys[2], 1, 1])?;
    let y = g.reshape(y, &[ys[0], ys[1], ys[3], ys[4]])?;
    g.permute(y, &[0, 2, 3, 1])
}

/// Audio features for `segments[N, rows, cols]`: `[N, h', w', n']`.
pub fn audio_forward(g: &mut Graph, b: &mut Binder, cfg: &AudioBackboneConfig, segments: Var) -> Result<Var> {
    let s = g.shape(segments).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("audio_forward", format!("segments must be [N, rows, cols], got {s:?}")));
    }
    let x = g.reshape(segments, &[s[0], 1, 1, s[1], s[2]])?;
    let y = cfg.net().forward(g, b, x)?;
    let ys = g.shape(y).to_vec();
    let y = g.reshape(y, &[ys[0], ys[1], ys[3], ys[4]])?;
    g.permute(y, &[0, 2, 3, 1])
}

/// `[N, h, w, n]` → `[N, h·w, n]`, row-major over `(h, w)`.
pub fn reshape_to_superframes(g: &mut Graph, f: Var) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 4 {
        return Err(Error::dim("reshape_to_superframes", format!("expected [N, h, w, n], got {s:?}")));
    }
    g.reshape(f, &[s[0], s[1] * s[2], s[3]])
}
