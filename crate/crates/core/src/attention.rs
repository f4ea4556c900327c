//! Spatial, channel-wise and temporal attention sub-networks.
//!
//! Every attention map is produced by two chained linear maps with no
//! nonlinearity between them: a `1×d` projection that collapses each row of
//! a feature matrix to a scalar, then a square mixing matrix across rows.
//! Spatial and channel-wise attention normalize with a softmax per
//! super-frame; temporal attention uses an unnormalized ReLU.
//!
//! Inputs carry a leading axis of super-frames. For the spatial and channel
//! stages that axis may flatten a batch (`B·t` super-frames); the temporal
//! stage takes `[B, t, d]` explicitly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Uniform initialization in `[−s, s]`, `s = 1/√fan_in`, fan-in being the
/// number of columns.
pub fn init_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let s = 1.0 / (cols as Real).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-s..=s))
}

fn expect_shape(g: &Graph, op: &'static str, what: &str, v: Var, shape: &[usize]) -> Result<()> {
    if g.shape(v) != shape {
        return Err(Error::dim(
            op,
            format!("{what} has shape {:?}, expected {shape:?}", g.shape(v)),
        ));
    }
    Ok(())
}

/// Collapse each row of `x[R, d]` with `w2[1, d]`, then mix rows within
/// each group of `rows` with `w1[rows, rows]`. Returns logits `[R/rows, rows]`.
fn two_stage_logits(g: &mut Graph, x: Var, rows: usize, w1: Var, w2: Var) -> Result<Var> {
    let total = g.shape(x)[0];
    let z = g.linear(x, w2)?;
    let z = g.reshape(z, &[total / rows, rows])?;
    g.linear(z, w1)
}

/// Spatial attention over `F[T, m, n]` with `W_S1[m, m]`, `W_S2[1, n]`.
///
/// Returns the attended map `F_S[T, m, n]` (location `j` of super-frame `i`
/// scaled by `A_S[i, j]`) and the attention `A_S[T, m]`.
pub fn spatial_attention(g: &mut Graph, f: Var, w_s1: Var, w_s2: Var) -> Result<(Var, Var)> {
    let s = g.shape(f).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("spatial_attention", format!("features must be [T, m, n], got {s:?}")));
    }
    let (t, m, n) = (s[0], s[1], s[2]);
    expect_shape(g, "spatial_attention", "W_S1", w_s1, &[m, m])?;
    expect_shape(g, "spatial_attention", "W_S2", w_s2, &[1, n])?;
    let flat = g.reshape(f, &[t * m, n])?;
    let h = two_stage_logits(g, flat, m, w_s1, w_s2)?;
    let a = g.softmax(h)?;
    let a_flat = g.reshape(a, &[t * m])?;
    let fs = g.scale_rows(flat, a_flat)?;
    let fs = g.reshape(fs, &[t, m, n])?;
    Ok((fs, a))
}

/// Channel-wise attention over `X[T, m, n]` with `W_C1[n, n]`, `W_C2[1, m]`.
///
/// `X` is transposed per super-frame to `G[T, n, m]`; returns
/// `G_C[T, n, m]` (channel `j` scaled by `A_C[i, j]`) and `A_C[T, n]`.
pub fn channel_attention(g: &mut Graph, x: Var, w_c1: Var, w_c2: Var) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("channel_attention", format!("features must be [T, m, n], got {s:?}")));
    }
    let (t, m, n) = (s[0], s[1], s[2]);
    expect_shape(g, "channel_attention", "W_C1", w_c1, &[n, n])?;
    expect_shape(g, "channel_attention", "W_C2", w_c2, &[1, m])?;
    let gt = g.permute(x, &[0, 2, 1])?;
    let flat = g.reshape(gt, &[t * n, m])?;
    let h = two_stage_logits(g, flat, n, w_c1, w_c2)?;
    let a = g.softmax(h)?;
    let a_flat = g.reshape(a, &[t * n])?;
    let gc = g.scale_rows(flat, a_flat)?;
    let gc = g.reshape(gc, &[t, n, m])?;
    Ok((gc, a))
}

/// Temporal attention over per-segment features `P[B, t, d]` with
/// `W1[t, t]`, `W2[1, d]`.
///
/// Returns the embedding `E[B, d] = Σ_j A[:, j]·P[:, j]` and the ReLU
/// weights `A[B, t]`, which are not normalized.
pub fn temporal_attention(g: &mut Graph, p: Var, w1: Var, w2: Var) -> Result<(Var, Var)> {
    let s = g.shape(p).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("temporal_attention", format!("features must be [B, t, d], got {s:?}")));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    expect_shape(g, "temporal_attention", "W_T1", w1, &[t, t])?;
    expect_shape(g, "temporal_attention", "W_T2", w2, &[1, d])?;
    let flat = g.reshape(p, &[b * t, d])?;
    let h = two_stage_logits(g, flat, t, w1, w2)?;
    let a = g.relu(h)?;
    let a_flat = g.reshape(a, &[b * t])?;
    let weighted = g.scale_rows(flat, a_flat)?;
    let weighted = g.reshape(weighted, &[b, t, d])?;
    let e = g.sum_axis(weighted, 1)?;
    Ok((e, a))
}

/// Visual temporal attention on the channel-attended map `G_C[B·t, n, m]`.
///
/// Spatially average-pools to `P[B, t, n]` first. Returns `(E_V[B, n],
/// A_T[B, t], P[B, t, n])`.
pub fn temporal_attention_visual(
    g: &mut Graph,
    gc: Var,
    segments: usize,
    w_t1: Var,
    w_t2: Var,
) -> Result<(Var, Var, Var)> {
    let s = g.shape(gc).to_vec();
    if s.len() != 3 || segments == 0 || s[0] % segments != 0 {
        return Err(Error::dim(
            "temporal_attention_visual",
            format!("{s:?} is not [B·{segments}, n, m]"),
        ));
    }
    let p = g.mean_axis(gc, 2)?;
    let p = g.reshape(p, &[s[0] / segments, segments, s[1]])?;
    let (e, a) = temporal_attention(g, p, w_t1, w_t2)?;
    Ok((e, a, p))
}

/// Audio temporal attention on spatially pooled segment features
/// `F_A'[B, t, n']`. Returns `(E_A[B, n'], A_A[B, t])`.
pub fn temporal_attention_audio(g: &mut Graph, pooled: Var, w_a1: Var, w_a2: Var) -> Result<(Var, Var)> {
    temporal_attention(g, pooled, w_a1, w_a2)
}

/// `[E_V, E_A]` along the feature axis.
pub fn fuse(g: &mut Graph, e_v: Var, e_a: Var) -> Result<Var> {
    let axis = g.shape(e_v).len().saturating_sub(1);
    g.concat(&[e_v, e_a], axis)
}

/// Row-major array with its shape, as serialized in attention dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ShapedArray {
    pub fn from_tensor(t: &Tensor, shape: &[usize]) -> Self {
        debug_assert_eq!(t.len(), shape.iter().product::<usize>());
        Self {
            shape: shape.to_vec(),
            data: t.data().iter().map(|v| *v as f64).collect(),
        }
    }

    /// Row `i` of the leading axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let inner: usize = self.shape[1..].iter().product();
        &self.data[i * inner..(i + 1) * inner]
    }
}

/// Attention maps of one forward pass over a single video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBundle {
    /// Spatial attention, `t × m × 1`.
    #[serde(rename = "A_S", skip_serializing_if = "Option::is_none", default)]
    pub spatial: Option<ShapedArray>,
    /// Channel-wise attention, `t × n × 1`.
    #[serde(rename = "A_C", skip_serializing_if = "Option::is_none", default)]
    pub channel: Option<ShapedArray>,
    /// Visual temporal attention, `t × 1`.
    #[serde(rename = "A_T", skip_serializing_if = "Option::is_none", default)]
    pub temporal: Option<ShapedArray>,
    /// Audio temporal attention, `t × 1`.
    #[serde(rename = "A_A", skip_serializing_if = "Option::is_none", default)]
    pub audio: Option<ShapedArray>,
    /// Spatial grid of the super-frames, `[h, w]`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grid: Option<[usize; 2]>,
}

impl AttentionBundle {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(text)?;
        for a in [&b.spatial, &b.channel, &b.temporal, &b.audio].into_iter().flatten() {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Input(format!(
                    "attention array of shape {:?} holds {} values",
                    a.shape,
                    a.data.len()
                )));
            }
        }
        Ok(b)
    }
}
