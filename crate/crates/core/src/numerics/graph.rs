use crate::error::{Error, Result};
use crate::numerics::kernels::{self, ConvGeom};
use crate::numerics::tensor::numel;
use crate::numerics::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    Relu(Var),
    Softmax(Var),
    Log(Var, Real),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Pick(Var, Vec<usize>),
    Conv3d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    AvgPool3d {
        x: Var,
        kernel: [usize; 3],
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
        training: bool,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Linear(..) => "linear",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::ScaleRows(..) => "scale_rows",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Pick(..) => "pick",
            Op::Conv3d { .. } => "conv3d",
            Op::AvgPool3d { .. } => "avg_pool3d",
            Op::BatchNorm { .. } => "batch_norm",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

/// Record of a forward computation, replayed in reverse by [`Graph::backward`].
///
/// Nodes are appended in creation order, which is always a valid topological
/// order. Gradients of leaves accumulate across `backward` calls until
/// [`Graph::zero_grad`].
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: false,
        }
    }

    /// Fail any op whose output contains NaN or infinity.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Trainable leaf carrying a name for diagnostics.
    pub fn named_param(&mut self, name: &str, value: Tensor) -> Var {
        self.push_leaf(value, true, Some(name.to_string()))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, label: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            label,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn label(&self, v: Var) -> Option<&str> {
        self.nodes[v.0].label.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            let culprit = inputs
                .iter()
                .filter_map(|v| self.label(*v))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Error::Divergence(format!(
                "non-finite output from {} (node {}){}",
                op.name(),
                self.nodes.len(),
                if culprit.is_empty() {
                    String::new()
                } else {
                    format!(" fed by {culprit}")
                }
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut pending: Vec<Option<Vec<Real>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(Tensor::new(node.value.shape(), g)?),
                }
                continue;
            }
            for (input, grad) in self.local_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut pending[input.0] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &[Real] {
        self.nodes[v.0].value.data()
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn local_grads(&self, i: usize, g: &[Real]) -> Vec<(Var, Vec<Real>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (p, q) = (self.shape(*a)[0], self.shape(*a)[1]);
                let r = self.shape(*b)[1];
                vec![
                    (*a, kernels::matmul_nt(g, self.val(*b), p, r, q)),
                    (*b, kernels::matmul_tn(self.val(*a), g, p, q, r)),
                ]
            }
            Op::Linear(x, w) => {
                let (rows, q) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                vec![
                    (*x, kernels::matmul_nn(g, self.val(*w), rows, o, q)),
                    (*w, kernels::matmul_tn(g, self.val(*x), rows, o, q)),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                vec![
                    (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                    (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::AddBias(x, b) => {
                let c = self.value(*b).len();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::ScaleRows(x, s) => {
                let sv = self.val(*s);
                let xv = self.val(*x);
                let cols = self.value(*x).len() / sv.len().max(1);
                let mut gx = vec![0.0; xv.len()];
                let mut gs = vec![0.0; sv.len()];
                for r in 0..sv.len() {
                    let (grow, xrow) = (&g[r * cols..][..cols], &xv[r * cols..][..cols]);
                    let mut acc = 0.0;
                    for c in 0..cols {
                        gx[r * cols + c] = grow[c] * sv[r];
                        acc += grow[c] * xrow[c];
                    }
                    gs[r] = acc;
                }
                vec![(*x, gx), (*s, gs)]
            }
            Op::Relu(x) => {
                let xv = self.val(*x);
                vec![(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; out.len()];
                for ((gr, yr), dst) in g.chunks(d).zip(out.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: Real = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Log(x, floor) => {
                let xv = self.val(*x);
                vec![(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &x)| if x > *floor { g / x } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Mean(x) => {
                let n = self.value(*x).len();
                vec![(*x, vec![g[0] / n as Real; n])]
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let shape = self.shape(*x);
                let (outer, len, inner) = split_axis(shape, *axis);
                let scale = match node.op {
                    Op::MeanAxis(..) => 1.0 / len as Real,
                    _ => 1.0,
                };
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for n in 0..inner {
                            gx[(o * len + l) * inner + n] = g[o * inner + n] * scale;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, permute_data(g, node.value.shape(), &inv))]
            }
            Op::Concat(parts, axis) => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let width = self.shape(*p)[*axis] * inner;
                        let mut gp = Vec::with_capacity(outer * width);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * total + offset..][..width]);
                        }
                        offset += width;
                        (*p, gp)
                    })
                    .collect()
            }
            Op::Pick(x, idx) => {
                let cols = self.shape(*x)[1];
                let mut gx = vec![0.0; self.value(*x).len()];
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * cols + c] = g[r];
                }
                vec![(*x, gx)]
            }
            Op::Conv3d { x, w, geom } => vec![
                (*x, kernels::conv3d_backward_input(g, self.val(*w), geom)),
                (*w, kernels::conv3d_backward_weight(g, self.val(*x), geom)),
            ],
            Op::AvgPool3d { x, kernel } => {
                let s = self.shape(*x);
                let r = s.len();
                let planes = s[..r - 3].iter().product();
                let input = [s[r - 3], s[r - 2], s[r - 1]];
                vec![(
                    *x,
                    kernels::avg_pool3d_backward(g, planes, input, *kernel),
                )]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let shape = self.shape(*x);
                let (batch, ch) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let gam = self.val(*gamma);
                let count = (batch * inner) as Real;
                let mut gg = vec![0.0; ch];
                let mut gb = vec![0.0; ch];
                for c in 0..ch {
                    for b in 0..batch {
                        let base = (b * ch + c) * inner;
                        for k in base..base + inner {
                            gb[c] += g[k];
                            gg[c] += g[k] * xhat[k];
                        }
                    }
                }
                let mut gx = vec![0.0; g.len()];
                for c in 0..ch {
                    let k_scale = gam[c] * inv_std[c];
                    for b in 0..batch {
                        let base = (b * ch + c) * inner;
                        for k in base..base + inner {
                            gx[k] = if *training {
                                k_scale / count * (count * g[k] - gb[c] - xhat[k] * gg[c])
                            } else {
                                k_scale * g[k]
                            };
                        }
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
        }
    }
}

/// `(outer, len, inner)` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Reorders row-major `data` of `shape` so that output axis `i` is input axis `perm[i]`.
pub(crate) fn permute_data(data: &[Real], shape: &[usize], perm: &[usize]) -> Vec<Real> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for a in (0..rank).rev() {
            idx[a] += 1;
            src += out_strides[a];
            if idx[a] < out_shape[a] {
                break;
            }
            src -= out_strides[a] * out_shape[a];
            idx[a] = 0;
        }
    }
    out
}
