//! Differentiable operations recorded on a [`Graph`].

use crate::error::{Error, Result};
use crate::numerics::graph::{permute_data, split_axis, Op};
use crate::numerics::kernels::{self, conv_out_len, ConvGeom};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::par;

/// Epsilon added to the variance in batch normalization.
pub const BN_EPS: Real = 1e-5;

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Real>,
    /// Unbiased variance, the quantity tracked by running averages.
    pub var: Vec<Real>,
}

impl Graph {
    /// `a[p×q] · b[q×r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let data = kernels::matmul_nn(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        let out = Tensor::new(&[sa[0], sb[1]], data)?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `x[R×q] · w[o×q]ᵀ`, the row-wise linear map.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::dim(
                "linear",
                format!("input {sx:?} does not match weight {sw:?}"),
            ));
        }
        let data = kernels::matmul_nt(self.value(x).data(), self.value(w).data(), sx[0], sx[1], sw[0]);
        let out = Tensor::new(&[sx[0], sw[0]], data)?;
        self.push(out, Op::Linear(x, w), &[x, w])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::dim(
                "transpose",
                format!("expected a matrix, got {:?}", self.shape(x)),
            ));
        }
        self.permute(x, &[1, 0])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Adds `bias[C]` to every row of `x[.., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(bias).len();
        let last = self.shape(x).last().copied().unwrap_or(0);
        if self.shape(bias).len() != 1 || last != c {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} does not match {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(&b).map(|(v, bb)| v + bb))
            .collect();
        let out = Tensor::new(self.shape(x), data)?;
        self.push(out, Op::AddBias(x, bias), &[x, bias])
    }

    /// Multiplies row `r` of `x[R×C]` by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let rows = self.value(s).len();
        if sx.len() != 2 || sx[0] != rows {
            return Err(Error::dim(
                "scale_rows",
                format!("{rows} row weights for a {sx:?} matrix"),
            ));
        }
        let cols = sx[1];
        let sv = self.value(s).data().to_vec();
        let data = self
            .value(x)
            .data()
            .chunks(cols.max(1))
            .zip(&sv)
            .flat_map(|(row, w)| row.iter().map(move |v| v * w))
            .collect();
        let out = Tensor::new(&sx, data)?;
        self.push(out, Op::ScaleRows(x, s), &[x, s])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), &[x])
    }

    /// Softmax along the last axis, stabilized by max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = match self.shape(x).last() {
            Some(&d) if d > 0 => d,
            _ => {
                return Err(Error::dim(
                    "softmax",
                    format!("empty input {:?}", self.shape(x)),
                ))
            }
        };
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(self.shape(x), data)?;
        self.push(out, Op::Softmax(x), &[x])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, x: Var, floor: Real) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(out, Op::Log(x, floor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::dim("mean", "empty input"));
        }
        let s: Real = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s / n as Real), Op::Mean(x), &[x])
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(
                "reduce_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..][..inner];
                for (d, s) in data[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let s = 1.0 / len as Real;
            data.iter_mut().for_each(|v| *v *= s);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, data)?;
        let op = if mean {
            Op::MeanAxis(x, axis)
        } else {
            Op::SumAxis(x, axis)
        };
        self.push(out, op, &[x])
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Averages out `axis` (the axis is removed).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let data = permute_data(self.value(x).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = Tensor::new(&out_shape, data)?;
        self.push(out, Op::Permute(x, perm.to_vec()), &[x])
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "nothing to concatenate"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(a, (x, y))| a == axis || x == y);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} cannot join {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let width = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * width..][..width]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// `y[r] = x[r, idx[r]]` for a matrix `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&c| c >= s[1]) {
            return Err(Error::dim(
                "pick",
                format!("{} indices into {s:?}", idx.len()),
            ));
        }
        let xv = self.value(x).data();
        let data = idx.iter().enumerate().map(|(r, &c)| xv[r * s[1] + c]).collect();
        let out = Tensor::new(&[idx.len()], data)?;
        self.push(out, Op::Pick(x, idx.to_vec()), &[x])
    }

    /// 3D convolution of `x[N, C_in, D, H, W]` with `w[C_out, C_in, kD, kH, kW]`.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 || sx[1] != sw[1] {
            return Err(Error::dim(
                "conv3d",
                format!("input {sx:?} incompatible with kernel {sw:?}"),
            ));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_out_len(sx[2 + a], sw[2 + a], stride[a], pad[a]).ok_or_else(|| {
                Error::dim(
                    "conv3d",
                    format!("kernel {sw:?} with stride {stride:?}, pad {pad:?} does not fit input {sx:?}"),
                )
            })?;
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            c_out: sw[0],
            input: [sx[2], sx[3], sx[4]],
            kernel: [sw[2], sw[3], sw[4]],
            stride,
            pad,
            output,
        };
        let data = kernels::conv3d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let out = Tensor::new(&[sx[0], sw[0], output[0], output[1], output[2]], data)?;
        self.push(out, Op::Conv3d { x, w, geom }, &[x, w])
    }

    /// 2D convolution of `x[N, C_in, H, W]` with `w[C_out, C_in, kH, kW]`,
    /// expressed as a depth-1 3D convolution.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: [usize; 2], pad: [usize; 2]) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("input {sx:?} incompatible with kernel {sw:?}"),
            ));
        }
        let x5 = self.reshape(x, &[sx[0], sx[1], 1, sx[2], sx[3]])?;
        let w5 = self.reshape(w, &[sw[0], sw[1], 1, sw[2], sw[3]])?;
        let y = self.conv3d(x5, w5, [1, stride[0], stride[1]], [0, pad[0], pad[1]])?;
        let s = self.shape(y).to_vec();
        self.reshape(y, &[s[0], s[1], s[3], s[4]])
    }

    /// Non-overlapping average pooling over the trailing three axes;
    /// remainders are dropped.
    pub fn avg_pool3d(&mut self, x: Var, kernel: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let r = s.len();
        if r < 3 || kernel.iter().any(|&k| k == 0) || (0..3).any(|a| s[r - 3 + a] < kernel[a]) {
            return Err(Error::dim(
                "avg_pool3d",
                format!("window {kernel:?} does not fit {s:?}"),
            ));
        }
        let planes = s[..r - 3].iter().product();
        let input = [s[r - 3], s[r - 2], s[r - 1]];
        let data = kernels::avg_pool3d_forward(self.value(x).data(), planes, input, kernel);
        let mut shape = s.clone();
        for a in 0..3 {
            shape[r - 3 + a] = input[a] / kernel[a];
        }
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::AvgPool3d { x, kernel }, &[x])
    }

    /// Training-mode batch normalization over axis 1 of `x[N, C, ...]`,
    /// using statistics of this minibatch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (batch, ch, inner) = self.bn_dims(x, gamma, beta)?;
        let count = batch * inner;
        if count < 2 {
            return Err(Error::dim(
                "batch_norm",
                format!("need at least two values per channel, got {count}"),
            ));
        }
        let xv = self.value(x).data();
        let stats: Vec<(Real, Real)> = par::map_indexed(ch, |c| {
            let mut s = 0.0;
            for b in 0..batch {
                s += xv[(b * ch + c) * inner..][..inner].iter().sum::<Real>();
            }
            let mean = s / count as Real;
            let mut ss = 0.0;
            for b in 0..batch {
                for v in &xv[(b * ch + c) * inner..][..inner] {
                    ss += (v - mean) * (v - mean);
                }
            }
            (mean, ss / count as Real)
        });
        let mean: Vec<Real> = stats.iter().map(|s| s.0).collect();
        let inv_std: Vec<Real> = stats.iter().map(|s| 1.0 / (s.1 + BN_EPS).sqrt()).collect();
        let unbiased = stats
            .iter()
            .map(|s| s.1 * count as Real / (count - 1) as Real)
            .collect();
        let (y, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, batch, ch, inner);
        let out = Tensor::new(self.shape(x), y)?;
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: true,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[Real],
        running_var: &[Real],
    ) -> Result<Var> {
        let (batch, ch, inner) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != ch || running_var.len() != ch {
            return Err(Error::dim(
                "batch_norm",
                format!("running statistics for {} channels, input has {ch}", running_mean.len()),
            ));
        }
        let inv_std: Vec<Real> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (y, xhat) = self.bn_apply(x, gamma, beta, running_mean, &inv_std, batch, ch, inner);
        let out = Tensor::new(self.shape(x), y)?;
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: false,
            },
            &[x, gamma, beta],
        )
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::dim(
                "batch_norm",
                format!(
                    "input {s:?} with affine {:?}/{:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok((s[0], s[1], s[2..].iter().product()))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[Real],
        inv_std: &[Real],
        batch: usize,
        ch: usize,
        inner: usize,
    ) -> (Vec<Real>, Vec<Real>) {
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for bi in 0..batch {
            for c in 0..ch {
                let base = (bi * ch + c) * inner;
                for k in base..base + inner {
                    xhat[k] = (xv[k] - mean[c]) * inv_std[c];
                    y[k] = g[c] * xhat[k] + b[c];
                }
            }
        }
        (y, xhat)
    }
}

/// Max-subtracted softmax of one row.
pub fn softmax_in_place(row: &mut [Real]) {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
