//! Raw loops behind the differentiable ops. Inputs are trusted to have
//! been shape-checked by the caller.

use crate::numerics::Real;
use crate::par;

/// `a[p×q] · b[q×r]`
pub(crate) fn matmul_nn(a: &[Real], b: &[Real], p: usize, q: usize, r: usize) -> Vec<Real> {
    let mut out = vec![0.0; p * r];
    par::for_each_chunk_mut(&mut out, r.max(1), |i, row| {
        let arow = &a[i * q..(i + 1) * q];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a[p×q] · b[r×q]ᵀ`
pub(crate) fn matmul_nt(a: &[Real], b: &[Real], p: usize, q: usize, r: usize) -> Vec<Real> {
    let mut out = vec![0.0; p * r];
    par::for_each_chunk_mut(&mut out, r.max(1), |i, row| {
        let arow = &a[i * q..(i + 1) * q];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * q..(j + 1) * q];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    });
    out
}

/// `a[q×p]ᵀ · b[q×r]`
pub(crate) fn matmul_tn(a: &[Real], b: &[Real], q: usize, p: usize, r: usize) -> Vec<Real> {
    let mut out = vec![0.0; p * r];
    par::for_each_chunk_mut(&mut out, r.max(1), |i, row| {
        for k in 0..q {
            let av = a[k * p + i];
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// Geometry of a 3D convolution over `[N, C, D, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }
    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }
    fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Output extent of a strided, padded window; `None` when the kernel does
/// not fit even once.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if span < kernel || stride == 0 {
        None
    } else {
        Some((span - kernel) / stride + 1)
    }
}

/// Range of output positions whose tap `k` lands inside the input.
fn valid(out_len: usize, in_len: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    if in_len + p < k + 1 {
        return (lo, lo);
    }
    let hi = ((in_len - 1 + p - k) / s + 1).min(out_len);
    (lo, hi.max(lo))
}

pub(crate) fn conv3d_forward(x: &[Real], w: &[Real], g: &ConvGeom) -> Vec<Real> {
    let [i0, i1, i2] = g.input;
    let [k0, k1, k2] = g.kernel;
    let [s0, s1, s2] = g.stride;
    let [p0, p1, p2] = g.pad;
    let [o0, o1, o2] = g.output;
    let in_plane = g.in_plane();
    let mut out = vec![0.0; g.batch * g.c_out * g.out_plane()];
    par::for_each_chunk_mut(&mut out, g.out_plane(), |pi, o| {
        let (b, oc) = (pi / g.c_out, pi % g.c_out);
        for ic in 0..g.c_in {
            let xp = &x[(b * g.c_in + ic) * in_plane..][..in_plane];
            let wk = &w[(oc * g.c_in + ic) * g.kernel_len()..][..g.kernel_len()];
            for kd in 0..k0 {
                let (dlo, dhi) = valid(o0, i0, kd, s0, p0);
                for kh in 0..k1 {
                    let (hlo, hhi) = valid(o1, i1, kh, s1, p1);
                    for kw in 0..k2 {
                        let (wlo, whi) = valid(o2, i2, kw, s2, p2);
                        let wv = wk[(kd * k1 + kh) * k2 + kw];
                        for od in dlo..dhi {
                            let id = od * s0 + kd - p0;
                            for oh in hlo..hhi {
                                let ih = oh * s1 + kh - p1;
                                let orow = &mut o[(od * o1 + oh) * o2..][..o2];
                                let xrow = &xp[(id * i1 + ih) * i2..][..i2];
                                for ow in wlo..whi {
                                    orow[ow] += wv * xrow[ow * s2 + kw - p2];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv3d_backward_input(dy: &[Real], w: &[Real], g: &ConvGeom) -> Vec<Real> {
    let [i0, i1, i2] = g.input;
    let [k0, k1, k2] = g.kernel;
    let [s0, s1, s2] = g.stride;
    let [p0, p1, p2] = g.pad;
    let [o0, o1, o2] = g.output;
    let out_plane = g.out_plane();
    let mut dx = vec![0.0; g.batch * g.c_in * g.in_plane()];
    par::for_each_chunk_mut(&mut dx, g.in_plane(), |pi, dxp| {
        let (b, ic) = (pi / g.c_in, pi % g.c_in);
        for oc in 0..g.c_out {
            let dyp = &dy[(b * g.c_out + oc) * out_plane..][..out_plane];
            let wk = &w[(oc * g.c_in + ic) * g.kernel_len()..][..g.kernel_len()];
            for kd in 0..k0 {
                let (dlo, dhi) = valid(o0, i0, kd, s0, p0);
                for kh in 0..k1 {
                    let (hlo, hhi) = valid(o1, i1, kh, s1, p1);
                    for kw in 0..k2 {
                        let (wlo, whi) = valid(o2, i2, kw, s2, p2);
                        let wv = wk[(kd * k1 + kh) * k2 + kw];
                        for od in dlo..dhi {
                            let id = od * s0 + kd - p0;
                            for oh in hlo..hhi {
                                let ih = oh * s1 + kh - p1;
                                let dyrow = &dyp[(od * o1 + oh) * o2..][..o2];
                                let dxrow = &mut dxp[(id * i1 + ih) * i2..][..i2];
                                for ow in wlo..whi {
                                    dxrow[ow * s2 + kw - p2] += wv * dyrow[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

pub(crate) fn conv3d_backward_weight(dy: &[Real], x: &[Real], g: &ConvGeom) -> Vec<Real> {
    let [i0, i1, i2] = g.input;
    let [k0, k1, k2] = g.kernel;
    let [s0, s1, s2] = g.stride;
    let [p0, p1, p2] = g.pad;
    let [o0, o1, o2] = g.output;
    let (in_plane, out_plane) = (g.in_plane(), g.out_plane());
    let per_oc = g.c_in * g.kernel_len();
    let mut dw = vec![0.0; g.c_out * per_oc];
    par::for_each_chunk_mut(&mut dw, per_oc, |oc, dwo| {
        for ic in 0..g.c_in {
            for kd in 0..k0 {
                let (dlo, dhi) = valid(o0, i0, kd, s0, p0);
                for kh in 0..k1 {
                    let (hlo, hhi) = valid(o1, i1, kh, s1, p1);
                    for kw in 0..k2 {
                        let (wlo, whi) = valid(o2, i2, kw, s2, p2);
                        let mut acc = 0.0;
                        for b in 0..g.batch {
                            let dyp = &dy[(b * g.c_out + oc) * out_plane..][..out_plane];
                            let xp = &x[(b * g.c_in + ic) * in_plane..][..in_plane];
                            for od in dlo..dhi {
                                let id = od * s0 + kd - p0;
                                for oh in hlo..hhi {
                                    let ih = oh * s1 + kh - p1;
                                    let dyrow = &dyp[(od * o1 + oh) * o2..][..o2];
                                    let xrow = &xp[(id * i1 + ih) * i2..][..i2];
                                    for ow in wlo..whi {
                                        acc += dyrow[ow] * xrow[ow * s2 + kw - p2];
                                    }
                                }
                            }
                        }
                        dwo[(ic * k0 + kd) * k1 * k2 + kh * k2 + kw] = acc;
                    }
                }
            }
        }
    });
    dw
}

/// Non-overlapping average pooling over `[planes, D, H, W]`.
pub(crate) fn avg_pool3d_forward(
    x: &[Real],
    planes: usize,
    input: [usize; 3],
    kernel: [usize; 3],
) -> Vec<Real> {
    let out: [usize; 3] = std::array::from_fn(|a| input[a] / kernel[a]);
    let (ip, op): (usize, usize) = (input.iter().product(), out.iter().product());
    let scale = 1.0 / kernel.iter().product::<usize>() as Real;
    let mut y = vec![0.0; planes * op];
    par::for_each_chunk_mut(&mut y, op.max(1), |pl, yp| {
        let xp = &x[pl * ip..][..ip];
        for d in 0..out[0] {
            for h in 0..out[1] {
                for w in 0..out[2] {
                    let mut acc = 0.0;
                    for a in 0..kernel[0] {
                        for b in 0..kernel[1] {
                            for c in 0..kernel[2] {
                                let (id, ih, iw) =
                                    (d * kernel[0] + a, h * kernel[1] + b, w * kernel[2] + c);
                                acc += xp[(id * input[1] + ih) * input[2] + iw];
                            }
                        }
                    }
                    yp[(d * out[1] + h) * out[2] + w] = acc * scale;
                }
            }
        }
    });
    y
}

pub(crate) fn avg_pool3d_backward(
    dy: &[Real],
    planes: usize,
    input: [usize; 3],
    kernel: [usize; 3],
) -> Vec<Real> {
    let out: [usize; 3] = std::array::from_fn(|a| input[a] / kernel[a]);
    let (ip, op): (usize, usize) = (input.iter().product(), out.iter().product());
    let scale = 1.0 / kernel.iter().product::<usize>() as Real;
    let mut dx = vec![0.0; planes * ip];
    par::for_each_chunk_mut(&mut dx, ip.max(1), |pl, dxp| {
        let dyp = &dy[pl * op..][..op];
        for d in 0..out[0] * kernel[0] {
            for h in 0..out[1] * kernel[1] {
                for w in 0..out[2] * kernel[2] {
                    let o = ((d / kernel[0]) * out[1] + h / kernel[1]) * out[2] + w / kernel[2];
                    dxp[(d * input[1] + h) * input[2] + w] = dyp[o] * scale;
                }
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_ranges_cover_padding() {
        // 3-tap kernel, pad 1, stride 1 over 4 inputs -> 4 outputs.
        assert_eq!(valid(4, 4, 0, 1, 1), (1, 4));
        assert_eq!(valid(4, 4, 1, 1, 1), (0, 4));
        assert_eq!(valid(4, 4, 2, 1, 1), (0, 3));
        // stride 2 over 7 inputs -> 4 outputs
        assert_eq!(conv_out_len(7, 3, 2, 1), Some(4));
        assert_eq!(valid(4, 7, 0, 2, 1), (1, 4));
        assert_eq!(valid(4, 7, 2, 2, 1), (0, 3));
        assert_eq!(conv_out_len(1, 3, 1, 0), None);
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<Real> = (0..6).map(|v| v as Real).collect(); // 2x3
        let b: Vec<Real> = (0..12).map(|v| (v as Real) * 0.5).collect(); // 3x4
        let nn = matmul_nn(&a, &b, 2, 3, 4);
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        assert_eq!(nn, matmul_nt(&a, &bt, 2, 3, 4));
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        assert_eq!(nn, matmul_tn(&at, &b, 3, 2, 4));
    }
}
