//! Differentiable primitives on [`Var`].
//!
//! Every reduction accumulates left to right in index order so that
//! forward passes are bit-reproducible.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::tape::Var;
use super::{Result, Tensor, TensorError};

/// Stride, padding and grouping of a 2-D convolution, as (height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Conv2dOptions {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dOptions {
            stride: (stride, stride),
            padding: (padding, padding),
            groups,
        }
    }
}

/// Output length of a convolution along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact-erf GELU on a scalar.
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` for a: [k, m], b: [k, n].
fn matmul_tn_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for a: [m, k], b: [n, k].
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    opts: Conv2dOptions,
}

impl ConvGeom {
    fn cin_per_group(&self) -> usize {
        self.c_in / self.opts.groups
    }

    fn cout_per_group(&self) -> usize {
        self.c_out / self.opts.groups
    }

    fn macs(&self) -> u64 {
        (self.batch * self.c_out * self.cin_per_group() * self.kh * self.kw * self.oh * self.ow)
            as u64
    }

    /// Calls `f(ic, oc, ki, kj)` for each weight tap, over all channels.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let cin_g = self.cin_per_group();
        let cout_g = self.cout_per_group();
        for oc in 0..self.c_out {
            let g = oc / cout_g;
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        f(ic, oc, ki, kj);
                    }
                }
            }
        }
    }

    fn weight_index(&self, oc: usize, icg: usize, ki: usize, kj: usize) -> usize {
        ((oc * self.cin_per_group() + icg) * self.kh + ki) * self.kw + kj
    }

    /// Valid (output, input) index pairs along one axis for kernel offset `k`.
    fn axis_pairs(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        // outputs o with 0 <= o*stride + k - pad < in_len
        let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
        let hi = if in_len + pad > k {
            ((in_len + pad - k - 1) / stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn conv2d_forward(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.c_out * g.oh * g.ow];
    let (sh, sw) = g.opts.stride;
    let (ph, pw) = g.opts.padding;
    let cin_g = g.cin_per_group();
    for b in 0..g.batch {
        g.for_each_tap(|ic, oc, ki, kj| {
            let wv = wt[g.weight_index(oc, ic % cin_g, ki, kj)];
            let (oh_lo, oh_hi) = ConvGeom::axis_pairs(g.oh, g.h, ki, sh, ph);
            let (ow_lo, ow_hi) = ConvGeom::axis_pairs(g.ow, g.w, kj, sw, pw);
            let xin = &x[(b * g.c_in + ic) * g.h * g.w..(b * g.c_in + ic + 1) * g.h * g.w];
            let plane = &mut out[(b * g.c_out + oc) * g.oh * g.ow..(b * g.c_out + oc + 1) * g.oh * g.ow];
            for o_i in oh_lo..oh_hi {
                let ih = o_i * sh + ki - ph;
                let orow = &mut plane[o_i * g.ow..(o_i + 1) * g.ow];
                let xrow = &xin[ih * g.w..(ih + 1) * g.w];
                for (o_j, o) in orow.iter_mut().enumerate().take(ow_hi).skip(ow_lo) {
                    *o += wv * xrow[o_j * sw + kj - pw];
                }
            }
        });
    }
    out
}

fn conv2d_backward(gout: &[f64], x: &[f64], wt: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let (sh, sw) = g.opts.stride;
    let (ph, pw) = g.opts.padding;
    let cin_g = g.cin_per_group();
    for b in 0..g.batch {
        g.for_each_tap(|ic, oc, ki, kj| {
            let widx = g.weight_index(oc, ic % cin_g, ki, kj);
            let wv = wt[widx];
            let (oh_lo, oh_hi) = ConvGeom::axis_pairs(g.oh, g.h, ki, sh, ph);
            let (ow_lo, ow_hi) = ConvGeom::axis_pairs(g.ow, g.w, kj, sw, pw);
            let base_x = (b * g.c_in + ic) * g.h * g.w;
            let base_o = (b * g.c_out + oc) * g.oh * g.ow;
            let mut acc = 0.0;
            for o_i in oh_lo..oh_hi {
                let ih = o_i * sh + ki - ph;
                for o_j in ow_lo..ow_hi {
                    let iw = o_j * sw + kj - pw;
                    let go = gout[base_o + o_i * g.ow + o_j];
                    acc += go * x[base_x + ih * g.w + iw];
                    gx[base_x + ih * g.w + iw] += go * wv;
                }
            }
            gw[widx] += acc;
        });
    }
    (gx, gw)
}

fn softmax_raw(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..len {
                max = max.max(x[idx(a)]);
            }
            let mut sum = 0.0;
            for a in 0..len {
                let e = (x[idx(a)] - max).exp();
                out[idx(a)] = e;
                sum += e;
            }
            for a in 0..len {
                out[idx(a)] /= sum;
            }
        }
    }
    out
}

impl<'t> Var<'t> {
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let value = self.tape.with_value(self.id, |x| x.map(f));
        self.tape.push(op, value, &[self], move |g, p, out| {
            let x = p[0];
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(out.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Tensor::from_parts(x.shape().to_vec(), data)]
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.tape.with_values(&[self.id, other.id], |v| {
            same_shape("add", v[0], v[1]).map(|_| v[0].zip_map(v[1], |a, b| a + b))
        })?;
        self.tape
            .push("add", value, &[self, other], |g, _, _| vec![g.clone(), g.clone()])
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.tape.with_values(&[self.id, other.id], |v| {
            same_shape("sub", v[0], v[1]).map(|_| v[0].zip_map(v[1], |a, b| a - b))
        })?;
        self.tape
            .push("sub", value, &[self, other], |g, _, _| vec![g.clone(), g.map(|v| -v)])
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.tape.with_values(&[self.id, other.id], |v| {
            same_shape("mul", v[0], v[1]).map(|_| v[0].zip_map(v[1], |a, b| a * b))
        })?;
        self.tape.push("mul", value, &[self, other], |g, p, _| {
            vec![g.zip_map(p[1], |g, b| g * b), g.zip_map(p[0], |g, a| g * a)]
        })
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary("scale", |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |x| x + s, |_, _| 1.0)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    /// Exact GELU `x·Φ(x)` with Φ evaluated through `erf`.
    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary("gelu", gelu_scalar, |x, _| {
            std_normal_cdf(x) + x * std_normal_pdf(x)
        })
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// Elementwise minimum. Ties route the gradient to `self`.
    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.tape.with_values(&[self.id, other.id], |v| {
            same_shape("minimum", v[0], v[1]).map(|_| v[0].zip_map(v[1], f64::min))
        })?;
        self.tape.push("minimum", value, &[self, other], |g, p, _| {
            let pick_a = p[0].zip_map(p[1], |a, b| if a <= b { 1.0 } else { 0.0 });
            vec![
                g.zip_map(&pick_a, |g, m| g * m),
                g.zip_map(&pick_a, |g, m| g * (1.0 - m)),
            ]
        })
    }

    /// `self[..., n] + bias[n]`.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = self.tape.with_values(&[self.id, bias.id], |v| {
            let (x, b) = (v[0], v[1]);
            let n = *x.shape().last().unwrap_or(&1);
            if b.shape() != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "add_bias",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &xv)| xv + b.data()[i % n])
                .collect();
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        })?;
        self.tape.push("add_bias", value, &[self, bias], |g, p, _| {
            let n = p[1].numel();
            let mut gb = vec![0.0; n];
            for (i, &gv) in g.data().iter().enumerate() {
                gb[i % n] += gv;
            }
            vec![g.clone(), Tensor::from_parts(vec![n], gb)]
        })
    }

    /// `self[B, C, ...] + bias[C]`, broadcasting over batch and trailing axes.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = self.tape.with_values(&[self.id, bias.id], |v| {
            let (x, b) = (v[0], v[1]);
            if x.rank() < 2 || b.shape() != [x.shape()[1]] {
                return Err(TensorError::ShapeMismatch {
                    op: "add_channel_bias",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let c = x.shape()[1];
            let inner: usize = x.shape()[2..].iter().product();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &xv)| xv + b.data()[(i / inner) % c])
                .collect();
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        })?;
        self.tape.push("add_channel_bias", value, &[self, bias], |g, p, _| {
            let c = p[1].numel();
            let inner: usize = p[0].shape()[2..].iter().product();
            let mut gb = vec![0.0; c];
            for (i, &gv) in g.data().iter().enumerate() {
                gb[(i / inner) % c] += gv;
            }
            vec![g.clone(), Tensor::from_parts(vec![c], gb)]
        })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let value = self.tape.with_value(self.id, |x| Tensor::scalar(x.sum()));
        self.tape.push("sum", value, &[self], |g, p, _| {
            vec![Tensor::full(p[0].shape(), g.data()[0])]
        })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.tape.with_value(self.id, |x| x.numel()) as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let (value, dims) = self.tape.with_value(self.id, |x| {
            check_axis("sum_axis", x.shape(), axis)?;
            let dims = split_at_axis(x.shape(), axis);
            let (outer, len, inner) = dims;
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += x.data()[(o * len + a) * inner + i];
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            Ok::<_, TensorError>((Tensor::from_parts(shape, out), dims))
        })?;
        self.tape.push("sum_axis", value, &[self], move |g, p, _| {
            let (outer, len, inner) = dims;
            let mut gx = vec![0.0; p[0].numel()];
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        gx[(o * len + a) * inner + i] = g.data()[o * inner + i];
                    }
                }
            }
            vec![Tensor::from_parts(p[0].shape().to_vec(), gx)]
        })
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let len = self.tape.with_value(self.id, |x| {
            check_axis("mean_axis", x.shape(), axis).map(|_| x.shape()[axis])
        })?;
        self.sum_axis(axis)?.scale(1.0 / len as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.tape.with_value(self.id, |x| x.reshape(shape))?;
        self.tape.push("reshape", value, &[self], |g, p, _| {
            vec![Tensor::from_parts(p[0].shape().to_vec(), g.data().to_vec())]
        })
    }

    /// Reorder axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let value = self.tape.with_value(self.id, |x| {
            let mut seen = vec![false; x.rank()];
            if axes.len() != x.rank() || axes.iter().any(|&a| a >= x.rank() || std::mem::replace(&mut seen[a], true)) {
                return Err(TensorError::invalid(
                    "permute",
                    format!("{axes:?} is not a permutation of the axes of {:?}", x.shape()),
                ));
            }
            Ok(permute_tensor(x, axes))
        })?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape
            .push("permute", value, &[self], move |g, _, _| vec![permute_tensor(g, &inverse)])
    }

    /// Take `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let (value, dims) = self.tape.with_value(self.id, |x| {
            check_axis("narrow", x.shape(), axis)?;
            if len == 0 || start + len > x.shape()[axis] {
                return Err(TensorError::invalid(
                    "narrow",
                    format!("range {start}..{} exceeds axis {axis} of {:?}", start + len, x.shape()),
                ));
            }
            let dims = split_at_axis(x.shape(), axis);
            let (outer, full, inner) = dims;
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let lo = (o * full + start) * inner;
                out.extend_from_slice(&x.data()[lo..lo + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            Ok((Tensor::from_parts(shape, out), dims))
        })?;
        self.tape.push("narrow", value, &[self], move |g, p, _| {
            let (outer, full, inner) = dims;
            let mut gx = vec![0.0; p[0].numel()];
            for o in 0..outer {
                let lo = (o * full + start) * inner;
                gx[lo..lo + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Tensor::from_parts(p[0].shape().to_vec(), gx)]
        })
    }

    /// Concatenate along `axis`. All other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let tape = first.tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let (value, lens) = tape.with_values(&ids, |vals| {
            let shape0 = vals[0].shape();
            check_axis("concat", shape0, axis)?;
            for v in vals {
                let ok = v.rank() == shape0.len()
                    && v.shape().iter().zip(shape0).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !ok {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: shape0.to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
            }
            let lens: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
            let total: usize = lens.iter().sum();
            let (outer, _, inner) = split_at_axis(shape0, axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (v, &l) in vals.iter().zip(&lens) {
                    out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
                }
            }
            let mut shape = shape0.to_vec();
            shape[axis] = total;
            Ok((Tensor::from_parts(shape, out), lens))
        })?;
        tape.push("concat", value, parts, move |g, p, _| {
            let total: usize = lens.iter().sum();
            let (outer, _, inner) = split_at_axis(g.shape(), axis);
            let mut grads: Vec<Vec<f64>> = p.iter().map(|t| Vec::with_capacity(t.numel())).collect();
            for o in 0..outer {
                let mut off = 0;
                for (gi, &l) in grads.iter_mut().zip(&lens) {
                    let lo = (o * total + off) * inner;
                    gi.extend_from_slice(&g.data()[lo..lo + l * inner]);
                    off += l;
                }
            }
            grads
                .into_iter()
                .zip(p)
                .map(|(d, t)| Tensor::from_parts(t.shape().to_vec(), d))
                .collect()
        })
    }

    /// Gather entries of `axis` by index; repeated indices accumulate gradient.
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let indices = indices.to_vec();
        let (value, dims) = self.tape.with_value(self.id, |x| {
            check_axis("index_select", x.shape(), axis)?;
            let dims = split_at_axis(x.shape(), axis);
            let (outer, len, inner) = dims;
            if indices.is_empty() || indices.iter().any(|&i| i >= len) {
                return Err(TensorError::invalid(
                    "index_select",
                    format!("indices must be non-empty and below {len}"),
                ));
            }
            let mut out = Vec::with_capacity(outer * indices.len() * inner);
            for o in 0..outer {
                for &i in &indices {
                    let lo = (o * len + i) * inner;
                    out.extend_from_slice(&x.data()[lo..lo + inner]);
                }
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = indices.len();
            Ok((Tensor::from_parts(shape, out), dims))
        })?;
        self.tape.push("index_select", value, &[self], move |g, p, _| {
            let (outer, len, inner) = dims;
            let mut gx = vec![0.0; p[0].numel()];
            for o in 0..outer {
                for (k, &i) in indices.iter().enumerate() {
                    let src = (o * indices.len() + k) * inner;
                    let dst = (o * len + i) * inner;
                    for t in 0..inner {
                        gx[dst + t] += g.data()[src + t];
                    }
                }
            }
            vec![Tensor::from_parts(p[0].shape().to_vec(), gx)]
        })
    }

    /// For `self: [R, C]`, pick `self[r, picks[r]]` into a `[R]` vector.
    pub fn pick(self, picks: &[usize]) -> Result<Var<'t>> {
        let picks = picks.to_vec();
        let value = self.tape.with_value(self.id, |x| {
            if x.rank() != 2 || x.shape()[0] != picks.len() || picks.iter().any(|&p| p >= x.shape()[1]) {
                return Err(TensorError::invalid(
                    "pick",
                    format!("cannot pick {} entries from {:?}", picks.len(), x.shape()),
                ));
            }
            let c = x.shape()[1];
            let data = picks.iter().enumerate().map(|(r, &p)| x.data()[r * c + p]).collect();
            Ok(Tensor::from_parts(vec![picks.len()], data))
        })?;
        self.tape.push("pick", value, &[self], move |g, p, _| {
            let c = p[0].shape()[1];
            let mut gx = vec![0.0; p[0].numel()];
            for (r, &k) in picks.iter().enumerate() {
                gx[r * c + k] += g.data()[r];
            }
            vec![Tensor::from_parts(p[0].shape().to_vec(), gx)]
        })
    }

    /// Matrix product of `[M, K]` and `[K, N]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, (m, k, n)) = self.tape.with_values(&[self.id, other.id], |v| {
            let (a, b) = (v[0], v[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Ok((
                Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n)),
                (m, k, n),
            ))
        })?;
        self.tape.count_macs((m * k * n) as u64);
        self.tape.push("matmul", value, &[self, other], move |g, p, _| {
            let ga = matmul_nt_raw(g.data(), p[1].data(), m, n, k);
            let gb = matmul_tn_raw(p[0].data(), g.data(), m, k, n);
            vec![
                Tensor::from_parts(vec![m, k], ga),
                Tensor::from_parts(vec![k, n], gb),
            ]
        })
    }

    /// Batched matrix product of `[B, M, K]` and `[B, K, N]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, (bs, m, k, n)) = self.tape.with_values(&[self.id, other.id], |v| {
            let (a, b) = (v[0], v[1]);
            if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "bmm",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
            let mut out = Vec::with_capacity(bs * m * n);
            for i in 0..bs {
                out.extend(matmul_raw(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                ));
            }
            Ok((Tensor::from_parts(vec![bs, m, n], out), (bs, m, k, n)))
        })?;
        self.tape.count_macs((bs * m * k * n) as u64);
        self.tape.push("bmm", value, &[self, other], move |g, p, _| {
            let mut ga = Vec::with_capacity(bs * m * k);
            let mut gb = Vec::with_capacity(bs * k * n);
            for i in 0..bs {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                ga.extend(matmul_nt_raw(gi, &p[1].data()[i * k * n..(i + 1) * k * n], m, n, k));
                gb.extend(matmul_tn_raw(&p[0].data()[i * m * k..(i + 1) * m * k], gi, m, k, n));
            }
            vec![
                Tensor::from_parts(vec![bs, m, k], ga),
                Tensor::from_parts(vec![bs, k, n], gb),
            ]
        })
    }

    /// Affine map over the last axis: `self[..., K] · weight[K, N] + bias[N]`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let shape = self.shape();
        let k = *shape.last().ok_or_else(|| TensorError::invalid("linear", "scalar input"))?;
        let rows = shape.iter().product::<usize>() / k;
        let wshape = weight.shape();
        let n = if wshape.len() == 2 { wshape[1] } else { 0 };
        let mut out = self.reshape(&[rows, k])?.matmul(weight)?;
        if let Some(b) = bias {
            out = out.add_bias(b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = n;
        out.reshape(&out_shape)
    }

    /// 2-D convolution of `[B, C_in, H, W]` with `[C_out, C_in/groups, kh, kw]`.
    pub fn conv2d(self, weight: Var<'t>, opts: Conv2dOptions) -> Result<Var<'t>> {
        let (value, geom) = self.tape.with_values(&[self.id, weight.id], |v| {
            let (x, w) = (v[0], v[1]);
            if x.rank() != 4 || w.rank() != 4 {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            let (batch, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (c_out, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
            let g = opts.groups;
            if g == 0 || c_in % g != 0 || c_out % g != 0 {
                return Err(TensorError::invalid(
                    "conv2d",
                    format!("groups {g} must divide C_in {c_in} and C_out {c_out}"),
                ));
            }
            if cin_g != c_in / g {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            if opts.stride.0 == 0 || opts.stride.1 == 0 {
                return Err(TensorError::invalid("conv2d", "stride must be positive"));
            }
            if kh > h + 2 * opts.padding.0 || kw > wd + 2 * opts.padding.1 {
                return Err(TensorError::invalid(
                    "conv2d",
                    format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
                ));
            }
            let geom = ConvGeom {
                batch,
                c_in,
                h,
                w: wd,
                c_out,
                kh,
                kw,
                oh: conv_output_len(h, kh, opts.stride.0, opts.padding.0),
                ow: conv_output_len(wd, kw, opts.stride.1, opts.padding.1),
                opts,
            };
            let out = conv2d_forward(x.data(), w.data(), &geom);
            Ok((
                Tensor::from_parts(vec![batch, c_out, geom.oh, geom.ow], out),
                geom,
            ))
        })?;
        self.tape.count_macs(geom.macs());
        self.tape.push("conv2d", value, &[self, weight], move |g, p, _| {
            let (gx, gw) = conv2d_backward(g.data(), p[0].data(), p[1].data(), &geom);
            vec![
                Tensor::from_parts(p[0].shape().to_vec(), gx),
                Tensor::from_parts(p[1].shape().to_vec(), gw),
            ]
        })
    }

    /// Average pooling over non-overlapping or strided `k×k` windows, no padding.
    pub fn avg_pool2d(self, k: usize, stride: usize) -> Result<Var<'t>> {
        let (value, dims) = self.tape.with_value(self.id, |x| {
            if x.rank() != 4 || k == 0 || stride == 0 || k > x.shape()[2] || k > x.shape()[3] {
                return Err(TensorError::invalid(
                    "avg_pool2d",
                    format!("window {k} stride {stride} invalid for {:?}", x.shape()),
                ));
            }
            let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
            let norm = 1.0 / (k * k) as f64;
            let mut out = vec![0.0; b * c * oh * ow];
            for bc in 0..b * c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for di in 0..k {
                            for dj in 0..k {
                                acc += x.data()[bc * h * w + (i * stride + di) * w + j * stride + dj];
                            }
                        }
                        out[bc * oh * ow + i * ow + j] = acc * norm;
                    }
                }
            }
            Ok((Tensor::from_parts(vec![b, c, oh, ow], out), (b * c, h, w, oh, ow)))
        })?;
        self.tape.push("avg_pool2d", value, &[self], move |g, p, _| {
            let (bc_n, h, w, oh, ow) = dims;
            let norm = 1.0 / (k * k) as f64;
            let mut gx = vec![0.0; p[0].numel()];
            for bc in 0..bc_n {
                for i in 0..oh {
                    for j in 0..ow {
                        let gv = g.data()[bc * oh * ow + i * ow + j] * norm;
                        for di in 0..k {
                            for dj in 0..k {
                                gx[bc * h * w + (i * stride + di) * w + j * stride + dj] += gv;
                            }
                        }
                    }
                }
            }
            vec![Tensor::from_parts(p[0].shape().to_vec(), gx)]
        })
    }

    /// Softmax along `axis`, stabilised by subtracting the maximum.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let (value, dims) = self.tape.with_value(self.id, |x| {
            check_axis("softmax", x.shape(), axis)?;
            let dims = split_at_axis(x.shape(), axis);
            let (outer, len, inner) = dims;
            Ok((
                Tensor::from_parts(x.shape().to_vec(), softmax_raw(x.data(), outer, len, inner)),
                dims,
            ))
        })?;
        self.tape.push("softmax", value, &[self], move |g, _, s| {
            let (outer, len, inner) = dims;
            let mut gx = vec![0.0; s.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let mut dot = 0.0;
                    for a in 0..len {
                        dot += g.data()[idx(a)] * s.data()[idx(a)];
                    }
                    for a in 0..len {
                        gx[idx(a)] = s.data()[idx(a)] * (g.data()[idx(a)] - dot);
                    }
                }
            }
            vec![Tensor::from_parts(s.shape().to_vec(), gx)]
        })
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let (value, dims) = self.tape.with_value(self.id, |x| {
            check_axis("log_softmax", x.shape(), axis)?;
            let dims = split_at_axis(x.shape(), axis);
            let (outer, len, inner) = dims;
            let mut out = vec![0.0; x.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let mut max = f64::NEG_INFINITY;
                    for a in 0..len {
                        max = max.max(x.data()[idx(a)]);
                    }
                    let mut sum = 0.0;
                    for a in 0..len {
                        sum += (x.data()[idx(a)] - max).exp();
                    }
                    let lse = max + sum.ln();
                    for a in 0..len {
                        out[idx(a)] = x.data()[idx(a)] - lse;
                    }
                }
            }
            Ok((Tensor::from_parts(x.shape().to_vec(), out), dims))
        })?;
        self.tape.push("log_softmax", value, &[self], move |g, _, y| {
            let (outer, len, inner) = dims;
            let mut gx = vec![0.0; y.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let mut gsum = 0.0;
                    for a in 0..len {
                        gsum += g.data()[idx(a)];
                    }
                    for a in 0..len {
                        gx[idx(a)] = g.data()[idx(a)] - y.data()[idx(a)].exp() * gsum;
                    }
                }
            }
            vec![Tensor::from_parts(y.shape().to_vec(), gx)]
        })
    }

    /// Layer normalisation over the last axis followed by `γ·x̂ + β`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (value, xhat, inv_std) = self.tape.with_values(&[self.id, gamma.id, beta.id], |v| {
            let (x, gm, bt) = (v[0], v[1], v[2]);
            let n = *x.shape().last().unwrap_or(&0);
            if n < 2 {
                return Err(TensorError::invalid(
                    "layer_norm",
                    format!("need at least 2 features, got shape {:?}", x.shape()),
                ));
            }
            if gm.shape() != [n] || bt.shape() != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: gm.shape().to_vec(),
                });
            }
            let rows = x.numel() / n;
            let mut out = vec![0.0; x.numel()];
            let mut xhat = vec![0.0; x.numel()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = &x.data()[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..n {
                    let xh = (row[j] - mean) * is;
                    xhat[r * n + j] = xh;
                    out[r * n + j] = xh * gm.data()[j] + bt.data()[j];
                }
            }
            Ok((Tensor::from_parts(x.shape().to_vec(), out), xhat, inv_std))
        })?;
        self.tape.push("layer_norm", value, &[self, gamma, beta], move |g, p, _| {
            let gm = p[1];
            let n = gm.numel();
            let rows = g.numel() / n;
            let mut gx = vec![0.0; g.numel()];
            let mut ggamma = vec![0.0; n];
            let mut gbeta = vec![0.0; n];
            for r in 0..rows {
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for j in 0..n {
                    let i = r * n + j;
                    let d = g.data()[i] * gm.data()[j];
                    mean_d += d;
                    mean_dx += d * xhat[i];
                    ggamma[j] += g.data()[i] * xhat[i];
                    gbeta[j] += g.data()[i];
                }
                mean_d /= n as f64;
                mean_dx /= n as f64;
                for j in 0..n {
                    let i = r * n + j;
                    let d = g.data()[i] * gm.data()[j];
                    gx[i] = inv_std[r] * (d - mean_d - xhat[i] * mean_dx);
                }
            }
            vec![
                Tensor::from_parts(p[0].shape().to_vec(), gx),
                Tensor::from_parts(vec![n], ggamma),
                Tensor::from_parts(vec![n], gbeta),
            ]
        })
    }

    /// Batch normalisation of `[B, C, ...]` with batch statistics over every
    /// axis except the channel axis. Returns the output together with the
    /// biased per-channel batch mean and variance.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        eps: f64,
    ) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        let (value, xhat, inv_std, mean, var) =
            self.tape.with_values(&[self.id, gamma.id, beta.id], |v| {
                let (x, gm, bt) = (v[0], v[1], v[2]);
                if x.rank() < 2 {
                    return Err(TensorError::invalid("batch_norm", "input needs a channel axis"));
                }
                let (b, c) = (x.shape()[0], x.shape()[1]);
                let inner: usize = x.shape()[2..].iter().product();
                let count = b * inner;
                if count < 2 {
                    return Err(TensorError::invalid(
                        "batch_norm",
                        format!("need at least 2 elements per channel, got shape {:?}", x.shape()),
                    ));
                }
                if gm.shape() != [c] || bt.shape() != [c] {
                    return Err(TensorError::ShapeMismatch {
                        op: "batch_norm",
                        lhs: x.shape().to_vec(),
                        rhs: gm.shape().to_vec(),
                    });
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        for v in &x.data()[(bi * c + ch) * inner..(bi * c + ch + 1) * inner] {
                            s += v;
                        }
                    }
                    mean[ch] = s / count as f64;
                    let mut s2 = 0.0;
                    for bi in 0..b {
                        for v in &x.data()[(bi * c + ch) * inner..(bi * c + ch + 1) * inner] {
                            s2 += (v - mean[ch]) * (v - mean[ch]);
                        }
                    }
                    var[ch] = s2 / count as f64;
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut out = vec![0.0; x.numel()];
                let mut xhat = vec![0.0; x.numel()];
                for (i, &xv) in x.data().iter().enumerate() {
                    let ch = (i / inner) % c;
                    let xh = (xv - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = xh * gm.data()[ch] + bt.data()[ch];
                }
                Ok((Tensor::from_parts(x.shape().to_vec(), out), xhat, inv_std, mean, var))
            })?;
        let out = self.tape.push("batch_norm", value, &[self, gamma, beta], move |g, p, _| {
            let gm = p[1];
            let c = gm.numel();
            let inner: usize = p[0].shape()[2..].iter().product();
            let count = (p[0].numel() / c) as f64;
            let mut sum_d = vec![0.0; c];
            let mut sum_dx = vec![0.0; c];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for (i, &gv) in g.data().iter().enumerate() {
                let ch = (i / inner) % c;
                let d = gv * gm.data()[ch];
                sum_d[ch] += d;
                sum_dx[ch] += d * xhat[i];
                ggamma[ch] += gv * xhat[i];
                gbeta[ch] += gv;
            }
            let gx = g
                .data()
                .iter()
                .enumerate()
                .map(|(i, &gv)| {
                    let ch = (i / inner) % c;
                    let d = gv * gm.data()[ch];
                    inv_std[ch] * (d - sum_d[ch] / count - xhat[i] * sum_dx[ch] / count)
                })
                .collect();
            vec![
                Tensor::from_parts(p[0].shape().to_vec(), gx),
                Tensor::from_parts(vec![c], ggamma),
                Tensor::from_parts(vec![c], gbeta),
            ]
        })?;
        Ok((out, mean, var))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_fixed(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var<'t>> {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let (value, xhat) = self.tape.with_values(&[self.id, gamma.id, beta.id], |v| {
            let (x, gm, bt) = (v[0], v[1], v[2]);
            let c = if x.rank() >= 2 { x.shape()[1] } else { 0 };
            if c == 0 || gm.shape() != [c] || bt.shape() != [c] || mean.len() != c || inv_std.len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm_fixed",
                    lhs: x.shape().to_vec(),
                    rhs: gm.shape().to_vec(),
                });
            }
            let inner: usize = x.shape()[2..].iter().product();
            let mut out = vec![0.0; x.numel()];
            let mut xhat = vec![0.0; x.numel()];
            for (i, &xv) in x.data().iter().enumerate() {
                let ch = (i / inner) % c;
                let xh = (xv - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = xh * gm.data()[ch] + bt.data()[ch];
            }
            Ok((Tensor::from_parts(x.shape().to_vec(), out), xhat))
        })?;
        self.tape.push("batch_norm_fixed", value, &[self, gamma, beta], move |g, p, _| {
            let gm = p[1];
            let c = gm.numel();
            let inner: usize = p[0].shape()[2..].iter().product();
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            let mut gx = vec![0.0; g.numel()];
            for (i, &gv) in g.data().iter().enumerate() {
                let ch = (i / inner) % c;
                gx[i] = gv * gm.data()[ch] * inv_std[ch];
                ggamma[ch] += gv * xhat[i];
                gbeta[ch] += gv;
            }
            vec![
                Tensor::from_parts(p[0].shape().to_vec(), gx),
                Tensor::from_parts(vec![c], ggamma),
                Tensor::from_parts(vec![c], gbeta),
            ]
        })
    }

    /// Temperature-softened distillation loss
    /// `τ²·mean_b[−Σ softmax(t/τ)·log softmax(s/τ)]` for student logits
    /// `self` and teacher logits `teacher`, both `[B, C]`. The teacher side
    /// receives no gradient.
    pub fn kd_loss(self, teacher: Var<'t>, tau: f64) -> Result<Var<'t>> {
        if !(tau > 0.0) {
            return Err(TensorError::invalid("kd_loss", format!("temperature must be positive, got {tau}")));
        }
        let (s_shape, t_value) = (self.shape(), teacher.value());
        if s_shape != t_value.shape() || s_shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "kd_loss",
                lhs: s_shape,
                rhs: t_value.shape().to_vec(),
            });
        }
        let batch = s_shape[0];
        let teacher_probs = self
            .tape
            .constant(t_value.map(|v| v / tau))
            .softmax(1)?
            .value();
        let p_t = self.tape.constant(teacher_probs);
        let log_p_s = self.scale(1.0 / tau)?.log_softmax(1)?;
        log_p_s
            .mul(p_t)?
            .sum()?
            .scale(-tau * tau / batch as f64)
    }

    /// Mean softmax cross-entropy of logits `[B, C]` against class labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let n = labels.len() as f64;
        self.log_softmax(1)?.pick(labels)?.sum()?.scale(-1.0 / n)
    }
}

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let rank = in_shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(x.data()[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn layer_norm_of_one_two_three() {
        let tape = Tape::inference();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = x.layer_norm(g, b, 1e-6).unwrap().value();
        for (got, want) in y.data().iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((got - want).abs() < 1e-3, "{got}");
        }
    }

    #[test]
    fn gelu_at_one() {
        let tape = Tape::inference();
        let y = tape.constant(t(&[1], &[1.0])).gelu().unwrap().item().unwrap();
        assert!((y - 0.8413).abs() < 1e-3, "{y}");
    }

    #[test]
    fn kd_loss_worked_example() {
        let tape = Tape::inference();
        let s = tape.constant(t(&[1, 2], &[2.0, 0.0]));
        let teacher = tape.constant(t(&[1, 2], &[0.0, 2.0]));
        let loss = s.kd_loss(teacher, 1.0).unwrap().item().unwrap();
        // cross-entropy against the teacher's softmax
        let p_t = [1.0 / (1.0 + 2f64.exp()), 2f64.exp() / (1.0 + 2f64.exp())];
        let log_z = (2f64.exp() + 1.0).ln();
        let want = -(p_t[0] * (2.0 - log_z) + p_t[1] * (0.0 - log_z));
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 1.888522).abs() < 1e-6, "{loss}");
        // a one-hot teacher reduces to cross-entropy on its argmax
        let hard = tape.constant(t(&[1, 2], &[-1e3, 1e3]));
        let ce = s.kd_loss(hard, 1.0).unwrap().item().unwrap();
        assert!((ce - (2.0 + (-2f64).exp().ln_1p())).abs() < 1e-9, "{ce}");
        let u = tape.constant(Tensor::zeros(&[1, 2]));
        assert!((u.kd_loss(u, 1.0).unwrap().item().unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(s.kd_loss(teacher, 0.0).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let tape = Tape::inference();
        let p = tape.constant(t(&[1, 3], &[1000.0, 1001.0, 999.0])).softmax(1).unwrap().value();
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!(p.data()[1] > p.data()[0] && p.data()[0] > p.data()[2]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let tape = Tape::inference();
        let ce = tape.constant(Tensor::zeros(&[2, 4])).cross_entropy(&[0, 3]).unwrap().item().unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn conv_geometry() {
        assert_eq!(conv_output_len(5, 3, 2, 1), 3);
        assert_eq!(conv_output_len(32, 3, 2, 1), 16);
        assert_eq!(conv_output_len(7, 1, 1, 0), 7);
        let tape = Tape::inference();
        let x = tape.constant(Tensor::ones(&[1, 4, 5, 5]));
        let w = tape.constant(Tensor::ones(&[4, 1, 3, 3]));
        let y = x.conv2d(w, Conv2dOptions::new(1, 1, 4)).unwrap().value();
        assert_eq!(y.shape(), &[1, 4, 5, 5]);
        // centre sees all nine taps, corners four
        assert_eq!(y.data()[12], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::inference();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[2, 3]));
        assert!(matches!(a.matmul(b), Err(TensorError::ShapeMismatch { op: "matmul", .. })));
        assert!(a.add(tape.constant(Tensor::ones(&[3, 2]))).is_err());
        assert!(a.reshape(&[5]).is_err());
        assert!(a.permute(&[0, 0]).is_err());
        assert!(a.narrow(1, 2, 2).is_err());
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-2.0, 0.5, 2.0]), true);
        let loss = x.clamp(-1.0, 1.0).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn avg_pool_halves_grid() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64));
        let y = x.avg_pool2d(2, 2).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[1.5]);
    }
}
