//! Primitive tensor operations with forward and reverse-mode rules.
//!
//! Broadcasting is deliberately restricted: binary elementwise ops accept
//! equal shapes, a per-channel vector (N,C,1,1 against N,C,H,W), or a
//! single-channel map (N,1,H,W against N,C,H,W). Layout shuffles all go
//! through [`remap`], whose backward is an exact scatter-add.

use std::sync::Arc;

use super::tape::{BackwardFn, TapeHandle};
use super::{Elem, Grads, Tensor};
use crate::error::{Error, Result};

fn joint_tape<T: Elem>(inputs: &[&Tensor<T>]) -> Result<Option<TapeHandle<T>>> {
    let mut found: Option<TapeHandle<T>> = None;
    for t in inputs {
        if let Some((h, _)) = t.tape_link() {
            match &found {
                None => found = Some(h),
                Some(prev) => {
                    if !Arc::ptr_eq(prev, &h) {
                        return Err(Error::invalid("operands recorded on different tapes"));
                    }
                }
            }
        }
    }
    Ok(found)
}

fn record<T: Elem>(
    tape: Option<TapeHandle<T>>,
    out: Tensor<T>,
    inputs: &[&Tensor<T>],
    backward: BackwardFn<T>,
) -> Tensor<T> {
    match tape {
        Some(h) => {
            let ids: Vec<usize> = inputs.iter().filter_map(|t| t.tape_id()).collect();
            let node = h.push_node(ids, backward);
            out.with_tape(h, node)
        }
        None => out,
    }
}

fn accum<T: Elem>(grads: &mut Grads<T>, id: Option<usize>, len: usize, f: impl FnOnce(&mut [T])) {
    if let Some(id) = id {
        grads.add_assign(id, len, f);
    }
}

// ---------------------------------------------------------------------------
// elementwise binary ops with restricted broadcast
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Equal,
    /// small operand is (N,C,1,1) against (N,C,H,W)
    ChannelVec,
    /// small operand is (N,1,H,W) against (N,C,H,W)
    PixelMap,
}

/// Returns (pattern, big_is_first). Exactly one operand may broadcast.
fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<(Bcast, bool)> {
    if a == b {
        return Ok((Bcast::Equal, true));
    }
    let check = |big: &[usize], small: &[usize]| -> Option<Bcast> {
        if big.len() == 4 && small.len() == 4 && big[0] == small[0] {
            if small[1] == big[1] && small[2] == 1 && small[3] == 1 {
                return Some(Bcast::ChannelVec);
            }
            if small[1] == 1 && small[2] == big[2] && small[3] == big[3] {
                return Some(Bcast::PixelMap);
            }
        }
        None
    };
    if let Some(k) = check(a, b) {
        return Ok((k, true));
    }
    if let Some(k) = check(b, a) {
        return Ok((k, false));
    }
    Err(Error::invalid(format!(
        "shapes {a:?} and {b:?} are not broadcast-compatible"
    )))
}

/// Index of the broadcast operand element feeding big-operand position `i`.
fn small_index(kind: Bcast, shape_big: &[usize], i: usize) -> usize {
    match kind {
        Bcast::Equal => i,
        Bcast::ChannelVec => {
            let hw = shape_big[2] * shape_big[3];
            i / hw
        }
        Bcast::PixelMap => {
            let hw = shape_big[2] * shape_big[3];
            let c = shape_big[1];
            let n = i / (c * hw);
            n * hw + i % hw
        }
    }
}

fn binary_forward<T: Elem>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<(Tensor<T>, Bcast, bool)> {
    let (kind, big_first) = broadcast_kind(a.shape(), b.shape())?;
    let (big, small) = if big_first { (a, b) } else { (b, a) };
    let bd = big.data();
    let sd = small.data();
    let shape = big.shape().to_vec();
    let mut out = Vec::with_capacity(bd.len());
    for (i, &bv) in bd.iter().enumerate() {
        let sv = sd[small_index(kind, &shape, i)];
        out.push(if big_first { f(bv, sv) } else { f(sv, bv) });
    }
    Ok((Tensor::from_vec(&shape, out)?, kind, big_first))
}

/// Elementwise addition with restricted broadcast.
pub fn add<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = joint_tape(&[a, b])?;
    let (out, kind, big_first) = binary_forward(a, b, |x, y| x + y)?;
    let (big, small) = if big_first { (a, b) } else { (b, a) };
    let (big_id, small_id) = (big.tape_id(), small.tape_id());
    let shape = big.shape().to_vec();
    let (big_len, small_len) = (big.len(), small.len());
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, big_id, big_len, |g| {
            for (g, &d) in g.iter_mut().zip(go) {
                *g += d;
            }
        });
        accum(grads, small_id, small_len, |g| {
            for (i, &d) in go.iter().enumerate() {
                g[small_index(kind, &shape, i)] += d;
            }
        });
    });
    Ok(record(tape, out, &[a, b], back))
}

/// Elementwise multiplication with restricted broadcast.
pub fn mul<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = joint_tape(&[a, b])?;
    let (out, kind, big_first) = binary_forward(a, b, |x, y| x * y)?;
    let (big, small) = if big_first { (a, b) } else { (b, a) };
    let (big_id, small_id) = (big.tape_id(), small.tape_id());
    let shape = big.shape().to_vec();
    let (big_len, small_len) = (big.len(), small.len());
    let big_data = big.storage();
    let small_data = small.storage();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, big_id, big_len, |g| {
            for (i, &d) in go.iter().enumerate() {
                g[i] += d * small_data[small_index(kind, &shape, i)];
            }
        });
        accum(grads, small_id, small_len, |g| {
            for (i, &d) in go.iter().enumerate() {
                g[small_index(kind, &shape, i)] += d * big_data[i];
            }
        });
    });
    Ok(record(tape, out, &[a, b], back))
}

/// Subtraction, equal shapes only (used by loss plumbing).
pub fn sub<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::invalid("sub requires equal shapes"));
    }
    let neg_b = mul_scalar(b, T::of_f64(-1.0))?;
    add(a, &neg_b)
}

pub fn mul_scalar<T: Elem>(x: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    let tape = joint_tape(&[x])?;
    let out = Tensor::from_vec(
        x.shape(),
        x.data().iter().map(|&v| v * s).collect(),
    )?;
    let id = x.tape_id();
    let len = x.len();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, id, len, |g| {
            for (g, &d) in g.iter_mut().zip(go) {
                *g += d * s;
            }
        });
    });
    Ok(record(tape, out, &[x], back))
}

pub fn add_scalar<T: Elem>(x: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    let tape = joint_tape(&[x])?;
    let out = Tensor::from_vec(
        x.shape(),
        x.data().iter().map(|&v| v + s).collect(),
    )?;
    let id = x.tape_id();
    let len = x.len();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, id, len, |g| {
            for (g, &d) in g.iter_mut().zip(go) {
                *g += d;
            }
        });
    });
    Ok(record(tape, out, &[x], back))
}

// ---------------------------------------------------------------------------
// unary activations
// ---------------------------------------------------------------------------

pub fn sigmoid<T: Elem>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = joint_tape(&[x])?;
    let one = T::one();
    let out: Vec<T> = x.data().iter().map(|&v| one / (one + (-v).exp())).collect();
    let out = Tensor::from_vec(x.shape(), out)?;
    let id = x.tape_id();
    let len = x.len();
    let y = out.storage();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, id, len, |g| {
            for i in 0..go.len() {
                g[i] += go[i] * y[i] * (T::one() - y[i]);
            }
        });
    });
    Ok(record(tape, out, &[x], back))
}

pub fn relu<T: Elem>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = joint_tape(&[x])?;
    let z = T::zero();
    let out: Vec<T> = x.data().iter().map(|&v| if v > z { v } else { z }).collect();
    let out = Tensor::from_vec(x.shape(), out)?;
    let id = x.tape_id();
    let len = x.len();
    let xs = x.storage();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, id, len, |g| {
            for i in 0..go.len() {
                if xs[i] > T::zero() {
                    g[i] += go[i];
                }
            }
        });
    });
    Ok(record(tape, out, &[x], back))
}

/// GELU, tanh approximation.
pub fn gelu<T: Elem>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = joint_tape(&[x])?;
    let c = T::of_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::of_f64(0.044715);
    let half = T::of_f64(0.5);
    let one = T::one();
    let out: Vec<T> = x
        .data()
        .iter()
        .map(|&v| {
            let u = c * (v + a * v * v * v);
            half * v * (one + u.tanh())
        })
        .collect();
    let out = Tensor::from_vec(x.shape(), out)?;
    let id = x.tape_id();
    let len = x.len();
    let xs = x.storage();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, id, len, |g| {
            let three = T::of_f64(3.0);
            for i in 0..go.len() {
                let v = xs[i];
                let u = c * (v + a * v * v * v);
                let t = u.tanh();
                let du = c * (T::one() + three * a * v * v);
                let d = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
                g[i] += go[i] * d;
            }
        });
    });
    Ok(record(tape, out, &[x], back))
}

// ---------------------------------------------------------------------------
// softmax / normalization
// ---------------------------------------------------------------------------

/// Softmax over the last axis, computed with max subtraction.
pub fn softmax_last<T: Elem>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::numeric("NaN input to softmax"));
    }
    let tape = joint_tape(&[x])?;
    let d = *x.shape().last().ok_or_else(|| Error::invalid("softmax on rank-0"))?;
    let rows = x.len() / d;
    let xs = x.data();
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let row = &xs[r * d..(r + 1) * d];
        let m = row.iter().cloned().fold(row[0], T::max);
        let orow = &mut out[r * d..(r + 1) * d];
        let mut sum = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    let out = Tensor::from_vec(x.shape(), out)?;
    let id = x.tape_id();
    let len = x.len();
    let y = out.storage();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, id, len, |g| {
            for r in 0..rows {
                let yr = &y[r * d..(r + 1) * d];
                let gor = &go[r * d..(r + 1) * d];
                let dot: T = yr.iter().zip(gor).map(|(&a, &b)| a * b).sum();
                let gr = &mut g[r * d..(r + 1) * d];
                for i in 0..d {
                    gr[i] += yr[i] * (gor[i] - dot);
                }
            }
        });
    });
    Ok(record(tape, out, &[x], back))
}

/// Layer normalization over the last axis with population variance.
pub fn layer_norm<T: Elem>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = *x.shape().last().ok_or_else(|| Error::invalid("layer_norm on rank-0"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::invalid(format!(
            "layer_norm affine must have shape [{d}], got {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let tape = joint_tape(&[x, gamma, beta])?;
    let rows = x.len() / d;
    let xs = x.data();
    let gs = gamma.data();
    let bs = beta.data();
    let inv_d = T::one() / T::of_f64(d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut istds = vec![T::zero(); rows];
    let mut means = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &xs[r * d..(r + 1) * d];
        let mean: T = row.iter().cloned().sum::<T>() * inv_d;
        let var: T = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let istd = T::one() / (var + eps).sqrt();
        means[r] = mean;
        istds[r] = istd;
        let orow = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            orow[i] = (row[i] - mean) * istd * gs[i] + bs[i];
        }
    }
    let out = Tensor::from_vec(x.shape(), out)?;
    let (xid, gid, bid) = (x.tape_id(), gamma.tape_id(), beta.tape_id());
    let xlen = x.len();
    let xsb = x.storage();
    let gsb = gamma.storage();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, bid, d, |g| {
            for r in 0..rows {
                for i in 0..d {
                    g[i] += go[r * d + i];
                }
            }
        });
        accum(grads, gid, d, |g| {
            for r in 0..rows {
                for i in 0..d {
                    let xhat = (xsb[r * d + i] - means[r]) * istds[r];
                    g[i] += go[r * d + i] * xhat;
                }
            }
        });
        accum(grads, xid, xlen, |g| {
            for r in 0..rows {
                let istd = istds[r];
                let mean = means[r];
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for i in 0..d {
                    let xhat = (xsb[r * d + i] - mean) * istd;
                    let dxhat = go[r * d + i] * gsb[i];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                for i in 0..d {
                    let xhat = (xsb[r * d + i] - mean) * istd;
                    let dxhat = go[r * d + i] * gsb[i];
                    g[r * d + i] +=
                        istd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                }
            }
        });
    });
    Ok(record(tape, out, &[x, gamma, beta], back))
}

/// Batch norm with supplied statistics (inference mode).
pub fn batch_norm_infer<T: Elem>(
    x: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid("batch_norm expects N,C,H,W"));
    }
    let c = s[1];
    for (name, t) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
        if t.shape() != [c] {
            return Err(Error::invalid(format!("batch_norm {name} must have shape [{c}]")));
        }
    }
    let tape = joint_tape(&[x, gamma, beta])?;
    let (n, hw) = (s[0], s[2] * s[3]);
    let xs = x.data();
    let istd: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (m, is, ga, be) = (mean.data()[ci], istd[ci], gamma.data()[ci], beta.data()[ci]);
            for p in 0..hw {
                out[base + p] = (xs[base + p] - m) * is * ga + be;
            }
        }
    }
    let out = Tensor::from_vec(s, out)?;
    let (xid, gid, bid) = (x.tape_id(), gamma.tape_id(), beta.tape_id());
    let xlen = x.len();
    let xsb = x.storage();
    let meanb = mean.storage();
    let gammab = gamma.storage();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, xid, xlen, |g| {
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let k = gammab[ci] * istd[ci];
                    for p in 0..hw {
                        g[base + p] += go[base + p] * k;
                    }
                }
            }
        });
        accum(grads, gid, c, |g| {
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        g[ci] += go[base + p] * (xsb[base + p] - meanb[ci]) * istd[ci];
                    }
                }
            }
        });
        accum(grads, bid, c, |g| {
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        g[ci] += go[base + p];
                    }
                }
            }
        });
    });
    Ok(record(tape, out, &[x, gamma, beta], back))
}

/// Batch norm using batch statistics (training mode). Returns the
/// normalized output plus the batch mean/variance for running-stat updates.
pub fn batch_norm_train<T: Elem>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid("batch_norm expects N,C,H,W"));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::invalid("batch_norm affine shape mismatch"));
    }
    let tape = joint_tape(&[x, gamma, beta])?;
    let xs = x.data();
    let m_count = T::of_f64((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut sum = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for p in 0..hw {
                sum += xs[base + p];
            }
        }
        mean[ci] = sum / m_count;
        let mut sq = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for p in 0..hw {
                let d = xs[base + p] - mean[ci];
                sq += d * d;
            }
        }
        var[ci] = sq / m_count;
    }
    let istd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for p in 0..hw {
                out[base + p] = (xs[base + p] - mean[ci]) * istd[ci] * gamma.data()[ci]
                    + beta.data()[ci];
            }
        }
    }
    let out_t = Tensor::from_vec(s, out)?;
    let (xid, gid, bid) = (x.tape_id(), gamma.tape_id(), beta.tape_id());
    let xlen = x.len();
    let xsb = x.storage();
    let gammab = gamma.storage();
    let mean_c = mean.clone();
    let istd_c = istd.clone();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, gid, c, |g| {
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        g[ci] += go[base + p] * (xsb[base + p] - mean_c[ci]) * istd_c[ci];
                    }
                }
            }
        });
        accum(grads, bid, c, |g| {
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        g[ci] += go[base + p];
                    }
                }
            }
        });
        accum(grads, xid, xlen, |g| {
            let inv_m = T::one() / m_count;
            for ci in 0..c {
                // reduce over the batch and spatial extent per channel
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        let xhat = (xsb[base + p] - mean_c[ci]) * istd_c[ci];
                        let dxhat = go[base + p] * gammab[ci];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        let xhat = (xsb[base + p] - mean_c[ci]) * istd_c[ci];
                        let dxhat = go[base + p] * gammab[ci];
                        g[base + p] += istd_c[ci]
                            * (dxhat - inv_m * sum_dxhat - xhat * inv_m * sum_dxhat_xhat);
                    }
                }
            }
        });
    });
    Ok((record(tape, out_t, &[x, gamma, beta], back), mean, var))
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

fn pad_plane<T: Elem>(src: &[T], h: usize, w: usize, pad: usize, dst: &mut [T]) {
    let wp = w + 2 * pad;
    for v in dst.iter_mut() {
        *v = T::zero();
    }
    for r in 0..h {
        let s = &src[r * w..(r + 1) * w];
        let d = &mut dst[(r + pad) * wp + pad..(r + pad) * wp + pad + w];
        d.copy_from_slice(s);
    }
}

/// 2-D cross-correlation with square kernel, bias, stride and zero padding.
/// Output size must divide exactly: (H + 2 pad - k) % stride == 0.
pub fn conv2d<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::invalid("conv2d expects x: N,C,H,W and w: Co,Ci,k,k"));
    }
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, wcin, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
    if k != k2 {
        return Err(Error::invalid("conv2d kernel must be square"));
    }
    if wcin != cin {
        return Err(Error::invalid(format!(
            "conv2d channel mismatch: input {cin}, kernel expects {wcin}"
        )));
    }
    if b.shape() != [cout] {
        return Err(Error::invalid(format!("conv2d bias must have shape [{cout}]")));
    }
    if stride < 1 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::invalid("conv2d input smaller than kernel"));
    }
    if !(h + 2 * pad - k).is_multiple_of(stride) || !(wd + 2 * pad - k).is_multiple_of(stride) {
        return Err(Error::invalid(format!(
            "conv2d non-exact output size for H={h} W={wd} k={k} stride={stride} pad={pad}"
        )));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);

    let tape = joint_tape(&[x, w, b])?;
    let xd = x.data();
    let wdta = w.data();
    let bd = b.data();
    let mut out = vec![T::zero(); n * cout * oh * ow];
    let mut plane = vec![T::zero(); hp * wp];
    for ni in 0..n {
        for co in 0..cout {
            let obase = (ni * cout + co) * oh * ow;
            let bias = bd[co];
            for v in out[obase..obase + oh * ow].iter_mut() {
                *v = bias;
            }
        }
        for ci in 0..cin {
            pad_plane(&xd[(ni * cin + ci) * h * wd..], h, wd, pad, &mut plane);
            for co in 0..cout {
                let obase = (ni * cout + co) * oh * ow;
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wdta[((co * cin + ci) * k + kh) * k + kw];
                        for or in 0..oh {
                            let irow = or * stride + kh;
                            let src = &plane[irow * wp + kw..];
                            let dst = &mut out[obase + or * ow..obase + (or + 1) * ow];
                            if stride == 1 {
                                for (d, &s) in dst.iter_mut().zip(&src[..ow]) {
                                    *d += wv * s;
                                }
                            } else {
                                for (oc, d) in dst.iter_mut().enumerate() {
                                    *d += wv * src[oc * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[n, cout, oh, ow], out)?;
    let (xid, wid, bid) = (x.tape_id(), w.tape_id(), b.tape_id());
    let xlen = x.len();
    let wlen = w.len();
    let xsb = x.storage();
    let wsb = w.storage();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, bid, cout, |g| {
            for ni in 0..n {
                for co in 0..cout {
                    let obase = (ni * cout + co) * oh * ow;
                    for p in 0..oh * ow {
                        g[co] += go[obase + p];
                    }
                }
            }
        });
        accum(grads, wid, wlen, |g| {
            let mut plane = vec![T::zero(); hp * wp];
            for ni in 0..n {
                for ci in 0..cin {
                    pad_plane(&xsb[(ni * cin + ci) * h * wd..], h, wd, pad, &mut plane);
                    for co in 0..cout {
                        let obase = (ni * cout + co) * oh * ow;
                        for kh in 0..k {
                            for kw in 0..k {
                                let mut acc = T::zero();
                                for or in 0..oh {
                                    let irow = or * stride + kh;
                                    let src = &plane[irow * wp + kw..];
                                    let gor = &go[obase + or * ow..obase + (or + 1) * ow];
                                    if stride == 1 {
                                        for (d, &s) in gor.iter().zip(&src[..ow]) {
                                            acc += *d * s;
                                        }
                                    } else {
                                        for (oc, d) in gor.iter().enumerate() {
                                            acc += *d * src[oc * stride];
                                        }
                                    }
                                }
                                g[((co * cin + ci) * k + kh) * k + kw] += acc;
                            }
                        }
                    }
                }
            }
        });
        accum(grads, xid, xlen, |g| {
            let mut plane = vec![T::zero(); hp * wp];
            for ni in 0..n {
                for ci in 0..cin {
                    for v in plane.iter_mut() {
                        *v = T::zero();
                    }
                    for co in 0..cout {
                        let obase = (ni * cout + co) * oh * ow;
                        for kh in 0..k {
                            for kw in 0..k {
                                let wv = wsb[((co * cin + ci) * k + kh) * k + kw];
                                for or in 0..oh {
                                    let irow = or * stride + kh;
                                    let dst = &mut plane[irow * wp + kw..irow * wp + kw + (ow - 1) * stride + 1];
                                    let gor = &go[obase + or * ow..obase + (or + 1) * ow];
                                    if stride == 1 {
                                        for (d, &s) in dst.iter_mut().zip(gor) {
                                            *d += wv * s;
                                        }
                                    } else {
                                        for (oc, &s) in gor.iter().enumerate() {
                                            dst[oc * stride] += wv * s;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    // strip padding back off
                    let xbase = (ni * cin + ci) * h * wd;
                    for r in 0..h {
                        for c2 in 0..wd {
                            g[xbase + r * wd + c2] += plane[(r + pad) * wp + pad + c2];
                        }
                    }
                }
            }
        });
    });
    Ok(record(tape, out, &[x, w, b], back))
}

// ---------------------------------------------------------------------------
// matmul and bias
// ---------------------------------------------------------------------------

/// Batched matrix product. Leading dims must match exactly; summation runs
/// in ascending k order.
pub fn matmul<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let sa = a.shape();
    let sb = b.shape();
    if sa.len() < 2 || sb.len() != sa.len() {
        return Err(Error::invalid("matmul needs equal-rank operands of rank >= 2"));
    }
    if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(Error::invalid(format!(
            "matmul batch dims differ: {sa:?} vs {sb:?}"
        )));
    }
    let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (kb, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if ka != kb {
        return Err(Error::invalid(format!(
            "matmul inner dims differ: {ka} vs {kb}"
        )));
    }
    let batch: usize = sa[..sa.len() - 2].iter().product();
    let tape = joint_tape(&[a, b])?;
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); batch * m * p];
    for bi in 0..batch {
        let abase = bi * m * ka;
        let bbase = bi * ka * p;
        let obase = bi * m * p;
        for mi in 0..m {
            let orow = &mut out[obase + mi * p..obase + (mi + 1) * p];
            for ki in 0..ka {
                let av = ad[abase + mi * ka + ki];
                let brow = &bd[bbase + ki * p..bbase + (ki + 1) * p];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    let mut oshape = sa[..sa.len() - 2].to_vec();
    oshape.push(m);
    oshape.push(p);
    let out = Tensor::from_vec(&oshape, out)?;
    let (aid, bid) = (a.tape_id(), b.tape_id());
    let (alen, blen) = (a.len(), b.len());
    let asb = a.storage();
    let bsb = b.storage();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, aid, alen, |g| {
            for bi in 0..batch {
                let abase = bi * m * ka;
                let bbase = bi * ka * p;
                let obase = bi * m * p;
                for mi in 0..m {
                    let gorow = &go[obase + mi * p..obase + (mi + 1) * p];
                    for ki in 0..ka {
                        let brow = &bsb[bbase + ki * p..bbase + (ki + 1) * p];
                        let mut acc = T::zero();
                        for (d, &bv) in gorow.iter().zip(brow) {
                            acc += *d * bv;
                        }
                        g[abase + mi * ka + ki] += acc;
                    }
                }
            }
        });
        accum(grads, bid, blen, |g| {
            for bi in 0..batch {
                let abase = bi * m * ka;
                let bbase = bi * ka * p;
                let obase = bi * m * p;
                for mi in 0..m {
                    let gorow = &go[obase + mi * p..obase + (mi + 1) * p];
                    for ki in 0..ka {
                        let av = asb[abase + mi * ka + ki];
                        let grow = &mut g[bbase + ki * p..bbase + (ki + 1) * p];
                        for (d, &s) in grow.iter_mut().zip(gorow) {
                            *d += av * s;
                        }
                    }
                }
            }
        });
    });
    Ok(record(tape, out, &[a, b], back))
}

/// Add a vector over the last axis: x[..., d] + b[d].
pub fn add_bias<T: Elem>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *x.shape().last().ok_or_else(|| Error::invalid("add_bias on rank-0"))?;
    if b.shape() != [d] {
        return Err(Error::invalid(format!(
            "bias shape {:?} does not match last axis {d}",
            b.shape()
        )));
    }
    let tape = joint_tape(&[x, b])?;
    let rows = x.len() / d;
    let bd = b.data();
    let mut out = x.data().to_vec();
    for r in 0..rows {
        for i in 0..d {
            out[r * d + i] += bd[i];
        }
    }
    let out = Tensor::from_vec(x.shape(), out)?;
    let (xid, bid) = (x.tape_id(), b.tape_id());
    let xlen = x.len();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, xid, xlen, |g| {
            for (g, &d2) in g.iter_mut().zip(go) {
                *g += d2;
            }
        });
        accum(grads, bid, d, |g| {
            for r in 0..rows {
                for i in 0..d {
                    g[i] += go[r * d + i];
                }
            }
        });
    });
    Ok(record(tape, out, &[x, b], back))
}

// ---------------------------------------------------------------------------
// pooling / upsampling
// ---------------------------------------------------------------------------

/// Global max over the spatial extent: N,C,H,W -> N,C,1,1.
pub fn global_max_pool_spatial<T: Elem>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid("global_max_pool expects N,C,H,W"));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let tape = joint_tape(&[x])?;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c);
    let mut arg = Vec::with_capacity(n * c);
    for nc in 0..n * c {
        let base = nc * hw;
        let mut best = xd[base];
        let mut bi = 0usize;
        for p in 1..hw {
            if xd[base + p] > best {
                best = xd[base + p];
                bi = p;
            }
        }
        out.push(best);
        arg.push(base + bi);
    }
    let out = Tensor::from_vec(&[n, c, 1, 1], out)?;
    let id = x.tape_id();
    let len = x.len();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, id, len, |g| {
            for (i, &src) in arg.iter().enumerate() {
                g[src] += go[i];
            }
        });
    });
    Ok(record(tape, out, &[x], back))
}

/// Max over the channel axis: N,C,H,W -> N,1,H,W.
pub fn channel_max_pool<T: Elem>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid("channel_max_pool expects N,C,H,W"));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let tape = joint_tape(&[x])?;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * hw);
    let mut arg = Vec::with_capacity(n * hw);
    for ni in 0..n {
        for p in 0..hw {
            let mut best = xd[ni * c * hw + p];
            let mut bi = ni * c * hw + p;
            for ci in 1..c {
                let idx = (ni * c + ci) * hw + p;
                if xd[idx] > best {
                    best = xd[idx];
                    bi = idx;
                }
            }
            out.push(best);
            arg.push(bi);
        }
    }
    let out = Tensor::from_vec(&[n, 1, s[2], s[3]], out)?;
    let id = x.tape_id();
    let len = x.len();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, id, len, |g| {
            for (i, &src) in arg.iter().enumerate() {
                g[src] += go[i];
            }
        });
    });
    Ok(record(tape, out, &[x], back))
}

/// Bilinear upsampling by an integer factor with half-pixel source centers:
/// src = (dst + 0.5)/f - 0.5, clamped to [0, size-1].
pub fn bilinear_upsample<T: Elem>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 2 {
        return Err(Error::invalid("upsample factor must be >= 2"));
    }
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid("bilinear_upsample expects N,C,H,W"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h * factor, w * factor);
    // per-axis (i0, i1, weight for i1)
    let axis_table = |src_len: usize, dst_len: usize| -> Vec<(usize, usize, f64)> {
        (0..dst_len)
            .map(|d| {
                let src = ((d as f64 + 0.5) / factor as f64 - 0.5)
                    .clamp(0.0, (src_len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let rows = axis_table(h, oh);
    let cols = axis_table(w, ow);
    let tape = joint_tape(&[x])?;
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * oh * ow;
        for (orow, &(r0, r1, tr)) in rows.iter().enumerate() {
            let tr_t = T::of_f64(tr);
            let one_tr = T::one() - tr_t;
            for (ocol, &(c0, c1, tc)) in cols.iter().enumerate() {
                let tc_t = T::of_f64(tc);
                let one_tc = T::one() - tc_t;
                let v = one_tr * (one_tc * xd[ib + r0 * w + c0] + tc_t * xd[ib + r0 * w + c1])
                    + tr_t * (one_tc * xd[ib + r1 * w + c0] + tc_t * xd[ib + r1 * w + c1]);
                out[ob + orow * ow + ocol] = v;
            }
        }
    }
    let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
    let id = x.tape_id();
    let len = x.len();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, id, len, |g| {
            for nc in 0..n * c {
                let ib = nc * h * w;
                let ob = nc * oh * ow;
                for (orow, &(r0, r1, tr)) in rows.iter().enumerate() {
                    let tr_t = T::of_f64(tr);
                    let one_tr = T::one() - tr_t;
                    for (ocol, &(c0, c1, tc)) in cols.iter().enumerate() {
                        let tc_t = T::of_f64(tc);
                        let one_tc = T::one() - tc_t;
                        let d = go[ob + orow * ow + ocol];
                        g[ib + r0 * w + c0] += d * one_tr * one_tc;
                        g[ib + r0 * w + c1] += d * one_tr * tc_t;
                        g[ib + r1 * w + c0] += d * tr_t * one_tc;
                        g[ib + r1 * w + c1] += d * tr_t * tc_t;
                    }
                }
            }
        });
    });
    Ok(record(tape, out, &[x], back))
}

// ---------------------------------------------------------------------------
// layout
// ---------------------------------------------------------------------------

/// Gather: out[i] = x[map[i]]. Covers permutes, rolls, window partition and
/// reverse, head splits, slicing and broadcast expansion. Backward is a
/// scatter-add through the same map.
pub fn remap<T: Elem>(x: &Tensor<T>, out_shape: &[usize], map: Arc<Vec<usize>>) -> Result<Tensor<T>> {
    let n: usize = out_shape.iter().product();
    if n != map.len() {
        return Err(Error::invalid("remap: map length does not match output shape"));
    }
    let xd = x.data();
    let xlen = xd.len();
    if let Some(&bad) = map.iter().find(|&&i| i >= xlen) {
        return Err(Error::invalid(format!(
            "remap: index {bad} out of bounds for input of {xlen}"
        )));
    }
    let tape = joint_tape(&[x])?;
    let out: Vec<T> = map.iter().map(|&i| xd[i]).collect();
    let out = Tensor::from_vec(out_shape, out)?;
    let id = x.tape_id();
    let map_b = Arc::clone(&map);
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        accum(grads, id, xlen, |g| {
            for (o, &src) in map_b.iter().enumerate() {
                g[src] += go[o];
            }
        });
    });
    Ok(record(tape, out, &[x], back))
}

/// Concatenate N,C,H,W tensors along the channel axis.
pub fn concat_channels<T: Elem>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::invalid("concat of zero tensors"));
    }
    let s0 = parts[0].shape();
    if s0.len() != 4 {
        return Err(Error::invalid("concat_channels expects N,C,H,W"));
    }
    let (n, h, w) = (s0[0], s0[2], s0[3]);
    let mut c_total = 0usize;
    for p in parts {
        let s = p.shape();
        if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
            return Err(Error::invalid(format!(
                "concat_channels shape mismatch: {s0:?} vs {s:?}"
            )));
        }
        c_total += s[1];
    }
    let tape = joint_tape(parts)?;
    let hw = h * w;
    let mut out = vec![T::zero(); n * c_total * hw];
    let mut c_off = 0usize;
    for p in parts {
        let c = p.shape()[1];
        let pd = p.data();
        for ni in 0..n {
            let src = &pd[ni * c * hw..(ni + 1) * c * hw];
            let dst = &mut out[(ni * c_total + c_off) * hw..(ni * c_total + c_off + c) * hw];
            dst.copy_from_slice(src);
        }
        c_off += c;
    }
    let out = Tensor::from_vec(&[n, c_total, h, w], out)?;
    let meta: Vec<(Option<usize>, usize, usize)> = {
        let mut v = Vec::new();
        let mut off = 0usize;
        for p in parts {
            let c = p.shape()[1];
            v.push((p.tape_id(), off, c));
            off += c;
        }
        v
    };
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        for &(id, c_off, c) in &meta {
            accum(grads, id, n * c * hw, |g| {
                for ni in 0..n {
                    let src = &go[(ni * c_total + c_off) * hw..(ni * c_total + c_off + c) * hw];
                    let dst = &mut g[ni * c * hw..(ni + 1) * c * hw];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            });
        }
    });
    Ok(record(tape, out, parts, back))
}

// ---------------------------------------------------------------------------
// reductions / losses
// ---------------------------------------------------------------------------

/// Sum over all elements to a scalar.
pub fn sum_all<T: Elem>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = joint_tape(&[x])?;
    let s: T = x.data().iter().cloned().sum();
    let out = Tensor::scalar(s);
    let id = x.tape_id();
    let len = x.len();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        let d = go[0];
        accum(grads, id, len, |g| {
            for g in g.iter_mut() {
                *g += d;
            }
        });
    });
    Ok(record(tape, out, &[x], back))
}

/// Binary cross-entropy on logits in the numerically stable form
/// max(x,0) - x*y + ln(1 + exp(-|x|)), summed over pixels and averaged over
/// the leading batch axis. The target must be strictly {0,1}-valued.
pub fn bce_with_logits<T: Elem>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "bce shape mismatch: {:?} vs {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    let zero = T::zero();
    let one = T::one();
    if target.data().iter().any(|&t| t != zero && t != one) {
        return Err(Error::invalid("bce target mask must be binary"));
    }
    let n = logits.shape()[0];
    let per = logits.len() / n;
    let tape = joint_tape(&[logits])?;
    let xd = logits.data();
    let td = target.data();
    let mut total = T::zero();
    for i in 0..xd.len() {
        let x = xd[i];
        let y = td[i];
        total += x.max(zero) - x * y + (one + (-x.abs()).exp()).ln();
    }
    let inv_n = T::one() / T::of_f64(n as f64);
    let out = Tensor::scalar(total * inv_n);
    let id = logits.tape_id();
    let len = logits.len();
    let xsb = logits.storage();
    let tsb = target.storage();
    let back: BackwardFn<T> = Box::new(move |go, grads| {
        let scale = go[0] * inv_n;
        accum(grads, id, len, |g| {
            for i in 0..n * per {
                let sig = T::one() / (T::one() + (-xsb[i]).exp());
                g[i] += scale * (sig - tsb[i]);
            }
        });
    });
    Ok(record(tape, out, &[logits], back))
}

// ---------------------------------------------------------------------------
// index-map builders for remap
// ---------------------------------------------------------------------------

/// Map materializing a permutation of axes.
pub fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    assert_eq!(perm.len(), rank);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let mut src = 0usize;
        for (o, &p) in perm.iter().enumerate() {
            src += idx[o] * in_strides[p];
        }
        map.push(src);
        // odometer over out_shape
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    (map, out_shape)
}

/// Cyclic roll of the H and W axes of an N,H,W,C tensor by (dh, dw)
/// (positive shifts move content down/right).
pub fn roll_hw_map(shape: &[usize], dh: isize, dw: isize) -> Vec<usize> {
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let mut map = Vec::with_capacity(n * h * w * c);
    let wrap = |v: isize, m: usize| -> usize {
        let m = m as isize;
        (((v % m) + m) % m) as usize
    };
    for ni in 0..n {
        for hi in 0..h {
            let sh = wrap(hi as isize - dh, h);
            for wi in 0..w {
                let sw = wrap(wi as isize - dw, w);
                let base = ((ni * h + sh) * w + sw) * c;
                for ci in 0..c {
                    map.push(base + ci);
                }
            }
        }
    }
    map
}
