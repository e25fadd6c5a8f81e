//! Differentiable tensor operations.
//!
//! Every op computes its value through a plain kernel and appends a backward
//! node only when a tape is active and at least one input is tracked, so the
//! same forward code serves training and inference with identical numerics.
//! Reductions inside a single output element are always sequential; threads
//! only ever split across independent output elements, which keeps results
//! bit-identical regardless of parallelism.

use super::tape::{self, Input, Op, ScanDims};
use super::{strides_of, Tensor, TensorError};

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tensor {
    /// Matrix product `[.., m, k] x [k, n] -> [.., m, n]`. `b` must be 2-D;
    /// leading dimensions of `self` are treated as a batch.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor, TensorError> {
        if self.rank() < 2 || b.rank() != 2 || self.shape()[self.rank() - 1] != b.shape()[0] {
            return Err(shape_err("matmul", self.shape(), b.shape()));
        }
        let (batch, m, k, n) = kernels::matmul_dims(self.shape(), b.shape());
        let mut out = vec![0.0; batch * m * n];
        kernels::matmul(self.data(), b.data(), batch, m, k, n, &mut out);
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let (ia, ib) = (tape::resolve(self), tape::resolve(b));
        let tracked = ia.node.is_some() || ib.node.is_some();
        let t = Tensor::from_vec(out, &out_shape)?;
        Ok(tape::record(Op::Matmul { a: ia, b: ib }, tracked, t))
    }

    /// Depthwise causal 1-D convolution over `[.., d, L]` with kernel
    /// `[d, K]` (taps ordered oldest to newest) and bias `[d]`. The input is
    /// implicitly left-padded with K-1 zeros so output t depends only on
    /// inputs <= t.
    pub fn conv1d_causal(&self, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if self.rank() < 2 || w.rank() != 2 {
            return Err(shape_err("conv1d_causal", self.shape(), w.shape()));
        }
        let d = self.shape()[self.rank() - 2];
        let len = self.shape()[self.rank() - 1];
        if w.shape()[0] != d || b.shape() != [d] {
            return Err(shape_err("conv1d_causal", self.shape(), w.shape()));
        }
        let kw = w.shape()[1];
        let batch = self.numel() / (d * len);
        let mut out = vec![0.0; self.numel()];
        kernels::conv1d(
            self.data(),
            w.data(),
            b.data(),
            batch,
            d,
            len,
            kw,
            None,
            &mut out,
        );
        let (ix, iw, ib) = (tape::resolve(self), tape::resolve(w), tape::resolve(b));
        let tracked = ix.node.is_some() || iw.node.is_some() || ib.node.is_some();
        let t = Tensor::from_vec(out, self.shape())?;
        Ok(tape::record(
            Op::Conv1d {
                x: ix,
                w: iw,
                b: ib,
            },
            tracked,
            t,
        ))
    }

    pub fn add(&self, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary(
        &self,
        b: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(Input, Input) -> Op,
    ) -> Result<Tensor, TensorError> {
        if self.shape() != b.shape() {
            return Err(shape_err(name, self.shape(), b.shape()));
        }
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let (ia, ib) = (tape::resolve(self), tape::resolve(b));
        let tracked = ia.node.is_some() || ib.node.is_some();
        let t = Tensor::from_vec(out, self.shape())?;
        Ok(tape::record(mk(ia, ib), tracked, t))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| x * c).collect();
        let ix = tape::resolve(self);
        let tracked = ix.node.is_some();
        let t = Tensor::from_vec(out, self.shape()).expect("scale shape");
        tape::record(Op::Scale { x: ix, c }, tracked, t)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Broadcast-add a `[d]` bias over the trailing dimension of `[.., d]`.
    /// This is the only broadcasting the numeric core performs.
    pub fn add_bias(&self, b: &Tensor) -> Result<Tensor, TensorError> {
        let d = *self.shape().last().unwrap();
        if b.shape() != [d] {
            return Err(shape_err("add_bias", self.shape(), b.shape()));
        }
        let bd = b.data();
        let out: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % d])
            .collect();
        let (ix, ib) = (tape::resolve(self), tape::resolve(b));
        let tracked = ix.node.is_some() || ib.node.is_some();
        let t = Tensor::from_vec(out, self.shape())?;
        Ok(tape::record(Op::AddBias { x: ix, b: ib }, tracked, t))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, mk: impl FnOnce(Input, &Tensor) -> Op) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let ix = tape::resolve(self);
        let tracked = ix.node.is_some();
        let t = Tensor::from_vec(out, self.shape()).expect("unary shape");
        let op = mk(ix, &t);
        tape::record(op, tracked, t)
    }

    /// Elementwise x * sigmoid(x).
    pub fn silu(&self) -> Tensor {
        self.unary(|x| x * kernels::sigmoid(x), |x, _| Op::Silu { x })
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| Op::Relu { x })
    }

    /// Elementwise ln(1 + e^x), stable across the whole f64 range: returns x
    /// for large x and e^x for very negative x instead of overflowing.
    pub fn softplus(&self) -> Tensor {
        self.unary(kernels::softplus, |x, _| Op::Softplus { x })
    }

    pub fn exp(&self) -> Tensor {
        self.unary(
            f64::exp,
            |x, out| Op::Exp {
                x,
                out: out.detach(),
            },
        )
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| Op::Abs { x })
    }

    /// Elementwise complex magnitude sqrt(re^2 + im^2) of two same-shape
    /// tensors holding real and imaginary planes.
    pub fn magnitude(re: &Tensor, im: &Tensor) -> Result<Tensor, TensorError> {
        if re.shape() != im.shape() {
            return Err(shape_err("magnitude", re.shape(), im.shape()));
        }
        let out: Vec<f64> = re
            .data()
            .iter()
            .zip(im.data())
            .map(|(&r, &i)| r.hypot(i))
            .collect();
        let (ir, ii) = (tape::resolve(re), tape::resolve(im));
        let tracked = ir.node.is_some() || ii.node.is_some();
        let t = Tensor::from_vec(out, re.shape())?;
        let op = Op::Magnitude {
            re: ir,
            im: ii,
            out: t.detach(),
        };
        Ok(tape::record(op, tracked, t))
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let ix = tape::resolve(self);
        let tracked = ix.node.is_some();
        tape::record(Op::Sum { x: ix }, tracked, Tensor::scalar(s))
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel() as f64;
        let ix = tape::resolve(self);
        let tracked = ix.node.is_some();
        tape::record(Op::Mean { x: ix }, tracked, Tensor::scalar(s / n))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(), shape),
            });
        }
        let ix = tape::resolve(self);
        let tracked = ix.node.is_some();
        let t = Tensor::from_vec(self.to_vec(), shape)?;
        Ok(tape::record(Op::Reshape { x: ix }, tracked, t))
    }

    /// Transpose the last two dimensions.
    pub fn swap_last2(&self) -> Result<Tensor, TensorError> {
        if self.rank() < 2 {
            return Err(TensorError::InvalidShape {
                op: "swap_last2",
                detail: format!("rank {} < 2", self.rank()),
            });
        }
        let mut out = vec![0.0; self.numel()];
        kernels::swap_last2(self.data(), self.shape(), &mut out);
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let ix = tape::resolve(self);
        let tracked = ix.node.is_some();
        let t = Tensor::from_vec(out, &shape)?;
        Ok(tape::record(Op::SwapLast2 { x: ix }, tracked, t))
    }

    /// Swap the first two axes of a rank-3 tensor: `[a, b, c] -> [b, a, c]`.
    pub fn swap_axes01(&self) -> Result<Tensor, TensorError> {
        if self.rank() != 3 {
            return Err(TensorError::InvalidShape {
                op: "swap_axes01",
                detail: format!("rank {} != 3", self.rank()),
            });
        }
        let mut out = vec![0.0; self.numel()];
        kernels::swap_axes01(self.data(), self.shape(), &mut out);
        let s = self.shape();
        let shape = [s[1], s[0], s[2]];
        let ix = tape::resolve(self);
        let tracked = ix.node.is_some();
        let t = Tensor::from_vec(out, &shape)?;
        Ok(tape::record(Op::SwapAxes01 { x: ix }, tracked, t))
    }

    /// Reverse the tensor along one axis.
    pub fn flip(&self, axis: usize) -> Result<Tensor, TensorError> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidShape {
                op: "flip",
                detail: format!("axis {} of rank {}", axis, self.rank()),
            });
        }
        let mut out = vec![0.0; self.numel()];
        kernels::flip(self.data(), self.shape(), axis, &mut out);
        let ix = tape::resolve(self);
        let tracked = ix.node.is_some();
        let t = Tensor::from_vec(out, self.shape())?;
        Ok(tape::record(Op::Flip { x: ix, axis }, tracked, t))
    }

    /// Concatenate along the trailing dimension; all leading dims must agree.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        assert!(!parts.is_empty(), "concat_last of nothing");
        let lead = &parts[0].shape()[..parts[0].rank() - 1];
        for p in parts {
            if &p.shape()[..p.rank() - 1] != lead {
                return Err(shape_err("concat_last", parts[0].shape(), p.shape()));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (p, w) in parts.iter().zip(&widths) {
                out[r * total + off..r * total + off + w]
                    .copy_from_slice(&p.data()[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let inputs: Vec<Input> = parts.iter().map(|p| tape::resolve(p)).collect();
        let tracked = inputs.iter().any(|i| i.node.is_some());
        let mut shape = lead.to_vec();
        shape.push(total);
        let t = Tensor::from_vec(out, &shape)?;
        Ok(tape::record(Op::ConcatLast { parts: inputs }, tracked, t))
    }

    /// Slice `start..start+len` of the trailing dimension.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let d = *self.shape().last().unwrap();
        if start + len > d || len == 0 {
            return Err(TensorError::InvalidShape {
                op: "slice_last",
                detail: format!("{}..{} of {}", start, start + len, d),
            });
        }
        let rows = self.numel() / d;
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&self.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ix = tape::resolve(self);
        let tracked = ix.node.is_some();
        let t = Tensor::from_vec(out, &shape)?;
        Ok(tape::record(
            Op::SliceLast {
                x: ix,
                start,
                len,
            },
            tracked,
            t,
        ))
    }
}

/// Selective-scan recurrence over a whole sequence:
/// hₜ = exp(Δₜ ⊙ A) ⊙ hₜ₋₁ + (Δₜ ⊙ Bₜ) ⊗ xₜ, yₜ[i] = ⟨Cₜ, hₜ[i,:]⟩.
///
/// Shapes: `x`, `delta` are `[B, L, d]` (or `[L, d]`), `b`, `c` are
/// `[B, L, n]` (or `[L, n]`), `a` is `[d, n]`, optional `h0` is `[B, d, n]`
/// (or `[d, n]`). Returns `(y, h_final)` with `y` shaped like `x`.
/// `h0` is only accepted outside a tape (streaming continuation); the final
/// state is always detached.
pub fn selective_scan(
    x: &Tensor,
    delta: &Tensor,
    b: &Tensor,
    c: &Tensor,
    a: &Tensor,
    h0: Option<&Tensor>,
) -> Result<(Tensor, Tensor), TensorError> {
    let batched = x.rank() == 3;
    if x.rank() != delta.rank() || x.shape() != delta.shape() || b.shape() != c.shape() {
        return Err(shape_err("selective_scan", x.shape(), delta.shape()));
    }
    let (batch, len, d) = if batched {
        (x.shape()[0], x.shape()[1], x.shape()[2])
    } else if x.rank() == 2 {
        (1, x.shape()[0], x.shape()[1])
    } else {
        return Err(TensorError::InvalidShape {
            op: "selective_scan",
            detail: format!("x rank {} not 2 or 3", x.rank()),
        });
    };
    if a.rank() != 2 || a.shape()[0] != d {
        return Err(shape_err("selective_scan", x.shape(), a.shape()));
    }
    let n = a.shape()[1];
    let want_bc: &[usize] = if batched {
        &[batch, len, n]
    } else {
        &[len, n]
    };
    if b.shape() != want_bc {
        return Err(shape_err("selective_scan", b.shape(), want_bc));
    }

    let dims = ScanDims {
        batch,
        len,
        d_inner: d,
        d_state: n,
    };
    let ix = tape::resolve(x);
    let idelta = tape::resolve(delta);
    let ib = tape::resolve(b);
    let ic = tape::resolve(c);
    let ia = tape::resolve(a);
    let tracked = [&ix, &idelta, &ib, &ic, &ia]
        .iter()
        .any(|i| i.node.is_some());
    if tracked && h0.is_some() {
        return Err(TensorError::InvalidShape {
            op: "selective_scan",
            detail: "initial state is not supported under an active tape".into(),
        });
    }

    let mut h = match h0 {
        Some(t) => {
            if t.numel() != batch * d * n {
                return Err(shape_err("selective_scan", t.shape(), &[batch, d, n]));
            }
            t.to_vec()
        }
        None => vec![0.0; batch * d * n],
    };
    let mut y = vec![0.0; batch * len * d];
    let (mut hist, mut abar_hist) = if tracked {
        (
            Some(vec![0.0; batch * len * d * n]),
            Some(vec![0.0; batch * len * d * n]),
        )
    } else {
        (None, None)
    };
    kernels::selective_scan_forward(
        x.data(),
        delta.data(),
        b.data(),
        c.data(),
        a.data(),
        dims,
        &mut h,
        &mut y,
        hist.as_deref_mut(),
        abar_hist.as_deref_mut(),
    );

    let y_t = Tensor::from_vec(y, x.shape())?;
    let h_shape: Vec<usize> = if batched {
        vec![batch, d, n]
    } else {
        vec![d, n]
    };
    let h_t = Tensor::from_vec(h, &h_shape)?;
    let y_t = tape::record(
        Op::SelectiveScan {
            x: ix,
            delta: idelta,
            b: ib,
            c: ic,
            a: ia,
            h_hist: hist.unwrap_or_default(),
            abar_hist: abar_hist.unwrap_or_default(),
            dims,
        },
        tracked,
        y_t,
    );
    Ok((y_t, h_t))
}

/// Depthwise causal conv over one chunk with an explicit carried tail of the
/// last K-1 samples per channel. Bit-exact continuation of
/// [`Tensor::conv1d_causal`] across arbitrary chunk boundaries.
pub fn conv1d_causal_streaming(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    tail: &mut Vec<f64>,
) -> Result<Tensor, TensorError> {
    let d = x.shape()[x.rank() - 2];
    let len = x.shape()[x.rank() - 1];
    let kw = w.shape()[1];
    let batch = x.numel() / (d * len);
    if w.shape()[0] != d || b.shape() != [d] {
        return Err(shape_err("conv1d_causal_streaming", x.shape(), w.shape()));
    }
    if tail.is_empty() {
        tail.resize(batch * d * (kw - 1), 0.0);
    }
    if tail.len() != batch * d * (kw - 1) {
        return Err(TensorError::InvalidShape {
            op: "conv1d_causal_streaming",
            detail: format!("tail len {} != {}", tail.len(), batch * d * (kw - 1)),
        });
    }
    let mut out = vec![0.0; x.numel()];
    kernels::conv1d(
        x.data(),
        w.data(),
        b.data(),
        batch,
        d,
        len,
        kw,
        Some(tail.as_slice()),
        &mut out,
    );
    // New tail: last K-1 inputs per (batch, channel), padding from the old
    // tail when the chunk is shorter than the kernel.
    let t = kw - 1;
    let mut new_tail = vec![0.0; batch * d * t];
    for bi in 0..batch {
        for ci in 0..d {
            let dst = (bi * d + ci) * t;
            let src = (bi * d + ci) * len;
            for j in 0..t {
                // position len - t + j within the virtual [old_tail | x] stream
                let pos = len as isize - t as isize + j as isize;
                new_tail[dst + j] = if pos >= 0 {
                    x.data()[src + pos as usize]
                } else {
                    tail[dst + (pos + t as isize) as usize]
                };
            }
        }
    }
    *tail = new_tail;
    Tensor::from_vec(out, x.shape())
}

pub(crate) mod kernels {
    use super::super::tape::ScanDims;
    use super::strides_of;
    use rayon::prelude::*;

    const PAR_THRESHOLD: usize = 1 << 14;

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    pub fn softplus(x: f64) -> f64 {
        if x > 30.0 {
            x
        } else if x < -30.0 {
            x.exp()
        } else {
            x.exp().ln_1p()
        }
    }

    pub fn matmul_dims(a: &[usize], b: &[usize]) -> (usize, usize, usize, usize) {
        let r = a.len();
        let (m, k) = (a[r - 2], a[r - 1]);
        let n = b[1];
        let batch: usize = a[..r - 2].iter().product();
        (batch, m, k, n)
    }

    /// y[bi,i,j] = sum_l a[bi,i,l] * b[l,j]; each output element is one
    /// sequential dot product, so the result is independent of threading.
    pub fn matmul(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize, y: &mut [f64]) {
        let parallel = batch * m * n * k >= PAR_THRESHOLD && batch * m > 1;
        matmul_impl(a, b, batch, m, k, n, y, parallel);
    }

    pub fn matmul_impl(
        a: &[f64],
        b: &[f64],
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        y: &mut [f64],
        parallel: bool,
    ) {
        let row = |yr: &mut [f64], ar: &[f64]| {
            for (l, &av) in ar.iter().enumerate() {
                if av != 0.0 {
                    let brow = &b[l * n..(l + 1) * n];
                    for (yv, &bv) in yr.iter_mut().zip(brow) {
                        *yv += av * bv;
                    }
                }
            }
        };
        if parallel {
            y.par_chunks_mut(n)
                .zip(a.par_chunks(k))
                .for_each(|(yr, ar)| row(yr, ar));
        } else {
            y.chunks_mut(n)
                .zip(a.chunks(k))
                .for_each(|(yr, ar)| row(yr, ar));
        }
        let _ = (batch, m);
    }

    /// da[bi,i,l] = sum_j dy[bi,i,j] * b[l,j]
    pub fn matmul_dy_bt(
        dy: &[f64],
        b: &[f64],
        _batch: usize,
        _m: usize,
        k: usize,
        n: usize,
        da: &mut [f64],
    ) {
        da.par_chunks_mut(k)
            .zip(dy.par_chunks(n))
            .for_each(|(dar, dyr)| {
                for (l, dav) in dar.iter_mut().enumerate() {
                    let brow = &b[l * n..(l + 1) * n];
                    let mut acc = 0.0;
                    for (dv, bv) in dyr.iter().zip(brow) {
                        acc += dv * bv;
                    }
                    *dav = acc;
                }
            });
    }

    /// db[l,j] = sum_bi sum_i a[bi,i,l] * dy[bi,i,j]
    pub fn matmul_at_dy(
        a: &[f64],
        dy: &[f64],
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        db: &mut [f64],
    ) {
        // Parallel over rows of db (l): deterministic, each row reduces
        // over all (bi, i) in order.
        db.par_chunks_mut(n).enumerate().for_each(|(l, dbr)| {
            for r in 0..batch * m {
                let av = a[r * k + l];
                if av != 0.0 {
                    let dyr = &dy[r * n..(r + 1) * n];
                    for (dbv, &dv) in dbr.iter_mut().zip(dyr) {
                        *dbv += av * dv;
                    }
                }
            }
        });
    }

    /// Causal depthwise conv. Taps ordered oldest to newest:
    /// y[t] = bias + sum_k w[k] * x[t - (K-1) + k], with zeros (or the carried
    /// tail) to the left of the chunk.
    #[allow(clippy::too_many_arguments)]
    pub fn conv1d(
        x: &[f64],
        w: &[f64],
        bias: &[f64],
        batch: usize,
        d: usize,
        len: usize,
        kw: usize,
        tail: Option<&[f64]>,
        y: &mut [f64],
    ) {
        let run = |(lane, yr): (usize, &mut [f64])| {
            let ci = lane % d;
            let xr = &x[lane * len..(lane + 1) * len];
            let wr = &w[ci * kw..(ci + 1) * kw];
            let t_len = kw - 1;
            let tr = tail.map(|t| &t[lane * t_len..(lane + 1) * t_len]);
            for (t, yv) in yr.iter_mut().enumerate() {
                let mut acc = bias[ci];
                for (ki, &wv) in wr.iter().enumerate() {
                    let pos = t as isize - (kw as isize - 1) + ki as isize;
                    let xv = if pos >= 0 {
                        xr[pos as usize]
                    } else {
                        match tr {
                            Some(tl) => tl[(pos + t_len as isize) as usize],
                            None => 0.0,
                        }
                    };
                    acc += wv * xv;
                }
                *yv = acc;
            }
        };
        if batch * d * len * kw >= PAR_THRESHOLD && batch * d > 1 {
            y.par_chunks_mut(len).enumerate().for_each(run);
        } else {
            y.chunks_mut(len).enumerate().for_each(run);
        }
    }

    /// dx[s] = sum_k w[k] * dy[s + (K-1) - k] (within bounds).
    pub fn conv1d_dx(dy: &[f64], w: &[f64], _batch: usize, d: usize, len: usize, kw: usize, dx: &mut [f64]) {
        dx.par_chunks_mut(len).enumerate().for_each(|(lane, dxr)| {
            let ci = lane % d;
            let dyr = &dy[lane * len..(lane + 1) * len];
            let wr = &w[ci * kw..(ci + 1) * kw];
            for (s, dxv) in dxr.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (ki, &wv) in wr.iter().enumerate() {
                    let t = s + (kw - 1) - ki;
                    if t < len {
                        acc += wv * dyr[t];
                    }
                }
                *dxv = acc;
            }
        });
    }

    /// dw[c,k] = sum_batch sum_t dy[t] * x[t - (K-1) + k]
    pub fn conv1d_dw(dy: &[f64], x: &[f64], batch: usize, d: usize, len: usize, kw: usize, dw: &mut [f64]) {
        dw.par_chunks_mut(kw).enumerate().for_each(|(ci, dwr)| {
            for bi in 0..batch {
                let lane = bi * d + ci;
                let dyr = &dy[lane * len..(lane + 1) * len];
                let xr = &x[lane * len..(lane + 1) * len];
                for (ki, dwv) in dwr.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for t in 0..len {
                        let pos = t as isize - (kw as isize - 1) + ki as isize;
                        if pos >= 0 {
                            acc += dyr[t] * xr[pos as usize];
                        }
                    }
                    *dwv += acc;
                }
            }
        });
    }

    pub fn swap_last2(x: &[f64], shape: &[usize], y: &mut [f64]) {
        let r = shape.len();
        let (p, q) = (shape[r - 2], shape[r - 1]);
        let batch = x.len() / (p * q);
        for bi in 0..batch {
            let xb = &x[bi * p * q..(bi + 1) * p * q];
            let yb = &mut y[bi * p * q..(bi + 1) * p * q];
            for i in 0..p {
                for j in 0..q {
                    yb[j * p + i] = xb[i * q + j];
                }
            }
        }
    }

    pub fn swap_axes01(x: &[f64], shape: &[usize], y: &mut [f64]) {
        let (a, b, c) = (shape[0], shape[1], shape[2]);
        for i in 0..a {
            for j in 0..b {
                let src = (i * b + j) * c;
                let dst = (j * a + i) * c;
                y[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }

    pub fn flip(x: &[f64], shape: &[usize], axis: usize, y: &mut [f64]) {
        let strides = strides_of(shape);
        let stride = strides[axis];
        let dim = shape[axis];
        for (idx, &v) in x.iter().enumerate() {
            let pos = (idx / stride) % dim;
            let flipped = idx - pos * stride + (dim - 1 - pos) * stride;
            y[flipped] = v;
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan_forward(
        x: &[f64],
        delta: &[f64],
        b: &[f64],
        c: &[f64],
        a: &[f64],
        dims: ScanDims,
        h: &mut [f64],
        y: &mut [f64],
        mut hist: Option<&mut [f64]>,
        mut abar_hist: Option<&mut [f64]>,
    ) {
        let ScanDims {
            batch,
            len,
            d_inner: d,
            d_state: n,
        } = dims;
        let lane = |bi: usize,
                    h: &mut [f64],
                    y: &mut [f64],
                    mut hist: Option<&mut [f64]>,
                    mut abar_hist: Option<&mut [f64]>| {
            let xb = &x[bi * len * d..(bi + 1) * len * d];
            let db = &delta[bi * len * d..(bi + 1) * len * d];
            let bb = &b[bi * len * n..(bi + 1) * len * n];
            let cb = &c[bi * len * n..(bi + 1) * len * n];
            for t in 0..len {
                let bt = &bb[t * n..(t + 1) * n];
                let ct = &cb[t * n..(t + 1) * n];
                for i in 0..d {
                    let dt = db[t * d + i];
                    let xv = xb[t * d + i];
                    let hr = &mut h[i * n..(i + 1) * n];
                    let ar = &a[i * n..(i + 1) * n];
                    let mut acc = 0.0;
                    if let Some(ab) = abar_hist.as_deref_mut() {
                        let abr = &mut ab[t * d * n + i * n..t * d * n + (i + 1) * n];
                        for j in 0..n {
                            let abar = (dt * ar[j]).exp();
                            abr[j] = abar;
                            hr[j] = abar * hr[j] + dt * bt[j] * xv;
                            acc += ct[j] * hr[j];
                        }
                    } else {
                        for j in 0..n {
                            let abar = (dt * ar[j]).exp();
                            hr[j] = abar * hr[j] + dt * bt[j] * xv;
                            acc += ct[j] * hr[j];
                        }
                    }
                    y[t * d + i] = acc;
                }
                if let Some(hs) = hist.as_deref_mut() {
                    hs[t * d * n..(t + 1) * d * n].copy_from_slice(h);
                }
            }
        };
        if batch > 1 && len * d * n >= 256 {
            // Each lane owns disjoint slices; per-lane math is sequential,
            // so parallelism cannot change any value.
            type LaneSlices<'a> = (
                usize,
                &'a mut [f64],
                &'a mut [f64],
                Option<&'a mut [f64]>,
                Option<&'a mut [f64]>,
            );
            let mut lanes: Vec<LaneSlices> = Vec::new();
            let mut h_rest = h;
            let mut y_rest = y;
            let mut hist_rest = hist;
            let mut abar_rest = abar_hist;
            for bi in 0..batch {
                let (h_lane, hr) = h_rest.split_at_mut(d * n);
                let (y_lane, yr) = y_rest.split_at_mut(len * d);
                h_rest = hr;
                y_rest = yr;
                let hist_lane = match hist_rest {
                    Some(hs) => {
                        let (lane_slice, rest) = hs.split_at_mut(len * d * n);
                        hist_rest = Some(rest);
                        Some(lane_slice)
                    }
                    None => None,
                };
                let abar_lane = match abar_rest {
                    Some(hs) => {
                        let (lane_slice, rest) = hs.split_at_mut(len * d * n);
                        abar_rest = Some(rest);
                        Some(lane_slice)
                    }
                    None => None,
                };
                lanes.push((bi, h_lane, y_lane, hist_lane, abar_lane));
            }
            lanes
                .into_par_iter()
                .for_each(|(bi, h_l, y_l, hist_l, abar_l)| {
                    lane(bi, h_l, y_l, hist_l, abar_l);
                });
        } else {
            for bi in 0..batch {
                let h_l = &mut h[bi * d * n..(bi + 1) * d * n];
                let y_l = &mut y[bi * len * d..(bi + 1) * len * d];
                let hist_l = hist
                    .as_deref_mut()
                    .map(|hs| &mut hs[bi * len * d * n..(bi + 1) * len * d * n]);
                let abar_l = abar_hist
                    .as_deref_mut()
                    .map(|hs| &mut hs[bi * len * d * n..(bi + 1) * len * d * n]);
                lane(bi, h_l, y_l, hist_l, abar_l);
            }
        }
    }

    pub struct ScanGrads {
        pub dx: Vec<f64>,
        pub ddelta: Vec<f64>,
        pub db: Vec<f64>,
        pub dc: Vec<f64>,
        pub da: Vec<f64>,
    }

    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan_backward(
        dy: &[f64],
        x: &[f64],
        delta: &[f64],
        b: &[f64],
        c: &[f64],
        a: &[f64],
        hist: &[f64],
        abar_hist: &[f64],
        dims: ScanDims,
    ) -> ScanGrads {
        let ScanDims {
            batch,
            len,
            d_inner: d,
            d_state: n,
        } = dims;
        struct LaneOut {
            dx: Vec<f64>,
            ddelta: Vec<f64>,
            db: Vec<f64>,
            dc: Vec<f64>,
            da: Vec<f64>,
        }
        let run_lane = |bi: usize| -> LaneOut {
            let xb = &x[bi * len * d..(bi + 1) * len * d];
            let deltab = &delta[bi * len * d..(bi + 1) * len * d];
            let bb = &b[bi * len * n..(bi + 1) * len * n];
            let cb = &c[bi * len * n..(bi + 1) * len * n];
            let dyb = &dy[bi * len * d..(bi + 1) * len * d];
            let histb = &hist[bi * len * d * n..(bi + 1) * len * d * n];
            let abarb = &abar_hist[bi * len * d * n..(bi + 1) * len * d * n];
            let mut o = LaneOut {
                dx: vec![0.0; len * d],
                ddelta: vec![0.0; len * d],
                db: vec![0.0; len * n],
                dc: vec![0.0; len * n],
                da: vec![0.0; d * n],
            };
            let mut dh = vec![0.0; d * n];
            for t in (0..len).rev() {
                let bt = &bb[t * n..(t + 1) * n];
                let ct = &cb[t * n..(t + 1) * n];
                let ht = &histb[t * d * n..(t + 1) * d * n];
                for i in 0..d {
                    let g = dyb[t * d + i];
                    if g != 0.0 {
                        let dhr = &mut dh[i * n..(i + 1) * n];
                        let htr = &ht[i * n..(i + 1) * n];
                        for j in 0..n {
                            dhr[j] += g * ct[j];
                            o.dc[t * n + j] += g * htr[j];
                        }
                    }
                }
                for i in 0..d {
                    let dt = deltab[t * d + i];
                    let xv = xb[t * d + i];
                    let ar = &a[i * n..(i + 1) * n];
                    let abr = &abarb[t * d * n + i * n..t * d * n + (i + 1) * n];
                    let dhr = &mut dh[i * n..(i + 1) * n];
                    let dar = &mut o.da[i * n..(i + 1) * n];
                    let hprev = if t > 0 {
                        Some(&histb[(t - 1) * d * n + i * n..(t - 1) * d * n + (i + 1) * n])
                    } else {
                        None
                    };
                    let mut ddt = 0.0;
                    let mut dxv = 0.0;
                    for j in 0..n {
                        let abar = abr[j];
                        let hp = hprev.map_or(0.0, |h| h[j]);
                        let dh_ij = dhr[j];
                        let dabar = dh_ij * hp;
                        ddt += dabar * ar[j] * abar;
                        dar[j] += dabar * dt * abar;
                        ddt += dh_ij * bt[j] * xv;
                        dxv += dh_ij * dt * bt[j];
                        o.db[t * n + j] += dh_ij * dt * xv;
                        dhr[j] = dh_ij * abar;
                    }
                    o.ddelta[t * d + i] = ddt;
                    o.dx[t * d + i] = dxv;
                }
            }
            o
        };

        let lanes: Vec<LaneOut> = if batch > 1 && len * d * n >= 256 {
            (0..batch).into_par_iter().map(run_lane).collect()
        } else {
            (0..batch).map(run_lane).collect()
        };

        let mut g = ScanGrads {
            dx: vec![0.0; batch * len * d],
            ddelta: vec![0.0; batch * len * d],
            db: vec![0.0; batch * len * n],
            dc: vec![0.0; batch * len * n],
            da: vec![0.0; d * n],
        };
        // Per-lane outputs are disjoint except da, which is reduced in lane
        // order for determinism.
        for (bi, lane) in lanes.into_iter().enumerate() {
            g.dx[bi * len * d..(bi + 1) * len * d].copy_from_slice(&lane.dx);
            g.ddelta[bi * len * d..(bi + 1) * len * d].copy_from_slice(&lane.ddelta);
            g.db[bi * len * n..(bi + 1) * len * n].copy_from_slice(&lane.db);
            g.dc[bi * len * n..(bi + 1) * len * n].copy_from_slice(&lane.dc);
            for (acc, v) in g.da.iter_mut().zip(&lane.da) {
                *acc += v;
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::super::{GradientTape, Tensor, TensorError};
    use super::*;
    use crate::checks::{gradcheck, oracle};
    use crate::rng::Rng;

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let eye = Tensor::from_fn(&[2, 2], |i| if i / 2 == i % 2 { 1.0 } else { 0.0 });
        let y = a.matmul(&eye).unwrap();
        assert_eq!(y.data(), a.data());
    }

    #[test]
    fn matmul_orthogonal_rows() {
        let a = Tensor::from_vec(vec![1.0, 0.0], &[1, 2]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 5.0], &[2, 1]).unwrap();
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::new(1);
        let a = Tensor::from_fn(&[3, 4], |_| rng.range(-1.0, 1.0));
        let b = Tensor::from_fn(&[4, 2], |_| rng.range(-1.0, 1.0));
        let y = a.matmul(&b).unwrap();
        let want = oracle::matmul(a.data(), b.data(), 3, 4, 2);
        for (got, want) in y.data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        match a.matmul(&b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_bit_equal_across_parallel_strategies() {
        let mut rng = Rng::new(2);
        let (batch, m, k, n) = (3, 17, 29, 13);
        let a = Tensor::from_fn(&[batch, m, k], |_| rng.range(-1.0, 1.0));
        let b = Tensor::from_fn(&[k, n], |_| rng.range(-1.0, 1.0));
        let mut seq = vec![0.0; batch * m * n];
        let mut par = vec![0.0; batch * m * n];
        kernels::matmul_impl(a.data(), b.data(), batch, m, k, n, &mut seq, false);
        kernels::matmul_impl(a.data(), b.data(), batch, m, k, n, &mut par, true);
        for (s, p) in seq.iter().zip(&par) {
            assert_eq!(s.to_bits(), p.to_bits());
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = Rng::new(3);
        let x = Tensor::from_fn(&[2, 9], |_| rng.range(-1.0, 1.0));
        let w = Tensor::ones(&[2, 1]);
        let b = Tensor::zeros(&[2]);
        let y = x.conv1d_causal(&w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_impulse_response_ordering() {
        // Taps oldest to newest [2, 3]: y[t] = 2 x[t-1] + 3 x[t].
        let x = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0], &[1, 4]).unwrap();
        let w = Tensor::from_vec(vec![2.0, 3.0], &[1, 2]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = x.conv1d_causal(&w, &b).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_matches_double_loop_oracle() {
        let mut rng = Rng::new(4);
        let (d, l, k) = (4, 16, 4);
        let x = Tensor::from_fn(&[d, l], |_| rng.range(-1.0, 1.0));
        let w = Tensor::from_fn(&[d, k], |_| rng.range(-1.0, 1.0));
        let b = Tensor::from_fn(&[d], |_| rng.range(-1.0, 1.0));
        let y = x.conv1d_causal(&w, &b).unwrap();
        let want = oracle::conv1d(x.data(), w.data(), b.data(), d, l, k);
        for (got, want) in y.data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_is_causal_bit_exact() {
        let mut rng = Rng::new(5);
        let (d, l, k) = (3, 20, 5);
        let x = Tensor::from_fn(&[d, l], |_| rng.range(-1.0, 1.0));
        let w = Tensor::from_fn(&[d, k], |_| rng.range(-1.0, 1.0));
        let b = Tensor::from_fn(&[d], |_| rng.range(-1.0, 1.0));
        let y = x.conv1d_causal(&w, &b).unwrap();
        for t0 in [3usize, 10, 18] {
            let mut data = x.to_vec();
            for c in 0..d {
                for t in (t0 + 1)..l {
                    data[c * l + t] = 0.0;
                }
            }
            let xz = Tensor::from_vec(data, &[d, l]).unwrap();
            let yz = xz.conv1d_causal(&w, &b).unwrap();
            for c in 0..d {
                for t in 0..=t0 {
                    assert_eq!(
                        y.data()[c * l + t].to_bits(),
                        yz.data()[c * l + t].to_bits()
                    );
                }
            }
        }
    }

    #[test]
    fn conv_channel_mismatch_is_an_error() {
        let x = Tensor::zeros(&[3, 8]);
        let w = Tensor::zeros(&[2, 4]);
        let b = Tensor::zeros(&[2]);
        assert!(x.conv1d_causal(&w, &b).is_err());
        let w3 = Tensor::zeros(&[3, 4]);
        let b2 = Tensor::zeros(&[2]);
        assert!(x.conv1d_causal(&w3, &b2).is_err());
    }

    #[test]
    fn silu_fixed_points() {
        let x = Tensor::from_vec(vec![0.0, 20.0, 1.0], &[3]).unwrap();
        let y = x.silu();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 20.0).abs() < 1e-6);
        // 1 * sigmoid(1), recomputed independently.
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((y.data()[2] - want).abs() < 1e-15);
    }

    #[test]
    fn softplus_stable_at_extremes() {
        let x = Tensor::from_vec(vec![0.0, 100.0, -100.0], &[3]).unwrap();
        let y = x.softplus();
        assert!((y.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((y.data()[1] - 100.0).abs() < 1e-9);
        let want = (-100.0f64).exp(); // ~3.7e-44, no underflow panic
        assert!(y.data()[2] > 0.0);
        assert!((y.data()[2] - want).abs() / want < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = GradientTape::new().unwrap();
        let mut x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        tape.watch(&mut x);
        let loss = x.sum();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_quadratic() {
        let tape = GradientTape::new().unwrap();
        let mut x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        tape.watch(&mut x);
        let loss = x.mul(&x).unwrap().sum();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn stale_loss_against_new_tape_is_an_error() {
        let tape1 = GradientTape::new().unwrap();
        let mut x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        tape1.watch(&mut x);
        let loss = x.sum();
        let _ = tape1.backward(&loss).unwrap();
        // Re-running backward without re-recording: the old loss does not
        // belong to the new tape.
        let tape2 = GradientTape::new().unwrap();
        match tape2.backward(&loss) {
            Err(TensorError::LossNotOnTape) => {}
            other => panic!("expected LossNotOnTape, got {other:?}"),
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = GradientTape::new().unwrap();
        let mut x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        tape.watch(&mut x);
        let y = x.scale(2.0);
        match tape.backward(&y) {
            Err(TensorError::NonScalarLoss(s)) => assert_eq!(s, vec![2]),
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn detached_tensor_never_touches_the_tape() {
        let tape = GradientTape::new().unwrap();
        let mut x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        tape.watch(&mut x);
        let d = x.detach();
        let y = d.scale(3.0); // pure constant math
        assert!(y.tape_ref().is_none());
        let loss = x.sum();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0, 1.0]);
        assert!(grads.get(&d).is_none());
    }

    #[test]
    fn unwatched_leaf_gets_zero_gradient() {
        let tape = GradientTape::new().unwrap();
        let mut x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let mut unused = Tensor::from_vec(vec![5.0], &[1]).unwrap();
        tape.watch(&mut x);
        tape.watch(&mut unused);
        let loss = x.sum();
        let grads = tape.backward(&loss).unwrap();
        // The unused leaf still gets a (zero) gradient of its own shape.
        assert_eq!(grads.get(&unused).unwrap().data(), &[0.0]);
    }

    #[test]
    fn nested_tape_is_an_error() {
        let _t1 = GradientTape::new().unwrap();
        assert!(matches!(
            GradientTape::new(),
            Err(TensorError::TapeAlreadyActive)
        ));
    }

    /// Randomized finite-difference sweep over every differentiable op.
    #[test]
    fn all_ops_pass_finite_difference_checks() {
        for seed in 0..20u64 {
            let mut rng = Rng::new(1000 + seed);
            let a0 = Tensor::from_fn(&[3, 4], |_| rng.range(-1.0, 1.0));
            let b0 = Tensor::from_fn(&[4, 3], |_| rng.range(-1.0, 1.0));
            let names = ["a", "b"];
            let check = |f: &dyn Fn(&Tensor, &Tensor) -> Result<Tensor, TensorError>,
                         a: &Tensor,
                         b: &Tensor,
                         what: &str| {
                let entries = gradcheck(&names, &[a.detach(), b.detach()], 4, seed, |p| {
                    f(&p[0], &p[1])
                })
                .unwrap();
                for e in &entries {
                    assert!(
                        e.max_rel_err < 1e-4,
                        "seed {seed} {what} {}: {}",
                        e.name,
                        e.max_rel_err
                    );
                }
            };

            check(&|a, b| Ok(a.matmul(b)?.silu().sum()), &a0, &b0, "matmul+silu");
            check(&|a, b| Ok(a.matmul(b)?.softplus().mean()), &a0, &b0, "softplus");
            check(
                &|a, b| {
                    let y = a.matmul(b)?;
                    Ok(y.relu().mul(&y.exp())?.sum())
                },
                &a0,
                &b0,
                "relu*exp",
            );
            check(
                &|a, b| Ok(a.abs().sum().add(&b.abs().mean())?.sum()),
                &a0,
                &b0,
                "abs",
            );
            check(
                &|a, b| {
                    let m = Tensor::magnitude(&a.reshape(&[12])?, &b.reshape(&[12])?)?;
                    Ok(m.sum())
                },
                &a0,
                &b0,
                "magnitude",
            );
            check(
                &|a, b| {
                    let cat = Tensor::concat_last(&[&a.reshape(&[2, 6])?, &b.reshape(&[2, 6])?])?;
                    Ok(cat.slice_last(3, 5)?.silu().sum())
                },
                &a0,
                &b0,
                "concat+slice",
            );
            check(
                &|a, b| {
                    let s = a.swap_last2()?.flip(0)?.matmul(&b.swap_last2()?.flip(1)?)?;
                    Ok(s.sum())
                },
                &a0,
                &b0,
                "swap+flip",
            );

            // conv over [d, L] with kernel and bias as the two checked params.
            let x = Tensor::from_fn(&[2, 7], |_| rng.range(-1.0, 1.0));
            let w0 = Tensor::from_fn(&[2, 3], |_| rng.range(-1.0, 1.0));
            let bias0 = Tensor::from_fn(&[2], |_| rng.range(-1.0, 1.0));
            let entries = gradcheck(
                &["w", "bias", "x"],
                &[w0, bias0, x],
                4,
                seed,
                |p| Ok(p[2].conv1d_causal(&p[0], &p[1])?.silu().sum()),
            )
            .unwrap();
            for e in &entries {
                assert!(e.max_rel_err < 1e-4, "seed {seed} conv {}: {}", e.name, e.max_rel_err);
            }

            // selective scan: all five inputs.
            let (l, d, n) = (5, 3, 2);
            let xs = Tensor::from_fn(&[l, d], |_| rng.range(-1.0, 1.0));
            let delta = Tensor::from_fn(&[l, d], |_| rng.range(0.01, 0.6));
            let bm = Tensor::from_fn(&[l, n], |_| rng.range(-1.0, 1.0));
            let cm = Tensor::from_fn(&[l, n], |_| rng.range(-1.0, 1.0));
            let am = Tensor::from_fn(&[d, n], |_| rng.range(-2.0, -0.1));
            let entries = gradcheck(
                &["x", "delta", "b", "c", "a"],
                &[xs, delta, bm, cm, am],
                4,
                seed,
                |p| {
                    let (y, _) = selective_scan(&p[0], &p[1], &p[2], &p[3], &p[4], None)?;
                    Ok(y.mul(&y)?.sum())
                },
            )
            .unwrap();
            for e in &entries {
                assert!(
                    e.max_rel_err < 1e-4,
                    "seed {seed} scan {}: {}",
                    e.name,
                    e.max_rel_err
                );
            }
        }
    }

    #[test]
    fn add_bias_broadcasts_only_last_dim() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64);
        let b = Tensor::from_vec(vec![10.0, 20.0, 30.0], &[3]).unwrap();
        let y = x.add_bias(&b).unwrap();
        assert_eq!(y.data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let wrong = Tensor::zeros(&[2]);
        assert!(x.add_bias(&wrong).is_err());
    }

    #[test]
    fn streaming_conv_matches_batch_across_chunkings() {
        let mut rng = Rng::new(8);
        let (d, l, k) = (3, 24, 4);
        let x = Tensor::from_fn(&[d, l], |_| rng.range(-1.0, 1.0));
        let w = Tensor::from_fn(&[d, k], |_| rng.range(-1.0, 1.0));
        let b = Tensor::from_fn(&[d], |_| rng.range(-1.0, 1.0));
        let full = x.conv1d_causal(&w, &b).unwrap();
        for trial in 0..5 {
            let mut tail = Vec::new();
            let mut got = vec![Vec::new(); d];
            let mut t = 0;
            while t < l {
                let take = if trial == 0 {
                    1
                } else {
                    1 + rng.below((l - t).min(6))
                };
                let chunk = Tensor::from_fn(&[d, take], |idx| {
                    let (c, tt) = (idx / take, idx % take);
                    x.data()[c * l + t + tt]
                });
                let y = conv1d_causal_streaming(&chunk, &w, &b, &mut tail).unwrap();
                for c in 0..d {
                    got[c].extend_from_slice(&y.data()[c * take..(c + 1) * take]);
                }
                t += take;
            }
            for c in 0..d {
                for t in 0..l {
                    assert_eq!(got[c][t].to_bits(), full.data()[c * l + t].to_bits());
                }
            }
        }
    }
}
