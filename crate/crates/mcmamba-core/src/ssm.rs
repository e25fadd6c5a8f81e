//! Selective state-space core.
//!
//! Input-dependent parameterization (Δ, B, C), discretization to (Ā, B̄), and
//! the diagonal linear recurrence
//!
//! ```text
//! hₙ = Āₙ ⊙ hₙ₋₁ + B̄xₙ,    yₙ[i] = ⟨Cₙ, hₙ[i, :]⟩
//! ```
//!
//! evaluated by sequential, chunked (streaming), and work-efficient parallel
//! scan kernels. A = -exp(A_log) keeps the continuous system strictly stable,
//! and Δ = softplus(·) > 0 keeps every Āₙ entry inside (0, 1).

use rayon::prelude::*;

use crate::rng::Rng;
use crate::tensor::ops::selective_scan;
use crate::tensor::{Tensor, TensorError};

/// Learned parameters of one selective SSM operating at width `d_inner` with
/// `d_state` latent channels per feature.
#[derive(Debug, Clone)]
pub struct SsmParams {
    pub d_inner: usize,
    pub d_state: usize,
    /// A = -exp(a_log), `[d_inner, d_state]`.
    pub a_log: Tensor,
    /// Input-dependent B projection, `[d_inner, d_state]`.
    pub w_b: Tensor,
    /// Input-dependent C projection, `[d_inner, d_state]`.
    pub w_c: Tensor,
    /// Low-rank Δ projection: `[d_inner, dt_rank]` then `[dt_rank, d_inner]`
    /// plus bias `[d_inner]`; Δ = softplus(up(down(x)) + bias).
    pub w_dt_down: Tensor,
    pub w_dt_up: Tensor,
    pub dt_bias: Tensor,
}

pub fn dt_rank_for(d_inner: usize) -> usize {
    (d_inner / 16).max(1)
}

impl SsmParams {
    /// S4D-real style init: A row = -(1..=d_state), Δ bias sampled so the
    /// initial step sizes land in [1e-3, 1e-1].
    pub fn init(rng: &mut Rng, d_inner: usize, d_state: usize) -> SsmParams {
        let rank = dt_rank_for(d_inner);
        let a_log = Tensor::from_fn(&[d_inner, d_state], |i| (((i % d_state) + 1) as f64).ln());
        let bound_in = 1.0 / (d_inner as f64).sqrt();
        let bound_rank = 1.0 / (rank as f64).sqrt();
        let dt_bias = Tensor::from_fn(&[d_inner], |_| {
            let dt = (rng.range((1e-3f64).ln(), (1e-1f64).ln())).exp();
            // inverse softplus: ln(e^dt - 1)
            (dt.exp_m1()).ln()
        });
        SsmParams {
            d_inner,
            d_state,
            a_log,
            w_b: Tensor::rand_uniform(rng, &[d_inner, d_state], bound_in),
            w_c: Tensor::rand_uniform(rng, &[d_inner, d_state], bound_in),
            w_dt_down: Tensor::rand_uniform(rng, &[d_inner, rank], bound_in),
            w_dt_up: Tensor::rand_uniform(rng, &[rank, d_inner], bound_rank),
            dt_bias,
        }
    }

    pub fn zeros(d_inner: usize, d_state: usize) -> SsmParams {
        let rank = dt_rank_for(d_inner);
        SsmParams {
            d_inner,
            d_state,
            a_log: Tensor::zeros(&[d_inner, d_state]),
            w_b: Tensor::zeros(&[d_inner, d_state]),
            w_c: Tensor::zeros(&[d_inner, d_state]),
            w_dt_down: Tensor::zeros(&[d_inner, rank]),
            w_dt_up: Tensor::zeros(&[rank, d_inner]),
            dt_bias: Tensor::zeros(&[d_inner]),
        }
    }

    /// A = -exp(a_log), strictly negative.
    pub fn a(&self) -> Tensor {
        self.a_log.exp().neg()
    }

    /// Input-dependent (Δ, B, C) for `x` of shape `[.., L, d_inner]`:
    /// Δ `[.., L, d_inner]` (softplus applied), B and C `[.., L, d_state]`.
    pub fn project(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor), TensorError> {
        let b = x.matmul(&self.w_b)?;
        let c = x.matmul(&self.w_c)?;
        let delta = x
            .matmul(&self.w_dt_down)?
            .matmul(&self.w_dt_up)?
            .add_bias(&self.dt_bias)?
            .softplus();
        Ok((delta, b, c))
    }

    /// Run the full selective SSM over `x` shaped `[.., L, d_inner]`,
    /// optionally continuing from `h0` (`[.., d_inner, d_state]`, streaming
    /// only). Returns `(y, h_final)` with `y` shaped like `x`.
    pub fn forward(
        &self,
        x: &Tensor,
        h0: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor), TensorError> {
        let (delta, b, c) = self.project(x)?;
        selective_scan(x, &delta, &b, &c, &self.a(), h0)
    }
}

/// Recurrent state of one stream.
#[derive(Debug, Clone)]
pub struct SsmState {
    pub h: Tensor,
    pub n_processed: u64,
}

impl SsmState {
    pub fn new(params: &SsmParams) -> SsmState {
        SsmState {
            h: Tensor::zeros(&[params.d_inner, params.d_state]),
            n_processed: 0,
        }
    }
}

fn check_finite(t: &Tensor, what: &'static str) -> Result<(), TensorError> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite(what))
    }
}

/// Discretize one step: Āₙ = exp(Δₙ ⊙ A) and B̄xₙ = (Δₙ ⊙ Bₙ) ⊗ xₙ for a
/// single input vector `x_n` of shape `[d_inner]`. Every Āₙ entry lies in
/// (0, 1).
pub fn discretize(params: &SsmParams, x_n: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
    check_finite(x_n, "discretize input")?;
    if x_n.shape() != [params.d_inner] {
        return Err(TensorError::ShapeMismatch {
            op: "discretize",
            lhs: x_n.shape().to_vec(),
            rhs: vec![params.d_inner],
        });
    }
    let x2 = x_n.reshape(&[1, params.d_inner])?;
    let (delta, b, _c) = params.project(&x2)?;
    let a = params.a();
    let (d, n) = (params.d_inner, params.d_state);
    let mut abar = vec![0.0; d * n];
    let mut bx = vec![0.0; d * n];
    for i in 0..d {
        let dt = delta.data()[i];
        let xv = x_n.data()[i];
        for j in 0..n {
            abar[i * n + j] = (dt * a.data()[i * n + j]).exp();
            bx[i * n + j] = dt * b.data()[j] * xv;
        }
    }
    Ok((
        Tensor::from_vec(abar, &[d, n])?,
        Tensor::from_vec(bx, &[d, n])?,
    ))
}

/// Sequential scan over `x` of shape `[d_inner, L]`, continuing from `state`
/// and leaving the final hidden state in it. Returns `y` of shape
/// `[d_inner, L]`.
pub fn scan_sequential(
    params: &SsmParams,
    x: &Tensor,
    state: &mut SsmState,
) -> Result<Tensor, TensorError> {
    check_finite(x, "scan input")?;
    if x.rank() != 2 || x.shape()[0] != params.d_inner {
        return Err(TensorError::ShapeMismatch {
            op: "scan_sequential",
            lhs: x.shape().to_vec(),
            rhs: vec![params.d_inner, x.shape().get(1).copied().unwrap_or(0)],
        });
    }
    if state.h.shape() != [params.d_inner, params.d_state] {
        return Err(TensorError::ShapeMismatch {
            op: "scan_sequential state",
            lhs: state.h.shape().to_vec(),
            rhs: vec![params.d_inner, params.d_state],
        });
    }
    let xt = x.swap_last2()?; // [L, d]
    let (y, h) = params.forward(&xt, Some(&state.h))?;
    state.h = h;
    state.n_processed += x.shape()[1] as u64;
    y.swap_last2()
}

/// Chunked scan: feed chunks in order, threading the state through. The
/// concatenated outputs are bit-exact with an unchunked [`scan_sequential`].
pub fn scan_chunked<I>(
    params: &SsmParams,
    chunks: I,
    state: &mut SsmState,
) -> Result<Vec<Tensor>, TensorError>
where
    I: IntoIterator<Item = Tensor>,
{
    let mut out = Vec::new();
    for chunk in chunks {
        out.push(scan_sequential(params, &chunk, state)?);
    }
    Ok(out)
}

/// Work-efficient parallel scan over a fresh sequence (`x`: `[d_inner, L]`,
/// zero initial state), evaluated through the associative operator
/// (a₂,b₂)∘(a₁,b₁) = (a₁a₂, a₂b₁+b₂) on (Āₙ, B̄xₙ) pairs. Mathematically
/// identical to [`scan_sequential`]; floating-point association differs.
pub fn scan_parallel(params: &SsmParams, x: &Tensor) -> Result<Tensor, TensorError> {
    check_finite(x, "scan input")?;
    if x.rank() != 2 || x.shape()[0] != params.d_inner {
        return Err(TensorError::ShapeMismatch {
            op: "scan_parallel",
            lhs: x.shape().to_vec(),
            rhs: vec![params.d_inner, x.shape().get(1).copied().unwrap_or(0)],
        });
    }
    let len = x.shape()[1];
    let (d, n) = (params.d_inner, params.d_state);
    let xt = x.swap_last2()?; // [L, d]
    let (delta, b, c) = params.project(&xt)?;
    let a = params.a();

    // Materialize the discretized pairs.
    let mut abar = vec![0.0; len * d * n];
    let mut bx = vec![0.0; len * d * n];
    for t in 0..len {
        for i in 0..d {
            let dt = delta.data()[t * d + i];
            let xv = xt.data()[t * d + i];
            for j in 0..n {
                abar[(t * d + i) * n + j] = (dt * a.data()[i * n + j]).exp();
                bx[(t * d + i) * n + j] = dt * b.data()[t * n + j] * xv;
            }
        }
    }
    let y = scan_pairs_parallel(&abar, &bx, c.data(), len, d, n);
    Tensor::from_vec(y, &[len, d])?.swap_last2()
}

/// Minimal float abstraction so the pair-scan kernels can run in f32 for the
/// reduced-precision agreement property and benchmarks.
pub trait Real:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
}

impl Real for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
}

impl Real for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
}

/// Reference evaluation of the recurrence on discretized pairs
/// (`abar`, `bx`: `[L, d, n]`, `c`: `[L, n]`); returns `y`: `[L, d]`.
pub fn scan_pairs_sequential<T: Real>(
    abar: &[T],
    bx: &[T],
    c: &[T],
    len: usize,
    d: usize,
    n: usize,
) -> Vec<T> {
    let mut h = vec![T::ZERO; d * n];
    let mut y = vec![T::ZERO; len * d];
    for t in 0..len {
        for i in 0..d {
            let mut acc = T::ZERO;
            for j in 0..n {
                let idx = (t * d + i) * n + j;
                h[i * n + j] = abar[idx] * h[i * n + j] + bx[idx];
                acc = acc + c[t * n + j] * h[i * n + j];
            }
            y[t * d + i] = acc;
        }
    }
    y
}

const SCAN_CHUNK: usize = 64;

/// Blocked work-efficient evaluation: per-chunk pair summaries reduced with
/// the associative operator, an exclusive pass over chunk summaries, then an
/// independent replay per chunk. Chunk boundaries are fixed by length, not
/// thread count, so results are deterministic.
pub fn scan_pairs_parallel<T: Real>(
    abar: &[T],
    bx: &[T],
    c: &[T],
    len: usize,
    d: usize,
    n: usize,
) -> Vec<T> {
    if len == 0 {
        return Vec::new();
    }
    let n_chunks = len.div_ceil(SCAN_CHUNK);
    let dn = d * n;

    // Phase 1: summarize each chunk as the operator-fold of its pairs.
    let summaries: Vec<(Vec<T>, Vec<T>)> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let start = ci * SCAN_CHUNK;
            let stop = (start + SCAN_CHUNK).min(len);
            let mut prod = vec![T::ONE; dn];
            let mut accum = vec![T::ZERO; dn];
            for t in start..stop {
                let base = t * dn;
                for k in 0..dn {
                    // (a2,b2)∘(a1,b1) = (a1*a2, a2*b1 + b2)
                    prod[k] = prod[k] * abar[base + k];
                    accum[k] = abar[base + k] * accum[k] + bx[base + k];
                }
            }
            (prod, accum)
        })
        .collect();

    // Phase 2: exclusive operator-scan over the chunk summaries.
    let mut starts: Vec<Vec<T>> = Vec::with_capacity(n_chunks);
    let mut carry = vec![T::ZERO; dn];
    for (prod, accum) in &summaries {
        starts.push(carry.clone());
        let mut next = vec![T::ZERO; dn];
        for k in 0..dn {
            next[k] = prod[k] * carry[k] + accum[k];
        }
        carry = next;
    }

    // Phase 3: replay each chunk from its entry state.
    let mut y = vec![T::ZERO; len * d];
    y.par_chunks_mut(SCAN_CHUNK * d)
        .enumerate()
        .for_each(|(ci, y_chunk)| {
            let start = ci * SCAN_CHUNK;
            let stop = (start + SCAN_CHUNK).min(len);
            let mut h = starts[ci].clone();
            for t in start..stop {
                let base = t * dn;
                for i in 0..d {
                    let mut acc = T::ZERO;
                    for j in 0..n {
                        let k = i * n + j;
                        h[k] = abar[base + k] * h[k] + bx[base + k];
                        acc = acc + c[t * n + j] * h[k];
                    }
                    y_chunk[(t - start) * d + i] = acc;
                }
            }
        });
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::oracle;

    /// Params with W_Δ = 0 and bias pinned so softplus(bias) = dt.
    fn params_with_fixed_dt(d_inner: usize, d_state: usize, dt: f64) -> SsmParams {
        let mut p = SsmParams::zeros(d_inner, d_state);
        let bias = dt.exp_m1().ln();
        p.dt_bias = Tensor::full(&[d_inner], bias);
        p
    }

    #[test]
    fn discretize_scalar_case() {
        // A = -1 (a_log = 0), Δ forced to ln 2 -> Ā = exp(-ln 2) = 0.5.
        let mut p = params_with_fixed_dt(1, 1, std::f64::consts::LN_2);
        p.a_log = Tensor::zeros(&[1, 1]);
        let (abar, _bx) = discretize(&p, &Tensor::ones(&[1])).unwrap();
        assert!((abar.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn discretize_state_freezing_limit() {
        // Δ -> 0+ freezes the state: Ā -> 1, B̄x -> 0.
        let mut p = params_with_fixed_dt(3, 4, 1e-9);
        p.a_log = Tensor::from_fn(&[3, 4], |i| ((i % 4) as f64 + 1.0).ln());
        p.w_b = Tensor::ones(&[3, 4]);
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.1], &[3]).unwrap();
        let (abar, bx) = discretize(&p, &x).unwrap();
        for &a in abar.data() {
            assert!((a - 1.0).abs() < 1e-8);
            assert!(a > 0.0 && a < 1.0);
        }
        for &b in bx.data() {
            assert!(b.abs() < 1e-8);
        }
    }

    #[test]
    fn discretize_matches_scalar_loop_oracle() {
        let mut rng = Rng::new(100);
        let p = SsmParams::init(&mut rng, 6, 5);
        let x = Tensor::from_fn(&[6], |_| rng.range(-1.0, 1.0));
        let (abar, bx) = discretize(&p, &x).unwrap();
        // Independent scalar recomputation.
        let rank = dt_rank_for(6);
        for i in 0..6 {
            let mut dt_pre = p.dt_bias.data()[i];
            for r in 0..rank {
                let mut low = 0.0;
                for k in 0..6 {
                    low += x.data()[k] * p.w_dt_down.data()[k * rank + r];
                }
                dt_pre += low * p.w_dt_up.data()[r * 6 + i];
            }
            let dt = (1.0 + dt_pre.exp()).ln();
            for j in 0..5 {
                let a = -p.a_log.data()[i * 5 + j].exp();
                let mut b = 0.0;
                for k in 0..6 {
                    b += x.data()[k] * p.w_b.data()[k * 5 + j];
                }
                let want_abar = (dt * a).exp();
                let want_bx = dt * b * x.data()[i];
                assert!((abar.data()[i * 5 + j] - want_abar).abs() < 1e-12);
                assert!((bx.data()[i * 5 + j] - want_bx).abs() < 1e-12);
                assert!(abar.data()[i * 5 + j] > 0.0 && abar.data()[i * 5 + j] < 1.0);
            }
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let p = SsmParams::zeros(2, 2);
        let x = Tensor::from_vec(vec![1.0, f64::NAN], &[2]).unwrap();
        assert!(matches!(
            discretize(&p, &x),
            Err(TensorError::NonFinite(_))
        ));
        let xs = Tensor::from_vec(vec![1.0, f64::INFINITY], &[2, 1]).unwrap();
        let mut state = SsmState::new(&p);
        assert!(scan_sequential(&p, &xs, &mut state).is_err());
    }

    #[test]
    fn zero_input_zero_state_stays_zero() {
        let mut rng = Rng::new(3);
        let p = SsmParams::init(&mut rng, 4, 8);
        let x = Tensor::zeros(&[4, 10]);
        let mut state = SsmState::new(&p);
        let y = scan_sequential(&p, &x, &mut state).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(state.h.data().iter().all(|&v| v == 0.0));
        assert_eq!(state.n_processed, 10);
    }

    #[test]
    fn degenerates_to_prefix_sum() {
        // Ā ≈ 1 (a_log very negative), Δ = 1, B = C = 1 with all-ones input:
        // y_n = n+1 (running prefix sum of ones).
        let d = 2;
        let mut p = params_with_fixed_dt(d, 1, 1.0);
        p.a_log = Tensor::full(&[d, 1], -40.0);
        p.w_b = Tensor::from_fn(&[d, 1], |_| 1.0 / d as f64);
        p.w_c = Tensor::from_fn(&[d, 1], |_| 1.0 / d as f64);
        let len = 10;
        let x = Tensor::ones(&[d, len]);
        let mut state = SsmState::new(&p);
        let y = scan_sequential(&p, &x, &mut state).unwrap();
        for t in 0..len {
            for i in 0..d {
                let got = y.data()[i * len + t];
                let want = (t + 1) as f64;
                assert!((got - want).abs() < 1e-9, "t={t} i={i}: {got}");
            }
        }
    }

    #[test]
    fn sequential_matches_per_step_oracle() {
        let mut rng = Rng::new(42);
        let (d, n, len) = (8, 16, 64);
        let p = SsmParams::init(&mut rng, d, n);
        let x = Tensor::from_fn(&[d, len], |_| rng.range(-1.0, 1.0));
        let mut state = SsmState::new(&p);
        let y = scan_sequential(&p, &x, &mut state).unwrap();

        // Oracle path: independent projection + per-step recurrence.
        let xt = x.swap_last2().unwrap();
        let (delta, b, c) = p.project(&xt).unwrap();
        let a = p.a();
        let mut h = vec![0.0; d * n];
        let y_oracle = oracle::ssm_recurrence(
            xt.data(),
            delta.data(),
            b.data(),
            c.data(),
            a.data(),
            len,
            d,
            n,
            &mut h,
        );
        for t in 0..len {
            for i in 0..d {
                let got = y.data()[i * len + t];
                let want = y_oracle[t * d + i];
                let rel = (got - want).abs() / want.abs().max(1e-10);
                assert!(rel < 1e-10, "t={t} i={i}");
            }
        }
        for (hs, ho) in state.h.data().iter().zip(&h) {
            assert!((hs - ho).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_single_element_is_bit_exact() {
        let mut rng = Rng::new(7);
        let p = SsmParams::init(&mut rng, 4, 6);
        let x = Tensor::from_fn(&[4, 1], |_| rng.range(-1.0, 1.0));
        let par = scan_parallel(&p, &x).unwrap();
        let mut state = SsmState::new(&p);
        let seq = scan_sequential(&p, &x, &mut state).unwrap();
        for (a, b) in par.data().iter().zip(seq.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn memoryless_limit_depends_only_on_current_step() {
        // a_log large positive -> A hugely negative -> Ā underflows to 0.
        let mut rng = Rng::new(8);
        let (d, n, len) = (3, 4, 12);
        let mut p = SsmParams::init(&mut rng, d, n);
        p.a_log = Tensor::full(&[d, n], 12.0);
        let x = Tensor::from_fn(&[d, len], |_| rng.range(-1.0, 1.0));
        let y = scan_parallel(&p, &x).unwrap();

        let xt = x.swap_last2().unwrap();
        let (delta, b, c) = p.project(&xt).unwrap();
        for t in 0..len {
            for i in 0..d {
                // y_n[i] = <C_n, B̄x_n[i,:]> when Ā = 0.
                let mut want = 0.0;
                for j in 0..n {
                    want += c.data()[t * n + j]
                        * delta.data()[t * d + i]
                        * b.data()[t * n + j]
                        * xt.data()[t * d + i];
                }
                let got = y.data()[i * len + t];
                assert!((got - want).abs() < 1e-12, "t={t} i={i}");
            }
        }
    }

    #[test]
    fn parallel_matches_sequential_over_lengths() {
        let mut rng = Rng::new(9);
        for &len in &[2usize, 3, 7, 64, 1000] {
            let (d, n) = (6, 8);
            let p = SsmParams::init(&mut rng, d, n);
            let x = Tensor::from_fn(&[d, len], |_| rng.range(-1.0, 1.0));
            let par = scan_parallel(&p, &x).unwrap();
            let mut state = SsmState::new(&p);
            let seq = scan_sequential(&p, &x, &mut state).unwrap();
            let mut max_rel = 0.0f64;
            for (a, b) in par.data().iter().zip(seq.data()) {
                max_rel = max_rel.max((a - b).abs() / b.abs().max(1e-10));
            }
            assert!(max_rel < 1e-10, "len={len}: {max_rel}");
        }
    }

    #[test]
    fn chunked_is_bit_exact_with_unchunked() {
        let mut rng = Rng::new(10);
        let (d, n, len) = (5, 7, 256);
        let p = SsmParams::init(&mut rng, d, n);
        let x = Tensor::from_fn(&[d, len], |_| rng.range(-1.0, 1.0));
        let mut full_state = SsmState::new(&p);
        let full = scan_sequential(&p, &x, &mut full_state).unwrap();

        // A few random partitions, plus the degenerate single-chunk and
        // per-step partitions.
        let mut partitions: Vec<Vec<usize>> = vec![vec![len], vec![1; len]];
        for _ in 0..4 {
            let mut sizes = Vec::new();
            let mut left = len;
            while left > 0 {
                let take = 1 + rng.below(left.min(40));
                sizes.push(take);
                left -= take;
            }
            partitions.push(sizes);
        }
        for sizes in partitions {
            let mut chunks = Vec::new();
            let mut off = 0;
            for &sz in &sizes {
                let mut chunk = vec![0.0; d * sz];
                for i in 0..d {
                    for t in 0..sz {
                        chunk[i * sz + t] = x.data()[i * len + off + t];
                    }
                }
                chunks.push(Tensor::from_vec(chunk, &[d, sz]).unwrap());
                off += sz;
            }
            let mut state = SsmState::new(&p);
            let outs = scan_chunked(&p, chunks, &mut state).unwrap();
            let mut off = 0;
            for (ci, out) in outs.iter().enumerate() {
                let sz = sizes[ci];
                for i in 0..d {
                    for t in 0..sz {
                        let got = out.data()[i * sz + t];
                        let want = full.data()[i * len + off + t];
                        assert_eq!(got.to_bits(), want.to_bits(), "chunk {ci}");
                    }
                }
                off += sz;
            }
            for (a, b) in state.h.data().iter().zip(full_state.h.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn state_stays_bounded_over_long_streams() {
        let mut rng = Rng::new(11);
        let (d, n) = (4, 4);
        let p = SsmParams::init(&mut rng, d, n);
        let mut state = SsmState::new(&p);
        let chunk_len = 1000;
        let mut max_abar = 0.0f64;
        let mut max_bx = 0.0f64;
        // Track the worst-case discretized quantities as we stream.
        for _ in 0..100 {
            let x = Tensor::from_fn(&[d, chunk_len], |_| rng.range(-1.0, 1.0));
            let xt = x.swap_last2().unwrap();
            let (delta, b, _c) = p.project(&xt).unwrap();
            let a = p.a();
            for t in 0..chunk_len {
                for i in 0..d {
                    for j in 0..n {
                        let abar = (delta.data()[t * d + i] * a.data()[i * n + j]).exp();
                        let bx = delta.data()[t * d + i]
                            * b.data()[t * n + j]
                            * xt.data()[t * d + i];
                        max_abar = max_abar.max(abar);
                        max_bx = max_bx.max(bx.abs());
                    }
                }
            }
            scan_sequential(&p, &x, &mut state).unwrap();
        }
        assert_eq!(state.n_processed, 100_000);
        assert!(max_abar < 1.0);
        let bound = max_bx / (1.0 - max_abar);
        for &h in state.h.data() {
            assert!(h.is_finite());
            assert!(h.abs() <= bound * (1.0 + 1e-12), "|h|={} bound={}", h.abs(), bound);
        }
    }

    #[test]
    fn input_permutation_always_changes_output() {
        // Selectivity: the SSM is input-dependent, not a fixed LTI filter.
        let mut rng = Rng::new(12);
        let (d, n, len) = (4, 6, 24);
        let mut unchanged = 0;
        for trial in 0..50 {
            let p = SsmParams::init(&mut rng, d, n);
            let x = Tensor::from_fn(&[d, len], |_| rng.range(-1.0, 1.0));
            // Random non-identity permutation of time steps.
            let mut perm: Vec<usize> = (0..len).collect();
            for i in (1..len).rev() {
                let j = rng.below(i + 1);
                perm.swap(i, j);
            }
            if perm.iter().enumerate().all(|(i, &pi)| i == pi) {
                perm.swap(0, 1);
            }
            let xp = Tensor::from_fn(&[d, len], |idx| {
                let (i, t) = (idx / len, idx % len);
                x.data()[i * len + perm[t]]
            });
            let mut s1 = SsmState::new(&p);
            let mut s2 = SsmState::new(&p);
            let y1 = scan_sequential(&p, &x, &mut s1).unwrap();
            let y2 = scan_sequential(&p, &xp, &mut s2).unwrap();
            // Compare the permuted output against the output of the permuted
            // input; an LTI filter bank would not commute either, so the
            // meaningful check is simply that outputs differ somewhere.
            let identical = y1
                .data()
                .iter()
                .zip(y2.data())
                .all(|(a, b)| (a - b).abs() < 1e-15);
            if identical {
                unchanged += 1;
            }
            let _ = trial;
        }
        assert_eq!(unchanged, 0);
    }

    #[test]
    fn f32_parallel_agrees_with_f32_sequential() {
        let mut rng = Rng::new(13);
        let (d, n, len) = (8, 8, 300);
        let p = SsmParams::init(&mut rng, d, n);
        let x = Tensor::from_fn(&[d, len], |_| rng.range(-1.0, 1.0));
        let xt = x.swap_last2().unwrap();
        let (delta, b, c) = p.project(&xt).unwrap();
        let a = p.a();
        let mut abar32 = vec![0.0f32; len * d * n];
        let mut bx32 = vec![0.0f32; len * d * n];
        for t in 0..len {
            for i in 0..d {
                for j in 0..n {
                    let abar = (delta.data()[t * d + i] * a.data()[i * n + j]).exp();
                    abar32[(t * d + i) * n + j] = abar as f32;
                    bx32[(t * d + i) * n + j] =
                        (delta.data()[t * d + i] * b.data()[t * n + j] * xt.data()[t * d + i])
                            as f32;
                }
            }
        }
        let c32: Vec<f32> = c.data().iter().map(|&v| v as f32).collect();
        let seq = scan_pairs_sequential(&abar32, &bx32, &c32, len, d, n);
        let par = scan_pairs_parallel(&abar32, &bx32, &c32, len, d, n);
        for (s, p) in seq.iter().zip(&par) {
            let rel = (s - p).abs() / s.abs().max(1e-3);
            assert!(rel < 1e-4, "{s} vs {p}");
        }
    }
}
