//! Thread-local gradient tape for reverse-mode autodiff.
//!
//! One tape per training worker: [`GradientTape::new`] activates recording on
//! the current thread, every op appends a node, and [`GradientTape::backward`]
//! replays the nodes in exact reverse append order. The tape is consumed by
//! `backward`, so a second backward without re-recording is unrepresentable;
//! replaying a stale loss against a fresh tape is a runtime error.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::kernels;
use super::{Tensor, TensorError};

/// Handle of a recorded node: tape generation plus node index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeRef {
    pub(crate) gen: u64,
    pub(crate) index: usize,
}

pub(crate) struct Input {
    pub node: Option<usize>,
    pub value: Tensor,
}

#[derive(Clone, Copy)]
pub(crate) struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub d_inner: usize,
    pub d_state: usize,
}

pub(crate) enum Op {
    Leaf,
    Matmul { a: Input, b: Input },
    Conv1d { x: Input, w: Input, b: Input },
    Add { a: Input, b: Input },
    Sub { a: Input, b: Input },
    Mul { a: Input, b: Input },
    Scale { x: Input, c: f64 },
    AddBias { x: Input, b: Input },
    Silu { x: Input },
    Relu { x: Input },
    Softplus { x: Input },
    Exp { x: Input, out: Tensor },
    Abs { x: Input },
    Magnitude { re: Input, im: Input, out: Tensor },
    Sum { x: Input },
    Mean { x: Input },
    Reshape { x: Input },
    SwapLast2 { x: Input },
    SwapAxes01 { x: Input },
    Flip { x: Input, axis: usize },
    ConcatLast { parts: Vec<Input> },
    SliceLast { x: Input, start: usize, len: usize },
    SelectiveScan {
        x: Input,
        delta: Input,
        b: Input,
        c: Input,
        a: Input,
        h_hist: Vec<f64>,
        abar_hist: Vec<f64>,
        dims: ScanDims,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    is_leaf: bool,
}

struct TapeState {
    gen: u64,
    nodes: Vec<Node>,
}

thread_local! {
    static ACTIVE: RefCell<Option<TapeState>> = const { RefCell::new(None) };
}

static NEXT_GEN: AtomicU64 = AtomicU64::new(1);

/// Recording guard. While alive, ops on tracked tensors append nodes to the
/// thread-local tape.
pub struct GradientTape {
    gen: u64,
    consumed: bool,
}

impl GradientTape {
    pub fn new() -> Result<GradientTape, TensorError> {
        ACTIVE.with(|a| {
            let mut slot = a.borrow_mut();
            if slot.is_some() {
                return Err(TensorError::TapeAlreadyActive);
            }
            let gen = NEXT_GEN.fetch_add(1, Ordering::Relaxed);
            *slot = Some(TapeState {
                gen,
                nodes: Vec::new(),
            });
            Ok(GradientTape {
                gen,
                consumed: false,
            })
        })
    }

    /// True if a tape is recording on this thread.
    pub fn is_active() -> bool {
        ACTIVE.with(|a| a.borrow().is_some())
    }

    /// Register `t` as a differentiable leaf (requires-grad).
    pub fn watch(&self, t: &mut Tensor) {
        let r = ACTIVE.with(|a| {
            let mut slot = a.borrow_mut();
            let state = slot.as_mut().expect("tape guard alive but no active tape");
            debug_assert_eq!(state.gen, self.gen);
            let index = state.nodes.len();
            state.nodes.push(Node {
                op: Op::Leaf,
                shape: t.shape().to_vec(),
                is_leaf: true,
            });
            TapeRef {
                gen: state.gen,
                index,
            }
        });
        t.set_tape_ref(Some(r));
    }

    /// Reverse pass from a scalar loss. Consumes the tape; every watched leaf
    /// ends up with a gradient of its own shape (zeros if no path reached it).
    pub fn backward(mut self, loss: &Tensor) -> Result<Gradients, TensorError> {
        self.consumed = true;
        let state = ACTIVE
            .with(|a| a.borrow_mut().take())
            .expect("tape guard alive but no active tape");

        let loss_idx = match loss.tape_ref() {
            Some(r) if r.gen == state.gen => r.index,
            _ => return Err(TensorError::LossNotOnTape),
        };
        if !loss.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }

        let n = state.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss_idx] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let dy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &state.nodes[idx];
            if node.is_leaf {
                grads[idx] = Some(dy);
                continue;
            }
            backward_op(&node.op, &dy, &mut grads);
        }

        let mut out: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        for (idx, node) in state.nodes.iter().enumerate() {
            if node.is_leaf {
                let data = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.shape.iter().product()]);
                out[idx] = Some(Tensor::from_vec(data, &node.shape).expect("leaf grad shape"));
            }
        }
        Ok(Gradients {
            gen: state.gen,
            grads: out,
        })
    }
}

impl Drop for GradientTape {
    fn drop(&mut self) {
        if !self.consumed {
            ACTIVE.with(|a| {
                let mut slot = a.borrow_mut();
                if slot.as_ref().map(|s| s.gen) == Some(self.gen) {
                    *slot = None;
                }
            });
        }
    }
}

/// Leaf gradients produced by [`GradientTape::backward`].
#[derive(Debug)]
pub struct Gradients {
    gen: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a watched leaf, looked up through the tensor's tape handle.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        match t.tape_ref() {
            Some(r) if r.gen == self.gen => self.grads.get(r.index)?.as_ref(),
            _ => None,
        }
    }
}

/// Resolve a tensor into a recorded input: the node index is kept only when it
/// belongs to the currently active tape (stale handles degrade to constants).
pub(crate) fn resolve(t: &Tensor) -> Input {
    let node = ACTIVE.with(|a| match (a.borrow().as_ref(), t.tape_ref()) {
        (Some(state), Some(r)) if r.gen == state.gen => Some(r.index),
        _ => None,
    });
    Input {
        node,
        value: t.detach(),
    }
}

/// Append a node for `op` if a tape is active and any input is tracked;
/// returns the output tensor tagged with its node handle.
pub(crate) fn record(op: Op, tracked: bool, out: Tensor) -> Tensor {
    if !tracked {
        return out;
    }
    ACTIVE.with(|a| {
        let mut slot = a.borrow_mut();
        match slot.as_mut() {
            Some(state) => {
                let index = state.nodes.len();
                state.nodes.push(Node {
                    shape: out.shape().to_vec(),
                    op,
                    is_leaf: false,
                });
                let gen = state.gen;
                out.with_node(Some(TapeRef { gen, index }))
            }
            None => out,
        }
    })
}

fn accumulate(grads: &mut [Option<Vec<f64>>], input: &Input, contribution: &[f64]) {
    let Some(idx) = input.node else { return };
    match &mut grads[idx] {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => grads[idx] = Some(contribution.to_vec()),
    }
}

fn backward_op(op: &Op, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (batch, m, k, n) = kernels::matmul_dims(a.value.shape(), b.value.shape());
            if a.node.is_some() {
                let mut da = vec![0.0; a.value.numel()];
                kernels::matmul_dy_bt(dy, b.value.data(), batch, m, k, n, &mut da);
                accumulate(grads, a, &da);
            }
            if b.node.is_some() {
                let mut db = vec![0.0; b.value.numel()];
                kernels::matmul_at_dy(a.value.data(), dy, batch, m, k, n, &mut db);
                accumulate(grads, b, &db);
            }
        }
        Op::Conv1d { x, w, b } => {
            let xs = x.value.shape();
            let (d, len) = (xs[xs.len() - 2], xs[xs.len() - 1]);
            let batch = x.value.numel() / (d * len);
            let kw = w.value.shape()[1];
            if x.node.is_some() {
                let mut dx = vec![0.0; x.value.numel()];
                kernels::conv1d_dx(dy, w.value.data(), batch, d, len, kw, &mut dx);
                accumulate(grads, x, &dx);
            }
            if w.node.is_some() {
                let mut dw = vec![0.0; w.value.numel()];
                kernels::conv1d_dw(dy, x.value.data(), batch, d, len, kw, &mut dw);
                accumulate(grads, w, &dw);
            }
            if b.node.is_some() {
                let mut db = vec![0.0; d];
                for bi in 0..batch {
                    for ci in 0..d {
                        let base = (bi * d + ci) * len;
                        db[ci] += dy[base..base + len].iter().sum::<f64>();
                    }
                }
                accumulate(grads, b, &db);
            }
        }
        Op::Add { a, b } => {
            accumulate(grads, a, dy);
            accumulate(grads, b, dy);
        }
        Op::Sub { a, b } => {
            accumulate(grads, a, dy);
            if b.node.is_some() {
                let neg: Vec<f64> = dy.iter().map(|v| -v).collect();
                accumulate(grads, b, &neg);
            }
        }
        Op::Mul { a, b } => {
            if a.node.is_some() {
                let da: Vec<f64> = dy
                    .iter()
                    .zip(b.value.data())
                    .map(|(g, bv)| g * bv)
                    .collect();
                accumulate(grads, a, &da);
            }
            if b.node.is_some() {
                let db: Vec<f64> = dy
                    .iter()
                    .zip(a.value.data())
                    .map(|(g, av)| g * av)
                    .collect();
                accumulate(grads, b, &db);
            }
        }
        Op::Scale { x, c } => {
            if x.node.is_some() {
                let dx: Vec<f64> = dy.iter().map(|g| g * c).collect();
                accumulate(grads, x, &dx);
            }
        }
        Op::AddBias { x, b } => {
            accumulate(grads, x, dy);
            if b.node.is_some() {
                let d = b.value.numel();
                let mut db = vec![0.0; d];
                for (i, g) in dy.iter().enumerate() {
                    db[i % d] += g;
                }
                accumulate(grads, b, &db);
            }
        }
        Op::Silu { x } => {
            if x.node.is_some() {
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(x.value.data())
                    .map(|(g, &v)| {
                        let s = kernels::sigmoid(v);
                        g * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, x, &dx);
            }
        }
        Op::Relu { x } => {
            if x.node.is_some() {
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(x.value.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, x, &dx);
            }
        }
        Op::Softplus { x } => {
            if x.node.is_some() {
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(x.value.data())
                    .map(|(g, &v)| g * kernels::sigmoid(v))
                    .collect();
                accumulate(grads, x, &dx);
            }
        }
        Op::Exp { x, out } => {
            if x.node.is_some() {
                let dx: Vec<f64> = dy.iter().zip(out.data()).map(|(g, o)| g * o).collect();
                accumulate(grads, x, &dx);
            }
        }
        Op::Abs { x } => {
            if x.node.is_some() {
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(x.value.data())
                    .map(|(g, &v)| {
                        if v > 0.0 {
                            *g
                        } else if v < 0.0 {
                            -*g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, x, &dx);
            }
        }
        Op::Magnitude { re, im, out } => {
            let denom: Vec<f64> = out.data().iter().map(|&m| m.max(1e-300)).collect();
            if re.node.is_some() {
                let dr: Vec<f64> = dy
                    .iter()
                    .zip(re.value.data())
                    .zip(&denom)
                    .map(|((g, &r), m)| g * r / m)
                    .collect();
                accumulate(grads, re, &dr);
            }
            if im.node.is_some() {
                let di: Vec<f64> = dy
                    .iter()
                    .zip(im.value.data())
                    .zip(&denom)
                    .map(|((g, &i), m)| g * i / m)
                    .collect();
                accumulate(grads, im, &di);
            }
        }
        Op::Sum { x } => {
            if x.node.is_some() {
                let dx = vec![dy[0]; x.value.numel()];
                accumulate(grads, x, &dx);
            }
        }
        Op::Mean { x } => {
            if x.node.is_some() {
                let scale = dy[0] / x.value.numel() as f64;
                let dx = vec![scale; x.value.numel()];
                accumulate(grads, x, &dx);
            }
        }
        Op::Reshape { x } => accumulate(grads, x, dy),
        Op::SwapLast2 { x } => {
            if x.node.is_some() {
                // dy has the swapped shape; swapping it back gives dx.
                let mut swapped_shape = x.value.shape().to_vec();
                let r = swapped_shape.len();
                swapped_shape.swap(r - 2, r - 1);
                let mut dx = vec![0.0; dy.len()];
                kernels::swap_last2(dy, &swapped_shape, &mut dx);
                accumulate(grads, x, &dx);
            }
        }
        Op::SwapAxes01 { x } => {
            if x.node.is_some() {
                let xs = x.value.shape();
                let swapped = [xs[1], xs[0], xs[2]];
                let mut dx = vec![0.0; dy.len()];
                kernels::swap_axes01(dy, &swapped, &mut dx);
                accumulate(grads, x, &dx);
            }
        }
        Op::Flip { x, axis } => {
            if x.node.is_some() {
                let mut dx = vec![0.0; dy.len()];
                kernels::flip(dy, x.value.shape(), *axis, &mut dx);
                accumulate(grads, x, &dx);
            }
        }
        Op::ConcatLast { parts } => {
            let widths: Vec<usize> = parts
                .iter()
                .map(|p| *p.value.shape().last().unwrap())
                .collect();
            let total: usize = widths.iter().sum();
            let rows = dy.len() / total;
            let mut offset = 0;
            for (part, w) in parts.iter().zip(&widths) {
                if part.node.is_some() {
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&dy[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, part, &dp);
                }
                offset += w;
            }
        }
        Op::SliceLast { x, start, len } => {
            if x.node.is_some() {
                let d = *x.value.shape().last().unwrap();
                let rows = x.value.numel() / d;
                let mut dx = vec![0.0; x.value.numel()];
                for r in 0..rows {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&dy[r * len..(r + 1) * len]);
                }
                accumulate(grads, x, &dx);
            }
        }
        Op::SelectiveScan {
            x,
            delta,
            b,
            c,
            a,
            h_hist,
            abar_hist,
            dims,
        } => {
            let g = kernels::selective_scan_backward(
                dy,
                x.value.data(),
                delta.value.data(),
                b.value.data(),
                c.value.data(),
                a.value.data(),
                h_hist,
                abar_hist,
                *dims,
            );
            accumulate(grads, x, &g.dx);
            accumulate(grads, delta, &g.ddelta);
            accumulate(grads, b, &g.db);
            accumulate(grads, c, &g.dc);
            accumulate(grads, a, &g.da);
        }
    }
}
