//! The core Mamba block and its two directional wrappers.
//!
//! Block:   Y' = SSM(SiLU(Conv(Linear(X)))) ⊙ SiLU(Linear(X)), Y = Linear(Y').
//! Uni:     causal wrapper, Y = Block(Proj(X)) + ResidualLinear(X).
//! Bi:      non-causal wrapper: project to twice the block width, run one
//!          block forward and one on the flipped sequence (each on its half),
//!          concatenate, add the learnable linear residual, combine.
//!
//! Sequences are `[L, d]` or batched `[B, L, d]`. Streaming state (conv tail
//! plus SSM hidden state) makes chunked Uni processing bit-exact with the
//! full-sequence pass.

use crate::rng::Rng;
use crate::ssm::SsmParams;
use crate::tensor::ops::{conv1d_causal_streaming, selective_scan};
use crate::tensor::{Tensor, TensorError};

/// Dense layer storing weights as `[d_in, d_out]` (y = x W + b).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn init(rng: &mut Rng, d_in: usize, d_out: usize, bias: bool) -> Linear {
        Self::init_with_gain(rng, d_in, d_out, bias, 1.0)
    }

    pub fn init_with_gain(rng: &mut Rng, d_in: usize, d_out: usize, bias: bool, gain: f64) -> Linear {
        let bound = gain / (d_in as f64).sqrt();
        Linear {
            w: Tensor::rand_uniform(rng, &[d_in, d_out], bound),
            b: bias.then(|| Tensor::rand_uniform(rng, &[d_out], bound)),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Linear {
        Linear {
            w: Tensor::zeros(&[d_in, d_out]),
            b: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn identity(d: usize) -> Linear {
        Linear {
            w: Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 }),
            b: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let y = x.matmul(&self.w)?;
        match &self.b {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MambaBlockConfig {
    pub d_model: usize,
    pub expand: usize,
    pub d_conv: usize,
    pub d_state: usize,
}

impl MambaBlockConfig {
    /// Reference defaults: expand 2, conv kernel 4, 16 latent states.
    pub fn new(d_model: usize) -> MambaBlockConfig {
        MambaBlockConfig {
            d_model,
            expand: 2,
            d_conv: 4,
            d_state: 16,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }
}

/// Weights of one Mamba block. The in/out projections carry no bias; the
/// conv and the Δ projection do.
#[derive(Debug, Clone)]
pub struct MambaBlock {
    pub cfg: MambaBlockConfig,
    pub in_proj_main: Linear,
    pub in_proj_gate: Linear,
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub ssm: SsmParams,
    pub out_proj: Linear,
}

/// Per-stream state of one block: the conv tail (last K-1 inputs per channel)
/// and the SSM hidden state, both batched over the stream lanes.
#[derive(Debug, Clone)]
pub struct MambaBlockState {
    pub conv_tail: Vec<f64>,
    pub h: Tensor,
}

impl MambaBlockState {
    pub fn len_elems(&self) -> usize {
        self.conv_tail.len() + self.h.numel()
    }
}

impl MambaBlock {
    pub fn init(rng: &mut Rng, cfg: MambaBlockConfig) -> MambaBlock {
        let d_inner = cfg.d_inner();
        let conv_bound = 1.0 / (cfg.d_conv as f64).sqrt();
        MambaBlock {
            in_proj_main: Linear::init(rng, cfg.d_model, d_inner, false),
            in_proj_gate: Linear::init(rng, cfg.d_model, d_inner, false),
            conv_w: Tensor::rand_uniform(rng, &[d_inner, cfg.d_conv], conv_bound),
            conv_b: Tensor::rand_uniform(rng, &[d_inner], conv_bound),
            ssm: SsmParams::init(rng, d_inner, cfg.d_state),
            out_proj: Linear::init(rng, d_inner, cfg.d_model, false),
            cfg,
        }
    }

    pub fn zeros(cfg: MambaBlockConfig) -> MambaBlock {
        let d_inner = cfg.d_inner();
        MambaBlock {
            in_proj_main: Linear::zeros(cfg.d_model, d_inner, false),
            in_proj_gate: Linear::zeros(cfg.d_model, d_inner, false),
            conv_w: Tensor::zeros(&[d_inner, cfg.d_conv]),
            conv_b: Tensor::zeros(&[d_inner]),
            ssm: SsmParams::zeros(d_inner, cfg.d_state),
            out_proj: Linear::zeros(d_inner, cfg.d_model, false),
            cfg,
        }
    }

    pub fn fresh_state(&self, batch: usize) -> MambaBlockState {
        let d_inner = self.cfg.d_inner();
        let h = if batch == 1 {
            Tensor::zeros(&[d_inner, self.cfg.d_state])
        } else {
            Tensor::zeros(&[batch, d_inner, self.cfg.d_state])
        };
        MambaBlockState {
            conv_tail: vec![0.0; batch * d_inner * (self.cfg.d_conv - 1)],
            h,
        }
    }

    /// Forward over `[.., L, d_model]`. With `state`, the pass is a bit-exact
    /// streaming continuation (and must not run under an active tape).
    pub fn forward(
        &self,
        x: &Tensor,
        state: Option<&mut MambaBlockState>,
    ) -> Result<Tensor, TensorError> {
        let main = self.in_proj_main.forward(x)?;
        let main_cl = main.swap_last2()?; // [.., d_inner, L]
        let conv = match &state {
            Some(_) => None,
            None => Some(main_cl.conv1d_causal(&self.conv_w, &self.conv_b)?),
        };
        match state {
            Some(st) => {
                let conv = conv1d_causal_streaming(
                    &main_cl,
                    &self.conv_w,
                    &self.conv_b,
                    &mut st.conv_tail,
                )?;
                let act = conv.swap_last2()?.silu();
                let (delta, b, c) = self.ssm.project(&act)?;
                let (y, h_final) =
                    selective_scan(&act, &delta, &b, &c, &self.ssm.a(), Some(&st.h))?;
                st.h = h_final;
                let gate = self.in_proj_gate.forward(x)?.silu();
                self.out_proj.forward(&y.mul(&gate)?)
            }
            None => {
                let act = conv.expect("batch path").swap_last2()?.silu();
                let (delta, b, c) = self.ssm.project(&act)?;
                let (y, _) = selective_scan(&act, &delta, &b, &c, &self.ssm.a(), None)?;
                let gate = self.in_proj_gate.forward(x)?.silu();
                self.out_proj.forward(&y.mul(&gate)?)
            }
        }
    }

    pub fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.in_main.w"), self.in_proj_main.w.clone()));
        out.push((format!("{prefix}.in_gate.w"), self.in_proj_gate.w.clone()));
        out.push((format!("{prefix}.conv.w"), self.conv_w.clone()));
        out.push((format!("{prefix}.conv.b"), self.conv_b.clone()));
        out.push((format!("{prefix}.ssm.a_log"), self.ssm.a_log.clone()));
        out.push((format!("{prefix}.ssm.w_b"), self.ssm.w_b.clone()));
        out.push((format!("{prefix}.ssm.w_c"), self.ssm.w_c.clone()));
        out.push((format!("{prefix}.ssm.dt_down"), self.ssm.w_dt_down.clone()));
        out.push((format!("{prefix}.ssm.dt_up"), self.ssm.w_dt_up.clone()));
        out.push((format!("{prefix}.ssm.dt_bias"), self.ssm.dt_bias.clone()));
        out.push((format!("{prefix}.out.w"), self.out_proj.w.clone()));
    }

    pub fn named_tensors_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        out.push((format!("{prefix}.in_main.w"), &mut self.in_proj_main.w));
        out.push((format!("{prefix}.in_gate.w"), &mut self.in_proj_gate.w));
        out.push((format!("{prefix}.conv.w"), &mut self.conv_w));
        out.push((format!("{prefix}.conv.b"), &mut self.conv_b));
        out.push((format!("{prefix}.ssm.a_log"), &mut self.ssm.a_log));
        out.push((format!("{prefix}.ssm.w_b"), &mut self.ssm.w_b));
        out.push((format!("{prefix}.ssm.w_c"), &mut self.ssm.w_c));
        out.push((format!("{prefix}.ssm.dt_down"), &mut self.ssm.w_dt_down));
        out.push((format!("{prefix}.ssm.dt_up"), &mut self.ssm.w_dt_up));
        out.push((format!("{prefix}.ssm.dt_bias"), &mut self.ssm.dt_bias));
        out.push((format!("{prefix}.out.w"), &mut self.out_proj.w));
    }
}

/// Causal directional wrapper: Y = Block(Proj(X)) + ResidualLinear(X).
/// The learnable residual doubles as the dimension adapter when d_in != d_out.
#[derive(Debug, Clone)]
pub struct UniMamba {
    pub d_in: usize,
    pub d_out: usize,
    pub proj_in: Linear,
    pub residual: Linear,
    pub block: MambaBlock,
}

impl UniMamba {
    pub fn init(rng: &mut Rng, d_in: usize, d_out: usize) -> UniMamba {
        Self::init_cfg(rng, d_in, MambaBlockConfig::new(d_out))
    }

    /// `cfg.d_model` is the wrapper width (the block runs at it).
    pub fn init_cfg(rng: &mut Rng, d_in: usize, cfg: MambaBlockConfig) -> UniMamba {
        let d_out = cfg.d_model;
        UniMamba {
            d_in,
            d_out,
            proj_in: Linear::init(rng, d_in, d_out, true),
            residual: Linear::init(rng, d_in, d_out, true),
            block: MambaBlock::init(rng, cfg),
        }
    }

    pub fn fresh_state(&self, batch: usize) -> MambaBlockState {
        self.block.fresh_state(batch)
    }

    pub fn forward(
        &self,
        x: &Tensor,
        state: Option<&mut MambaBlockState>,
    ) -> Result<Tensor, TensorError> {
        let inner = self.proj_in.forward(x)?;
        let y = self.block.forward(&inner, state)?;
        y.add(&self.residual.forward(x)?)
    }

    pub fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.proj.w"), self.proj_in.w.clone()));
        out.push((format!("{prefix}.proj.b"), self.proj_in.b.clone().unwrap()));
        out.push((format!("{prefix}.res.w"), self.residual.w.clone()));
        out.push((format!("{prefix}.res.b"), self.residual.b.clone().unwrap()));
        self.block.named_tensors(&format!("{prefix}.block"), out);
    }

    pub fn named_tensors_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        out.push((format!("{prefix}.proj.w"), &mut self.proj_in.w));
        out.push((format!("{prefix}.proj.b"), self.proj_in.b.as_mut().unwrap()));
        out.push((format!("{prefix}.res.w"), &mut self.residual.w));
        out.push((format!("{prefix}.res.b"), self.residual.b.as_mut().unwrap()));
        self.block.named_tensors_mut(&format!("{prefix}.block"), out);
    }
}

/// Non-causal directional wrapper. The input is projected to twice the block
/// width; the forward block consumes the first half, the backward block the
/// flipped second half; their outputs are concatenated, the learnable linear
/// residual (at the doubled width) is added, and a final linear maps back to
/// d_out.
#[derive(Debug, Clone)]
pub struct BiMamba {
    pub d_in: usize,
    pub d_out: usize,
    pub proj_in: Linear,
    pub residual: Linear,
    pub fwd: MambaBlock,
    pub bwd: MambaBlock,
    pub combine: Linear,
}

impl BiMamba {
    pub fn init(rng: &mut Rng, d_in: usize, d_out: usize) -> BiMamba {
        Self::init_cfg(rng, d_in, MambaBlockConfig::new(d_out))
    }

    /// `cfg.d_model` is the wrapper width; the input projection targets twice
    /// it, one half per direction.
    pub fn init_cfg(rng: &mut Rng, d_in: usize, cfg: MambaBlockConfig) -> BiMamba {
        let d_out = cfg.d_model;
        BiMamba {
            d_in,
            d_out,
            proj_in: Linear::init(rng, d_in, 2 * d_out, true),
            residual: Linear::init(rng, d_in, 2 * d_out, true),
            fwd: MambaBlock::init(rng, cfg),
            bwd: MambaBlock::init(rng, cfg),
            combine: Linear::init(rng, 2 * d_out, d_out, true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let p = self.proj_in.forward(x)?; // [.., L, 2H]
        let h = self.d_out;
        let p_fwd = p.slice_last(0, h)?;
        let p_bwd = p.slice_last(h, h)?;
        let axis = p.rank() - 2; // the sequence axis
        let y_fwd = self.fwd.forward(&p_fwd, None)?;
        let y_bwd = self
            .bwd
            .forward(&p_bwd.flip(axis)?, None)?
            .flip(axis)?;
        let cat = Tensor::concat_last(&[&y_fwd, &y_bwd])?;
        let with_res = cat.add(&self.residual.forward(x)?)?;
        self.combine.forward(&with_res)
    }

    pub fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.proj.w"), self.proj_in.w.clone()));
        out.push((format!("{prefix}.proj.b"), self.proj_in.b.clone().unwrap()));
        out.push((format!("{prefix}.res.w"), self.residual.w.clone()));
        out.push((format!("{prefix}.res.b"), self.residual.b.clone().unwrap()));
        self.fwd.named_tensors(&format!("{prefix}.fwd"), out);
        self.bwd.named_tensors(&format!("{prefix}.bwd"), out);
        out.push((format!("{prefix}.comb.w"), self.combine.w.clone()));
        out.push((format!("{prefix}.comb.b"), self.combine.b.clone().unwrap()));
    }

    pub fn named_tensors_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        out.push((format!("{prefix}.proj.w"), &mut self.proj_in.w));
        out.push((format!("{prefix}.proj.b"), self.proj_in.b.as_mut().unwrap()));
        out.push((format!("{prefix}.res.w"), &mut self.residual.w));
        out.push((format!("{prefix}.res.b"), self.residual.b.as_mut().unwrap()));
        self.fwd.named_tensors_mut(&format!("{prefix}.fwd"), out);
        self.bwd.named_tensors_mut(&format!("{prefix}.bwd"), out);
        out.push((format!("{prefix}.comb.w"), &mut self.combine.w));
        out.push((format!("{prefix}.comb.b"), self.combine.b.as_mut().unwrap()));
    }
}

/// Either directional wrapper, chosen by the causality of the surrounding
/// stage.
#[derive(Debug, Clone)]
pub enum DirectionalMamba {
    Uni(UniMamba),
    Bi(BiMamba),
}

impl DirectionalMamba {
    pub fn init(rng: &mut Rng, causal: bool, d_in: usize, d_out: usize) -> DirectionalMamba {
        Self::init_cfg(rng, causal, d_in, MambaBlockConfig::new(d_out))
    }

    pub fn init_cfg(
        rng: &mut Rng,
        causal: bool,
        d_in: usize,
        cfg: MambaBlockConfig,
    ) -> DirectionalMamba {
        if causal {
            DirectionalMamba::Uni(UniMamba::init_cfg(rng, d_in, cfg))
        } else {
            DirectionalMamba::Bi(BiMamba::init_cfg(rng, d_in, cfg))
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            DirectionalMamba::Uni(u) => u.d_out,
            DirectionalMamba::Bi(b) => b.d_out,
        }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        state: Option<&mut MambaBlockState>,
    ) -> Result<Tensor, TensorError> {
        match self {
            DirectionalMamba::Uni(u) => u.forward(x, state),
            DirectionalMamba::Bi(b) => {
                if state.is_some() {
                    return Err(TensorError::InvalidShape {
                        op: "bi_mamba",
                        detail: "stream state supplied to a non-causal wrapper".into(),
                    });
                }
                b.forward(x)
            }
        }
    }

    pub fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        match self {
            DirectionalMamba::Uni(u) => u.named_tensors(&format!("{prefix}.uni"), out),
            DirectionalMamba::Bi(b) => b.named_tensors(&format!("{prefix}.bi"), out),
        }
    }

    pub fn named_tensors_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        match self {
            DirectionalMamba::Uni(u) => u.named_tensors_mut(&format!("{prefix}.uni"), out),
            DirectionalMamba::Bi(b) => b.named_tensors_mut(&format!("{prefix}.bi"), out),
        }
    }
}
