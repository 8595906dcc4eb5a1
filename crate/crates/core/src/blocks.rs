//! The stabilized transformer block.
//!
//! ```text
//! h   = x + RMSNorm(MHA(InputLN(x)))
//! out = h + MLP(InputLN₂(h))
//! ```
//!
//! MHA normalizes queries and keys per head before the scaled dot product.
//! Each normalization can be switched off independently for ablations, in
//! which case it is replaced by the identity.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora::{lora_forward, AttnProj, LoraConfig, LoraLinear};
use crate::params::{Bindings, ParamGroup, ParamId, ParamStore};
use crate::tensor::{SeededRng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub use_input_layernorm: bool,
    pub use_rms_postnorm: bool,
    pub use_qk_norm: bool,
    pub use_lora: bool,
    pub eps_ln: f64,
    pub eps_rms: f64,
    /// Learnable per-channel gain on the post-attention RMSNorm. Off by
    /// default: the normalization is a pure rescaling.
    pub rms_gain: bool,
    pub lora: LoraConfig,
    /// Standard deviation for Gaussian weight initialization.
    pub init_std: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            d_mlp: 512,
            ..BlockConfig::new(128, 4)
        }
    }
}

impl BlockConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Self {
        BlockConfig {
            d_model,
            n_heads,
            d_mlp: 4 * d_model,
            use_input_layernorm: true,
            use_rms_postnorm: true,
            use_qk_norm: true,
            use_lora: true,
            eps_ln: 1e-5,
            eps_rms: 1e-6,
            rms_gain: false,
            lora: LoraConfig::default(),
            init_std: 0.02,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: String| Err(Error::config(f, m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_mlp == 0 {
            return bad("d_model", "d_model, n_heads and d_mlp must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(
                "n_heads",
                format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads),
            );
        }
        if !(self.eps_ln > 0.0) {
            return bad("eps_ln", format!("must be > 0, got {}", self.eps_ln));
        }
        if !(self.eps_rms > 0.0) {
            return bad("eps_rms", format!("must be > 0, got {}", self.eps_rms));
        }
        if self.use_lora {
            if self.lora.rank == 0 || self.lora.rank > self.d_model {
                return bad("lora.rank", format!("must be in 1..={}", self.d_model));
            }
            if !(self.lora.alpha >= 0.0) {
                return bad("lora.alpha", "must be non-negative".into());
            }
        }
        Ok(())
    }
}

/// LayerNorm affine pair.
#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    fn new(store: &mut ParamStore, prefix: &str, shape: Vec<usize>) -> Self {
        NormParams {
            gamma: store.add(format!("{prefix}.gamma"), ParamGroup::Norms, Tensor::ones(shape.clone())),
            beta: store.add(format!("{prefix}.beta"), ParamGroup::Norms, Tensor::zeros(shape)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1: Option<NormParams>,
    pub ln2: Option<NormParams>,
    pub w_q: LoraLinear,
    pub w_k: LoraLinear,
    pub w_v: LoraLinear,
    pub w_o: LoraLinear,
    /// Per-head `[n_heads, d_head]` normalization of queries and keys.
    pub q_norm: Option<NormParams>,
    pub k_norm: Option<NormParams>,
    pub rms_gain: Option<ParamId>,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

impl BlockParams {
    /// Registers one block's parameters under `prefix`. Weights are Gaussian
    /// with `cfg.init_std`, biases zero, norm gains one and shifts zero.
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let std = cfg.init_std;
        let shape_qk = vec![cfg.n_heads, cfg.d_head()];

        let ln1 = cfg
            .use_input_layernorm
            .then(|| NormParams::new(store, &format!("{prefix}.ln1"), vec![d]));
        let proj = |store: &mut ParamStore, which: AttnProj, rng: &mut SeededRng| -> Result<LoraLinear> {
            let name = format!("{prefix}.attn.{which}");
            let base = store.add(
                format!("{name}.base"),
                ParamGroup::Attention,
                Tensor::randn(vec![d, d], std, rng),
            );
            if cfg.use_lora && cfg.lora.targets.contains(&which) {
                LoraLinear::attach(store, base, &name, cfg.lora.rank, cfg.lora.alpha, cfg.lora.init_std, rng)
            } else {
                LoraLinear::plain(store, base)
            }
        };
        let w_q = proj(store, AttnProj::Q, rng)?;
        let w_k = proj(store, AttnProj::K, rng)?;
        let w_v = proj(store, AttnProj::V, rng)?;
        let w_o = proj(store, AttnProj::O, rng)?;
        let (q_norm, k_norm) = if cfg.use_qk_norm {
            (
                Some(NormParams::new(store, &format!("{prefix}.attn.q_norm"), shape_qk.clone())),
                Some(NormParams::new(store, &format!("{prefix}.attn.k_norm"), shape_qk)),
            )
        } else {
            (None, None)
        };
        let rms_gain = (cfg.use_rms_postnorm && cfg.rms_gain)
            .then(|| store.add(format!("{prefix}.rms.gain"), ParamGroup::Norms, Tensor::ones(vec![d])));
        let ln2 = cfg
            .use_input_layernorm
            .then(|| NormParams::new(store, &format!("{prefix}.ln2"), vec![d]));
        let mlp_w1 = store.add(
            format!("{prefix}.mlp.w1"),
            ParamGroup::Mlp,
            Tensor::randn(vec![cfg.d_mlp, d], std, rng),
        );
        let mlp_b1 = store.add(format!("{prefix}.mlp.b1"), ParamGroup::Mlp, Tensor::zeros(vec![cfg.d_mlp]));
        let mlp_w2 = store.add(
            format!("{prefix}.mlp.w2"),
            ParamGroup::Mlp,
            Tensor::randn(vec![d, cfg.d_mlp], std, rng),
        );
        let mlp_b2 = store.add(format!("{prefix}.mlp.b2"), ParamGroup::Mlp, Tensor::zeros(vec![d]));
        Ok(BlockParams {
            ln1,
            ln2,
            w_q,
            w_k,
            w_v,
            w_o,
            q_norm,
            k_norm,
            rms_gain,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
        })
    }

    pub fn projections(&self) -> [&LoraLinear; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }
}

/// `γ·(x − μ)/√(σ² + eps) + β` over the last axis, with population
/// variance. `γ` and `β` broadcast as a suffix of `x`'s shape.
pub fn input_layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let mu = tape.mean_last(x);
    let centered = tape.sub(x, mu)?;
    let var = tape.var_last(x);
    let var_eps = tape.add_scalar(var, eps);
    let denom = tape.sqrt(var_eps);
    let normed = tape.div(centered, denom)?;
    let scaled = tape.mul(normed, gamma)?;
    tape.add(scaled, beta)
}

/// `x / √(mean(x²) + eps)` over the last axis. No learnable gain.
pub fn rms_norm(tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
    let sq = tape.square(x);
    let ms = tape.mean_last(sq);
    let ms_eps = tape.add_scalar(ms, eps);
    let denom = tape.sqrt(ms_eps);
    tape.div(x, denom)
}

/// Bound tape variables of one query/key normalization: `[heads, d_k]` each.
#[derive(Clone, Copy, Debug)]
pub struct QkNormVars {
    pub gamma_q: Var,
    pub beta_q: Var,
    pub gamma_k: Var,
    pub beta_k: Var,
    pub eps: f64,
}

/// Pre-softmax attention logits `LN(Q)·LN(K)ᵀ/√d_k` for `[heads, seq, d_k]`
/// inputs. Without `norm` this is the plain scaled dot product.
pub fn attention_logits(tape: &mut Tape, q: Var, k: Var, norm: Option<&QkNormVars>) -> Result<Var> {
    let shape = tape.shape(q).to_vec();
    if shape.len() != 3 || tape.shape(k) != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: shape,
            rhs: tape.shape(k).to_vec(),
        });
    }
    let d_k = shape[2];
    let (q, k) = match norm {
        Some(n) => {
            // LayerNorm parameters are [heads, d_k]; normalize in the
            // [seq, heads, d_k] layout so they broadcast as a suffix.
            let qs = tape.swap_axes01(q)?;
            let qs = input_layer_norm(tape, qs, n.gamma_q, n.beta_q, n.eps)?;
            let ks = tape.swap_axes01(k)?;
            let ks = input_layer_norm(tape, ks, n.gamma_k, n.beta_k, n.eps)?;
            (tape.swap_axes01(qs)?, tape.swap_axes01(ks)?)
        }
        None => (q, k),
    };
    let scores = tape.matmul_nt(q, k)?;
    Ok(tape.scale(scores, 1.0 / (d_k as f64).sqrt()))
}

/// `softmax(LN(Q)·LN(K)ᵀ/√d_k + mask)·V` over `[heads, seq, d_k]` tensors,
/// with a causal mask.
pub fn qk_norm_attention(tape: &mut Tape, q: Var, k: Var, v: Var, norm: Option<&QkNormVars>) -> Result<Var> {
    let shape = tape.shape(q).to_vec();
    if shape.len() != 3 || tape.shape(v) != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: shape,
            rhs: tape.shape(v).to_vec(),
        });
    }
    let logits = attention_logits(tape, q, k, norm)?;
    let probs = tape.softmax_causal(logits)?;
    tape.matmul(probs, v)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul_nt(x, w)?;
    tape.add(y, b)
}

/// One block over a `[seq, d_model]` sequence.
pub fn block_forward(tape: &mut Tape, bind: &Bindings, x: Var, cfg: &BlockConfig, p: &BlockParams) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_model {
        return Err(Error::ShapeMismatch {
            op: "block_forward",
            lhs: shape,
            rhs: vec![0, cfg.d_model],
        });
    }
    let seq = shape[0];
    let (h, dk) = (cfg.n_heads, cfg.d_head());

    let normed = match &p.ln1 {
        Some(n) => input_layer_norm(tape, x, bind[n.gamma], bind[n.beta], cfg.eps_ln)?,
        None => x,
    };

    let split = |tape: &mut Tape, t: Var| tape.reshape(t, &[seq, h, dk]);
    let q = lora_forward(tape, bind, normed, &p.w_q)?;
    let k = lora_forward(tape, bind, normed, &p.w_k)?;
    let v = lora_forward(tape, bind, normed, &p.w_v)?;
    let (mut q, mut k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
    if let (Some(qn), Some(kn)) = (&p.q_norm, &p.k_norm) {
        q = input_layer_norm(tape, q, bind[qn.gamma], bind[qn.beta], cfg.eps_ln)?;
        k = input_layer_norm(tape, k, bind[kn.gamma], bind[kn.beta], cfg.eps_ln)?;
    }
    let q = tape.swap_axes01(q)?;
    let k = tape.swap_axes01(k)?;
    let v = tape.swap_axes01(v)?;
    let attn = qk_norm_attention(tape, q, k, v, None)?;
    let attn = tape.swap_axes01(attn)?;
    let attn = tape.reshape(attn, &[seq, cfg.d_model])?;
    let mut o = lora_forward(tape, bind, attn, &p.w_o)?;
    if cfg.use_rms_postnorm {
        o = rms_norm(tape, o, cfg.eps_rms)?;
        if let Some(g) = p.rms_gain {
            o = tape.mul(o, bind[g])?;
        }
    }
    let resid = tape.add(x, o)?;

    let normed2 = match &p.ln2 {
        Some(n) => input_layer_norm(tape, resid, bind[n.gamma], bind[n.beta], cfg.eps_ln)?,
        None => resid,
    };
    let hidden = linear(tape, normed2, bind[p.mlp_w1], bind[p.mlp_b1])?;
    let hidden = tape.gelu(hidden);
    let m = linear(tape, hidden, bind[p.mlp_w2], bind[p.mlp_b2])?;
    tape.add(resid, m)
}
