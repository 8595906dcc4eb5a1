//! Finite-difference check of every layer type and of the full
//! image-to-loss path.

use crate::autograd::{grad_check_with, CorruptRule, GradCheckReport, Tape, Var};
use crate::blocks::{block_forward, input_layer_norm, qk_norm_attention, rms_norm, BlockConfig, BlockParams, QkNormVars};
use crate::error::Result;
use crate::lora::{lora_forward, LoraLinear};
use crate::params::{grad_check_module, ParamStore};
use crate::tensor::{SeededRng, Tensor};
use crate::vision::{project_to_lm, resample, splice, synthetic_image, BridgeConfig, FrozenEncoder, ProjectionStack};

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BatteryEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl BatteryEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= TOLERANCE
    }
}

/// `Σ y ⊙ R` with small fixed weights `R`, so every output coordinate
/// contributes to the loss with a generic coefficient.
fn probe(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights);
    let yw = tape.mul(y, w)?;
    Ok(tape.sum(yw))
}

fn weights_like(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1e-4, rng)
}

fn gains(shape: Vec<usize>, rng: &mut SeededRng) -> Tensor {
    let mut t = Tensor::randn(shape, 0.2, rng);
    t.data_mut().iter_mut().for_each(|v| *v += 1.0);
    t
}

fn small_bridge() -> BridgeConfig {
    BridgeConfig {
        d_vis: 4,
        d_q: 4,
        d_mid: 3,
        n_query: 3,
        patch_size: 32,
        encoder_heads: 2,
        encoder_seed: 5,
    }
}

fn small_block() -> BlockConfig {
    let mut cfg = BlockConfig::new(8, 2);
    cfg.d_mlp = 16;
    cfg.lora.rank = 2;
    cfg.init_std = 0.5;
    cfg
}

/// Gives every adapter a non-zero `B` so adapter gradients are generic.
fn perturb_adapters(store: &mut ParamStore, p: &BlockParams, rng: &mut SeededRng) {
    for ad in p.projections().iter().filter_map(|l| l.adapter) {
        let b = store.tensor_mut(ad.b);
        let n = b.len();
        b.data_mut().copy_from_slice(Tensor::randn(vec![n], 0.3, rng).data());
    }
}

fn check_layer_norm(corrupt: Option<CorruptRule>, rng: &mut SeededRng) -> Result<GradCheckReport> {
    let x = Tensor::randn(vec![3, 6], 1.0, rng);
    let g = gains(vec![6], rng);
    let b = Tensor::randn(vec![6], 0.5, rng);
    let w = weights_like(&[3, 6], rng);
    grad_check_with(
        |t, v| {
            let y = input_layer_norm(t, v[0], v[1], v[2], 1e-5)?;
            probe(t, y, &w)
        },
        &[x, g, b],
        EPS,
        corrupt,
    )
}

fn check_rms_norm(corrupt: Option<CorruptRule>, rng: &mut SeededRng) -> Result<GradCheckReport> {
    let x = Tensor::randn(vec![3, 6], 1.0, rng);
    let w = weights_like(&[3, 6], rng);
    grad_check_with(
        |t, v| {
            let y = rms_norm(t, v[0], 1e-6)?;
            probe(t, y, &w)
        },
        &[x],
        EPS,
        corrupt,
    )
}

fn check_attention(corrupt: Option<CorruptRule>, rng: &mut SeededRng) -> Result<GradCheckReport> {
    let shape = vec![2, 4, 3];
    let mut inputs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(shape.clone(), 1.0, rng)).collect();
    for _ in 0..2 {
        inputs.push(gains(vec![2, 3], rng));
        inputs.push(Tensor::randn(vec![2, 3], 0.3, rng));
    }
    let w = weights_like(&shape, rng);
    grad_check_with(
        |t, v| {
            let norm = QkNormVars {
                gamma_q: v[3],
                beta_q: v[4],
                gamma_k: v[5],
                beta_k: v[6],
                eps: 1e-5,
            };
            let y = qk_norm_attention(t, v[0], v[1], v[2], Some(&norm))?;
            probe(t, y, &w)
        },
        &inputs,
        EPS,
        corrupt,
    )
}

fn check_block(corrupt: Option<CorruptRule>, rng: &mut SeededRng) -> Result<GradCheckReport> {
    let cfg = small_block();
    let mut store = ParamStore::new();
    let p = BlockParams::init(&mut store, "b", &cfg, rng)?;
    perturb_adapters(&mut store, &p, rng);
    let x = Tensor::randn(vec![3, 8], 1.0, rng);
    let w = weights_like(&[3, 8], rng);
    grad_check_module(&store, &[x], EPS, corrupt, |t, bind, xs| {
        let y = block_forward(t, bind, xs[0], &cfg, &p)?;
        probe(t, y, &w)
    })
}

fn check_lora(corrupt: Option<CorruptRule>, rng: &mut SeededRng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let m = LoraLinear::from_parts(
        &mut store,
        "l",
        Tensor::randn(vec![4, 5], 0.5, rng),
        Tensor::randn(vec![2, 5], 0.5, rng),
        Tensor::randn(vec![4, 2], 0.5, rng),
        4.0,
    )?;
    let x = Tensor::randn(vec![3, 5], 1.0, rng);
    let w = weights_like(&[3, 4], rng);
    grad_check_module(&store, &[x], EPS, corrupt, |t, bind, xs| {
        let y = lora_forward(t, bind, xs[0], &m)?;
        probe(t, y, &w)
    })
}

fn bridge_store(rng: &mut SeededRng, d_lm: usize) -> Result<(ParamStore, ProjectionStack)> {
    let mut store = ParamStore::new();
    let stack = ProjectionStack::init(&mut store, &small_bridge(), d_lm, 0.5, rng)?;
    Ok((store, stack))
}

fn check_resample(corrupt: Option<CorruptRule>, rng: &mut SeededRng) -> Result<GradCheckReport> {
    let (store, stack) = bridge_store(rng, 5)?;
    let tokens = Tensor::randn(vec![6, 4], 1.0, rng);
    let w = weights_like(&[3, 4], rng);
    grad_check_module(&store, &[tokens], EPS, corrupt, |t, bind, xs| {
        let y = resample(t, bind, xs[0], &stack)?;
        probe(t, y, &w)
    })
}

fn check_projection(corrupt: Option<CorruptRule>, rng: &mut SeededRng) -> Result<GradCheckReport> {
    let (store, stack) = bridge_store(rng, 5)?;
    let q = Tensor::randn(vec![3, 4], 1.0, rng);
    let w = weights_like(&[3, 5], rng);
    grad_check_module(&store, &[q], EPS, corrupt, |t, bind, xs| {
        let y = project_to_lm(t, bind, xs[0], &stack)?;
        probe(t, y, &w)
    })
}

/// Procedural image through the frozen encoder, resampler, projections and
/// splice, then one block and a scalar probe. Text embeddings and every
/// bridge and block parameter are checked.
fn check_end_to_end(corrupt: Option<CorruptRule>, rng: &mut SeededRng) -> Result<GradCheckReport> {
    let bridge = small_bridge();
    let encoder = FrozenEncoder::new(&bridge)?;
    let features = encoder.encode(&synthetic_image(3, 224))?.tokens;
    let cfg = small_block();
    let mut store = ParamStore::new();
    let stack = ProjectionStack::init(&mut store, &bridge, cfg.d_model, 0.5, rng)?;
    let p = BlockParams::init(&mut store, "b", &cfg, rng)?;
    perturb_adapters(&mut store, &p, rng);
    let text = Tensor::randn(vec![4, 8], 1.0, rng);
    let seq = 4 - 1 + bridge.n_query;
    let w = weights_like(&[seq, 8], rng);
    grad_check_module(&store, &[text], EPS, corrupt, |t, bind, xs| {
        let f = t.constant(&features);
        let q = resample(t, bind, f, &stack)?;
        let img = project_to_lm(t, bind, q, &stack)?;
        let x = splice(t, xs[0], img, 1..2)?;
        let y = block_forward(t, bind, x, &cfg, &p)?;
        probe(t, y, &w)
    })
}

type Check = fn(Option<CorruptRule>, &mut SeededRng) -> Result<GradCheckReport>;

pub const COMPONENTS: [(&str, Check); 8] = [
    ("input_layer_norm", check_layer_norm),
    ("rms_norm", check_rms_norm),
    ("qk_norm_attention", check_attention),
    ("block_forward", check_block),
    ("lora_forward", check_lora),
    ("resample", check_resample),
    ("project_to_lm", check_projection),
    ("end_to_end", check_end_to_end),
];

/// Runs every component check with a fixed seed.
pub fn gradcheck_battery(corrupt: Option<CorruptRule>) -> Result<Vec<BatteryEntry>> {
    COMPONENTS
        .iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = SeededRng::derived(i as u64, "battery");
            Ok(BatteryEntry {
                name,
                report: f(corrupt, &mut rng)?,
            })
        })
        .collect()
}
