//! Low-rank adapters running in parallel with a frozen base weight.
//!
//! `y = x·W0ᵀ + (alpha/r)·(x·Aᵀ)·Bᵀ` with `A: [r, in]` Gaussian and
//! `B: [out, r]` zero at construction, so a fresh adapter is an exact no-op.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamGroup, ParamId, ParamStore};
use crate::tensor::{SeededRng, Tensor};

/// Attention projection an adapter can attach to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnProj {
    Q,
    K,
    V,
    O,
}

impl AttnProj {
    pub fn name(self) -> &'static str {
        match self {
            AttnProj::Q => "q",
            AttnProj::K => "k",
            AttnProj::V => "v",
            AttnProj::O => "o",
        }
    }
}

impl fmt::Display for AttnProj {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttnProj {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(AttnProj::Q),
            "k" => Ok(AttnProj::K),
            "v" => Ok(AttnProj::V),
            "o" => Ok(AttnProj::O),
            other => Err(Error::invalid(format!("unknown attention projection `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_targets")]
    pub targets: Vec<AttnProj>,
    /// Standard deviation of the Gaussian `A` initialization.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_rank() -> usize {
    8
}
fn default_alpha() -> f64 {
    16.0
}
fn default_targets() -> Vec<AttnProj> {
    vec![AttnProj::Q, AttnProj::V]
}
fn default_init_std() -> f64 {
    0.02
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: default_rank(),
            alpha: default_alpha(),
            targets: default_targets(),
            init_std: default_init_std(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Adapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl Adapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// A linear map `[.., in] → [.., out]` with an optional adapter.
#[derive(Clone, Copy, Debug)]
pub struct LoraLinear {
    pub base: ParamId,
    pub adapter: Option<Adapter>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LoraLinear {
    /// Wraps an existing `[out, in]` base parameter without an adapter.
    pub fn plain(store: &ParamStore, base: ParamId) -> Result<Self> {
        let shape = store.tensor(base).shape();
        if shape.len() != 2 {
            return Err(Error::invalid(format!("base weight must be 2-D, got {shape:?}")));
        }
        Ok(LoraLinear {
            base,
            adapter: None,
            in_dim: shape[1],
            out_dim: shape[0],
        })
    }

    /// Attaches a fresh adapter (`A` Gaussian, `B` zero) to `base`.
    pub fn attach(
        store: &mut ParamStore,
        base: ParamId,
        prefix: &str,
        rank: usize,
        alpha: f64,
        init_std: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut lin = LoraLinear::plain(store, base)?;
        let a = Tensor::randn(vec![rank.max(1), lin.in_dim], init_std, rng);
        let b = Tensor::zeros(vec![lin.out_dim, rank.max(1)]);
        lin.adapter = Some(Self::register(store, prefix, &lin, a, b, rank, alpha)?);
        Ok(lin)
    }

    /// Builds a layer from explicit `W0`, `A`, `B`.
    pub fn from_parts(
        store: &mut ParamStore,
        prefix: &str,
        w0: Tensor,
        a: Tensor,
        b: Tensor,
        alpha: f64,
    ) -> Result<Self> {
        let base = store.add(format!("{prefix}.base"), ParamGroup::Attention, w0);
        let mut lin = LoraLinear::plain(store, base)?;
        let rank = a.shape().first().copied().unwrap_or(0);
        lin.adapter = Some(Self::register(store, prefix, &lin, a, b, rank, alpha)?);
        Ok(lin)
    }

    fn register(
        store: &mut ParamStore,
        prefix: &str,
        lin: &LoraLinear,
        a: Tensor,
        b: Tensor,
        rank: usize,
        alpha: f64,
    ) -> Result<Adapter> {
        if rank == 0 || rank > lin.in_dim.min(lin.out_dim) {
            return Err(Error::invalid(format!(
                "LoRA rank {rank} must be in 1..={}",
                lin.in_dim.min(lin.out_dim)
            )));
        }
        if !(alpha >= 0.0) {
            return Err(Error::invalid(format!("LoRA alpha must be non-negative, got {alpha}")));
        }
        if a.shape() != [rank, lin.in_dim] || b.shape() != [lin.out_dim, rank] {
            return Err(Error::ShapeMismatch {
                op: "lora",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let a = store.add(format!("{prefix}.lora_a"), ParamGroup::Lora, a);
        let b = store.add(format!("{prefix}.lora_b"), ParamGroup::Lora, b);
        Ok(Adapter { a, b, rank, alpha })
    }

    /// Number of adapter scalars, `r·(in + out)`.
    pub fn adapter_size(&self) -> usize {
        self.adapter
            .map_or(0, |a| a.rank * (self.in_dim + self.out_dim))
    }
}

/// `x·W0ᵀ + (alpha/r)·(x·Aᵀ)·Bᵀ`.
pub fn lora_forward(tape: &mut Tape, bind: &Bindings, x: Var, m: &LoraLinear) -> Result<Var> {
    let width = tape.shape(x).last().copied().unwrap_or(0);
    if width != m.in_dim {
        return Err(Error::ShapeMismatch {
            op: "lora_forward",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![m.out_dim, m.in_dim],
        });
    }
    let base = tape.matmul_nt(x, bind[m.base])?;
    let Some(ad) = m.adapter else { return Ok(base) };
    let down = tape.matmul_nt(x, bind[ad.a])?;
    let up = tape.matmul_nt(down, bind[ad.b])?;
    let up = tape.scale(up, ad.scale());
    tape.add(base, up)
}

/// `W0 + (alpha/r)·B·A`.
pub fn merge(store: &ParamStore, m: &LoraLinear) -> Tensor {
    let w0 = store.tensor(m.base);
    let Some(ad) = m.adapter else { return Tensor::new(w0.shape().to_vec(), w0.data().to_vec()).expect("valid") };
    let a = store.tensor(ad.a).data();
    let b = store.tensor(ad.b).data();
    let (out, inp, r) = (m.out_dim, m.in_dim, ad.rank);
    let scale = ad.scale();
    let mut w = w0.data().to_vec();
    for i in 0..out {
        for j in 0..inp {
            let mut acc = 0.0;
            for p in 0..r {
                acc += b[i * r + p] * a[p * inp + j];
            }
            w[i * inp + j] += scale * acc;
        }
    }
    Tensor::new(vec![out, inp], w).expect("valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(store: &ParamStore, m: &LoraLinear, x: &Tensor) -> Vec<f64> {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.constant(x);
        let y = lora_forward(&mut tape, &b, xv, m).unwrap();
        tape.value(y).to_vec()
    }

    fn base_only(store: &ParamStore, m: &LoraLinear, x: &Tensor) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let w = tape.constant(store.tensor(m.base));
        let y = tape.matmul_nt(xv, w).unwrap();
        tape.value(y).to_vec()
    }

    #[test]
    fn hand_example() {
        // base [1,1] + update [(1+1)*2, 0] = [5, 1]
        let mut store = ParamStore::new();
        let m = LoraLinear::from_parts(
            &mut store,
            "l",
            Tensor::eye(2),
            Tensor::matrix(&[&[1.0, 1.0]]).unwrap(),
            Tensor::matrix(&[&[2.0], &[0.0]]).unwrap(),
            1.0,
        )
        .unwrap();
        let x = Tensor::matrix(&[&[1.0, 1.0]]).unwrap();
        assert_eq!(run(&store, &m, &x), vec![5.0, 1.0]);
        let merged = merge(&store, &m);
        assert_eq!(merged.data(), &[3.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_init_is_bitwise_identity() {
        let mut rng = SeededRng::new(11);
        let mut store = ParamStore::new();
        let base = store.add("w", ParamGroup::Attention, Tensor::randn(vec![6, 5], 1.0, &mut rng));
        let m = LoraLinear::attach(&mut store, base, "w", 2, 16.0, 0.02, &mut rng).unwrap();
        let x = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let got = run(&store, &m, &x);
        let want = base_only(&store, &m, &x);
        assert!(got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(merge(&store, &m).data(), store.tensor(base).data());
    }

    #[test]
    fn zero_alpha_matches_base() {
        let mut rng = SeededRng::new(12);
        let mut store = ParamStore::new();
        let m = LoraLinear::from_parts(
            &mut store,
            "l",
            Tensor::randn(vec![4, 4], 1.0, &mut rng),
            Tensor::randn(vec![2, 4], 1.0, &mut rng),
            Tensor::randn(vec![4, 2], 1.0, &mut rng),
            0.0,
        )
        .unwrap();
        let x = Tensor::randn(vec![2, 4], 1.0, &mut rng);
        let got = run(&store, &m, &x);
        let want = base_only(&store, &m, &x);
        assert!(got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rank_bound_and_width_checked() {
        let mut store = ParamStore::new();
        let base = store.add("w", ParamGroup::Attention, Tensor::zeros(vec![3, 2]));
        let mut rng = SeededRng::new(0);
        assert!(LoraLinear::attach(&mut store, base, "w", 3, 1.0, 0.02, &mut rng).is_err());
        let m = LoraLinear::attach(&mut store, base, "w", 2, 1.0, 0.02, &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(&Tensor::zeros(vec![1, 3]));
        assert!(lora_forward(&mut tape, &b, x, &m).is_err());
    }

    #[test]
    fn gradient_flows_to_b_not_a_at_init_and_never_to_w0() {
        let mut rng = SeededRng::new(13);
        let mut store = ParamStore::new();
        let base = store.add("w", ParamGroup::Attention, Tensor::randn(vec![4, 4], 1.0, &mut rng));
        let m = LoraLinear::attach(&mut store, base, "w", 2, 16.0, 0.5, &mut rng).unwrap();
        store.mark_trainable(&["lora"]).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(&Tensor::randn(vec![3, 4], 1.0, &mut rng));
        let y = lora_forward(&mut tape, &b, x, &m).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        store.collect_grads(&tape, &b);
        let ad = m.adapter.unwrap();
        assert!(store.tensor(ad.a).grad().unwrap().iter().all(|&g| g == 0.0));
        assert!(store.tensor(ad.b).grad().unwrap().iter().any(|&g| g != 0.0));
        assert!(store.tensor(base).grad().is_none());
    }
}
