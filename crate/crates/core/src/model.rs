//! The toy multimodal language model: frozen encoder, bridge, and a small
//! decoder-only stack of stabilized blocks.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::blocks::{block_forward, input_layer_norm, BlockConfig, BlockParams, NormParams};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamGroup, ParamId, ParamStore};
use crate::taskspec::{EncodedSample, ToyVocab};
use crate::tensor::{SeededRng, Tensor};
use crate::vision::{project_to_lm, resample, splice, synthetic_image, BridgeConfig, FrozenEncoder, ProjectionStack};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub max_seq: usize,
    pub block: BlockConfig,
    pub bridge: BridgeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_blocks: 2,
            max_seq: 256,
            block: BlockConfig::default(),
            bridge: BridgeConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::config("model.n_blocks", "must be positive"));
        }
        if self.max_seq <= self.bridge.n_query {
            return Err(Error::config(
                "model.max_seq",
                format!("must exceed bridge.n_query ({})", self.bridge.n_query),
            ));
        }
        self.block.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::Config {
                field: format!("model.block.{field}"),
                message,
            },
            other => other,
        })?;
        self.bridge.validate()
    }

    pub fn d_model(&self) -> usize {
        self.block.d_model
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: FrozenEncoder,
    pub vocab: ToyVocab,
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub lm_head: ParamId,
    pub final_ln: NormParams,
    pub blocks: Vec<BlockParams>,
    pub stack: ProjectionStack,
    features: Mutex<HashMap<(u64, usize), Tensor>>,
}

impl Model {
    /// Builds every parameter from `seed`. Everything starts frozen.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vocab = ToyVocab::new();
        let d = cfg.d_model();
        let mut rng = SeededRng::derived(seed, "model");
        let mut store = ParamStore::new();
        let emb = ParamGroup::Embeddings;
        let tok_embed = store.add("embed.tokens", emb, Tensor::randn(vec![vocab.size(), d], 1.0, &mut rng));
        let pos_embed = store.add("embed.positions", emb, Tensor::randn(vec![cfg.max_seq, d], 1.0, &mut rng));
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            blocks.push(BlockParams::init(&mut store, &format!("block{i}"), &cfg.block, &mut rng)?);
        }
        let final_ln = NormParams {
            gamma: store.add("final_ln.gamma", ParamGroup::Norms, Tensor::ones(vec![d])),
            beta: store.add("final_ln.beta", ParamGroup::Norms, Tensor::zeros(vec![d])),
        };
        let lm_head = store.add(
            "lm_head",
            emb,
            Tensor::randn(vec![vocab.size(), d], 1.0 / (d as f64).sqrt(), &mut rng),
        );
        let stack = ProjectionStack::init(&mut store, &cfg.bridge, d, cfg.block.init_std, &mut rng)?;
        Ok(Model {
            cfg: cfg.clone(),
            store,
            encoder: FrozenEncoder::new(&cfg.bridge)?,
            vocab,
            tok_embed,
            pos_embed,
            lm_head,
            final_ln,
            blocks,
            stack,
            features: Mutex::new(HashMap::new()),
        })
    }

    /// Frozen encoder output for a procedural image, computed once per
    /// `(seed, resolution)`.
    pub fn image_features(&self, image_seed: u64, res: usize) -> Result<Tensor> {
        let key = (image_seed, res);
        if let Some(t) = self.features.lock().expect("feature cache").get(&key) {
            return Ok(t.clone());
        }
        let tokens = self.encoder.encode(&synthetic_image(image_seed, res))?.tokens;
        self.features.lock().expect("feature cache").insert(key, tokens.clone());
        Ok(tokens)
    }

    /// Hidden states `[seq, d_model]` after the final LayerNorm, plus the
    /// mapping from text position to sequence row.
    pub fn hidden(&self, tape: &mut Tape, bind: &Bindings, sample: &EncodedSample, res: usize) -> Result<(Var, Vec<usize>)> {
        let ids: Vec<usize> = sample.ids.iter().map(|&i| i as usize).collect();
        if ids.is_empty() {
            return Err(Error::invalid("sample has no tokens"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab.size()) {
            return Err(Error::UnknownTokenId(bad as u32));
        }
        let mut x = tape.gather_rows(bind[self.tok_embed], &ids)?;
        let mut rows: Vec<usize> = (0..ids.len()).collect();
        if let (Some(pos), Some(seed)) = (sample.image_pos, sample.image_seed) {
            let feats = self.image_features(seed, res)?;
            let t = tape.constant(&feats);
            let q = resample(tape, bind, t, &self.stack)?;
            let img = project_to_lm(tape, bind, q, &self.stack)?;
            x = splice(tape, x, img, pos..pos + 1)?;
            let shift = self.stack.n_query - 1;
            rows.iter_mut().filter(|r| **r > pos).for_each(|r| *r += shift);
        }
        let seq = tape.shape(x)[0];
        if seq > self.cfg.max_seq {
            return Err(Error::invalid(format!(
                "sequence of {seq} rows exceeds max_seq {}",
                self.cfg.max_seq
            )));
        }
        let pos = tape.slice_rows(bind[self.pos_embed], 0, seq)?;
        x = tape.add(x, pos)?;
        for b in &self.blocks {
            x = block_forward(tape, bind, x, &self.cfg.block, b)?;
        }
        let h = input_layer_norm(
            tape,
            x,
            bind[self.final_ln.gamma],
            bind[self.final_ln.beta],
            self.cfg.block.eps_ln,
        )?;
        Ok((h, rows))
    }

    /// Mean next-token cross-entropy over every answer token of `batch`.
    pub fn loss(&self, tape: &mut Tape, bind: &Bindings, batch: &[EncodedSample], res: usize) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::EmptyStream);
        }
        let mut picked = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for s in batch {
            if s.target_start == 0 || s.target_start >= s.ids.len() {
                return Err(Error::invalid("sample has no answer tokens"));
            }
            let (h, rows) = self.hidden(tape, bind, s, res)?;
            let pred_rows: Vec<usize> = (s.target_start - 1..s.ids.len() - 1).map(|i| rows[i]).collect();
            picked.push(tape.gather_rows(h, &pred_rows)?);
            targets.extend(s.ids[s.target_start..].iter().map(|&i| i as usize));
        }
        let h = tape.concat_rows(&picked)?;
        let logits = tape.matmul_nt(h, bind[self.lm_head])?;
        tape.cross_entropy(logits, &targets)
    }
}
