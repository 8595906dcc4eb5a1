//! Gradient-health records, the run classifier and the ablation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Tape};
use crate::blocks::{attention_logits, BlockConfig, QkNormVars};
use crate::config::RunConfig;
use crate::curriculum::{run_curriculum, NullSink};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{SeededRng, Tensor};

/// One training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// L2 norm per group that received gradients.
    pub grad_norms: BTreeMap<ParamGroup, f64>,
    /// Groups with no gradient slot (frozen); their norm is reported as 0.
    pub untouched: Vec<ParamGroup>,
    pub nonfinite: bool,
}

impl TrainRecord {
    /// L2 norm over every touched group.
    pub fn total_grad_norm(&self) -> f64 {
        self.grad_norms.values().map(|n| n * n).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradStats {
    pub norms: BTreeMap<ParamGroup, f64>,
    pub untouched: Vec<ParamGroup>,
    pub all_finite: bool,
}

impl GradStats {
    pub fn norm(&self, g: ParamGroup) -> f64 {
        self.norms.get(&g).copied().unwrap_or(0.0)
    }

    pub fn is_untouched(&self, g: ParamGroup) -> bool {
        self.untouched.contains(&g)
    }
}

/// Per-group gradient norms of the last collected backward pass. Groups
/// without any gradient slot, or with no parameters, are untouched.
pub fn grad_stats(store: &ParamStore) -> Result<GradStats> {
    if !store.grads_ready() {
        return Err(Error::GradsNotReady);
    }
    let mut sq: BTreeMap<ParamGroup, f64> = BTreeMap::new();
    let mut all_finite = true;
    for (_, p) in store.iter() {
        if let Some(g) = p.tensor.grad() {
            let s: f64 = g.iter().map(|v| v * v).sum();
            all_finite &= s.is_finite();
            *sq.entry(p.group).or_insert(0.0) += s;
        }
    }
    let untouched = ParamGroup::ALL.into_iter().filter(|g| !sq.contains_key(g)).collect();
    Ok(GradStats {
        norms: sq.into_iter().map(|(g, s)| (g, s.sqrt())).collect(),
        untouched,
        all_finite,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "OK")]
    Ok,
    GradientVanish,
    NonFinite,
}

impl Outcome {
    pub fn label(self) -> &'static str {
        match self {
            Outcome::Ok => "OK",
            Outcome::GradientVanish => "GradientVanish",
            Outcome::NonFinite => "NonFinite",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub window: usize,
    pub median_grad_norm: f64,
    pub loss_start: f64,
    pub loss_end: f64,
    pub nonfinite_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunVerdict {
    pub outcome: Outcome,
    pub first_bad_step: Option<usize>,
    pub evidence: Evidence,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VanishRule {
    pub window: usize,
    pub threshold: f64,
}

impl Default for VanishRule {
    fn default() -> Self {
        VanishRule {
            window: 50,
            threshold: 1e-8,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// NonFinite if any record is flagged. Otherwise GradientVanish when, over
/// the trailing `window` records (all of them if fewer), the median total
/// gradient norm is below `threshold` and the last loss is not below the
/// first. Otherwise OK.
pub fn classify(records: &[TrainRecord], rule: VanishRule) -> Result<RunVerdict> {
    if rule.window == 0 {
        return Err(Error::invalid("window must be at least 1"));
    }
    if records.is_empty() {
        return Err(Error::EmptyStream);
    }
    let tail = &records[records.len().saturating_sub(rule.window)..];
    let med = median(tail.iter().map(TrainRecord::total_grad_norm).collect());
    let bad: Vec<&TrainRecord> = records.iter().filter(|r| r.nonfinite || !r.loss.is_finite()).collect();
    let evidence = Evidence {
        window: tail.len(),
        median_grad_norm: med,
        loss_start: tail[0].loss,
        loss_end: tail[tail.len() - 1].loss,
        nonfinite_steps: bad.len(),
    };
    if let Some(first) = bad.first() {
        return Ok(RunVerdict {
            outcome: Outcome::NonFinite,
            first_bad_step: Some(first.step),
            evidence,
        });
    }
    if med < rule.threshold && evidence.loss_end >= evidence.loss_start {
        return Ok(RunVerdict {
            outcome: Outcome::GradientVanish,
            first_bad_step: Some(tail[0].step),
            evidence,
        });
    }
    Ok(RunVerdict {
        outcome: Outcome::Ok,
        first_bad_step: None,
        evidence,
    })
}

/// Attention logit magnitudes for one random draw of queries and keys.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitProbe {
    pub max_abs_logit: f64,
    /// Largest softmax weight of any (unmasked) row.
    pub max_weight: f64,
}

impl LogitProbe {
    /// Softmax saturation: logits beyond `logit_limit` or a row that puts
    /// more than `1 − 1e-6` of its mass on one key.
    pub fn saturated(&self, logit_limit: f64) -> bool {
        self.max_abs_logit > logit_limit || self.max_weight > 1.0 - 1e-6
    }
}

/// Draws `Q, K ~ N(0, std²)` of shape `[heads, seq, d_k]` and measures the
/// pre-softmax logits, with unit-gain QK normalization or none.
pub fn probe_logits(heads: usize, seq: usize, d_k: usize, std: f64, qk_norm: bool, seed: u64) -> Result<LogitProbe> {
    let mut rng = SeededRng::derived(seed, "logit-probe");
    let shape = vec![heads, seq, d_k];
    let mut tape = Tape::new();
    let q = tape.constant(&Tensor::randn(shape.clone(), std, &mut rng));
    let k = tape.constant(&Tensor::randn(shape, std, &mut rng));
    let norm = if qk_norm {
        let gq = tape.constant(&Tensor::ones(vec![heads, d_k]));
        let bq = tape.constant(&Tensor::zeros(vec![heads, d_k]));
        let gk = tape.constant(&Tensor::ones(vec![heads, d_k]));
        let bk = tape.constant(&Tensor::zeros(vec![heads, d_k]));
        Some(QkNormVars {
            gamma_q: gq,
            beta_q: bq,
            gamma_k: gk,
            beta_k: bk,
            eps: 1e-5,
        })
    } else {
        None
    };
    let logits = attention_logits(&mut tape, q, k, norm.as_ref())?;
    let vals = tape.value(logits);
    let max_abs_logit = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut max_weight = 0.0f64;
    for row in vals.chunks(seq) {
        let mut r = row.to_vec();
        softmax_in_place(&mut r);
        max_weight = r.iter().fold(max_weight, |m, &v| m.max(v));
    }
    Ok(LogitProbe {
        max_abs_logit,
        max_weight,
    })
}

/// One cell of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub config: String,
    pub d_model: usize,
    pub stage: usize,
    pub outcome: Outcome,
    pub first_bad_step: Option<usize>,
    pub final_loss: f64,
    pub steps_run: usize,
    /// Logit probe of this configuration's attention at std-10 Q/K init.
    pub saturated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub stages: Vec<usize>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn configs(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for c in &self.cells {
            let key = (c.config.clone(), c.d_model);
            if !out.contains(&key) {
                out.push(key);
            }
        }
        out
    }

    pub fn cell(&self, config: &str, d_model: usize, stage: usize) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.config == config && c.d_model == d_model && c.stage == stage)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.cells {
            out.push_str(&serde_json::to_string(c)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Aligned text table: one row per configuration and width, one column
    /// per stage holding `verdict (final loss)`.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["config".to_string(), "d_model".to_string()];
        header.extend(self.stages.iter().map(|s| format!("stage {s}")));
        header.push("logit probe".to_string());
        rows.push(header);
        for (name, d) in self.configs() {
            let mut row = vec![name.clone(), d.to_string()];
            for &s in &self.stages {
                row.push(match self.cell(&name, d, s) {
                    Some(c) => format!("{} ({:.3})", c.outcome.label(), c.final_loss),
                    None => "-".to_string(),
                });
            }
            let saturated = self.cells.iter().any(|c| c.config == name && c.d_model == d && c.saturated);
            row.push(if saturated { "saturated" } else { "bounded" }.to_string());
            rows.push(row);
        }
        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (k, r) in rows.iter().enumerate() {
            let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if k == 0 {
                let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
            }
        }
        out
    }
}

/// The five block configurations of the ablation: everything on, then each
/// of LoRA, input LayerNorm, post-attention RMSNorm and QK norm removed.
pub fn ablation_variants(base: &BlockConfig) -> Vec<(&'static str, BlockConfig)> {
    let full = BlockConfig {
        use_input_layernorm: true,
        use_rms_postnorm: true,
        use_qk_norm: true,
        use_lora: true,
        ..base.clone()
    };
    let mut out = vec![("full", full.clone())];
    let mut v = full.clone();
    v.use_lora = false;
    out.push(("w/o LoRA", v));
    let mut v = full.clone();
    v.use_input_layernorm = false;
    out.push(("w/o Input Layer Norm", v));
    let mut v = full.clone();
    v.use_rms_postnorm = false;
    out.push(("w/o RMS Norm", v));
    let mut v = full;
    v.use_qk_norm = false;
    out.push(("w/o QK Norm", v));
    out
}

fn with_width(cfg: &RunConfig, width: usize) -> RunConfig {
    let mut c = cfg.clone();
    let b = &mut c.model.block;
    b.d_model = width;
    b.d_mlp = 4 * width;
    b.lora.rank = b.lora.rank.min(width);
    c
}

/// Runs every ablation variant through the configured stage sequence, at
/// the base width and each extra width. A stage that halts early still
/// yields a cell, and later stages run on the halted model.
pub fn ablation_suite(base: &RunConfig) -> Result<AblationTable> {
    base.validate()?;
    let plan = base.plan()?;
    let opts = base.options();
    let mut widths = vec![base.model.block.d_model];
    widths.extend(base.ablation.widths.iter().filter(|w| **w != base.model.block.d_model));
    let mut cells = Vec::new();
    for &width in &widths {
        let sized = with_width(base, width);
        for (name, block) in ablation_variants(&sized.model.block) {
            let mut mc = sized.model.clone();
            mc.block = block;
            mc.validate()?;
            let probe = probe_logits(
                mc.block.n_heads,
                16,
                mc.block.d_head(),
                base.ablation.probe_std,
                mc.block.use_qk_norm,
                base.seed,
            )?;
            let saturated = probe.saturated(50.0);
            let mut model = Model::new(&mc, base.seed)?;
            let reports = run_curriculum(&mut model, &plan, &opts, &base.train.data, base.seed, &mut NullSink)?;
            for r in reports {
                cells.push(AblationCell {
                    config: name.to_string(),
                    d_model: width,
                    stage: r.outcome.stage,
                    outcome: r.outcome.verdict.outcome,
                    first_bad_step: r.outcome.verdict.first_bad_step,
                    final_loss: r.outcome.final_record.loss,
                    steps_run: r.outcome.steps_run,
                    saturated,
                });
            }
        }
    }
    Ok(AblationTable {
        seed: base.seed,
        stages: plan.iter().map(|s| s.stage_id).collect(),
        cells,
    })
}
