//! End-to-end acceptance checks. One test runs every criterion in order so
//! the timed criteria do not share the core with other tests, then prints
//! one PASS/FAIL line per criterion.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::{bits, tiny_config};
use minivl::autograd::Tape;
use minivl::blocks::{attention_logits, BlockConfig, BlockParams, QkNormVars};
use minivl::cli::{cmd_ablate, cmd_gradcheck, cmd_render, cmd_train, RunArgs};
use minivl::config::RunConfig;
use minivl::curriculum::{
    build_stage_plan, run_curriculum, run_stage, sawtooth_lr, DataStream, NullSink, OptimizerConfig, Schedule,
    TrainOptions, WarmupCosine,
};
use minivl::diagnostics::{Outcome, TrainRecord};
use minivl::lora::{lora_forward, merge, LoraLinear};
use minivl::model::{Model, ModelConfig};
use minivl::params::{ParamGroup, ParamStore};
use minivl::taskspec::{build_stage_batch_with, encode_sample, stage_mode, BatchOptions, Task};
use minivl::vision::FrozenEncoder;
use minivl::{SeededRng, Tensor};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn run_args(config: &Path, out: &Path) -> RunArgs {
    RunArgs {
        config: Some(config.to_path_buf()),
        seed: None,
        out: Some(out.to_path_buf()),
        scale: None,
        out_root: None,
    }
}

fn gradient_correctness() -> Result<String, String> {
    let start = Instant::now();
    let mut out = Vec::new();
    let code = cmd_gradcheck(None, &mut out).map_err(err)?;
    let elapsed = start.elapsed();
    let text = String::from_utf8(out).map_err(err)?;
    for name in [
        "input_layer_norm",
        "rms_norm",
        "qk_norm_attention",
        "block_forward",
        "lora_forward",
        "resample",
        "project_to_lm",
        "end_to_end",
    ] {
        ensure(text.lines().any(|l| l.starts_with(name) && l.ends_with(" ok")), || {
            format!("{name} missing or failing:\n{text}")
        })?;
    }
    ensure(code == 0, || format!("exit {code}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("8 components within 1e-4 in {:.2}s", elapsed.as_secs_f64()))
}

fn scheduler_fidelity() -> Result<String, String> {
    let s2 = build_stage_plan(2, 1).map_err(err)?;
    let s3 = build_stage_plan(3, 1).map_err(err)?;
    let points = [
        (&s2, 0usize, 1e-6),
        (&s2, 5000, 1e-4),
        (&s2, s2.total_steps(), 8e-5),
        (&s3, 0, 1e-6),
        (&s3, 200, 3e-5),
        (&s3, s3.total_steps(), 1e-5),
    ];
    for (spec, step, want) in points {
        let got = spec.schedule.lr(step).map_err(err)?;
        ensure(got == want, || format!("stage {} step {step}: {got:e} != {want:e}", spec.stage_id))?;
    }
    let s1 = build_stage_plan(1, 1).map_err(err)?;
    let Schedule::Sawtooth(saw) = &s1.schedule else {
        return Err("stage 1 is not a sawtooth".into());
    };
    for epoch in 0..s1.epochs {
        let first = sawtooth_lr(epoch * s1.iters_per_epoch, saw).map_err(err)?;
        let last = sawtooth_lr((epoch + 1) * s1.iters_per_epoch - 1, saw).map_err(err)?;
        ensure(first == 1e-5 && last == 1e-4, || format!("epoch {epoch}: {first:e}..{last:e}"))?;
    }
    Ok(format!("6 warmup-cosine points exact, {} sawtooth epochs exact", s1.epochs))
}

fn max_logit(q: &Tensor, k: &Tensor, qk_norm: bool) -> Result<f64, String> {
    let (heads, d_k) = (q.shape()[0], q.shape()[2]);
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q), tape.constant(k));
    let one = tape.constant(&Tensor::ones(vec![heads, d_k]));
    let zero = tape.constant(&Tensor::zeros(vec![heads, d_k]));
    let norm = QkNormVars {
        gamma_q: one,
        beta_q: zero,
        gamma_k: one,
        beta_k: zero,
        eps: 1e-12,
    };
    let l = attention_logits(&mut tape, qv, kv, qk_norm.then_some(&norm)).map_err(err)?;
    Ok(tape.value(l).iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

fn qk_norm_bound() -> Result<String, String> {
    let (heads, seq, d_k) = (4, 16, 16);
    let root = (d_k as f64).sqrt();
    let mut worst: f64 = 0.0;
    let mut exceeded = 0;
    for draw in 0..1000u64 {
        let mut rng = SeededRng::derived(draw, "qk-bound");
        let std = 10f64.powf(rng.uniform(-2.0, 3.0));
        let q = Tensor::randn(vec![heads, seq, d_k], std, &mut rng);
        let k = Tensor::randn(vec![heads, seq, d_k], std, &mut rng);
        let m = max_logit(&q, &k, true)?;
        worst = worst.max(m);
        ensure(m <= root + 1e-6, || format!("draw {draw}: |logit| {m} > {}", root + 1e-6))?;

        let q10 = Tensor::randn(vec![heads, seq, d_k], 10.0, &mut rng);
        let k10 = Tensor::randn(vec![heads, seq, d_k], 10.0, &mut rng);
        if max_logit(&q10, &k10, false)? > root * 10.0 {
            exceeded += 1;
        }
    }
    ensure(exceeded > 0, || "no unnormalized logit exceeded sqrt(d_k)*10".into())?;
    Ok(format!(
        "max normalized |logit| {worst:.6} <= {root}; {exceeded}/1000 unnormalized x10 draws exceed {}",
        root * 10.0
    ))
}

fn forward(store: &ParamStore, m: &LoraLinear, x: &Tensor) -> Result<Vec<f64>, String> {
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let xv = tape.constant(x);
    let y = lora_forward(&mut tape, &bind, xv, m).map_err(err)?;
    Ok(tape.value(y).to_vec())
}

fn plain_forward(w: &Tensor, x: &Tensor) -> Result<Vec<f64>, String> {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x), tape.constant(w));
    let y = tape.matmul_nt(xv, wv).map_err(err)?;
    Ok(tape.value(y).to_vec())
}

fn lora_identities() -> Result<String, String> {
    let cfg = BlockConfig::new(32, 4);
    let mut rng = SeededRng::new(21);
    let mut store = ParamStore::new();
    let p = BlockParams::init(&mut store, "b", &cfg, &mut rng).map_err(err)?;
    let adapted: Vec<LoraLinear> = p.projections().into_iter().filter(|l| l.adapter.is_some()).copied().collect();
    ensure(!adapted.is_empty(), || "no adapters attached".into())?;
    for i in 0..100u64 {
        let x = Tensor::randn(vec![5, 32], 1.0, &mut SeededRng::derived(i, "lora-zero"));
        for m in &adapted {
            let a = forward(&store, m, &x)?;
            let b = plain_forward(store.tensor(m.base), &x)?;
            ensure(bits(&a) == bits(&b), || format!("input {i}: adapted output differs from base"))?;
        }
    }

    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let mut rng = SeededRng::derived(i, "lora-merge");
        let mut s = ParamStore::new();
        let m = LoraLinear::from_parts(
            &mut s,
            "l",
            Tensor::randn(vec![24, 32], 0.2, &mut rng),
            Tensor::randn(vec![8, 32], 0.2, &mut rng),
            Tensor::randn(vec![24, 8], 0.2, &mut rng),
            16.0,
        )
        .map_err(err)?;
        let x = Tensor::randn(vec![6, 32], 1.0, &mut rng);
        let a = forward(&s, &m, &x)?;
        let b = plain_forward(&merge(&s, &m), &x)?;
        for (u, v) in a.iter().zip(&b) {
            worst = worst.max((u - v).abs() / u.abs().max(v.abs()).max(1e-8));
        }
    }
    ensure(worst <= 1e-6, || format!("merge relative error {worst:e}"))?;

    // 200 steps of the adapter stage at desk scale.
    let mut model = Model::new(&ModelConfig::default(), 5).map_err(err)?;
    let spec = build_stage_plan(2, 100).map_err(err)?;
    ensure(spec.total_steps() == 200, || format!("{} steps", spec.total_steps()))?;
    let before: Vec<(String, Vec<u64>)> = model
        .store
        .iter()
        .filter(|(_, p)| p.group != ParamGroup::Lora)
        .map(|(_, p)| (p.name.clone(), bits(p.tensor.data())))
        .collect();
    let lora_before: Vec<Vec<u64>> = model
        .store
        .iter()
        .filter(|(_, p)| p.group == ParamGroup::Lora)
        .map(|(_, p)| bits(p.tensor.data()))
        .collect();
    let opts = TrainOptions::default();
    let mut data = DataStream::for_stage(&model, 2, 64, opts.batch_size, 16, 5).map_err(err)?;
    let outcome = run_stage(&mut model, &mut data, &spec, &opts, &mut NullSink).map_err(err)?;
    ensure(outcome.steps_run == 200, || format!("stopped after {} steps", outcome.steps_run))?;
    let after: Vec<(String, Vec<u64>)> = model
        .store
        .iter()
        .filter(|(_, p)| p.group != ParamGroup::Lora)
        .map(|(_, p)| (p.name.clone(), bits(p.tensor.data())))
        .collect();
    for ((name, b), (_, a)) in before.iter().zip(&after) {
        ensure(a == b, || format!("{name} changed"))?;
    }
    let lora_after: Vec<Vec<u64>> = model
        .store
        .iter()
        .filter(|(_, p)| p.group == ParamGroup::Lora)
        .map(|(_, p)| bits(p.tensor.data()))
        .collect();
    ensure(lora_after != lora_before, || "adapters did not train".into())?;
    Ok(format!(
        "zero-init bitwise on 100 inputs; merge rel err {worst:.2e}; {} base tensors bit-identical after 200 steps",
        before.len()
    ))
}

fn encoder_bits(e: &FrozenEncoder) -> Vec<Vec<u64>> {
    [&e.patch_embed, &e.w_q, &e.w_k, &e.w_v, &e.w_o, &e.ln_gamma, &e.ln_beta]
        .iter()
        .map(|t| bits(t.data()))
        .collect()
}

fn freeze_soundness() -> Result<String, String> {
    let cfg = RunConfig::default();
    let plan = cfg.plan().map_err(err)?;
    let mut model = Model::new(&cfg.model, cfg.seed).map_err(err)?;
    let encoder = encoder_bits(&model.encoder);
    let mut checked = 0;
    for spec in &plan {
        let before = model.store.snapshot();
        let reports = run_curriculum(
            &mut model,
            std::slice::from_ref(spec),
            &cfg.options(),
            &cfg.train.data,
            cfg.seed,
            &mut NullSink,
        )
        .map_err(err)?;
        let after = model.store.snapshot();
        let trainable: BTreeSet<ParamGroup> = spec.trainable_groups.clone();
        for ((_, p), (b, a)) in model.store.iter().zip(before.iter().zip(&after)) {
            if !trainable.contains(&p.group) {
                ensure(bits(b) == bits(a), || format!("stage {}: {} changed", spec.stage_id, p.name))?;
                checked += 1;
            }
        }
        ensure(reports[0].frozen_intact, || format!("stage {} report disagrees", spec.stage_id))?;
        ensure(encoder_bits(&model.encoder) == encoder, || {
            format!("encoder changed in stage {}", spec.stage_id)
        })?;
    }
    Ok(format!("{checked} frozen tensors bit-identical over 4 stages; encoder bit-identical"))
}

fn memorization() -> Result<String, String> {
    let start = Instant::now();
    let cfg = ModelConfig::default();
    ensure(cfg.n_blocks == 2 && cfg.d_model() == 128 && cfg.bridge.n_query == 32, || {
        "default model is not the full configuration".into()
    })?;
    let mut model = Model::new(&cfg, 7).map_err(err)?;
    let opts = BatchOptions {
        resolution: 224,
        image_pool: Some(32),
    };
    let samples = build_stage_batch_with(3, 11, 32, opts)
        .map_err(err)?
        .iter()
        .map(|s| encode_sample(&model.vocab, s, stage_mode(3)))
        .collect::<minivl::Result<Vec<_>>>()
        .map_err(err)?;
    let steps = 500;
    let mut spec = build_stage_plan(3, 1).map_err(err)?;
    spec.epochs = 1;
    spec.iters_per_epoch = steps;
    spec.schedule = Schedule::WarmupCosine(WarmupCosine::new(25, 1e-4, 1e-2, 1e-3, steps).map_err(err)?);
    let train = TrainOptions {
        optimizer: OptimizerConfig::adam(),
        batch_size: 8,
        ..TrainOptions::default()
    };
    let mut data = DataStream::new(samples.clone(), train.batch_size, 11).map_err(err)?;
    let mut records: Vec<TrainRecord> = Vec::new();
    let outcome = run_stage(&mut model, &mut data, &spec, &train, &mut records).map_err(err)?;
    let nonfinite = records.iter().filter(|r| r.nonfinite).count();

    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape);
    let loss = model.loss(&mut tape, &bind, &samples, spec.resolution).map_err(err)?;
    let full = tape.scalar(loss);
    let elapsed = start.elapsed();
    let summary = format!(
        "32-sample loss {full:.4} after {} steps (first {:.3}), {:.1}s, {nonfinite} nonfinite",
        outcome.steps_run,
        records[0].loss,
        elapsed.as_secs_f64()
    );
    ensure(outcome.verdict.outcome != Outcome::NonFinite && nonfinite == 0, || summary.clone())?;
    ensure(outcome.steps_run <= 500 && full < 0.1, || summary.clone())?;
    ensure(elapsed < Duration::from_secs(300), || summary.clone())?;
    Ok(summary)
}

fn ablation_config() -> RunConfig {
    let mut cfg = tiny_config(32);
    cfg.model.n_blocks = 2;
    cfg
}

fn ablation_totality() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg_path = dir.path().join("ablate.toml");
    let cfg = ablation_config();
    fs::write(&cfg_path, cfg.to_toml().map_err(err)?).map_err(err)?;
    let mut outputs = Vec::new();
    let mut code = 0;
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        code = cmd_ablate(&run_args(&cfg_path, &out), &mut Vec::new()).map_err(err)?;
        outputs.push((
            fs::read(out.join("ablation.jsonl")).map_err(err)?,
            fs::read_to_string(out.join("ablation.txt")).map_err(err)?,
        ));
    }
    ensure(outputs[0] == outputs[1], || "tables differ between runs".into())?;
    let rows: Vec<serde_json::Value> = String::from_utf8(outputs[0].0.clone())
        .map_err(err)?
        .lines()
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let configs: BTreeSet<&str> = rows.iter().filter_map(|r| r["config"].as_str()).collect();
    ensure(configs.len() == 5 && rows.len() == 20, || {
        format!("{} configs, {} cells", configs.len(), rows.len())
    })?;
    for stage in 1..=4u64 {
        ensure(
            rows.iter().any(|r| r["config"] == "full" && r["stage"] == stage && r["outcome"] == "OK"),
            || format!("full config not OK at stage {stage}:\n{}", outputs[0].1),
        )?;
    }
    ensure(code == 0, || format!("exit {code}"))?;
    let vanished = rows.iter().filter(|r| r["outcome"] == "GradientVanish").count();
    Ok(format!("5x4 table reproduced byte for byte; full row OK; {vanished} GradientVanish cells"))
}

fn template_goldens() -> Result<String, String> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let samples = fixtures.join("tasks.jsonl");
    let golden = fixtures.join("tasks.golden");
    let mut out = Vec::new();
    let code = cmd_render(&samples, Some(&golden), false, &mut out).map_err(err)?;
    ensure(code == 0, || String::from_utf8_lossy(&out).into_owned())?;
    let code = cmd_render(&samples, Some(&fixtures.join("tasks_plain.golden")), true, &mut Vec::new()).map_err(err)?;
    ensure(code == 0, || "plain golden mismatch".into())?;
    let text = fs::read_to_string(&golden).map_err(err)?;
    for t in Task::ALL {
        ensure(text.contains(t.token()), || format!("{} not covered", t.token()))?;
    }
    ensure(text.contains("###Human: <Img><ImageHere></Img>"), || "image frame not covered".into())?;
    let mut coords = 0;
    for part in text.split('{').skip(1) {
        let body = part.split('}').next().unwrap_or("");
        for v in body.split('<').skip(1) {
            let n: u32 = v.trim_end_matches('>').parse().map_err(err)?;
            ensure(n <= 100, || format!("coordinate {n} out of range"))?;
            coords += 1;
        }
    }
    ensure(coords > 0 && coords % 4 == 0, || format!("{coords} coordinates"))?;
    Ok(format!("both goldens byte-exact; 6 task tokens; {coords} box coordinates in [0,100]"))
}

fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg_path = dir.path().join("train.toml");
    fs::write(&cfg_path, tiny_config(16).to_toml().map_err(err)?).map_err(err)?;
    let mut streams = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        cmd_train(&run_args(&cfg_path, &out), &mut Vec::new()).map_err(err)?;
        streams.push(fs::read(out.join("metrics.jsonl")).map_err(err)?);
    }
    ensure(!streams[0].is_empty() && streams[0] == streams[1], || "metrics streams differ".into())?;
    let lines = streams[0].iter().filter(|b| **b == b'\n').count();
    Ok(format!("{lines} records, {} bytes identical", streams[0].len()))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, Check); 9] = [
        ("gradient correctness", gradient_correctness),
        ("scheduler fidelity", scheduler_fidelity),
        ("QK-norm bound", qk_norm_bound),
        ("LoRA identities", lora_identities),
        ("curriculum freeze soundness", freeze_soundness),
        ("trainability at desk scale", memorization),
        ("ablation harness totality", ablation_totality),
        ("template golden files", template_goldens),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {}: {name}: PASS ({detail})", i + 1),
            Err(why) => {
                println!("criterion {}: {name}: FAIL ({why})", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
