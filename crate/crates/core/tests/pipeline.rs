mod common;

use std::collections::BTreeSet;

use common::{bits, tiny_config};
use minivl::curriculum::{run_curriculum, NullSink};
use minivl::diagnostics::{ablation_suite, classify, Outcome, TrainRecord, VanishRule};
use minivl::model::Model;
use minivl::params::ParamGroup;
use minivl::vision::{synthetic_image, FrozenEncoder};

fn encoder_bits(e: &FrozenEncoder) -> Vec<Vec<u64>> {
    [&e.patch_embed, &e.w_q, &e.w_k, &e.w_v, &e.w_o, &e.ln_gamma, &e.ln_beta]
        .iter()
        .map(|t| bits(t.data()))
        .collect()
}

fn healthy_run(n: usize) -> Vec<TrainRecord> {
    (0..n)
        .map(|step| TrainRecord {
            stage: 2,
            step,
            loss: 5.0 - 0.01 * step as f64,
            lr: 1e-4,
            grad_norms: [(ParamGroup::Lora, 0.3 + 0.001 * step as f64)].into_iter().collect(),
            untouched: vec![ParamGroup::Embeddings],
            nonfinite: false,
        })
        .collect()
}

#[test]
fn single_nan_anywhere_flips_the_verdict() {
    let rule = VanishRule::default();
    let clean = healthy_run(120);
    assert_eq!(classify(&clean, rule).unwrap().outcome, Outcome::Ok);
    for i in 0..clean.len() {
        let mut runs = [clean.clone(), clean.clone()];
        runs[0][i].loss = f64::NAN;
        runs[1][i].nonfinite = true;
        for r in &runs {
            let v = classify(r, rule).unwrap();
            assert_eq!(v.outcome, Outcome::NonFinite, "step {i}");
            assert_eq!(v.first_bad_step, Some(i));
        }
    }
}

#[test]
fn collapsed_gradients_with_flat_loss_vanish() {
    let mut recs = healthy_run(80);
    for r in recs.iter_mut().skip(20) {
        r.grad_norms.insert(ParamGroup::Lora, 0.0);
        r.loss = 5.0;
    }
    let v = classify(&recs, VanishRule::default()).unwrap();
    assert_eq!(v.outcome, Outcome::GradientVanish);
    assert_eq!(v.first_bad_step, Some(30));
    assert_eq!(classify(&recs, VanishRule::default()).unwrap(), v);
}

#[test]
fn curriculum_keeps_frozen_parameters_and_encoder() {
    let cfg = tiny_config(16);
    let plan = cfg.plan().unwrap();
    let mut model = Model::new(&cfg.model, cfg.seed).unwrap();
    let encoder_before = encoder_bits(&model.encoder);
    let patches_before = bits(model.encoder.patchify(&synthetic_image(4, 224)).unwrap().tokens.data());
    let reports = run_curriculum(&mut model, &plan, &cfg.options(), &cfg.train.data, cfg.seed, &mut NullSink).unwrap();
    assert_eq!(reports.len(), 4);
    for r in &reports {
        assert!(r.frozen_intact, "stage {}", r.outcome.stage);
        assert_eq!(r.outcome.verdict.outcome, Outcome::Ok, "stage {}", r.outcome.stage);
    }
    assert_eq!(encoder_bits(&model.encoder), encoder_before);
    let patches_after = bits(model.encoder.patchify(&synthetic_image(4, 224)).unwrap().tokens.data());
    assert_eq!(patches_after, patches_before);
}

#[test]
fn bridge_parameters_all_belong_to_the_projection_stack() {
    let cfg = tiny_config(16);
    let model = Model::new(&cfg.model, cfg.seed).unwrap();
    let stack: BTreeSet<_> = model.stack.param_ids().into_iter().collect();
    let grouped: BTreeSet<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.group == ParamGroup::ProjectionStack)
        .map(|(id, _)| id)
        .collect();
    assert_eq!(stack, grouped);
}

#[test]
fn ablation_table_is_complete_and_reproducible() {
    let mut cfg = tiny_config(16);
    cfg.train.stages = vec![1, 2];
    let a = ablation_suite(&cfg).unwrap();
    let b = ablation_suite(&cfg).unwrap();
    assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
    assert_eq!(a.cells.len(), 5 * 2);
    for c in a.cells.iter().filter(|c| c.config == "full") {
        assert_eq!(c.outcome, Outcome::Ok);
    }
    let no_lora = a.cell("w/o LoRA", 16, 2).unwrap();
    assert_eq!(no_lora.outcome, Outcome::GradientVanish);
    assert!(a.cell("w/o QK Norm", 16, 1).unwrap().saturated);
    assert!(!a.cell("full", 16, 1).unwrap().saturated);
}
