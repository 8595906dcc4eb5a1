use std::ffi::{CStr, CString};
use std::ptr;

use minivl::config::RunConfig;
use minivl_ffi::*;

fn tiny_toml() -> CString {
    let mut cfg = RunConfig::default();
    cfg.model.n_blocks = 1;
    cfg.model.block.d_model = 16;
    cfg.model.block.d_mlp = 32;
    cfg.model.bridge.d_vis = 16;
    cfg.model.bridge.d_q = 16;
    cfg.model.bridge.d_mid = 16;
    cfg.model.bridge.n_query = 8;
    cfg.model.bridge.patch_size = 32;
    cfg.model.bridge.encoder_heads = 2;
    cfg.train.stages = vec![1, 3];
    cfg.train.batch_size = 2;
    CString::new(cfg.to_toml().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = mv_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn trainer_runs_and_reports_each_stage() {
    let dir = tempfile::tempdir().unwrap();
    let toml = tiny_toml();
    let mut streams = Vec::new();
    for run in ["a.jsonl", "b.jsonl"] {
        let path = CString::new(dir.path().join(run).to_str().unwrap()).unwrap();
        unsafe {
            let mut t = ptr::null_mut();
            assert_eq!(mv_trainer_from_toml(toml.as_ptr(), &mut t), MvStatus::Ok);
            let mut outcome = MvOutcome::NonFinite;
            assert_eq!(mv_trainer_run(t, path.as_ptr(), &mut outcome), MvStatus::Ok);
            assert_eq!(outcome, MvOutcome::Ok);
            let mut n = 0;
            assert_eq!(mv_trainer_stage_count(t, &mut n), MvStatus::Ok);
            assert_eq!(n, 2);
            let (mut o, mut steps, mut loss) = (MvOutcome::NonFinite, 0usize, 0.0f64);
            assert_eq!(mv_trainer_stage_result(t, 1, &mut o, &mut steps, &mut loss), MvStatus::Ok);
            assert_eq!((o, steps), (MvOutcome::Ok, 5));
            assert!(loss.is_finite());
            assert_eq!(mv_trainer_stage_result(t, 2, &mut o, &mut steps, &mut loss), MvStatus::InvalidArgument);
            assert!(last_error().contains("out of range"));
            mv_trainer_free(t);
        }
        streams.push(std::fs::read(dir.path().join(run)).unwrap());
    }
    assert_eq!(streams[0], streams[1]);
    assert_eq!(streams[0].iter().filter(|b| **b == b'\n').count(), 85 + 5);
}

#[test]
fn config_errors_carry_the_field() {
    let bad = CString::new("seed = 1\n[model]\nn_blocks = 0\n").unwrap();
    let mut t = ptr::null_mut();
    let status = unsafe { mv_trainer_from_toml(bad.as_ptr(), &mut t) };
    assert_eq!(status, MvStatus::Config);
    assert!(t.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn null_and_invalid_arguments_are_reported() {
    unsafe {
        assert_eq!(mv_schedule_for_stage(2, 1, ptr::null_mut()), MvStatus::NullPointer);
        assert!(last_error().contains("out"));
        let mut s = ptr::null_mut();
        assert_eq!(mv_schedule_for_stage(5, 1, &mut s), MvStatus::InvalidArgument);
        assert_eq!(mv_schedule_for_stage(3, 200, &mut s), MvStatus::Ok);
        assert!(mv_last_error().is_null());
        let mut lr = 0.0;
        assert_eq!(mv_schedule_lr(s, 5, &mut lr), MvStatus::Ok);
        assert_eq!(lr, 1e-5);
        mv_schedule_free(s);

        let bytes = [0xffu8, 0xfe, 0];
        let mut v = ptr::null_mut();
        assert_eq!(mv_vocab_new(&mut v), MvStatus::Ok);
        let mut n = 0;
        assert_eq!(mv_vocab_encode(v, bytes.as_ptr().cast(), ptr::null_mut(), 0, &mut n), MvStatus::InvalidUtf8);
        let mut out = ptr::null_mut();
        let ids = [300u32];
        assert_eq!(mv_vocab_decode(v, ids.as_ptr(), 1, &mut out), MvStatus::InvalidArgument);
        mv_vocab_free(v);

        let two = CString::new("{\"task\":\"vqa\",\"image_seed\":1,\"instruction\":\"a\",\"target\":\"b\"}\n{\"task\":\"vqa\",\"image_seed\":1,\"instruction\":\"a\",\"target\":\"b\"}").unwrap();
        assert_eq!(mv_render_sample(two.as_ptr(), true, &mut out), MvStatus::Parse);
        mv_string_free(ptr::null_mut());
    }
}
