//! C interface: opaque handles, status codes and a per-thread error message.
//!
//! Every function returns an [`MvStatus`]. On failure the message is kept
//! until the next call on the same thread and can be read with
//! [`mv_last_error`]. Strings returned through out-pointers are owned by the
//! caller and released with [`mv_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use minivl::battery::gradcheck_battery;
use minivl::config::RunConfig;
use minivl::curriculum::{build_stage_plan, run_curriculum, JsonlSink, NullSink, RecordSink, StageReport, StageSpec};
use minivl::diagnostics::Outcome;
use minivl::model::Model;
use minivl::taskspec::{normalize_box, read_jsonl, render_training, TaskSample, TemplateMode, ToyVocab};
use minivl::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Schedule = 5,
    Parse = 6,
    Io = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

/// Stage verdict as an integer: 0 OK, 1 gradient vanish, 2 non-finite.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MvOutcome {
    Ok = 0,
    GradientVanish = 1,
    NonFinite = 2,
}

impl From<Outcome> for MvOutcome {
    fn from(o: Outcome) -> Self {
        match o {
            Outcome::Ok => MvOutcome::Ok,
            Outcome::GradientVanish => MvOutcome::GradientVanish,
            Outcome::NonFinite => MvOutcome::NonFinite,
        }
    }
}

/// Learning-rate curve of one stage.
pub struct MvSchedule {
    spec: StageSpec,
}

/// Byte-level vocabulary with special tokens.
pub struct MvVocab {
    vocab: ToyVocab,
}

/// A validated run configuration and the reports of its last run.
pub struct MvTrainer {
    config: RunConfig,
    reports: Vec<StageReport>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(MvStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config { .. } | Error::UnknownGroup(_) => MvStatus::Config,
            Error::Schedule(_) => MvStatus::Schedule,
            Error::Parse { .. } | Error::Json(_) => MvStatus::Parse,
            Error::Io(_) => MvStatus::Io,
            _ => MvStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure(MvStatus::Io, e.to_string())
    }
}

fn set_error(msg: Option<String>) {
    let c = msg.map(|m| CString::new(m.replace('\0', " ")).expect("no interior nul"));
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(None);
            MvStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(Some(msg));
            status
        }
        Err(_) => {
            set_error(Some("internal panic".into()));
            MvStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MvStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MvStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn owned_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(MvStatus::InvalidArgument, "string contains a nul byte".into()))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mv_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Learning-rate schedule of `stage` (1 to 4) with step counts divided by
/// `scale_divisor`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_schedule_for_stage(stage: usize, scale_divisor: usize, out: *mut *mut MvSchedule) -> MvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec = build_stage_plan(stage, scale_divisor)?;
        *out = Box::into_raw(Box::new(MvSchedule { spec }));
        Ok(())
    })
}

/// # Safety
/// `s` must be a live schedule handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_schedule_total_steps(s: *const MvSchedule, out: *mut usize) -> MvStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(s, "schedule")?.spec.total_steps();
        Ok(())
    })
}

/// Learning rate at `step`, defined on `0..=total_steps`.
///
/// # Safety
/// `s` must be a live schedule handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_schedule_lr(s: *const MvSchedule, step: usize, out: *mut f64) -> MvStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(s, "schedule")?.spec.schedule.lr(step)?;
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a live schedule handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn mv_schedule_free(s: *mut MvSchedule) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_vocab_new(out: *mut *mut MvVocab) -> MvStatus {
    guard(|| {
        *out_arg(out, "out")? = Box::into_raw(Box::new(MvVocab { vocab: ToyVocab::new() }));
        Ok(())
    })
}

/// # Safety
/// `v` must be a live vocab handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_vocab_size(v: *const MvVocab, out: *mut usize) -> MvStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(v, "vocab")?.vocab.size();
        Ok(())
    })
}

/// Encodes `text`. `*out_len` receives the id count; ids are written to
/// `ids` only when `capacity` is large enough, otherwise the call returns
/// `BufferTooSmall`. Pass `ids = NULL, capacity = 0` to query the length.
///
/// # Safety
/// `v` must be live, `text` a nul-terminated string, `ids` valid for
/// `capacity` writes, `out_len` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_vocab_encode(
    v: *const MvVocab,
    text: *const c_char,
    ids: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> MvStatus {
    guard(|| {
        let v = handle(v, "vocab")?;
        let text = str_arg(text, "text")?;
        let out_len = out_arg(out_len, "out_len")?;
        let encoded = v.vocab.encode_str(text);
        *out_len = encoded.len();
        if encoded.len() > capacity {
            return Err(Failure(
                MvStatus::BufferTooSmall,
                format!("{} ids do not fit in {capacity}", encoded.len()),
            ));
        }
        if !encoded.is_empty() {
            if ids.is_null() {
                return Err(null("ids"));
            }
            ptr::copy_nonoverlapping(encoded.as_ptr(), ids, encoded.len());
        }
        Ok(())
    })
}

/// Decodes `len` ids into a newly allocated string.
///
/// # Safety
/// `v` must be live, `ids` valid for `len` reads, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_vocab_decode(v: *const MvVocab, ids: *const u32, len: usize, out: *mut *mut c_char) -> MvStatus {
    guard(|| {
        let v = handle(v, "vocab")?;
        let out = out_arg(out, "out")?;
        let ids = if len == 0 {
            &[][..]
        } else if ids.is_null() {
            return Err(null("ids"));
        } else {
            std::slice::from_raw_parts(ids, len)
        };
        *out = owned_string(v.vocab.decode_string(ids)?)?;
        Ok(())
    })
}

/// # Safety
/// `v` must be null or a live vocab handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn mv_vocab_free(v: *mut MvVocab) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// Renders one JSON-encoded sample as training text. `multitask` selects
/// whether the task token is included.
///
/// # Safety
/// `sample_json` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_render_sample(sample_json: *const c_char, multitask: bool, out: *mut *mut c_char) -> MvStatus {
    guard(|| {
        let json = str_arg(sample_json, "sample_json")?;
        let out = out_arg(out, "out")?;
        let sample: TaskSample = parse_one_sample(json)?;
        let mode = if multitask { TemplateMode::MultiTask } else { TemplateMode::Plain };
        *out = owned_string(render_training(&sample, mode)?)?;
        Ok(())
    })
}

fn parse_one_sample(json: &str) -> Result<TaskSample, Failure> {
    let mut samples = read_jsonl(json)?;
    if samples.len() != 1 {
        return Err(Failure(
            MvStatus::Parse,
            format!("expected one JSON sample, got {}", samples.len()),
        ));
    }
    Ok(samples.remove(0))
}

/// Scales a pixel box in a `width`×`height` frame to integers in
/// `[0, 100]`, written to `out[0..4]`.
///
/// # Safety
/// `out` must be valid for four writes.
#[no_mangle]
pub unsafe extern "C" fn mv_normalize_box(
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    width: f64,
    height: f64,
    out: *mut u32,
) -> MvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let b = normalize_box([x1, y1, x2, y2], width, height)?;
        ptr::copy_nonoverlapping(b.as_ptr(), out, 4);
        Ok(())
    })
}

/// Runs the finite-difference battery; `*out_max_rel_error` receives the
/// largest relative error over all components.
///
/// # Safety
/// `out_max_rel_error` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_gradcheck(out_max_rel_error: *mut f64) -> MvStatus {
    guard(|| {
        let out = out_arg(out_max_rel_error, "out_max_rel_error")?;
        *out = gradcheck_battery(None)?
            .iter()
            .map(|e| e.report.max_rel_error)
            .fold(0.0, f64::max);
        Ok(())
    })
}

/// Parses and validates a TOML run configuration.
///
/// # Safety
/// `toml` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_trainer_from_toml(toml: *const c_char, out: *mut *mut MvTrainer) -> MvStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        let out = out_arg(out, "out")?;
        let config = RunConfig::from_toml(text)?;
        *out = Box::into_raw(Box::new(MvTrainer {
            config,
            reports: Vec::new(),
        }));
        Ok(())
    })
}

/// Trains a fresh model through the configured stages. One JSON record
/// per step goes to `metrics_path` when it is not null. `*out_outcome`
/// receives the worst stage verdict.
///
/// # Safety
/// `t` must be live, `metrics_path` null or a nul-terminated string,
/// `out_outcome` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_trainer_run(t: *mut MvTrainer, metrics_path: *const c_char, out_outcome: *mut MvOutcome) -> MvStatus {
    guard(|| {
        let t = t.as_mut().ok_or_else(|| null("trainer"))?;
        let out = out_arg(out_outcome, "out_outcome")?;
        let cfg = &t.config;
        let plan = cfg.plan()?;
        let mut model = Model::new(&cfg.model, cfg.seed)?;
        let mut run = |sink: &mut dyn RecordSink| {
            run_curriculum(&mut model, &plan, &cfg.options(), &cfg.train.data, cfg.seed, sink)
        };
        t.reports = if metrics_path.is_null() {
            run(&mut NullSink)?
        } else {
            let path = str_arg(metrics_path, "metrics_path")?;
            let mut sink = JsonlSink(BufWriter::new(File::create(path)?));
            let reports = run(&mut sink)?;
            sink.0.flush()?;
            reports
        };
        *out = t
            .reports
            .iter()
            .map(|r| r.outcome.verdict.outcome)
            .max()
            .unwrap_or(Outcome::Ok)
            .into();
        Ok(())
    })
}

/// Number of stages reported by the last run.
///
/// # Safety
/// `t` must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_trainer_stage_count(t: *const MvTrainer, out: *mut usize) -> MvStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(t, "trainer")?.reports.len();
        Ok(())
    })
}

/// Verdict, steps run and final loss of stage `index` of the last run.
///
/// # Safety
/// `t` must be live and every out pointer valid.
#[no_mangle]
pub unsafe extern "C" fn mv_trainer_stage_result(
    t: *const MvTrainer,
    index: usize,
    out_outcome: *mut MvOutcome,
    out_steps: *mut usize,
    out_final_loss: *mut f64,
) -> MvStatus {
    guard(|| {
        let t = handle(t, "trainer")?;
        let r = t.reports.get(index).ok_or_else(|| {
            Failure(
                MvStatus::InvalidArgument,
                format!("stage index {index} out of range 0..{}", t.reports.len()),
            )
        })?;
        *out_arg(out_outcome, "out_outcome")? = r.outcome.verdict.outcome.into();
        *out_arg(out_steps, "out_steps")? = r.outcome.steps_run;
        *out_arg(out_final_loss, "out_final_loss")? = r.outcome.final_record.loss;
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a live trainer handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn mv_trainer_free(t: *mut MvTrainer) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}
