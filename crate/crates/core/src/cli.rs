//! Command-line entry points.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autograd::CorruptRule;
use crate::battery::{gradcheck_battery, TOLERANCE};
use crate::config::RunConfig;
use crate::curriculum::{build_stage_plan, run_curriculum, JsonlSink, StageReport};
use crate::diagnostics::{ablation_suite, Outcome};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::taskspec::{read_jsonl, render_training, TemplateMode};

#[derive(Debug, Parser)]
#[command(name = "minivl", version, about = "Desk-scale multimodal transformer training harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured stage sequence and write metrics, verdict and manifest.
    Train(RunArgs),
    /// Run the five-configuration ablation and write the verdict table.
    Ablate(RunArgs),
    /// Print `step,lr` for every step of one stage.
    LrDump {
        #[arg(long)]
        stage: usize,
        #[arg(long, default_value_t = 1)]
        scale: usize,
    },
    /// Render samples from a JSONL file, or compare them with a golden file.
    Render {
        samples: PathBuf,
        /// Compare against GOLDEN (default: the samples path with a
        /// `.golden` extension) instead of printing.
        #[arg(long, num_args = 0..=1, value_name = "GOLDEN")]
        check: Option<Option<PathBuf>>,
        /// Omit task tokens.
        #[arg(long)]
        plain: bool,
    },
    /// Finite-difference check of every layer type.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt: Option<CorruptRule>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Desk-scale divisor for every stage's step counts.
    #[arg(long)]
    pub scale: Option<usize>,
    /// Default output root when neither --out nor the config names one.
    #[arg(long, env = "MINIVL_OUT", hide = true)]
    pub out_root: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p)?;
                RunConfig::from_toml(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = self.scale {
            cfg.train.scale_divisor = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig, verb: &str) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| self.out_root.clone().unwrap_or_else(|| PathBuf::from("runs")).join(verb))
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    seed: u64,
    minivl_version: &'a str,
    config: &'a RunConfig,
}

fn write_manifest(dir: &Path, verb: &str, cfg: &RunConfig) -> Result<()> {
    let canonical = cfg.to_toml()?;
    let hash = Sha256::digest(canonical.as_bytes());
    let manifest = Manifest {
        command: verb,
        config_sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
        seed: cfg.seed,
        minivl_version: env!("CARGO_PKG_VERSION"),
        config: cfg,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct TrainVerdict<'a> {
    outcome: Outcome,
    stages: &'a [StageReport],
}

pub fn cmd_train(args: &RunArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = args.load()?;
    let dir = args.out_dir(&cfg, "train");
    fs::create_dir_all(&dir)?;
    write_manifest(&dir, "train", &cfg)?;
    let plan = cfg.plan()?;
    let mut model = Model::new(&cfg.model, cfg.seed)?;
    let metrics = fs::File::create(dir.join("metrics.jsonl"))?;
    let mut sink = JsonlSink(std::io::BufWriter::new(metrics));
    let reports = run_curriculum(&mut model, &plan, &cfg.options(), &cfg.train.data, cfg.seed, &mut sink)?;
    sink.0.flush()?;
    let outcome = reports
        .iter()
        .map(|r| r.outcome.verdict.outcome)
        .max()
        .unwrap_or(Outcome::Ok);
    let verdict = TrainVerdict {
        outcome,
        stages: &reports,
    };
    fs::write(dir.join("verdict.json"), serde_json::to_string_pretty(&verdict)? + "\n")?;
    for r in &reports {
        writeln!(
            out,
            "stage {}: {} after {} steps, final loss {:.4}",
            r.outcome.stage,
            r.outcome.verdict.outcome.label(),
            r.outcome.steps_run,
            r.outcome.final_record.loss
        )?;
    }
    writeln!(out, "wrote {}", dir.display())?;
    let frozen_ok = reports.iter().all(|r| r.frozen_intact);
    Ok(if outcome == Outcome::Ok && frozen_ok { 0 } else { 1 })
}

pub fn cmd_ablate(args: &RunArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = args.load()?;
    let dir = args.out_dir(&cfg, "ablate");
    fs::create_dir_all(&dir)?;
    write_manifest(&dir, "ablate", &cfg)?;
    let table = ablation_suite(&cfg)?;
    fs::write(dir.join("ablation.jsonl"), table.to_jsonl()?)?;
    let text = table.to_text();
    fs::write(dir.join("ablation.txt"), &text)?;
    write!(out, "{text}")?;
    let full_ok = table
        .cells
        .iter()
        .filter(|c| c.config == "full" && c.d_model == cfg.model.block.d_model)
        .all(|c| c.outcome == Outcome::Ok);
    Ok(if full_ok { 0 } else { 1 })
}

pub fn cmd_lr_dump(stage: usize, scale: usize, out: &mut dyn Write) -> Result<i32> {
    let spec = build_stage_plan(stage, scale)?;
    for (step, lr) in spec.lr_curve()? {
        writeln!(out, "{step},{lr:e}")?;
    }
    Ok(0)
}

fn default_golden(samples: &Path) -> PathBuf {
    samples.with_extension("golden")
}

/// One rendered training text per sample, newline-terminated.
pub fn render_file(samples: &Path, mode: TemplateMode) -> Result<String> {
    let text = fs::read_to_string(samples)?;
    let mut out = String::new();
    for s in read_jsonl(&text)? {
        out.push_str(&render_training(&s, mode)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn cmd_render(samples: &Path, check: Option<&Path>, plain: bool, out: &mut dyn Write) -> Result<i32> {
    let mode = if plain { TemplateMode::Plain } else { TemplateMode::MultiTask };
    let rendered = render_file(samples, mode)?;
    let Some(golden) = check else {
        write!(out, "{rendered}")?;
        return Ok(0);
    };
    let want = fs::read_to_string(golden)?;
    if rendered == want {
        writeln!(out, "ok: {} matches {}", samples.display(), golden.display())?;
        return Ok(0);
    }
    let mut got_lines = rendered.lines();
    let mut want_lines = want.lines();
    let mut line = 1;
    loop {
        match (got_lines.next(), want_lines.next()) {
            (Some(a), Some(b)) if a == b => line += 1,
            (a, b) => {
                writeln!(out, "mismatch at line {line}")?;
                writeln!(out, "  rendered: {}", a.unwrap_or("<end of output>"))?;
                writeln!(out, "  golden:   {}", b.unwrap_or("<end of file>"))?;
                break;
            }
        }
    }
    Ok(1)
}

pub fn cmd_gradcheck(corrupt: Option<CorruptRule>, out: &mut dyn Write) -> Result<i32> {
    let entries = gradcheck_battery(corrupt)?;
    let mut ok = true;
    for e in &entries {
        ok &= e.passed();
        writeln!(
            out,
            "{:<18} max_rel_error {:.3e}  coords {:>5}  {}",
            e.name,
            e.report.max_rel_error,
            e.report.coords_checked,
            if e.passed() { "ok" } else { "FAIL" }
        )?;
    }
    writeln!(out, "tolerance {TOLERANCE:e}: {}", if ok { "all passed" } else { "failures" })?;
    Ok(if ok { 0 } else { 1 })
}

/// Parses arguments, runs the command, and returns the process exit code.
/// Errors are printed to stderr and exit with 2.
pub fn run(cli: Cli) -> i32 {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let res = match &cli.command {
        Command::Train(a) => cmd_train(a, &mut out),
        Command::Ablate(a) => cmd_ablate(a, &mut out),
        Command::LrDump { stage, scale } => cmd_lr_dump(*stage, *scale, &mut out),
        Command::Render { samples, check, plain } => {
            let golden = check.as_ref().map(|c| c.clone().unwrap_or_else(|| default_golden(samples)));
            cmd_render(samples, golden.as_deref(), *plain, &mut out)
        }
        Command::Gradcheck { corrupt } => cmd_gradcheck(*corrupt, &mut out),
    };
    match res {
        Ok(code) => code,
        // Output piped into `head` and friends.
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            2
        }
    }
}
