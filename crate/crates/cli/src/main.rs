//! `headwise`: the pipeline from synthetic data through training, head
//! analysis, pattern selection and injection.
//!
//! Exit status is 0 on success, 2 for configuration and usage errors, 1 for
//! anything else. Every run writes `config.resolved.toml` into `--out`.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use headwise::config::RunConfig;
use headwise::corpus::{synth_raw, write_jsonl, SynthConfig};
use headwise::importance::{self, Method};
use headwise::inference::{evaluate_with_predictions, write_predictions};
use headwise::model::Model;
use headwise::pal::attach_pals;
use headwise::patterns::{gr_dataset, select_pattern, PatternSpec};
use headwise::trainer::{self, subset_patterns, Toggle, TrainOutcome};
use headwise::{to_json, Error};

#[derive(Parser)]
#[command(name = "headwise", version, about = "Head importance, pattern relevance and pattern injection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML). Defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Analysis {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "valid")]
    split: String,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train/valid splits and vocabulary.
    Synth(Common),
    /// Train a model (pattern assignments from `[patterns]`).
    Train(Common),
    /// Head importance report.
    Importance {
        #[command(flatten)]
        analysis: Analysis,
        /// loo | sensitivity | taylor
        #[arg(long, default_value = "loo")]
        method: Method,
    },
    /// Global relevance of one pattern on every head, with t-test verdicts.
    Gr {
        #[command(flatten)]
        analysis: Analysis,
        #[arg(long)]
        pattern: PathBuf,
    },
    /// Keep or drop each pattern by its t-test verdicts.
    Select {
        #[command(flatten)]
        analysis: Analysis,
        #[arg(long, required = true)]
        pattern: Vec<PathBuf>,
    },
    /// Attach projected attention layers (`[pal]`) and fine-tune.
    InjectPal {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Only attach and save, no fine-tuning.
        #[arg(long)]
        no_train: bool,
    },
    /// Pattern ablation grid over {m, i, p} subsets.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Subset label such as `m+i`; repeatable. Default: all eight.
        #[arg(long = "subset")]
        subsets: Vec<String>,
    },
    /// Baseline vs pattern injection vs PAL fine-tuning.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Pattern subset for the injected variant.
        #[arg(long, default_value = "m+i+p")]
        patterns: String,
    },
    /// ROUGE of a checkpoint, with predictions.
    Eval {
        #[command(flatten)]
        analysis: Analysis,
        #[arg(long)]
        blocking: bool,
    },
    /// Start the HTTP service.
    Serve {
        #[command(flatten)]
        analysis: Analysis,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory of run output directories.
        #[arg(long)]
        runs: Option<PathBuf>,
        /// Where exported injection configs are written.
        #[arg(long)]
        injection: Option<PathBuf>,
    },
}

/// Loaded configuration plus where relative paths resolve and where outputs go.
struct Ctx {
    config: RunConfig,
    base: PathBuf,
    out: PathBuf,
}

impl Ctx {
    fn new(common: &Common) -> headwise::Result<Self> {
        let config = RunConfig::load(common.config.as_deref(), &common.overrides)?;
        let base = match common.config.as_deref().and_then(Path::parent) {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
        let ctx = Self {
            config,
            base,
            out: common.out.clone(),
        };
        ctx.write("config.resolved.toml", &ctx.config.to_toml())?;
        Ok(ctx)
    }

    fn write(&self, name: &str, text: &str) -> headwise::Result<()> {
        let path = self.out.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn parse_subset(label: &str) -> headwise::Result<Vec<Toggle>> {
    if label == "none" {
        return Ok(Vec::new());
    }
    let mut toggles = Vec::new();
    for part in label.split('+') {
        let t = match part.trim() {
            "m" => Toggle::Matching,
            "i" => Toggle::Intra,
            "p" => Toggle::Positional,
            other => return Err(Error::config("subset", format!("unknown toggle {other:?} in {label:?}"))),
        };
        if !toggles.contains(&t) {
            toggles.push(t);
        }
    }
    Ok(toggles)
}

/// Writes the run log, kept checkpoints and `best.ckpt`. Wall-clock time goes
/// to `timing.json` so the other artifacts stay byte-reproducible.
fn write_run(ctx: &Ctx, outcome: &TrainOutcome, started: Instant) -> headwise::Result<()> {
    ctx.write("run_log.json", &to_json(&outcome.log))?;
    for c in &outcome.checkpoints {
        c.model.save(&ctx.path(&c.record.file))?;
    }
    outcome.best().save(&ctx.path("best.ckpt"))?;
    ctx.write(
        "timing.json",
        &to_json(&serde_json::json!({ "seconds": started.elapsed().as_secs_f64() })),
    )
}

fn run(command: Command) -> headwise::Result<()> {
    match command {
        Command::Synth(common) => {
            let ctx = Ctx::new(&common)?;
            let d = &ctx.config.data;
            let train = synth_raw(&d.synth, d.seed)?;
            let valid_cfg = SynthConfig {
                n_docs: d.valid_docs,
                ..d.synth.clone()
            };
            let mut valid = synth_raw(&valid_cfg, d.seed.wrapping_add(1))?;
            for doc in &mut valid {
                doc.id = doc.id.replacen("synth", "synth-valid", 1);
            }
            write_jsonl(&ctx.path("train.jsonl"), &train)?;
            write_jsonl(&ctx.path("valid.jsonl"), &valid)?;
            d.synth.vocab().save(&ctx.path("vocab.txt"))
        }
        Command::Train(common) => {
            let ctx = Ctx::new(&common)?;
            let started = Instant::now();
            let (train, valid) = ctx.config.datasets(&ctx.base)?;
            let model = ctx.config.build_model()?;
            let outcome = trainer::train_run(&model, &train, &valid, &ctx.config.train)?;
            write_run(&ctx, &outcome, started)
        }
        Command::Importance { analysis, method } => {
            let (ctx, model, ds) = load_analysis(&analysis)?;
            let report = importance::estimate(&model, &ds, method)?;
            ctx.write(&format!("importance-{}.json", method.as_str()), &to_json(&report))
        }
        Command::Gr { analysis, pattern } => {
            let (ctx, model, ds) = load_analysis(&analysis)?;
            let spec = PatternSpec::load(&pattern)?;
            let report = gr_dataset(&model, &ds, &spec, ctx.config.patterns.alpha)?;
            ctx.write(&format!("gr-{}.json", spec.name), &to_json(&report))
        }
        Command::Select { analysis, pattern } => {
            let (ctx, model, ds) = load_analysis(&analysis)?;
            let mut selections = Vec::new();
            for p in &pattern {
                let spec = PatternSpec::load(p)?;
                let report = gr_dataset(&model, &ds, &spec, ctx.config.patterns.alpha)?;
                ctx.write(&format!("gr-{}.json", spec.name), &to_json(&report))?;
                selections.push(select_pattern(&report));
            }
            ctx.write("selection.json", &to_json(&selections))
        }
        Command::InjectPal {
            common,
            checkpoint,
            no_train,
        } => {
            let ctx = Ctx::new(&common)?;
            let started = Instant::now();
            let base = Model::load(&checkpoint)?;
            let augmented = attach_pals(&base, &ctx.config.pal, ctx.config.train.seed)?;
            if no_train {
                return augmented.save(&ctx.path("augmented.ckpt"));
            }
            let (train, valid) = ctx.config.datasets(&ctx.base)?;
            let outcome = trainer::train_run(&augmented, &train, &valid, &ctx.config.train)?;
            write_run(&ctx, &outcome, started)
        }
        Command::Ablate { common, subsets } => {
            let ctx = Ctx::new(&common)?;
            let subsets = subsets.iter().map(|s| parse_subset(s)).collect::<headwise::Result<Vec<_>>>()?;
            let (train, valid) = ctx.config.datasets(&ctx.base)?;
            let chosen = (!subsets.is_empty()).then_some(subsets.as_slice());
            let report = trainer::ablation_suite(&ctx.config.model, chosen, &train, &valid, &ctx.config.train)?;
            ctx.write("ablation.json", &to_json(&report))
        }
        Command::Compare { common, patterns } => {
            let ctx = Ctx::new(&common)?;
            let patterns = subset_patterns(&parse_subset(&patterns)?);
            let (train, valid) = ctx.config.datasets(&ctx.base)?;
            let c = &ctx.config;
            let report = trainer::distill_compare(&c.model, &patterns, &c.pal, &train, &valid, &c.train)?;
            ctx.write("comparison.json", &to_json(&report))
        }
        Command::Eval { analysis, blocking } => {
            let (ctx, model, ds) = load_analysis(&analysis)?;
            let (eval, preds) = evaluate_with_predictions(&model, &ds, ctx.config.train.eval_k, blocking)?;
            ctx.write("eval.json", &to_json(&eval))?;
            write_predictions(&ctx.path("predictions.jsonl"), &preds)
        }
        Command::Serve {
            analysis,
            addr,
            runs,
            injection,
        } => {
            let ctx = Ctx::new(&analysis.common)?;
            let config = headwise_service::ServiceConfig {
                run: ctx.config.clone(),
                base_dir: ctx.base.clone(),
                checkpoint: analysis.checkpoint.clone(),
                split: analysis.split.clone(),
                runs_dir: runs.or_else(|| Some(ctx.out.clone())),
                injection_path: injection.unwrap_or_else(|| ctx.path("injection.toml")),
            };
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            eprintln!("serving on http://{addr}");
            rt.block_on(headwise_service::serve(config, addr))
                .map_err(|e| Error::io(addr.to_string(), e))
        }
    }
}

fn load_analysis(a: &Analysis) -> headwise::Result<(Ctx, Model, headwise::corpus::Dataset)> {
    let ctx = Ctx::new(&a.common)?;
    let model = Model::load(&a.checkpoint)?;
    let ds = ctx.config.split(&ctx.base, &a.split)?;
    Ok((ctx, model, ds))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig { .. } | Error::TooFewHeads { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
