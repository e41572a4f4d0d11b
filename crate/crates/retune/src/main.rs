use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;
use serde_json::json;

use retune::audio::CorpusSpec;
use retune::checkpoint::{self, SurgeryOp};
use retune::config;
use retune::error::Error;
use retune::training::{self, Objective, PipelineConfig, StageConfig};
use retune::verify;

/// Adapt and reuse self-supervised speech models: stride surgery, encoder
/// truncation, freezing schedules, staged training.
#[derive(Parser)]
#[command(name = "retune", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct StageArgs {
    /// Stage config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; artifacts land under <out>/<stage name>/.
    #[arg(long)]
    out: PathBuf,
    /// Root seed; the stage seed derives from it unless the config pins one.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dotted-path config overrides, e.g. --set optimizer.peak_lr=0.002
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic tone corpus and its manifest.
    Synth {
        /// Corpus spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run a masked-prediction pre-training stage.
    Pretrain(StageArgs),
    /// Run a supervised fine-tuning stage.
    Finetune(StageArgs),
    /// Run a bandwidth- or domain-adaptation stage.
    Adapt(StageArgs),
    /// Run a multi-stage pipeline from one config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Apply surgeries to a checkpoint without training.
    Surgery {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Ops in order: truncate:N, adapt_bandwidth:TARGET:METHOD[:fold],
        /// attach_head:C, detach_head. Repeatable.
        #[arg(long = "op", value_name = "OP", required = true)]
        ops: Vec<String>,
        /// Seed for freshly initialized parameters (attach_head).
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print architecture, geometry, provenance, and parameter counts.
    Inspect {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Compare two checkpoints parameter by parameter.
    Diff {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run the built-in verification suites and print a JSON report.
    Verify {
        /// Probe points per operator in the gradient suite.
        #[arg(long, default_value_t = 10)]
        grad_points: usize,
    },
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) => 1,
        Error::Verification(_) => 3,
        Error::Stage { source, .. } => exit_code(source),
        _ => 2,
    }
}

fn run_stage_cmd(args: StageArgs, objective: Objective) -> Result<(), Error> {
    let cfg: StageConfig = config::load(&args.config, &args.set)?;
    if cfg.objective != objective {
        return Err(Error::Config {
            path: "objective".into(),
            reason: format!(
                "config says `{}` but the subcommand expects `{}`",
                cfg.objective.as_str(),
                objective.as_str()
            ),
        });
    }
    eprintln!("stage `{}`: {} steps", cfg.name, cfg.steps);
    let out = training::run_stage(&cfg, args.seed, &args.out, &IndexMap::new())?;
    let summary = json!({
        "stage": cfg.name,
        "checkpoint": out.checkpoint_path,
        "metrics": out.metrics_path,
        "eval": out.eval_path,
        "final_eval": out.final_eval.map(|(fce, acc)| json!({
            "fce": fce,
            "frame_accuracy": acc,
        })),
    });
    println!("{summary}");
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::Synth { spec, out, set } => {
            let spec: CorpusSpec = config::load(&spec, &set)?;
            let manifest = retune::audio::synth_corpus(&spec, &out)?;
            eprintln!("wrote {} utterances", spec.num_utterances);
            println!("{}", manifest.display());
            Ok(())
        }
        Cmd::Pretrain(args) => run_stage_cmd(args, Objective::Pretrain),
        Cmd::Finetune(args) => run_stage_cmd(args, Objective::Finetune),
        Cmd::Adapt(args) => run_stage_cmd(args, Objective::Adapt),
        Cmd::Pipeline { config: path, out, set } => {
            let cfg: PipelineConfig = config::load(&path, &set)?;
            let result = training::run_pipeline(&cfg, &out)?;
            let stages: Vec<_> = result
                .stages
                .iter()
                .map(|(name, s)| {
                    json!({
                        "stage": name,
                        "checkpoint": s.checkpoint_path,
                        "final_eval": s.final_eval.map(|(fce, acc)| json!({
                            "fce": fce,
                            "frame_accuracy": acc,
                        })),
                    })
                })
                .collect();
            println!("{}", json!({ "seed": cfg.seed, "stages": stages }));
            Ok(())
        }
        Cmd::Surgery { input, output, ops, seed } => {
            let ops = ops
                .iter()
                .map(|s| SurgeryOp::parse(s))
                .collect::<Result<Vec<_>, _>>()?;
            let model = checkpoint::load(&input)?;
            let model = checkpoint::apply_surgery(&model, &ops, seed)?;
            checkpoint::save(&model, &output)?;
            for op in &ops {
                eprintln!("applied {}", op.render());
            }
            println!("{}", output.display());
            Ok(())
        }
        Cmd::Inspect { input, json } => {
            let model = checkpoint::load(&input)?;
            let report = checkpoint::inspect(&model)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", checkpoint::render_inspect(&report));
            }
            Ok(())
        }
        Cmd::Diff { a, b, json } => {
            let ma = checkpoint::load(&a)?;
            let mb = checkpoint::load(&b)?;
            let entries = checkpoint::diff(&ma, &mb);
            if json {
                println!("{}", serde_json::to_string_pretty(&entries)?);
            } else {
                print!("{}", checkpoint::render_diff(&entries));
            }
            Ok(())
        }
        Cmd::Verify { grad_points } => {
            let report = verify::run_with(grad_points);
            for suite in &report.suites {
                eprintln!(
                    "{} {}: {}",
                    if suite.passed { "pass" } else { "FAIL" },
                    suite.name,
                    suite.detail
                );
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.passed {
                Ok(())
            } else {
                let failed: Vec<&str> = report
                    .suites
                    .iter()
                    .filter(|s| !s.passed)
                    .map(|s| s.name.as_str())
                    .collect();
                Err(Error::Verification(format!("suites failed: {}", failed.join(", "))))
            }
        }
    }
}
