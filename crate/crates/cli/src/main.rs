//! lossmix command line: dataset generation, training runs, strategy
//! comparisons, adaptation runs, checkpoint evaluation and a gradient
//! self-check.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lossmix_core::config::{domain_name, Config};
use lossmix_core::detector::{load_checkpoint, param_shapes};
use lossmix_core::eval::{evaluate_model, EvalOpts};
use lossmix_core::harness::{eval_set, model_grad_check, run_comparison, run_da, run_supervised};
use lossmix_core::mix::MixStrategy;
use lossmix_core::report::RunReport;
use lossmix_core::scene::{export_coco_json, generate_scenes, write_ppm, Domain};

#[derive(Parser)]
#[command(
    name = "lossmix",
    about = "Loss-space data mixing lab for a small two-stage detector",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single-key overrides, repeatable: --set train.seed=9
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let mut cfg = Config::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            cfg.apply(&text)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set {kv}: expected KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a dataset to PPM images plus COCO-style annotations.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of images.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// source or target.
        #[arg(long, default_value = "source")]
        domain: String,
    },
    /// One supervised training run.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train every listed strategy on the same seed and data.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated strategies.
        #[arg(long, default_value = "baseline,union,noise,lossmix")]
        strategies: String,
    },
    /// Two-phase mean-teacher adaptation run.
    Da {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a saved checkpoint on a fresh evaluation set.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint written by a training run.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of the training gradient.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Parameter coordinates probed per seed.
        #[arg(long, default_value_t = 8)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Fail when the worst relative error exceeds this.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn parse_domain(s: &str) -> Result<Domain> {
    match s {
        "source" => Ok(Domain::Source),
        "target" => Ok(Domain::Target),
        _ => bail!("--domain must be source or target, got `{s}`"),
    }
}

fn print_run(report: &RunReport) {
    println!(
        "{} seed {}: ap {:.4} ap50 {:.4} ap75 {:.4} (best ap50 {:.4} at step {}) in {:.1}s",
        report.strategy,
        report.seed,
        report.final_eval.ap,
        report.final_eval.ap50,
        report.final_eval.ap75,
        report.best_ap50,
        report.best_iter,
        report.wall_seconds
    );
    if let Some(t) = &report.teacher_eval {
        println!(
            "teacher: ap {:.4} ap50 {:.4} ap75 {:.4}",
            t.ap, t.ap50, t.ap75
        );
    }
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Gen {
            config,
            out,
            count,
            domain,
        } => {
            let cfg = config.load()?;
            let domain = parse_domain(&domain)?;
            std::fs::create_dir_all(&out)?;
            let samples = generate_scenes(&cfg.scene, domain, cfg.train.seed, count);
            for (k, s) in samples.iter().enumerate() {
                write_ppm(&out.join(format!("img_{k:04}.ppm")), &s.image)?;
            }
            let coco = export_coco_json(&samples, cfg.scene.classes);
            std::fs::write(
                out.join("annotations.json"),
                serde_json::to_string_pretty(&coco)?,
            )?;
            println!(
                "wrote {count} {} images and annotations.json to {}",
                domain_name(domain),
                out.display()
            );
        }
        Cmd::Train { config } => {
            let cfg = config.load()?;
            let report = run_supervised(&cfg)?;
            print_run(&report);
        }
        Cmd::Compare { config, strategies } => {
            let cfg = config.load()?;
            let parsed: Vec<MixStrategy> = strategies
                .split(',')
                .map(|s| {
                    MixStrategy::parse(s.trim())
                        .with_context(|| format!("unknown strategy `{}`", s.trim()))
                })
                .collect::<Result<_>>()?;
            let report = run_comparison(&cfg, &parsed)?;
            for e in &report.entries {
                println!(
                    "{:<12} ap {:.4} ap50 {:.4} ap75 {:.4} delta_ap50 {:+.4}",
                    e.strategy, e.eval.ap, e.eval.ap50, e.eval.ap75, e.delta_ap50_vs_baseline
                );
            }
        }
        Cmd::Da { config } => {
            let cfg = config.load()?;
            let report = run_da(&cfg)?;
            print_run(&report);
        }
        Cmd::Eval { config, checkpoint } => {
            let cfg = config.load()?;
            let params = load_checkpoint(&checkpoint)?;
            let det = cfg.detector_config();
            let want = param_shapes(&det);
            let have = params.tensors();
            for ((name, shape), (_, t)) in want.iter().zip(&have) {
                if t.shape() != &shape[..] {
                    bail!(
                        "checkpoint {} has {name} shaped {:?}, config expects {:?}; \
                         pass the config the run was trained with",
                        checkpoint.display(),
                        t.shape(),
                        shape
                    );
                }
            }
            let samples = eval_set(
                &cfg.scene,
                cfg.train.eval_domain,
                cfg.train.seed,
                cfg.train.eval_size,
            );
            let r = evaluate_model(&params, &samples, &det, &EvalOpts::default());
            println!(
                "{} images ({}): ap {:.4} ap50 {:.4} ap75 {:.4}",
                samples.len(),
                domain_name(cfg.train.eval_domain),
                r.ap,
                r.ap50,
                r.ap75
            );
            for (class, ap) in &r.per_class {
                println!("class {class}: ap {ap:.4}");
            }
        }
        Cmd::Gradcheck {
            config,
            seeds,
            coords,
            eps,
            tol,
        } => {
            let cfg = config.load()?;
            let worst = model_grad_check(&cfg, seeds, coords, eps)?;
            println!("worst relative gradient error over {seeds} seeds: {worst:.3e}");
            if worst > tol {
                bail!("gradient check failed: {worst:.3e} > {tol:.3e}");
            }
        }
    }
    Ok(())
}
