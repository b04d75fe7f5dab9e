//! Command-line front end for the langplan experiment harness.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use langplan::harness::{
    evaluate_model, report, run_ablation, run_field_ablation, run_generalization, run_longtail,
    run_single, ArmReport, ExperimentConfig,
};
use langplan::planner::{Mode, PlannerModel, VlpSwitches};
use langplan::prompt::PromptField;
use langplan::scene::{make_dataset, save_jsonl};

#[derive(Parser)]
#[command(name = "langplan", version, about = "Synthetic driving-planner experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene dataset as JSONL.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Which block of the config to draw: the training set or the
        /// evaluation set (world, size, and seed block).
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        /// Override the number of scenes.
        #[arg(long)]
        n: Option<usize>,
        /// Override the first scene seed of the chosen split.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one (config, seed) run and persist it under the runs directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
    /// Re-evaluate a persisted checkpoint and print its metrics as JSON.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Seed of the run to evaluate (resolves runs/<hash>/<seed>/checkpoint.json).
        #[arg(long)]
        seed: Option<u64>,
        /// Explicit checkpoint path; overrides the runs-directory lookup.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
    /// Train and evaluate the attachment ladder (baseline, +SLP, +SLP+ALP).
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Model seeds; repeat the flag for multiple seeds.
        #[arg(long = "seed", required = true)]
        seeds: Vec<u64>,
        /// Arms to run: baseline, slp, alp, or vlp (both attachments).
        #[arg(long = "arm")]
        arms: Vec<String>,
        /// Ablate prompt fields instead: full prompts vs one field removed at
        /// a time, on the config's attachment switches.
        #[arg(long)]
        fields: bool,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
    /// Cross-world study: both train/test directions of the config's worlds.
    Generalize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "seed", required = true)]
        seeds: Vec<u64>,
        #[arg(long = "arm")]
        arms: Vec<String>,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
    /// Long-tail study on a skewed world: rare- vs common-class forecasting.
    Longtail {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "seed", required = true)]
        seeds: Vec<u64>,
        #[arg(long = "arm")]
        arms: Vec<String>,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
    /// Render CSV/Markdown tables and SVG plots from persisted runs.
    Report {
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        /// Output directory; defaults to <runs-dir>/report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_arm(name: &str) -> Result<VlpSwitches> {
    let (slp, alp) = match name {
        "baseline" => (false, false),
        "slp" => (true, false),
        "alp" => (false, true),
        "vlp" | "slp+alp" => (true, true),
        other => bail!("unknown arm {other:?}; expected baseline, slp, alp, or vlp"),
    };
    Ok(VlpSwitches { slp, alp, detach_alp_encoder: false })
}

fn parse_arms(arms: &[String], default: &[&str]) -> Result<Vec<VlpSwitches>> {
    let names: Vec<&str> = if arms.is_empty() {
        default.to_vec()
    } else {
        arms.iter().map(String::as_str).collect()
    };
    names.iter().map(|n| parse_arm(n)).collect()
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml_path(path)
        .with_context(|| format!("loading config {}", path.display()))
}

fn print_arms(arms: &[ArmReport]) {
    println!(
        "{:<28} {:>6} {:>8} {:>8} {:>10} {:>10}",
        "arm", "seeds", "L2avg", "col%", "cross-L2", "rare-mADE"
    );
    for arm in arms {
        let n_ok = arm.per_seed.len() - arm.diverged_seeds.len();
        match &arm.medians {
            Some(m) => println!(
                "{:<28} {:>6} {:>8.4} {:>8.2} {:>10} {:>10}",
                arm.label,
                format!("{n_ok}/{}", arm.per_seed.len()),
                m.plan.l2_avg,
                m.plan.col_avg,
                m.cross_plan.map(|p| format!("{:.4}", p.l2_avg)).unwrap_or_default(),
                m.rare_min_ade.map(|v| format!("{v:.3}")).unwrap_or_default(),
            ),
            None => println!("{:<28} {:>6} (all seeds diverged)", arm.label, "0"),
        }
        if !arm.diverged_seeds.is_empty() {
            println!("    diverged seeds: {:?}", arm.diverged_seeds);
        }
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Cmd::GenData { config, split, n, seed, out } => {
            let cfg = load_config(&config)?;
            let (world, mut count, mut seed0) = match split {
                Split::Train => (&cfg.train_world, cfg.data.n_train, cfg.data.train_seed0),
                Split::Test => (&cfg.test_world, cfg.data.n_test, cfg.data.test_seed0),
            };
            if let Some(n) = n {
                count = n;
            }
            if let Some(s) = seed {
                seed0 = s;
            }
            let scenes = make_dataset(world, count, seed0)?;
            save_jsonl(&scenes, &out)?;
            println!(
                "wrote {count} {} scenes (seeds {seed0}..{}) to {}",
                world.tag.name(),
                seed0 + count as u64,
                out.display()
            );
        }
        Cmd::Train { config, seed, runs_dir } => {
            let cfg = load_config(&config)?;
            let result = run_single(&cfg, seed, &runs_dir)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
            println!(
                "run dir: {}",
                runs_dir.join(&result.config_hash).join(seed.to_string()).display()
            );
        }
        Cmd::Eval { config, seed, checkpoint, runs_dir } => {
            let cfg = load_config(&config)?;
            let path = match (checkpoint, seed) {
                (Some(p), _) => p,
                (None, Some(s)) => runs_dir
                    .join(cfg.config_hash())
                    .join(s.to_string())
                    .join("checkpoint.json"),
                (None, None) => bail!("eval needs --checkpoint or --seed"),
            };
            let model = PlannerModel::load_checkpoint(&path, Mode::Infer)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            let holdout = make_dataset(&cfg.train_world, cfg.data.n_test, cfg.data.test_seed0)?;
            let rare = cfg.train_world.rare_classes(cfg.eval.rare_mass);
            let (plan, forecast) = evaluate_model(&model, &holdout, &cfg.eval, &rare)?;
            let mut doc = serde_json::json!({
                "checkpoint": path.display().to_string(),
                "in_distribution": { "plan": plan, "forecast": forecast },
            });
            if cfg.test_world != cfg.train_world {
                let scenes = make_dataset(&cfg.test_world, cfg.data.n_test, cfg.data.test_seed0)?;
                let rare_x = cfg.test_world.rare_classes(cfg.eval.rare_mass);
                let (xp, xf) = evaluate_model(&model, &scenes, &cfg.eval, &rare_x)?;
                doc["cross_world"] = serde_json::json!({ "plan": xp, "forecast": xf });
            }
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
        Cmd::Ablate { config, seeds, arms, fields, runs_dir } => {
            let cfg = load_config(&config)?;
            if fields {
                if !arms.is_empty() {
                    bail!("--arm and --fields are mutually exclusive");
                }
                let all = [
                    PromptField::Label,
                    PromptField::Bbox,
                    PromptField::Traj,
                    PromptField::Command,
                ];
                let study = run_field_ablation(&cfg, &all, &seeds, &runs_dir)?;
                print_arms(&study.arms);
            } else {
                let variants = parse_arms(&arms, &["baseline", "slp", "vlp"])?;
                let study = run_ablation(&cfg, &variants, &seeds, &runs_dir)?;
                print_arms(&study.arms);
            }
        }
        Cmd::Generalize { config, seeds, arms, runs_dir } => {
            let cfg = load_config(&config)?;
            let variants = parse_arms(&arms, &["baseline", "vlp"])?;
            let rep = run_generalization(&cfg, &variants, &seeds, &runs_dir)?;
            for d in &rep.directions {
                println!("direction {} -> {}:", d.train_world, d.test_world);
                print_arms(&d.arms);
            }
        }
        Cmd::Longtail { config, seeds, arms, runs_dir } => {
            let cfg = load_config(&config)?;
            let variants = parse_arms(&arms, &["baseline", "vlp"])?;
            let rep = run_longtail(&cfg, &variants, &seeds, &runs_dir)?;
            println!(
                "rare classes: {:?}{}",
                rep.rare_classes,
                if rep.resampled { " (evaluation set doubled to find rare agents)" } else { "" }
            );
            print_arms(&rep.arms);
        }
        Cmd::Report { runs_dir, out } => {
            let out = out.unwrap_or_else(|| runs_dir.join("report"));
            let paths = report(&runs_dir, &out)?;
            for p in [&paths.csv, &paths.markdown, &paths.loss_curves, &paths.l2_bars] {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
