// temporary calibration probe — not part of the final repo
use std::path::Path;
use std::time::Instant;

use langplan::autodiff::AdamWConfig;
use langplan::harness::{
    run_ablation, run_single, ArmReport, DataConfig, EvalConfig, ExperimentConfig, TrainSettings,
};
use langplan::planner::{ModelConfig, VlpSwitches};
use langplan::scene::WorldConfig;

const SEEDS: [u64; 5] = [11, 12, 13, 14, 15];
const BASE: VlpSwitches = VlpSwitches { slp: false, alp: false, detach_alp_encoder: false };
const SLP: VlpSwitches = VlpSwitches { slp: true, alp: false, detach_alp_encoder: false };
const VLP: VlpSwitches = VlpSwitches { slp: true, alp: true, detach_alp_encoder: false };

fn canonical() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig::default(),
        train: TrainSettings {
            steps: 480,
            batch_size: 8,
            optim: AdamWConfig::default(),
            vlp_lr_mult: 4.0,
        },
        data: DataConfig { n_train: 512, n_test: 128, train_seed0: 1000, test_seed0: 999_000 },
        train_world: WorldConfig::city_a(),
        test_world: WorldConfig::city_b(),
        eval: EvalConfig::default(),
    }
}

fn warm(tag: &str, cfg: &ExperimentConfig, runs: &Path) {
    for &seed in &SEEDS {
        let t = Instant::now();
        let r = run_single(cfg, seed, runs).unwrap();
        println!(
            "{tag} seed {seed}: L2avg {:.4} col {:.2} cross_L2 {} ({}s)",
            r.plan.l2_avg,
            r.plan.col_avg,
            r.cross.map(|c| format!("{:.4}", c.plan.l2_avg)).unwrap_or_default(),
            t.elapsed().as_secs()
        );
    }
}

fn show(title: &str, arms: &[ArmReport]) {
    println!("== {title} ==");
    for arm in arms {
        let m = arm.medians.as_ref().unwrap();
        println!(
            "  {:<12} L2avg {:.4} col {:.2} crossL2 {}",
            arm.label,
            m.plan.l2_avg,
            m.plan.col_avg,
            m.cross_plan.map(|p| format!("{:.4}", p.l2_avg)).unwrap_or_default(),
        );
    }
}

fn main() {
    let runs = Path::new("/tmp/accept_runs");
    let cfg = canonical();
    for (tag, v) in [("baseline", BASE), ("slp", SLP), ("vlp", VLP)] {
        let mut c = cfg.clone();
        c.model.vlp = v;
        warm(tag, &c, runs);
    }
    let study = run_ablation(&cfg, &[BASE, SLP, VLP], &SEEDS, runs).unwrap();
    show("ablation b8", &study.arms);
}
