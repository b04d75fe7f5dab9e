//! Experiment harness: configs, content-addressed cached runs, study
//! protocols (ablation, prompt-field ablation, generalization, long-tail),
//! and deterministic table/plot reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamWConfig;
use crate::metrics::{
    aggregate_forecast, aggregate_plan_eval, evaluate_plan_sample, forecast_metrics,
    ForecastEval, L2Convention, PlanEval, DEFAULT_MISS_THRESHOLD,
};
use crate::planner::{
    greedy_match, LossBreakdown, Mode, ModelConfig, PlannerModel, TrainConfig, VlpSwitches,
};
use crate::prompt::{sha256_hex, FieldMask, PromptField};
use crate::scene::{make_dataset, AgentClass, Scene, WorldConfig, T_PRED};
use crate::{Error, Result};

pub const RESULT_SCHEMA_VERSION: u32 = 1;

/// Dataset sizes and the seed blocks they draw from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub train_seed0: u64,
    pub test_seed0: u64,
}

impl DataConfig {
    fn train_block(&self) -> (u64, u64) {
        (self.train_seed0, self.train_seed0 + self.n_train as u64)
    }

    fn test_block(&self) -> (u64, u64) {
        (self.test_seed0, self.test_seed0 + self.n_test as u64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        let (a0, a1) = self.train_block();
        let (b0, b1) = self.test_block();
        if a0 < b1 && b0 < a1 {
            return Err(Error::Config(format!(
                "train seed block [{a0}, {a1}) overlaps test block [{b0}, {b1}); \
                 evaluation scenes would leak into training"
            )));
        }
        Ok(())
    }
}

/// Optimization settings shared by every seed of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub vlp_lr_mult: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            steps: t.steps,
            batch_size: t.batch_size,
            optim: t.optim,
            vlp_lr_mult: t.vlp_lr_mult,
        }
    }
}

/// Metric conventions used when evaluating a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub l2_convention: L2Convention,
    pub miss_threshold: f64,
    /// Frequency mass defining the rare-class split of forecasting metrics.
    pub rare_mass: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            l2_convention: L2Convention::AtHorizon,
            miss_threshold: DEFAULT_MISS_THRESHOLD,
            rare_mass: 0.06,
        }
    }
}

/// Everything one experiment needs; the content hash of this struct names
/// the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub data: DataConfig,
    pub train_world: WorldConfig,
    /// Equal to `train_world` for in-distribution experiments; a different
    /// world adds a cross-world evaluation to every run.
    pub test_world: WorldConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_world.validate()?;
        self.test_world.validate()?;
        self.data.validate()?;
        if self.train.steps == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.train.vlp_lr_mult.is_finite() && self.train.vlp_lr_mult > 0.0) {
            return Err(Error::Config("vlp_lr_mult must be positive and finite".into()));
        }
        if self.model.grid != self.train_world.grid || self.model.grid != self.test_world.grid {
            return Err(Error::Config(
                "model grid must match both world grids".into(),
            ));
        }
        if !(self.eval.miss_threshold > 0.0) {
            return Err(Error::Config("miss_threshold must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval.rare_mass) {
            return Err(Error::Config("rare_mass must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())[..12].to_string()
    }

    /// Reads and validates a config from a TOML file.
    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders the config in the format `from_toml_path` reads back.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("toml encoding: {e}")))
    }
}

/// Forecast metrics split by class rarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastSplit {
    pub overall: ForecastEval,
    pub rare: ForecastEval,
    pub common: ForecastEval,
    pub n_rare: usize,
    pub n_common: usize,
}

/// Evaluation of one trained model on a world it was not trained on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossEval {
    pub plan: PlanEval,
    pub forecast: ForecastSplit,
}

/// One (config, seed) run: training summary plus evaluations. Everything in
/// here except `wall_seconds` is a pure function of (config hash, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub provenance: String,
    pub diverged_at: Option<usize>,
    pub steps_run: usize,
    pub loss_first: Option<f64>,
    pub loss_last: Option<f64>,
    /// In-distribution holdout (train world, test seed block).
    pub plan: PlanEval,
    pub forecast: ForecastSplit,
    /// Present when the configured test world differs from the train world.
    pub cross: Option<CrossEval>,
    pub wall_seconds: f64,
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn atomic_write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn write_losses_csv(path: &Path, history: &[LossBreakdown]) -> Result<()> {
    let mut csv = String::from("step,l_perc,l_pred,l_plan,l_slp,l_alp,total\n");
    for (i, b) in history.iter().enumerate() {
        writeln!(
            csv,
            "{i},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            b.l_perc, b.l_pred, b.l_plan, b.l_slp, b.l_alp, b.total
        )
        .expect("string write");
    }
    atomic_write(path, csv.as_bytes())
}

/// Per-matched-agent forecasting rows (class label + single-mode metrics),
/// exposed so rare/common bucketing can be cross-checked externally.
pub fn forecast_eval_rows(
    model: &PlannerModel,
    scenes: &[Scene],
    miss_threshold: f64,
) -> Result<Vec<(AgentClass, ForecastEval)>> {
    let mut rows = Vec::new();
    for scene in scenes {
        let out = model.forward(&[scene], Mode::Infer)?;
        let preds = &out.agent_preds[0];
        let nq = preds.boxes.rows();
        let pred_centers: Vec<[f64; 2]> = (0..nq)
            .map(|q| [preds.boxes.get(q, 0), preds.boxes.get(q, 1)])
            .collect();
        let mut order: Vec<usize> = (0..scene.agents.len()).collect();
        order.sort_by_key(|&i| scene.agents[i].id);
        let gt_centers: Vec<[f64; 2]> = order
            .iter()
            .map(|&i| [scene.agents[i].bev_box.cx, scene.agents[i].bev_box.cy])
            .collect();
        for (qi, ai) in greedy_match(&pred_centers, &gt_centers) {
            let agent = &scene.agents[order[ai]];
            let row = &preds.trajs.data()[qi * 2 * T_PRED..(qi + 1) * 2 * T_PRED];
            let mode: Vec<[f64; 2]> = (0..T_PRED).map(|t| [row[2 * t], row[2 * t + 1]]).collect();
            let eval = forecast_metrics(&[mode], &agent.future_traj, miss_threshold)?;
            rows.push((agent.label, eval));
        }
    }
    Ok(rows)
}

/// Evaluates a model on a scene set: plan metrics plus rarity-split
/// forecasting metrics. Attachments are stripped first; evaluation always
/// measures the inference-time network.
pub fn evaluate_model(
    model: &PlannerModel,
    scenes: &[Scene],
    eval: &EvalConfig,
    rare: &[AgentClass],
) -> Result<(PlanEval, ForecastSplit)> {
    if scenes.is_empty() {
        return Err(Error::Argument("evaluation needs at least one scene".into()));
    }
    let infer = model.strip_vlp();
    let mut samples = Vec::new();
    for scene in scenes {
        let out = infer.forward(&[scene], Mode::Infer)?;
        samples.push(evaluate_plan_sample(&out.plan[0], scene, eval.l2_convention)?);
    }
    let plan = aggregate_plan_eval(&samples)?;
    let rows = forecast_eval_rows(&infer, scenes, eval.miss_threshold)?;
    let rare_rows: Vec<ForecastEval> =
        rows.iter().filter(|(c, _)| rare.contains(c)).map(|&(_, e)| e).collect();
    let common_rows: Vec<ForecastEval> =
        rows.iter().filter(|(c, _)| !rare.contains(c)).map(|&(_, e)| e).collect();
    let all_rows: Vec<ForecastEval> = rows.iter().map(|&(_, e)| e).collect();
    let forecast = ForecastSplit {
        overall: aggregate_forecast(&all_rows),
        rare: aggregate_forecast(&rare_rows),
        common: aggregate_forecast(&common_rows),
        n_rare: rare_rows.len(),
        n_common: common_rows.len(),
    };
    Ok((plan, forecast))
}

/// Runs one (config, seed) experiment, or returns the persisted result if
/// the run directory already holds one for the identical config.
pub fn run_single(cfg: &ExperimentConfig, seed: u64, runs_dir: &Path) -> Result<ExperimentResult> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let dir = runs_dir.join(&hash).join(seed.to_string());
    let result_path = dir.join("result.json");
    let config_path = dir.join("config.json");

    if result_path.exists() {
        let stored: ExperimentConfig = read_json(&config_path)?;
        if stored != *cfg {
            return Err(Error::Persistence(format!(
                "run directory {} holds a different config for the same hash",
                dir.display()
            )));
        }
        let result: ExperimentResult = read_json(&result_path)?;
        if result.schema_version != RESULT_SCHEMA_VERSION {
            return Err(Error::Persistence(format!(
                "cached result at {} has schema version {}, expected {}",
                result_path.display(),
                result.schema_version,
                RESULT_SCHEMA_VERSION
            )));
        }
        if result.seed != seed || result.config_hash != hash {
            return Err(Error::Persistence(format!(
                "cached result at {} does not describe this (config, seed)",
                result_path.display()
            )));
        }
        return Ok(result);
    }

    let started = Instant::now();
    let train_scenes = make_dataset(&cfg.train_world, cfg.data.n_train, cfg.data.train_seed0)?;
    let mut model = PlannerModel::new(cfg.model.clone(), seed)?;
    let tcfg = TrainConfig {
        steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        optim: cfg.train.optim,
        vlp_lr_mult: cfg.train.vlp_lr_mult,
        shuffle_seed: seed,
        checkpoint_path: Some(dir.join("checkpoint.json")),
    };
    let report = model.train(&train_scenes, &tcfg)?;
    write_losses_csv(&dir.join("losses.csv"), &report.history)?;

    let holdout = make_dataset(&cfg.train_world, cfg.data.n_test, cfg.data.test_seed0)?;
    let rare_in = cfg.train_world.rare_classes(cfg.eval.rare_mass);
    let (plan, forecast) = evaluate_model(&model, &holdout, &cfg.eval, &rare_in)?;
    let cross = if cfg.test_world != cfg.train_world {
        let cross_scenes = make_dataset(&cfg.test_world, cfg.data.n_test, cfg.data.test_seed0)?;
        let rare_x = cfg.test_world.rare_classes(cfg.eval.rare_mass);
        let (xp, xf) = evaluate_model(&model, &cross_scenes, &cfg.eval, &rare_x)?;
        Some(CrossEval { plan: xp, forecast: xf })
    } else {
        None
    };

    let result = ExperimentResult {
        schema_version: RESULT_SCHEMA_VERSION,
        config_hash: hash,
        seed,
        provenance: format!("langplan {}", env!("CARGO_PKG_VERSION")),
        diverged_at: report.diverged_at,
        steps_run: report.history.len(),
        loss_first: report.history.first().map(|b| b.total),
        loss_last: report.history.last().map(|b| b.total),
        plan,
        forecast,
        cross,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    atomic_write_json(&config_path, cfg)?;
    atomic_write_json(&result_path, &result)?;
    Ok(result)
}

fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn median_plan(evals: &[PlanEval]) -> PlanEval {
    let f = |get: fn(&PlanEval) -> f64| median(&evals.iter().map(get).collect::<Vec<_>>());
    PlanEval {
        l2_1s: f(|e| e.l2_1s),
        l2_2s: f(|e| e.l2_2s),
        l2_3s: f(|e| e.l2_3s),
        l2_avg: f(|e| e.l2_avg),
        col_1s: f(|e| e.col_1s),
        col_2s: f(|e| e.col_2s),
        col_3s: f(|e| e.col_3s),
        col_avg: f(|e| e.col_avg),
    }
}

/// Field-wise medians over the non-diverged seeds of one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMedians {
    pub plan: PlanEval,
    pub cross_plan: Option<PlanEval>,
    /// Median rare-class minADE over seeds whose rare split was non-vacuous.
    pub rare_min_ade: Option<f64>,
    pub common_min_ade: Option<f64>,
    pub overall_min_ade: f64,
}

/// One experiment arm (a config) across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub label: String,
    pub config_hash: String,
    pub switches: VlpSwitches,
    pub field_mask: FieldMask,
    pub per_seed: Vec<ExperimentResult>,
    pub diverged_seeds: Vec<u64>,
    /// `None` when every seed diverged.
    pub medians: Option<ArmMedians>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub arms: Vec<ArmReport>,
}

/// Human-readable arm name derived from the model config.
pub fn arm_label(model: &ModelConfig) -> String {
    let mut label = match (model.vlp.slp, model.vlp.alp) {
        (false, false) => "baseline".to_string(),
        (true, false) => "+SLP".to_string(),
        (false, true) => "+ALP".to_string(),
        (true, true) => "+SLP+ALP".to_string(),
    };
    let removed: Vec<&str> = [
        (PromptField::Label, "label"),
        (PromptField::Bbox, "bbox"),
        (PromptField::Traj, "traj"),
        (PromptField::Command, "command"),
    ]
    .iter()
    .filter(|(f, _)| !model.field_mask.has(*f))
    .map(|&(_, name)| name)
    .collect();
    if !removed.is_empty() {
        label.push_str(&format!("(-{})", removed.join(",-")));
    }
    if model.encoder_backend != ModelConfig::default().encoder_backend {
        label.push_str(&format!("[{}]", model.encoder_backend));
    }
    if model.vlp.detach_alp_encoder {
        label.push_str("(detached)");
    }
    label
}

fn summarize_arm(cfg: &ExperimentConfig, per_seed: Vec<ExperimentResult>) -> ArmReport {
    let diverged_seeds: Vec<u64> =
        per_seed.iter().filter(|r| r.diverged_at.is_some()).map(|r| r.seed).collect();
    let ok: Vec<&ExperimentResult> =
        per_seed.iter().filter(|r| r.diverged_at.is_none()).collect();
    let medians = if ok.is_empty() {
        None
    } else {
        let plans: Vec<PlanEval> = ok.iter().map(|r| r.plan).collect();
        let cross_plan = if ok.iter().all(|r| r.cross.is_some()) {
            let xs: Vec<PlanEval> = ok.iter().map(|r| r.cross.as_ref().unwrap().plan).collect();
            Some(median_plan(&xs))
        } else {
            None
        };
        let rare: Vec<f64> = ok
            .iter()
            .filter(|r| !r.forecast.rare.vacuous)
            .map(|r| r.forecast.rare.min_ade)
            .collect();
        let common: Vec<f64> = ok
            .iter()
            .filter(|r| !r.forecast.common.vacuous)
            .map(|r| r.forecast.common.min_ade)
            .collect();
        Some(ArmMedians {
            plan: median_plan(&plans),
            cross_plan,
            rare_min_ade: if rare.is_empty() { None } else { Some(median(&rare)) },
            common_min_ade: if common.is_empty() { None } else { Some(median(&common)) },
            overall_min_ade: median(
                &ok.iter().map(|r| r.forecast.overall.min_ade).collect::<Vec<_>>(),
            ),
        })
    };
    ArmReport {
        label: arm_label(&cfg.model),
        config_hash: cfg.config_hash(),
        switches: cfg.model.vlp,
        field_mask: cfg.model.field_mask,
        per_seed,
        diverged_seeds,
        medians,
    }
}

fn run_arm(cfg: &ExperimentConfig, seeds: &[u64], runs_dir: &Path) -> Result<ArmReport> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        per_seed.push(run_single(cfg, seed, runs_dir)?);
    }
    Ok(summarize_arm(cfg, per_seed))
}

/// Trains and evaluates one arm per attachment-switch set.
pub fn run_ablation(
    base: &ExperimentConfig,
    variants: &[VlpSwitches],
    seeds: &[u64],
    runs_dir: &Path,
) -> Result<StudyReport> {
    if variants.is_empty() {
        return Err(Error::Argument("ablation needs at least one variant".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Argument("ablation needs at least one seed".into()));
    }
    let mut arms = Vec::with_capacity(variants.len());
    for v in variants {
        let mut cfg = base.clone();
        cfg.model.vlp = *v;
        arms.push(run_arm(&cfg, seeds, runs_dir)?);
    }
    Ok(StudyReport { arms })
}

/// Prompt-field ablation: the base config's mask, plus one arm per removed
/// field. The base config must enable at least one attachment, otherwise the
/// mask cannot influence anything.
pub fn run_field_ablation(
    base: &ExperimentConfig,
    fields: &[PromptField],
    seeds: &[u64],
    runs_dir: &Path,
) -> Result<StudyReport> {
    if !base.model.vlp.any() {
        return Err(Error::Protocol(
            "prompt-field ablation needs SLP or ALP attachments enabled".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(Error::Argument("field ablation needs at least one seed".into()));
    }
    let mut arms = Vec::with_capacity(1 + fields.len());
    arms.push(run_arm(base, seeds, runs_dir)?);
    for &field in fields {
        let mut cfg = base.clone();
        cfg.model.field_mask = base.model.field_mask.without(field);
        if cfg.model.field_mask == base.model.field_mask {
            return Err(Error::Protocol(format!(
                "field {field:?} is already masked out in the base config"
            )));
        }
        arms.push(run_arm(&cfg, seeds, runs_dir)?);
    }
    Ok(StudyReport { arms })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub train_world: String,
    pub test_world: String,
    pub arms: Vec<ArmReport>,
}

/// Cross-world study; `directions[0]` trains on the config's train world,
/// `directions[1]` on the swapped pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub directions: [DirectionReport; 2],
}

pub fn run_generalization(
    config: &ExperimentConfig,
    variants: &[VlpSwitches],
    seeds: &[u64],
    runs_dir: &Path,
) -> Result<GeneralizationReport> {
    if config.train_world == config.test_world {
        return Err(Error::Protocol(
            "generalization requires distinct train and test worlds".into(),
        ));
    }
    let mut swapped = config.clone();
    std::mem::swap(&mut swapped.train_world, &mut swapped.test_world);
    let mut directions = Vec::with_capacity(2);
    for cfg in [config, &swapped] {
        let study = run_ablation(cfg, variants, seeds, runs_dir)?;
        directions.push(DirectionReport {
            train_world: cfg.train_world.tag.name().to_string(),
            test_world: cfg.test_world.tag.name().to_string(),
            arms: study.arms,
        });
    }
    let [a, b] = <[DirectionReport; 2]>::try_from(directions).expect("two directions");
    Ok(GeneralizationReport { directions: [a, b] })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongtailReport {
    /// True when the rare-presence probe had to double the evaluation set.
    pub resampled: bool,
    pub rare_classes: Vec<AgentClass>,
    pub arms: Vec<ArmReport>,
}

/// Long-tail study on a skewed world: forecast metrics split by rarity.
pub fn run_longtail(
    config: &ExperimentConfig,
    variants: &[VlpSwitches],
    seeds: &[u64],
    runs_dir: &Path,
) -> Result<LongtailReport> {
    if config.train_world != config.test_world {
        return Err(Error::Protocol(
            "the long-tail study evaluates in distribution; worlds must match".into(),
        ));
    }
    let freqs: Vec<f64> =
        config.train_world.class_freq.iter().copied().filter(|&f| f > 0.0).collect();
    let spread = freqs.iter().cloned().fold(0.0, f64::max)
        / freqs.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(spread >= 10.0) {
        return Err(Error::Protocol(format!(
            "long-tail world needs a >= 10x class-frequency spread, found {spread:.2}x"
        )));
    }

    let rare = config.train_world.rare_classes(config.eval.rare_mass);
    let count_rare = |cfg: &ExperimentConfig| -> Result<usize> {
        let scenes = make_dataset(&cfg.train_world, cfg.data.n_test, cfg.data.test_seed0)?;
        Ok(scenes
            .iter()
            .flat_map(|s| s.agents.iter())
            .filter(|a| rare.contains(&a.label))
            .count())
    };

    let mut cfg = config.clone();
    let mut resampled = false;
    if count_rare(&cfg)? == 0 {
        // One resample with a doubled evaluation set, then give up.
        resampled = true;
        cfg.data.n_test *= 2;
        cfg.validate()?;
        if count_rare(&cfg)? == 0 {
            return Err(Error::Protocol(format!(
                "no rare-class agents appear in {} evaluation scenes; the rare \
                 split would be vacuous",
                cfg.data.n_test
            )));
        }
    }

    let study = run_ablation(&cfg, variants, seeds, runs_dir)?;
    Ok(LongtailReport { resampled, rare_classes: rare, arms: study.arms })
}

// ---------------------------------------------------------------------------
// Reporting: CSV + Markdown tables and SVG plots from a results directory.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ReportPaths {
    pub csv: PathBuf,
    pub markdown: PathBuf,
    pub loss_curves: PathBuf,
    pub l2_bars: PathBuf,
}

struct RunRow {
    config: ExperimentConfig,
    result: ExperimentResult,
    losses_csv: PathBuf,
}

fn collect_rows(runs_dir: &Path) -> Result<Vec<RunRow>> {
    let mut hash_dirs: Vec<PathBuf> = Vec::new();
    for entry in fs::read_dir(runs_dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() && entry.file_name() != "report" {
            hash_dirs.push(entry.path());
        }
    }
    hash_dirs.sort();
    let mut rows = Vec::new();
    for hd in hash_dirs {
        let mut seed_dirs: Vec<(u64, PathBuf)> = Vec::new();
        for entry in fs::read_dir(&hd)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            if let Some(seed) = entry.file_name().to_str().and_then(|s| s.parse().ok()) {
                seed_dirs.push((seed, entry.path()));
            }
        }
        seed_dirs.sort();
        for (_, sd) in seed_dirs {
            let result_path = sd.join("result.json");
            if !result_path.exists() {
                continue; // an in-flight or aborted run; nothing to report
            }
            let result: ExperimentResult = read_json(&result_path)?;
            if result.schema_version != RESULT_SCHEMA_VERSION {
                return Err(Error::Persistence(format!(
                    "result {} has schema version {}, this build reads {}",
                    result_path.display(),
                    result.schema_version,
                    RESULT_SCHEMA_VERSION
                )));
            }
            rows.push(RunRow {
                config: read_json(&sd.join("config.json"))?,
                result,
                losses_csv: sd.join("losses.csv"),
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Argument(format!(
            "no persisted results under {}",
            runs_dir.display()
        )));
    }
    rows.sort_by(|a, b| {
        (arm_label(&a.config.model), &a.result.config_hash, a.result.seed).cmp(&(
            arm_label(&b.config.model),
            &b.result.config_hash,
            b.result.seed,
        ))
    });
    Ok(rows)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn results_csv(rows: &[RunRow]) -> String {
    let mut csv = String::from(
        "config_hash,arm,slp,alp,seed,diverged_at,steps_run,loss_first,loss_last,\
         l2_1s,l2_2s,l2_3s,l2_avg,col_1s,col_2s,col_3s,col_avg,\
         cross_l2_avg,cross_col_avg,rare_min_ade,common_min_ade,overall_min_ade\n",
    );
    for row in rows {
        let r = &row.result;
        let p = &r.plan;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},\
             {:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{:.6}",
            r.config_hash,
            arm_label(&row.config.model),
            row.config.model.vlp.slp,
            row.config.model.vlp.alp,
            r.seed,
            r.diverged_at.map(|s| s.to_string()).unwrap_or_default(),
            r.steps_run,
            opt_cell(r.loss_first),
            opt_cell(r.loss_last),
            p.l2_1s,
            p.l2_2s,
            p.l2_3s,
            p.l2_avg,
            p.col_1s,
            p.col_2s,
            p.col_3s,
            p.col_avg,
            opt_cell(r.cross.map(|c| c.plan.l2_avg)),
            opt_cell(r.cross.map(|c| c.plan.col_avg)),
            opt_cell((!r.forecast.rare.vacuous).then_some(r.forecast.rare.min_ade)),
            opt_cell((!r.forecast.common.vacuous).then_some(r.forecast.common.min_ade)),
            r.forecast.overall.min_ade,
        )
        .expect("string write");
    }
    csv
}

/// Groups rows by config hash, preserving the sorted row order.
fn group_by_arm(rows: &[RunRow]) -> Vec<(String, Vec<&RunRow>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&RunRow>> = BTreeMap::new();
    for row in rows {
        let key = row.result.config_hash.clone();
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(row);
    }
    order.into_iter().map(|k| (k.clone(), groups.remove(&k).unwrap())).collect()
}

fn markdown_table(rows: &[RunRow]) -> String {
    let mut md = String::from(
        "| model | SLP | ALP | L2@1s | L2@2s | L2@3s | L2@avg | Col@1s | Col@2s | Col@3s | Col@avg |\n\
         |---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for (_, group) in group_by_arm(rows) {
        let cfg = &group[0].config;
        let ok: Vec<PlanEval> = group
            .iter()
            .filter(|r| r.result.diverged_at.is_none())
            .map(|r| r.result.plan)
            .collect();
        let n_div = group.len() - ok.len();
        let mark = |on: bool| if on { "yes" } else { "" };
        if ok.is_empty() {
            writeln!(
                md,
                "| {} | {} | {} | diverged ({n_div}/{n_div} seeds) |||||||||",
                arm_label(&cfg.model),
                mark(cfg.model.vlp.slp),
                mark(cfg.model.vlp.alp),
            )
            .expect("string write");
            continue;
        }
        let m = median_plan(&ok);
        let mut line = format!(
            "| {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.2} | {:.2} | {:.2} | {:.2} |",
            arm_label(&cfg.model),
            mark(cfg.model.vlp.slp),
            mark(cfg.model.vlp.alp),
            m.l2_1s,
            m.l2_2s,
            m.l2_3s,
            m.l2_avg,
            m.col_1s,
            m.col_2s,
            m.col_3s,
            m.col_avg,
        );
        if n_div > 0 {
            line.push_str(&format!(" ({n_div} diverged seed(s) excluded)"));
        }
        md.push_str(&line);
        md.push('\n');
    }
    md
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

fn parse_losses_totals(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut totals = Vec::new();
    for line in text.lines().skip(1) {
        let last = line.rsplit(',').next().ok_or_else(|| {
            Error::Persistence(format!("malformed losses row in {}", path.display()))
        })?;
        totals.push(last.parse::<f64>().map_err(|e| {
            Error::Persistence(format!("bad loss value in {}: {e}", path.display()))
        })?);
    }
    Ok(totals)
}

fn svg_open(width: usize, height: usize) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"11\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    )
}

fn loss_curves_svg(rows: &[RunRow]) -> Result<String> {
    let (w, h) = (640.0, 360.0);
    let (ml, mr, mt, mb) = (52.0, 12.0, 28.0, 36.0);
    let groups = group_by_arm(rows);
    let mut series: Vec<(usize, Vec<f64>)> = Vec::new(); // (arm index, totals)
    let mut max_step = 1.0f64;
    let mut max_loss = 0.0f64;
    for (ai, (_, group)) in groups.iter().enumerate() {
        for row in group {
            if !row.losses_csv.exists() {
                continue;
            }
            let totals = parse_losses_totals(&row.losses_csv)?;
            if totals.is_empty() {
                continue;
            }
            max_step = max_step.max((totals.len() - 1) as f64);
            max_loss = max_loss.max(totals.iter().cloned().fold(0.0, f64::max));
            series.push((ai, totals));
        }
    }
    let mut svg = svg_open(w as usize, h as usize);
    let sx = |step: f64| ml + (w - ml - mr) * step / max_step;
    let sy = |loss: f64| h - mb - (h - mb - mt) * loss / max_loss.max(1e-12);
    for i in 0..=4 {
        let v = max_loss * i as f64 / 4.0;
        let y = sy(v);
        writeln!(
            svg,
            "<line x1=\"{ml:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.1}</text>",
            w - mr,
            ml - 6.0,
            y + 4.0
        )
        .expect("string write");
    }
    for (ai, totals) in &series {
        let stride = totals.len().div_ceil(240).max(1);
        let mut points = String::new();
        for (i, v) in totals.iter().enumerate() {
            if i % stride == 0 || i == totals.len() - 1 {
                write!(points, "{:.2},{:.2} ", sx(i as f64), sy(*v)).expect("string write");
            }
        }
        writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-opacity=\"0.75\" points=\"{}\"/>",
            PALETTE[ai % PALETTE.len()],
            points.trim_end()
        )
        .expect("string write");
    }
    for (ai, (_, group)) in groups.iter().enumerate() {
        let label = arm_label(&group[0].config.model);
        let x = ml + 8.0;
        let y = mt + 14.0 * ai as f64;
        writeln!(
            svg,
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"12\" height=\"4\" fill=\"{}\"/>\
             <text x=\"{:.2}\" y=\"{:.2}\">{label}</text>",
            y - 2.0,
            PALETTE[ai % PALETTE.len()],
            x + 16.0,
            y + 3.0
        )
        .expect("string write");
    }
    writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">training step</text>\
         <text x=\"14\" y=\"{:.2}\" transform=\"rotate(-90 14 {:.2})\" text-anchor=\"middle\">total loss</text>",
        (ml + w - mr) / 2.0,
        h - 10.0,
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0
    )
    .expect("string write");
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn l2_bars_svg(rows: &[RunRow]) -> String {
    let (w, h) = (640.0, 300.0);
    let (ml, mr, mt, mb) = (52.0, 12.0, 28.0, 52.0);
    let groups = group_by_arm(rows);
    let mut bars: Vec<(String, [f64; 3])> = Vec::new();
    for (_, group) in &groups {
        let ok: Vec<PlanEval> = group
            .iter()
            .filter(|r| r.result.diverged_at.is_none())
            .map(|r| r.result.plan)
            .collect();
        if ok.is_empty() {
            continue;
        }
        let m = median_plan(&ok);
        bars.push((arm_label(&group[0].config.model), [m.l2_1s, m.l2_2s, m.l2_3s]));
    }
    let max_v = bars
        .iter()
        .flat_map(|(_, v)| v.iter().cloned())
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.15;
    let mut svg = svg_open(w as usize, h as usize);
    let sy = |v: f64| h - mb - (h - mb - mt) * v / max_v;
    for i in 0..=4 {
        let v = max_v * i as f64 / 4.0;
        let y = sy(v);
        writeln!(
            svg,
            "<line x1=\"{ml:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.2}</text>",
            w - mr,
            ml - 6.0,
            y + 4.0
        )
        .expect("string write");
    }
    let n = bars.len().max(1) as f64;
    let group_w = (w - ml - mr) / n;
    let bar_w = (group_w - 16.0) / 3.0;
    for (gi, (label, vals)) in bars.iter().enumerate() {
        let x0 = ml + group_w * gi as f64 + 8.0;
        for (bi, v) in vals.iter().enumerate() {
            let x = x0 + bar_w * bi as f64;
            let y = sy(*v);
            writeln!(
                svg,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>\
                 <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"9\">{v:.3}</text>",
                (bar_w - 3.0).max(1.0),
                (h - mb - y).max(0.0),
                PALETTE[bi % PALETTE.len()],
                x + bar_w / 2.0,
                y - 3.0
            )
            .expect("string write");
        }
        writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{label}</text>",
            x0 + (group_w - 16.0) / 2.0,
            h - mb + 16.0
        )
        .expect("string write");
    }
    writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">median L2 at 1s / 2s / 3s (m)</text>",
        (ml + w - mr) / 2.0,
        h - 8.0
    )
    .expect("string write");
    svg.push_str("</svg>\n");
    svg
}

/// Renders tables and plots from every persisted result under `runs_dir`.
/// The rendering is deterministic: unchanged inputs give identical bytes.
pub fn report(runs_dir: &Path, out_dir: &Path) -> Result<ReportPaths> {
    let rows = collect_rows(runs_dir)?;
    fs::create_dir_all(out_dir)?;
    let paths = ReportPaths {
        csv: out_dir.join("results.csv"),
        markdown: out_dir.join("summary.md"),
        loss_curves: out_dir.join("loss_curves.svg"),
        l2_bars: out_dir.join("l2_bars.svg"),
    };
    atomic_write(&paths.csv, results_csv(&rows).as_bytes())?;
    atomic_write(&paths.markdown, markdown_table(&rows).as_bytes())?;
    atomic_write(&paths.loss_curves, loss_curves_svg(&rows)?.as_bytes())?;
    atomic_write(&paths.l2_bars, l2_bars_svg(&rows).as_bytes())?;
    Ok(paths)
}
