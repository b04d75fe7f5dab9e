//! Open-loop planning and forecasting metrics: per-horizon L2, collision
//! flags via oriented-footprint overlap, and minADE/minFDE/miss-rate.

use serde::{Deserialize, Serialize};

use crate::geometry::boxes_intersect;
use crate::scene::{ego_box_at_plan_step, AgentRecord, EgoRecord, Scene, PLAN_STEPS};
use crate::{Error, Result};

/// 0-based plan-waypoint indices for the 1 s / 2 s / 3 s horizons at 2 Hz.
pub const HORIZON_STEPS: [usize; 3] = [1, 3, 5];
pub const HORIZON_LABELS: [&str; 3] = ["1s", "2s", "3s"];
pub const DEFAULT_MISS_THRESHOLD: f64 = 2.0;

/// Which displacement a per-horizon L2 reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum L2Convention {
    /// Displacement at the horizon waypoint itself (the default).
    #[default]
    AtHorizon,
    /// Mean displacement over all waypoints up to and including the horizon.
    AveragedUpTo,
}

/// Dataset-level planning evaluation; collision rates are percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanEval {
    pub l2_1s: f64,
    pub l2_2s: f64,
    pub l2_3s: f64,
    pub l2_avg: f64,
    pub col_1s: f64,
    pub col_2s: f64,
    pub col_3s: f64,
    pub col_avg: f64,
}

/// One sample's contribution: L2 per horizon plus collision flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleEval {
    pub l2: [f64; 3],
    pub collided: [bool; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastEval {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    /// True when no agent contributed (metrics are zeros by convention).
    pub vacuous: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// L2 planning error at one horizon (0 = 1 s, 1 = 2 s, 2 = 3 s).
pub fn l2_error(
    pred: &[[f64; 2]],
    gt: &[[f64; 2]],
    horizon: usize,
    convention: L2Convention,
) -> Result<f64> {
    if pred.len() != PLAN_STEPS || gt.len() != PLAN_STEPS {
        return Err(Error::Argument(format!(
            "l2_error expects {PLAN_STEPS}-step plans, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let idx = *HORIZON_STEPS
        .get(horizon)
        .ok_or_else(|| Error::Argument(format!("horizon index {horizon} out of range")))?;
    match convention {
        L2Convention::AtHorizon => Ok(dist(pred[idx], gt[idx])),
        L2Convention::AveragedUpTo => {
            let sum: f64 = (0..=idx).map(|t| dist(pred[t], gt[t])).sum();
            Ok(sum / (idx + 1) as f64)
        }
    }
}

/// Per-horizon collision flags: the ego footprint carried along `plan`
/// (heading from consecutive waypoints) against each agent's box translated
/// to its ground-truth future position.
pub fn collision_flags(
    plan: &[[f64; 2]],
    ego: &EgoRecord,
    agents: &[AgentRecord],
) -> Result<[bool; 3]> {
    ego.footprint
        .validate()
        .map_err(|_| Error::DegenerateBox("ego footprint is degenerate".into()))?;
    if plan.len() != PLAN_STEPS {
        return Err(Error::Argument(format!(
            "collision check expects {PLAN_STEPS}-step plans, got {}",
            plan.len()
        )));
    }
    for a in agents {
        if a.future_traj.len() < PLAN_STEPS {
            return Err(Error::Argument(format!(
                "agent {} has {} future steps, need at least {PLAN_STEPS}",
                a.id,
                a.future_traj.len()
            )));
        }
    }
    let mut step_hit = [false; PLAN_STEPS];
    for (t, hit) in step_hit.iter_mut().enumerate() {
        let ego_box = ego_box_at_plan_step(ego, plan, t);
        for a in agents {
            let abox = a.bev_box.at_position(a.future_traj[t][0], a.future_traj[t][1]);
            if boxes_intersect(&ego_box, &abox) {
                *hit = true;
                break;
            }
        }
    }
    let mut flags = [false; 3];
    for (k, &idx) in HORIZON_STEPS.iter().enumerate() {
        flags[k] = step_hit[..=idx].iter().any(|&h| h);
    }
    Ok(flags)
}

/// Evaluates one predicted plan against a scene's ground truth.
pub fn evaluate_plan_sample(
    pred: &[[f64; 2]],
    scene: &Scene,
    convention: L2Convention,
) -> Result<SampleEval> {
    let mut l2 = [0.0; 3];
    for (h, slot) in l2.iter_mut().enumerate() {
        *slot = l2_error(pred, &scene.ego.gt_plan, h, convention)?;
    }
    let collided = collision_flags(pred, &scene.ego, &scene.agents)?;
    Ok(SampleEval { l2, collided })
}

/// Means L2 over samples and turns collision flags into percentages.
pub fn aggregate_plan_eval(samples: &[SampleEval]) -> Result<PlanEval> {
    if samples.is_empty() {
        return Err(Error::Argument("cannot aggregate an empty evaluation set".into()));
    }
    let n = samples.len() as f64;
    let mut l2 = [0.0; 3];
    let mut col = [0.0; 3];
    for s in samples {
        for k in 0..3 {
            l2[k] += s.l2[k];
            col[k] += if s.collided[k] { 1.0 } else { 0.0 };
        }
    }
    for k in 0..3 {
        l2[k] /= n;
        col[k] = 100.0 * col[k] / n;
    }
    Ok(PlanEval {
        l2_1s: l2[0],
        l2_2s: l2[1],
        l2_3s: l2[2],
        l2_avg: (l2[0] + l2[1] + l2[2]) / 3.0,
        col_1s: col[0],
        col_2s: col[1],
        col_3s: col[2],
        col_avg: (col[0] + col[1] + col[2]) / 3.0,
    })
}

/// Forecasting metrics for one agent given K predicted modes.
pub fn forecast_metrics(
    pred_modes: &[Vec<[f64; 2]>],
    gt: &[[f64; 2]],
    miss_threshold: f64,
) -> Result<ForecastEval> {
    if pred_modes.is_empty() {
        return Err(Error::Argument("forecast_metrics needs at least one mode".into()));
    }
    if gt.is_empty() {
        return Err(Error::Argument("forecast_metrics needs a nonempty ground truth".into()));
    }
    let mut min_ade = f64::INFINITY;
    let mut min_fde = f64::INFINITY;
    for mode in pred_modes {
        if mode.len() != gt.len() {
            return Err(Error::Argument(format!(
                "mode has {} steps, ground truth has {}",
                mode.len(),
                gt.len()
            )));
        }
        let ade =
            mode.iter().zip(gt).map(|(p, g)| dist(*p, *g)).sum::<f64>() / gt.len() as f64;
        let fde = dist(*mode.last().unwrap(), *gt.last().unwrap());
        min_ade = min_ade.min(ade);
        min_fde = min_fde.min(fde);
    }
    Ok(ForecastEval {
        min_ade,
        min_fde,
        miss_rate: if min_fde > miss_threshold { 1.0 } else { 0.0 },
        vacuous: false,
    })
}

/// Means per-agent forecasting results; an empty set is vacuous zeros.
pub fn aggregate_forecast(evals: &[ForecastEval]) -> ForecastEval {
    if evals.is_empty() {
        return ForecastEval { min_ade: 0.0, min_fde: 0.0, miss_rate: 0.0, vacuous: true };
    }
    let n = evals.len() as f64;
    ForecastEval {
        min_ade: evals.iter().map(|e| e.min_ade).sum::<f64>() / n,
        min_fde: evals.iter().map(|e| e.min_fde).sum::<f64>() / n,
        miss_rate: evals.iter().map(|e| e.miss_rate).sum::<f64>() / n,
        vacuous: false,
    }
}
