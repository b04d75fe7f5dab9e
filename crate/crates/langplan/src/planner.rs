//! Miniature end-to-end planner: BEV conv encoder, query decoder, ego
//! interaction, waypoint head, task losses, and optional training-only
//! alignment attachments that vanish at inference.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Tape, Var};
use crate::bev::{agent_bev_features_batch, entity_regions, BevGrid, GridSpec, RowKind, RowMeta};
use crate::contrastive::{contrastive_loss_on_tape, LogitScale};
use crate::linalg::Matrix;
use crate::prompt::{
    adapter_forward_on_tape, alp_prompt_for_row, encode_prompts, make_encoder, slp_prompt,
    AdapterMlp, EmbeddingCache, ExpectationBatch, FieldMask, TextEncoder,
};
use crate::scene::{AgentClass, Scene, PAST_STEPS, PLAN_STEPS, T_PRED};
use crate::{Error, Result};

/// Raster input channels: any-agent occupancy, one per class, lane mask.
pub const RASTER_CHANNELS: usize = 1 + AgentClass::ALL.len() + 1;
/// Ego status vector: command one-hot plus flattened past positions.
pub const STATUS_DIM: usize = 3 + 2 * PAST_STEPS;
/// Class head outputs: the agent classes plus a no-object slot.
pub const N_CLASS_LOGITS: usize = AgentClass::ALL.len() + 1;
pub const NO_OBJECT: usize = AgentClass::ALL.len();

const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
/// Salt separating the attachment init stream from the base stream, so a
/// model keeps identical base weights whether or not attachments exist.
const VLP_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Which alignment losses are active during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct VlpSwitches {
    pub slp: bool,
    pub alp: bool,
    /// Stop ALP gradients at the BEV feature map (they flow by default).
    pub detach_alp_encoder: bool,
}

impl VlpSwitches {
    pub fn any(&self) -> bool {
        self.slp || self.alp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub enc: f64,
    pub dec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { enc: 1.0, dec: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: GridSpec,
    /// Model feature width C.
    pub c_feat: usize,
    pub conv_hidden: usize,
    pub n_agent_queries: usize,
    pub n_lane_queries: usize,
    pub n_layers: usize,
    pub mlp_hidden: usize,
    /// Pooling factor from the conv BEV grid to the attention memory.
    pub mem_pool: usize,
    pub vlp: VlpSwitches,
    pub encoder_backend: String,
    pub field_mask: FieldMask,
    pub weights: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid: GridSpec::default(),
            c_feat: 32,
            conv_hidden: 12,
            n_agent_queries: 12,
            n_lane_queries: 6,
            n_layers: 2,
            mlp_hidden: 64,
            mem_pool: 2,
            vlp: VlpSwitches::default(),
            encoder_backend: "hash-ngram-64".to_string(),
            field_mask: FieldMask::all(),
            weights: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    pub fn n_queries(&self) -> usize {
        self.n_agent_queries + self.n_lane_queries
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.c_feat == 0
            || self.conv_hidden == 0
            || self.n_agent_queries == 0
            || self.n_layers == 0
            || self.mlp_hidden == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let half = self.grid.h() / 2;
        if self.grid.h() != self.grid.w() || self.grid.h() % 2 != 0 || half % self.mem_pool != 0 {
            return Err(Error::Config(format!(
                "grid {}x{} incompatible with stride-2 conv and mem_pool {}",
                self.grid.h(),
                self.grid.w(),
                self.mem_pool
            )));
        }
        if !(self.weights.enc >= 0.0 && self.weights.dec >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named parameter tensors in a fixed, deterministic order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ParamStore {
    pub tensors: Vec<ParamTensor>,
}

impl ParamStore {
    fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(ParamTensor { name: name.to_string(), shape: shape.to_vec(), data });
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

fn xavier(rng: &mut rand_chacha::ChaCha8Rng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    use rand::Rng as _;
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-a..a)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
pub struct AgentPreds {
    /// N_q x (classes + no-object) logits.
    pub class_logits: Matrix,
    /// N_q x 5 boxes as (cx, cy, length, width, yaw).
    pub boxes: Matrix,
    /// N_q x (T_pred * 2) trajectories.
    pub trajs: Matrix,
}

/// Tensors the alignment losses consume, materialized for inspection.
#[derive(Debug, Clone)]
pub struct VlpTaps {
    pub alp: Option<(crate::bev::AgentFeatureBatch, ExpectationBatch)>,
    /// (ego query features B x C, adapted prompt features B x C).
    pub slp: Option<(Matrix, Matrix)>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub bev: Vec<BevGrid>,
    pub agent_preds: Vec<AgentPreds>,
    pub ego_qfeat: Matrix,
    pub plan: Vec<Vec<[f64; 2]>>,
    pub vlp_taps: Option<VlpTaps>,
}

/// Per-step loss components; the total obeys the decomposition identity
/// bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_perc: f64,
    pub l_pred: f64,
    pub l_plan: f64,
    pub l_slp: f64,
    pub l_alp: f64,
    pub total: f64,
    pub w_enc: f64,
    pub w_dec: f64,
}

impl LossBreakdown {
    /// Checks `total = w_enc*l_alp + w_dec*(l_perc + l_pred + l_plan + l_slp)`
    /// exactly, in the same association order the tape used.
    pub fn verify(&self) -> Result<()> {
        let parts = [self.l_perc, self.l_pred, self.l_plan, self.l_slp, self.l_alp, self.total];
        if parts.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: 0 });
        }
        if parts[..5].iter().any(|&v| v < 0.0) {
            return Err(Error::Argument("loss components must be non-negative".into()));
        }
        let recomposed =
            self.w_enc * self.l_alp + self.w_dec * (((self.l_perc + self.l_pred) + self.l_plan) + self.l_slp);
        if recomposed.to_bits() != self.total.to_bits() {
            return Err(Error::Argument(format!(
                "loss identity violated: recomposed {recomposed} != total {}",
                self.total
            )));
        }
        Ok(())
    }
}

struct Bound {
    vars: Vec<(String, Var)>,
}

impl Bound {
    fn v(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

struct SceneVars {
    bev: Var,
    class_logits: Var,
    boxes: Var,
    trajs: Var,
    ego_q: Var,
    plan: Var,
}

struct TapeLoss {
    total: Var,
    breakdown: LossBreakdown,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    config: ModelConfig,
    seed: u64,
    has_vlp: bool,
    base: Vec<ParamTensor>,
    vlp: Option<Vec<ParamTensor>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerModel {
    pub config: ModelConfig,
    pub seed: u64,
    base: ParamStore,
    vlp: Option<ParamStore>,
}

/// Greedy nearest-center assignment of queries to ground-truth agents.
/// Deterministic: ties break toward the lower query index, then lower agent
/// index. Returned pairs are sorted by query index.
pub fn greedy_match(pred_centers: &[[f64; 2]], gt_centers: &[[f64; 2]]) -> Vec<(usize, usize)> {
    let mut used_q = vec![false; pred_centers.len()];
    let mut used_a = vec![false; gt_centers.len()];
    let mut pairs = Vec::new();
    let n = pred_centers.len().min(gt_centers.len());
    for _ in 0..n {
        let mut best: Option<(f64, usize, usize)> = None;
        for (qi, q) in pred_centers.iter().enumerate() {
            if used_q[qi] {
                continue;
            }
            for (ai, a) in gt_centers.iter().enumerate() {
                if used_a[ai] {
                    continue;
                }
                let d = (q[0] - a[0]).powi(2) + (q[1] - a[1]).powi(2);
                // Strict < keeps the first (lowest qi, then ai) minimum.
                if best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, qi, ai));
                }
            }
        }
        let (_, qi, ai) = best.expect("unmatched capacity remains");
        used_q[qi] = true;
        used_a[ai] = true;
        pairs.push((qi, ai));
    }
    pairs.sort_unstable_by_key(|&(qi, _)| qi);
    pairs
}

/// Rasterizes a scene into the planner's input channels.
pub fn rasterize_scene(scene: &Scene, grid: &GridSpec) -> Result<Vec<f64>> {
    if scene.grid_spec != *grid {
        return Err(Error::Argument("scene grid spec does not match the model grid".into()));
    }
    let (h, w) = (grid.h(), grid.w());
    let mut data = vec![0.0; RASTER_CHANNELS * h * w];
    for region in entity_regions(scene)? {
        match region.kind {
            // The ego marks occupancy only; its intent rides in the status
            // vector. Without this, an ego far from every agent and lane
            // would pool an exactly-zero (un-normalizable) feature row.
            RowKind::Ego => {
                for &(r, c) in &region.cells {
                    data[r * w + c] = 1.0;
                }
            }
            RowKind::Fg => {
                let label = scene
                    .agents
                    .iter()
                    .find(|a| a.id == region.id)
                    .map(|a| a.label)
                    .expect("region references a scene agent");
                for &(r, c) in &region.cells {
                    data[r * w + c] = 1.0;
                    data[(1 + label.index()) * h * w + r * w + c] = 1.0;
                }
            }
            RowKind::Lane => {
                let ch = 1 + AgentClass::ALL.len();
                for &(r, c) in &region.cells {
                    data[ch * h * w + r * w + c] = 1.0;
                }
            }
        }
    }
    Ok(data)
}

/// Command one-hot plus past positions (scaled toward unit magnitude).
pub fn status_vector(scene: &Scene) -> Vec<f64> {
    let mut v = vec![0.0; STATUS_DIM];
    v[scene.ego.command.index()] = 1.0;
    for (i, p) in scene.ego.past.iter().enumerate() {
        v[3 + 2 * i] = 0.1 * p[0];
        v[3 + 2 * i + 1] = 0.1 * p[1];
    }
    v
}

impl PlannerModel {
    /// Builds a model with freshly initialized parameters. Base parameters
    /// draw from a stream keyed by `seed` alone, so models with and without
    /// attachments share identical base weights for the same seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng as _;
        config.validate()?;
        let c = config.c_feat;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut base = ParamStore::default();

        let cin = RASTER_CHANNELS;
        let ch = config.conv_hidden;
        base.add("conv1.w", &[ch, cin, 3, 3], xavier(&mut rng, cin * 9, ch * 9, ch * cin * 9));
        base.add("conv1.b", &[ch], vec![0.0; ch]);
        base.add("conv2.w", &[c, ch, 3, 3], xavier(&mut rng, ch * 9, c * 9, c * ch * 9));
        base.add("conv2.b", &[c], vec![0.0; c]);

        let nq = config.n_queries();
        base.add("queries", &[nq, c], xavier(&mut rng, c, c, nq * c));
        for l in 0..config.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                base.add(&format!("layer{l}.{w}"), &[c, c], xavier(&mut rng, c, c, c * c));
            }
            let hm = config.mlp_hidden;
            base.add(&format!("layer{l}.mlp.w1"), &[c, hm], xavier(&mut rng, c, hm, c * hm));
            base.add(&format!("layer{l}.mlp.b1"), &[hm], vec![0.0; hm]);
            base.add(&format!("layer{l}.mlp.w2"), &[hm, c], xavier(&mut rng, hm, c, hm * c));
            base.add(&format!("layer{l}.mlp.b2"), &[c], vec![0.0; c]);
        }

        base.add("class.w", &[c, N_CLASS_LOGITS], xavier(&mut rng, c, N_CLASS_LOGITS, c * N_CLASS_LOGITS));
        base.add("class.b", &[N_CLASS_LOGITS], vec![0.0; N_CLASS_LOGITS]);
        base.add("box.w", &[c, 5], xavier(&mut rng, c, 5, c * 5));
        base.add("box.b", &[5], vec![0.0; 5]);
        let tdim = 2 * T_PRED;
        base.add("traj.w", &[c, tdim], xavier(&mut rng, c, tdim, c * tdim));
        base.add("traj.b", &[tdim], vec![0.0; tdim]);

        base.add("ego.query", &[1, c], xavier(&mut rng, c, c, c));
        base.add("status.w", &[STATUS_DIM, c], xavier(&mut rng, STATUS_DIM, c, STATUS_DIM * c));
        base.add("status.b", &[c], vec![0.0; c]);
        for blk in ["inter1", "inter2"] {
            for w in ["wq", "wk", "wv", "wo"] {
                base.add(&format!("{blk}.{w}"), &[c, c], xavier(&mut rng, c, c, c * c));
            }
        }
        let hm = config.mlp_hidden;
        base.add("inter_mlp.w1", &[c, hm], xavier(&mut rng, c, hm, c * hm));
        base.add("inter_mlp.b1", &[hm], vec![0.0; hm]);
        base.add("inter_mlp.w2", &[hm, c], xavier(&mut rng, hm, c, hm * c));
        base.add("inter_mlp.b2", &[c], vec![0.0; c]);

        let pdim = 2 * PLAN_STEPS;
        base.add("plan.w1", &[c, hm], xavier(&mut rng, c, hm, c * hm));
        base.add("plan.b1", &[hm], vec![0.0; hm]);
        base.add("plan.w2", &[hm, pdim], xavier(&mut rng, hm, pdim, hm * pdim));
        base.add("plan.b2", &[pdim], vec![0.0; pdim]);

        let vlp = if config.vlp.any() {
            let mut vrng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ VLP_SEED_SALT);
            let d = make_encoder(&config.encoder_backend)?.dim();
            let hidden = AdapterMlp::hidden_for(d, c);
            let mut store = ParamStore::default();
            if config.vlp.alp {
                store.add("f_bev.w1", &[d, hidden], xavier(&mut vrng, d, hidden, d * hidden));
                store.add("f_bev.b1", &[hidden], vec![0.0; hidden]);
                store.add("f_bev.w2", &[hidden, c], xavier(&mut vrng, hidden, c, hidden * c));
                store.add("f_bev.b2", &[c], vec![0.0; c]);
                store.add("alpha_alp.raw", &[1], vec![LogitScale::new().raw()]);
            }
            if config.vlp.slp {
                store.add("f_ego.w1", &[d, hidden], xavier(&mut vrng, d, hidden, d * hidden));
                store.add("f_ego.b1", &[hidden], vec![0.0; hidden]);
                store.add("f_ego.w2", &[hidden, c], xavier(&mut vrng, hidden, c, hidden * c));
                store.add("f_ego.b2", &[c], vec![0.0; c]);
                store.add("alpha_slp.raw", &[1], vec![LogitScale::new().raw()]);
            }
            Some(store)
        } else {
            None
        };

        Ok(PlannerModel { config, seed, base, vlp })
    }

    pub fn base_param_count(&self) -> usize {
        self.base.param_count()
    }

    pub fn vlp_param_count(&self) -> usize {
        self.vlp.as_ref().map_or(0, |s| s.param_count())
    }

    pub fn param_count(&self) -> usize {
        self.base_param_count() + self.vlp_param_count()
    }

    pub fn has_vlp(&self) -> bool {
        self.vlp.is_some()
    }

    pub fn base_store(&self) -> &ParamStore {
        &self.base
    }

    pub fn vlp_store(&self) -> Option<&ParamStore> {
        self.vlp.as_ref()
    }

    /// Removes the training-only attachments, leaving base weights untouched.
    pub fn strip_vlp(&self) -> PlannerModel {
        let mut config = self.config.clone();
        config.vlp = VlpSwitches::default();
        PlannerModel { config, seed: self.seed, base: self.base.clone(), vlp: None }
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        let mut vars = Vec::new();
        for t in &self.base.tensors {
            vars.push((t.name.clone(), tape.leaf(t.data.clone(), &t.shape)));
        }
        if let Some(vs) = &self.vlp {
            for t in &vs.tensors {
                vars.push((t.name.clone(), tape.leaf(t.data.clone(), &t.shape)));
            }
        }
        Bound { vars }
    }

    fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add_row_broadcast(y, b)
    }

    fn attn_block(
        tape: &mut Tape,
        x: Var,
        mem: Var,
        b: &Bound,
        prefix: &str,
        inv_sqrt_c: f64,
    ) -> Result<Var> {
        let q = tape.matmul(x, b.v(&format!("{prefix}.wq")))?;
        let k = tape.matmul(mem, b.v(&format!("{prefix}.wk")))?;
        let v = tape.matmul(mem, b.v(&format!("{prefix}.wv")))?;
        let scores = tape.matmul_tb(q, k)?;
        let scores = tape.scale(scores, inv_sqrt_c);
        let attn = tape.softmax_rows(scores)?;
        let ctx = tape.matmul(attn, v)?;
        tape.matmul(ctx, b.v(&format!("{prefix}.wo")))
    }

    fn mlp_block(tape: &mut Tape, x: Var, b: &Bound, prefix: &str) -> Result<Var> {
        let h = Self::affine(tape, x, b.v(&format!("{prefix}.w1")), b.v(&format!("{prefix}.b1")))?;
        let h = tape.relu(h);
        Self::affine(tape, h, b.v(&format!("{prefix}.w2")), b.v(&format!("{prefix}.b2")))
    }

    fn forward_scene_on_tape(&self, tape: &mut Tape, b: &Bound, scene: &Scene) -> Result<SceneVars> {
        let cfg = &self.config;
        let (h, w) = (cfg.grid.h(), cfg.grid.w());
        let raster = rasterize_scene(scene, &cfg.grid)?;
        let x = tape.leaf(raster, &[RASTER_CHANNELS, h, w]);
        let h1 = tape.conv2d(x, b.v("conv1.w"), b.v("conv1.b"), 2)?;
        let h1 = tape.relu(h1);
        // No activation here: pooled BEV features stay signed.
        let bev_half = tape.conv2d(h1, b.v("conv2.w"), b.v("conv2.b"), 1)?;
        let bev = tape.upsample2(bev_half)?;
        let mem_grid = tape.avgpool(bev_half, cfg.mem_pool)?;
        let mem = tape.chw_to_rows(mem_grid)?;

        let inv_sqrt_c = 1.0 / (cfg.c_feat as f64).sqrt();
        let mut queries = b.v("queries");
        for l in 0..cfg.n_layers {
            let ctx = Self::attn_block(tape, queries, mem, b, &format!("layer{l}"), inv_sqrt_c)?;
            queries = tape.add(queries, ctx)?;
            let m = Self::mlp_block(tape, queries, b, &format!("layer{l}.mlp"))?;
            queries = tape.add(queries, m)?;
        }

        let agent_q = tape.slice_rows(queries, 0, cfg.n_agent_queries)?;
        let class_logits = Self::affine(tape, agent_q, b.v("class.w"), b.v("class.b"))?;
        let boxes = Self::affine(tape, agent_q, b.v("box.w"), b.v("box.b"))?;
        let trajs = Self::affine(tape, agent_q, b.v("traj.w"), b.v("traj.b"))?;

        let status = tape.leaf(status_vector(scene), &[1, STATUS_DIM]);
        let status_feat = Self::affine(tape, status, b.v("status.w"), b.v("status.b"))?;
        let ego0 = tape.add(b.v("ego.query"), status_feat)?;
        let a1 = Self::attn_block(tape, ego0, queries, b, "inter1", inv_sqrt_c)?;
        let ego1 = tape.add(ego0, a1)?;
        let a2 = Self::attn_block(tape, ego1, mem, b, "inter2", inv_sqrt_c)?;
        let ego2 = tape.add(ego1, a2)?;
        let m = Self::mlp_block(tape, ego2, b, "inter_mlp")?;
        let ego_q = tape.add(ego2, m)?;

        let p1 = Self::affine(tape, ego_q, b.v("plan.w1"), b.v("plan.b1"))?;
        let p1 = tape.relu(p1);
        let deltas = Self::affine(tape, p1, b.v("plan.w2"), b.v("plan.b2"))?;
        let deltas = tape.reshape(deltas, &[PLAN_STEPS, 2])?;
        let plan = tape.cumsum_rows(deltas)?;

        Ok(SceneVars { bev, class_logits, boxes, trajs, ego_q, plan })
    }

    fn check_batch(&self, scenes: &[&Scene]) -> Result<()> {
        if scenes.is_empty() {
            return Err(Error::Argument("forward needs at least one scene".into()));
        }
        for (i, s) in scenes.iter().enumerate() {
            if s.grid_spec != self.config.grid {
                return Err(Error::Argument(format!("scene {i} uses a different grid spec")));
            }
        }
        Ok(())
    }

    /// Runs the planner. Train mode materializes the alignment taps when
    /// attachments exist; infer mode never touches an attachment parameter.
    pub fn forward(&self, scenes: &[&Scene], mode: Mode) -> Result<ForwardOutput> {
        let mut cache = None;
        self.forward_with(scenes, mode, &mut cache)
    }

    pub fn forward_with(
        &self,
        scenes: &[&Scene],
        mode: Mode,
        cache: &mut Option<EmbeddingCache>,
    ) -> Result<ForwardOutput> {
        self.check_batch(scenes)?;
        let mut tape = Tape::new();
        let bound = self.bind_base_only(&mut tape);
        let mut bev = Vec::new();
        let mut agent_preds = Vec::new();
        let mut ego_rows = Vec::new();
        let mut plan = Vec::new();
        for scene in scenes {
            let sv = self.forward_scene_on_tape(&mut tape, &bound, scene)?;
            bev.push(BevGrid::from_data(
                self.config.grid,
                self.config.c_feat,
                tape.value(sv.bev).to_vec(),
            )?);
            agent_preds.push(AgentPreds {
                class_logits: value_matrix(&tape, sv.class_logits),
                boxes: value_matrix(&tape, sv.boxes),
                trajs: value_matrix(&tape, sv.trajs),
            });
            ego_rows.push(tape.value(sv.ego_q).to_vec());
            let pv = tape.value(sv.plan);
            let mut wp = Vec::with_capacity(PLAN_STEPS);
            for t in 0..PLAN_STEPS {
                wp.push([pv[2 * t], pv[2 * t + 1]]);
            }
            if wp.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
                return Err(Error::Diverged { step: 0 });
            }
            plan.push(wp);
        }
        let ego_qfeat = Matrix::from_rows(&ego_rows)?;

        let vlp_taps = if mode == Mode::Train && self.vlp.is_some() {
            Some(self.materialize_taps(scenes, &bev, &ego_qfeat, cache)?)
        } else {
            None
        };
        Ok(ForwardOutput { bev, agent_preds, ego_qfeat, plan, vlp_taps })
    }

    /// Binding used by plain forwards: base parameters only, so inference is
    /// structurally incapable of touching attachments.
    fn bind_base_only(&self, tape: &mut Tape) -> Bound {
        let mut vars = Vec::new();
        for t in &self.base.tensors {
            vars.push((t.name.clone(), tape.leaf(t.data.clone(), &t.shape)));
        }
        Bound { vars }
    }

    fn adapter(&self, prefix: &str) -> Result<AdapterMlp> {
        let store = self
            .vlp
            .as_ref()
            .ok_or_else(|| Error::Argument("model has no vlp attachments".into()))?;
        let grab = |suffix: &str| -> Result<Vec<f64>> {
            store
                .get(&format!("{prefix}.{suffix}"))
                .map(|t| t.data.clone())
                .ok_or_else(|| Error::Argument(format!("missing attachment tensor {prefix}.{suffix}")))
        };
        let w1 = grab("w1")?;
        let b1 = grab("b1")?;
        let w2 = grab("w2")?;
        let b2 = grab("b2")?;
        let d = make_encoder(&self.config.encoder_backend)?.dim();
        AdapterMlp::from_parts(d, self.config.c_feat, w1, b1, w2, b2)
    }

    fn logit_scale(&self, name: &str) -> Result<LogitScale> {
        let store = self
            .vlp
            .as_ref()
            .ok_or_else(|| Error::Argument("model has no vlp attachments".into()))?;
        store
            .get(name)
            .map(|t| LogitScale::from_raw(t.data[0]))
            .ok_or_else(|| Error::Argument(format!("missing attachment tensor {name}")))
    }

    fn materialize_taps(
        &self,
        scenes: &[&Scene],
        grids: &[BevGrid],
        ego_qfeat: &Matrix,
        cache: &mut Option<EmbeddingCache>,
    ) -> Result<VlpTaps> {
        let encoder = make_encoder(&self.config.encoder_backend)?;
        let mask = self.config.field_mask;
        let alp = if self.config.vlp.alp {
            let items: Vec<(&BevGrid, &Scene)> =
                grids.iter().zip(scenes.iter().copied()).collect();
            let batch = agent_bev_features_batch(&items)?;
            let prompts: Vec<String> = batch
                .meta
                .iter()
                .map(|m| alp_prompt_for_row(scenes[m.scene_index], m, &mask))
                .collect::<Result<_>>()?;
            let embedded = encode_prompts(&prompts, encoder.as_ref(), cache.as_mut())?;
            let features = self.adapter("f_bev")?.forward(&embedded)?;
            let exps = ExpectationBatch { features, meta: batch.meta.clone() };
            Some((batch, exps))
        } else {
            None
        };
        let slp = if self.config.vlp.slp {
            let prompts: Vec<String> = scenes
                .iter()
                .map(|s| slp_prompt(s, &mask))
                .collect::<Result<_>>()?;
            let embedded = encode_prompts(&prompts, encoder.as_ref(), cache.as_mut())?;
            let exps = self.adapter("f_ego")?.forward(&embedded)?;
            Some((ego_qfeat.clone(), exps))
        } else {
            None
        };
        Ok(VlpTaps { alp, slp })
    }

    /// Builds the full training loss on `tape`. Returns the scalar variable
    /// and the extracted breakdown.
    fn total_loss_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        scenes: &[&Scene],
        encoder: Option<&dyn TextEncoder>,
        cache: &mut Option<EmbeddingCache>,
    ) -> Result<TapeLoss> {
        self.check_batch(scenes)?;
        let cfg = &self.config;
        let mut scene_vars = Vec::with_capacity(scenes.len());
        for scene in scenes {
            scene_vars.push(self.forward_scene_on_tape(tape, bound, scene)?);
        }

        // Perception: every query classifies (matched class or no-object).
        let mut class_targets = Vec::new();
        let mut matches_per_scene = Vec::new();
        for (scene, sv) in scenes.iter().zip(&scene_vars) {
            let boxes = tape.value(sv.boxes);
            let pred_centers: Vec<[f64; 2]> =
                (0..cfg.n_agent_queries).map(|q| [boxes[q * 5], boxes[q * 5 + 1]]).collect();
            let mut order: Vec<usize> = (0..scene.agents.len()).collect();
            order.sort_by_key(|&i| scene.agents[i].id);
            let gt_centers: Vec<[f64; 2]> =
                order.iter().map(|&i| [scene.agents[i].bev_box.cx, scene.agents[i].bev_box.cy]).collect();
            let pairs = greedy_match(&pred_centers, &gt_centers);
            let mut targets = vec![NO_OBJECT; cfg.n_agent_queries];
            for &(qi, ai) in &pairs {
                targets[qi] = scene.agents[order[ai]].label.index();
            }
            class_targets.extend(targets);
            matches_per_scene.push((order, pairs));
        }
        let class_vars: Vec<Var> = scene_vars.iter().map(|sv| sv.class_logits).collect();
        let class_cat = tape.concat_rows(&class_vars)?;
        let ce = tape.ce_rows(class_cat, &class_targets)?;

        // Box and trajectory regression on matched queries.
        let mut box_rows = Vec::new();
        let mut box_targets = Vec::new();
        let mut traj_rows = Vec::new();
        let mut traj_targets = Vec::new();
        for ((scene, sv), (order, pairs)) in
            scenes.iter().zip(&scene_vars).zip(&matches_per_scene)
        {
            for &(qi, ai) in pairs {
                let agent = &scene.agents[order[ai]];
                box_rows.push(tape.slice_rows(sv.boxes, qi, qi + 1)?);
                let bb = agent.bev_box;
                box_targets.extend([bb.cx, bb.cy, bb.length, bb.width, bb.yaw]);
                traj_rows.push(tape.slice_rows(sv.trajs, qi, qi + 1)?);
                for p in &agent.future_traj {
                    traj_targets.extend([p[0], p[1]]);
                }
            }
        }
        let l_perc = if box_rows.is_empty() {
            ce
        } else {
            let box_cat = tape.concat_rows(&box_rows)?;
            let box_l1 = tape.l1_mean(box_cat, &box_targets)?;
            tape.add(ce, box_l1)?
        };
        let l_pred = if traj_rows.is_empty() {
            tape.scalar(0.0)
        } else {
            let traj_cat = tape.concat_rows(&traj_rows)?;
            tape.l1_mean(traj_cat, &traj_targets)?
        };

        // Planning: mean per-waypoint L1 (|dx| + |dy| averaged over waypoints).
        let plan_vars: Vec<Var> = scene_vars.iter().map(|sv| sv.plan).collect();
        let plan_cat = tape.concat_rows(&plan_vars)?;
        let mut plan_targets = Vec::new();
        for scene in scenes {
            for p in &scene.ego.gt_plan {
                plan_targets.extend([p[0], p[1]]);
            }
        }
        let plan_entrywise = tape.l1_mean(plan_cat, &plan_targets)?;
        let l_plan = tape.scale(plan_entrywise, 2.0);

        // Alignment losses.
        let l_alp = if self.config.vlp.alp {
            let encoder = encoder
                .ok_or_else(|| Error::Argument("ALP loss needs a text encoder".into()))?;
            let mut feat_rows = Vec::new();
            let mut metas = Vec::new();
            let mut prompts = Vec::new();
            for (si, (scene, sv)) in scenes.iter().zip(&scene_vars).enumerate() {
                let pool_src = if self.config.vlp.detach_alp_encoder {
                    let vals = tape.value(sv.bev).to_vec();
                    let shape = tape.shape(sv.bev).to_vec();
                    tape.leaf(vals, &shape)
                } else {
                    sv.bev
                };
                let w = cfg.grid.w();
                for region in entity_regions(scene)? {
                    let flat: Vec<usize> =
                        region.cells.iter().map(|&(r, c)| r * w + c).collect();
                    feat_rows.push(tape.mean_cells(pool_src, &flat)?);
                    let meta = RowMeta { scene_index: si, kind: region.kind, id: region.id };
                    prompts.push(alp_prompt_for_row(scene, &meta, &cfg.field_mask)?);
                    metas.push(meta);
                }
            }
            let feats = tape.concat_rows(&feat_rows)?;
            let embedded = encode_prompts(&prompts, encoder, cache.as_mut())?;
            let emb_var = tape.leaf(embedded.data().to_vec(), &[embedded.rows(), embedded.cols()]);
            let exps = adapter_forward_on_tape(
                tape,
                emb_var,
                bound.v("f_bev.w1"),
                bound.v("f_bev.b1"),
                bound.v("f_bev.w2"),
                bound.v("f_bev.b2"),
            )?;
            contrastive_loss_on_tape(tape, feats, exps, bound.v("alpha_alp.raw"))?
        } else {
            tape.scalar(0.0)
        };

        let l_slp = if self.config.vlp.slp {
            let encoder = encoder
                .ok_or_else(|| Error::Argument("SLP loss needs a text encoder".into()))?;
            let ego_vars: Vec<Var> = scene_vars.iter().map(|sv| sv.ego_q).collect();
            let ego_cat = tape.concat_rows(&ego_vars)?;
            let prompts: Vec<String> = scenes
                .iter()
                .map(|s| slp_prompt(s, &cfg.field_mask))
                .collect::<Result<_>>()?;
            let embedded = encode_prompts(&prompts, encoder, cache.as_mut())?;
            let emb_var = tape.leaf(embedded.data().to_vec(), &[embedded.rows(), embedded.cols()]);
            let exps = adapter_forward_on_tape(
                tape,
                emb_var,
                bound.v("f_ego.w1"),
                bound.v("f_ego.b1"),
                bound.v("f_ego.w2"),
                bound.v("f_ego.b2"),
            )?;
            contrastive_loss_on_tape(tape, ego_cat, exps, bound.v("alpha_slp.raw"))?
        } else {
            tape.scalar(0.0)
        };

        // total = w_enc*l_alp + w_dec*(((l_perc + l_pred) + l_plan) + l_slp)
        let s1 = tape.add(l_perc, l_pred)?;
        let s2 = tape.add(s1, l_plan)?;
        let dec_sum = tape.add(s2, l_slp)?;
        let enc_term = tape.scale(l_alp, cfg.weights.enc);
        let dec_term = tape.scale(dec_sum, cfg.weights.dec);
        let total = tape.add(enc_term, dec_term)?;

        let breakdown = LossBreakdown {
            l_perc: tape.value(l_perc)[0],
            l_pred: tape.value(l_pred)[0],
            l_plan: tape.value(l_plan)[0],
            l_slp: tape.value(l_slp)[0],
            l_alp: tape.value(l_alp)[0],
            total: tape.value(total)[0],
            w_enc: cfg.weights.enc,
            w_dec: cfg.weights.dec,
        };
        Ok(TapeLoss { total, breakdown })
    }

    /// One-shot loss evaluation (builds and discards a tape).
    pub fn total_loss(&self, scenes: &[&Scene]) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let encoder = if self.config.vlp.any() {
            Some(make_encoder(&self.config.encoder_backend)?)
        } else {
            None
        };
        let mut cache = None;
        let tl = self.total_loss_on_tape(
            &mut tape,
            &bound,
            scenes,
            encoder.as_deref(),
            &mut cache,
        )?;
        Ok(tl.breakdown)
    }

    /// Diagonal-argmax accuracies of the current ALP and SLP similarity
    /// matrices over `scenes` (None for a disabled component).
    pub fn alignment_accuracy(&self, scenes: &[&Scene]) -> Result<(Option<f64>, Option<f64>)> {
        let out = self.forward(scenes, Mode::Train)?;
        let taps = out
            .vlp_taps
            .ok_or_else(|| Error::Argument("alignment accuracy needs vlp attachments".into()))?;
        let alp = match &taps.alp {
            Some((batch, exps)) => {
                let scale = self.logit_scale("alpha_alp.raw")?;
                let sim = crate::contrastive::similarity(&batch.features, &exps.features, &scale)?;
                Some(crate::contrastive::diagonal_argmax_accuracy(&sim)?)
            }
            None => None,
        };
        let slp = match &taps.slp {
            Some((ego, exps)) => {
                let scale = self.logit_scale("alpha_slp.raw")?;
                let sim = crate::contrastive::similarity(ego, exps, &scale)?;
                Some(crate::contrastive::diagonal_argmax_accuracy(&sim)?)
            }
            None => None,
        };
        Ok((alp, slp))
    }

    /// Trains in place; deterministic for a fixed (config, seed, data).
    pub fn train(&mut self, scenes: &[Scene], tcfg: &TrainConfig) -> Result<TrainReport> {
        use rand::seq::SliceRandom as _;
        use rand::SeedableRng as _;
        if scenes.is_empty() {
            return Err(Error::Argument("training set is empty".into()));
        }
        if tcfg.batch_size == 0 || tcfg.steps == 0 {
            return Err(Error::Argument("steps and batch_size must be positive".into()));
        }
        let encoder = if self.config.vlp.any() {
            Some(make_encoder(&self.config.encoder_backend)?)
        } else {
            None
        };
        let mut cache = encoder.as_deref().map(EmbeddingCache::new);

        // Two parameter groups: trunk+heads, and the attachments (which may
        // run hotter so the adapters absorb most of the alignment motion).
        if !(tcfg.vlp_lr_mult.is_finite() && tcfg.vlp_lr_mult > 0.0) {
            return Err(Error::Argument("vlp_lr_mult must be positive and finite".into()));
        }
        let base_sizes: Vec<usize> = self.base.tensors.iter().map(|t| t.data.len()).collect();
        let mut opt_base = AdamW::new(tcfg.optim, &base_sizes);
        let mut opt_vlp = self.vlp.as_ref().map(|vs| {
            let sizes: Vec<usize> = vs.tensors.iter().map(|t| t.data.len()).collect();
            let mut group = tcfg.optim;
            group.lr *= tcfg.vlp_lr_mult;
            AdamW::new(group, &sizes)
        });

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(tcfg.shuffle_seed);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng);
        let mut cursor = 0usize;

        let mut history = Vec::with_capacity(tcfg.steps);
        let mut diverged_at = None;
        for step in 0..tcfg.steps {
            let mut batch = Vec::with_capacity(tcfg.batch_size);
            for _ in 0..tcfg.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(&scenes[order[cursor]]);
                cursor += 1;
            }

            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let tl =
                self.total_loss_on_tape(&mut tape, &bound, &batch, encoder.as_deref(), &mut cache)?;
            if !tl.breakdown.total.is_finite() {
                // Parameters are still the last finite state: stop before
                // applying a poisoned update.
                diverged_at = Some(step);
                break;
            }
            let grads = tape.backward(tl.total)?;
            let grad_refs: Vec<Option<&[f64]>> =
                bound.vars.iter().map(|(_, v)| grads.get(*v)).collect();
            let n_base = self.base.tensors.len();
            let snap_base: Vec<Vec<f64>> =
                self.base.tensors.iter().map(|t| t.data.clone()).collect();
            let snap_vlp: Option<Vec<Vec<f64>>> =
                self.vlp.as_ref().map(|vs| vs.tensors.iter().map(|t| t.data.clone()).collect());
            {
                let mut params: Vec<&mut [f64]> = self
                    .base
                    .tensors
                    .iter_mut()
                    .map(|t| t.data.as_mut_slice())
                    .collect();
                opt_base.step(&mut params, &grad_refs[..n_base])?;
            }
            if let (Some(vs), Some(opt)) = (&mut self.vlp, opt_vlp.as_mut()) {
                let mut params: Vec<&mut [f64]> =
                    vs.tensors.iter_mut().map(|t| t.data.as_mut_slice()).collect();
                opt.step(&mut params, &grad_refs[n_base..])?;
            }
            // A step that lands on non-finite parameters is rolled back, so
            // a checkpoint always holds the last finite state.
            let finite = self
                .base
                .tensors
                .iter()
                .chain(self.vlp.iter().flat_map(|s| s.tensors.iter()))
                .all(|t| t.data.iter().all(|v| v.is_finite()));
            if !finite {
                for (t, s) in self.base.tensors.iter_mut().zip(&snap_base) {
                    t.data.clone_from(s);
                }
                if let (Some(vs), Some(snap)) = (&mut self.vlp, &snap_vlp) {
                    for (t, s) in vs.tensors.iter_mut().zip(snap) {
                        t.data.clone_from(s);
                    }
                }
                diverged_at = Some(step);
                break;
            }
            if let Some(vs) = &mut self.vlp {
                for name in ["alpha_alp.raw", "alpha_slp.raw"] {
                    if let Some(t) = vs.get_mut(name) {
                        t.data[0] = LogitScale::clamp_raw(t.data[0]);
                    }
                }
            }
            history.push(tl.breakdown);
        }

        if let Some(path) = &tcfg.checkpoint_path {
            self.save_checkpoint(path)?;
        }
        let report = TrainReport { history, diverged_at };
        if let Some(step) = report.diverged_at {
            if tcfg.checkpoint_path.is_none() {
                return Err(Error::Diverged { step });
            }
        }
        Ok(report)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: self.config.clone(),
            seed: self.seed,
            has_vlp: self.vlp.is_some(),
            base: self.base.tensors.clone(),
            vlp: self.vlp.as_ref().map(|s| s.tensors.clone()),
        };
        let tmp = path.with_extension("ck.tmp");
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(&tmp, serde_json::to_vec(&ck)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Loads a checkpoint. In infer mode any attachments are dropped
    /// silently; in train mode they are kept as saved.
    pub fn load_checkpoint(path: &Path, mode: Mode) -> Result<PlannerModel> {
        let bytes = std::fs::read(path)?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Persistence(format!(
                "checkpoint schema version {} unsupported",
                ck.schema_version
            )));
        }
        if ck.has_vlp != ck.vlp.is_some() {
            return Err(Error::Persistence(
                "checkpoint has_vlp flag disagrees with its payload".into(),
            ));
        }
        // Validate the tensor layout against a freshly constructed skeleton.
        // Infer mode drops the attachments before construction, so loading
        // never needs the text-encoder backend.
        let mut cfg = ck.config.clone();
        if mode == Mode::Infer {
            cfg.vlp = VlpSwitches::default();
        }
        let skeleton = PlannerModel::new(cfg, ck.seed)?;
        let check = |saved: &[ParamTensor], fresh: &ParamStore, which: &str| -> Result<()> {
            if saved.len() != fresh.tensors.len() {
                return Err(Error::Persistence(format!(
                    "checkpoint {which} tensor count {} does not match config ({})",
                    saved.len(),
                    fresh.tensors.len()
                )));
            }
            for (s, f) in saved.iter().zip(&fresh.tensors) {
                if s.name != f.name || s.shape != f.shape || s.data.len() != f.data.len() {
                    return Err(Error::Persistence(format!(
                        "checkpoint tensor {} does not match the {} layout",
                        s.name, which
                    )));
                }
                if s.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Persistence(format!(
                        "checkpoint tensor {} holds non-finite values",
                        s.name
                    )));
                }
            }
            Ok(())
        };
        check(&ck.base, &skeleton.base, "base")?;
        let mut model = skeleton;
        model.base.tensors = ck.base;
        if mode == Mode::Train {
            match (ck.vlp, model.vlp.take()) {
                (Some(tensors), Some(fresh)) => {
                    check(&tensors, &fresh, "vlp")?;
                    model.vlp = Some(ParamStore { tensors });
                }
                (None, None) => {}
                (Some(_), None) => {
                    return Err(Error::Persistence(
                        "checkpoint has attachments but config disables them".into(),
                    ))
                }
                (None, Some(_)) => {
                    return Err(Error::Persistence(
                        "config enables attachments but checkpoint has none".into(),
                    ))
                }
            }
        }
        Ok(model)
    }
}

fn value_matrix(tape: &Tape, v: Var) -> Matrix {
    let shape = tape.shape(v);
    let (r, c) = (shape[0], shape[1]);
    Matrix::from_vec(r, c, tape.value(v).to_vec()).expect("tape buffers are well-shaped")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    /// Learning-rate multiplier for the attachment parameter group, so the
    /// adapters can track the alignment targets faster than the trunk moves.
    pub vlp_lr_mult: f64,
    pub shuffle_seed: u64,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 240,
            batch_size: 6,
            optim: AdamWConfig::default(),
            vlp_lr_mult: 1.0,
            shuffle_seed: 1,
            checkpoint_path: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<LossBreakdown>,
    /// Step at which a non-finite loss aborted training, if any.
    pub diverged_at: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_dataset, WorldConfig};
    use approx::assert_relative_eq;

    fn tiny_config(vlp: VlpSwitches) -> ModelConfig {
        ModelConfig {
            grid: GridSpec { extent: (-12.8, 12.8, -12.8, 12.8), resolution: 0.8 },
            c_feat: 8,
            conv_hidden: 4,
            n_agent_queries: 6,
            n_lane_queries: 2,
            n_layers: 1,
            mlp_hidden: 12,
            mem_pool: 2,
            vlp,
            encoder_backend: "hash-ngram-64".to_string(),
            field_mask: FieldMask::all(),
            weights: LossWeights::default(),
        }
    }

    fn tiny_scenes(n: usize) -> Vec<Scene> {
        let mut cfg = WorldConfig::city_a();
        cfg.grid = GridSpec { extent: (-12.8, 12.8, -12.8, 12.8), resolution: 0.8 };
        cfg.agent_count = (1, 3);
        cfg.lane_count = (1, 2);
        make_dataset(&cfg, n, 40).unwrap()
    }

    fn full_switches() -> VlpSwitches {
        VlpSwitches { slp: true, alp: true, detach_alp_encoder: false }
    }

    #[test]
    fn greedy_matching_is_deterministic_and_nearest_first() {
        // One obvious nearest pair, then the leftovers.
        let pred = [[0.0, 0.0], [10.0, 0.0], [5.0, 5.0]];
        let gt = [[9.5, 0.0], [0.2, 0.0]];
        let pairs = greedy_match(&pred, &gt);
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);

        // Exact tie: lower query index wins, then lower agent index.
        let pred = [[0.0, 0.0], [0.0, 0.0]];
        let gt = [[1.0, 0.0], [1.0, 0.0]];
        assert_eq!(greedy_match(&pred, &gt), vec![(0, 0), (1, 1)]);

        assert_eq!(greedy_match(&pred, &[]), vec![]);
        assert_eq!(greedy_match(&[], &gt), vec![]);
    }

    #[test]
    fn raster_channels_mark_agents_and_lanes() {
        let scenes = tiny_scenes(1);
        let scene = &scenes[0];
        let grid = scene.grid_spec;
        let data = rasterize_scene(scene, &grid).unwrap();
        let (h, w) = (grid.h(), grid.w());
        assert_eq!(data.len(), RASTER_CHANNELS * h * w);
        let occupied: f64 = data[..h * w].iter().sum();
        assert!(
            occupied > scene.agents.len() as f64,
            "agents and the ego footprint mark occupancy cells"
        );
        let class_sum: f64 = data[h * w..(1 + AgentClass::ALL.len()) * h * w].iter().sum();
        assert!(class_sum > 0.0 && class_sum < occupied, "the ego has no class channel");
        let ego_region = entity_regions(scene)
            .unwrap()
            .into_iter()
            .find(|r| r.kind == RowKind::Ego)
            .unwrap();
        for &(r, c) in &ego_region.cells {
            assert_eq!(data[r * w + c], 1.0, "ego footprint occupies ({r}, {c})");
        }
        if !scene.lanes.is_empty() {
            let lane_ch = &data[(RASTER_CHANNELS - 1) * h * w..];
            assert!(lane_ch.iter().sum::<f64>() > 0.0);
        }
        let wrong = GridSpec { extent: (-25.6, 25.6, -25.6, 25.6), resolution: 0.8 };
        assert!(rasterize_scene(scene, &wrong).is_err());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let model = PlannerModel::new(tiny_config(VlpSwitches::default()), 3).unwrap();
        let scenes = tiny_scenes(2);
        let refs: Vec<&Scene> = scenes.iter().collect();
        let out = model.forward(&refs, Mode::Infer).unwrap();
        assert_eq!(out.plan.len(), 2);
        assert!(out.plan.iter().all(|p| p.len() == PLAN_STEPS));
        assert_eq!(out.ego_qfeat.rows(), 2);
        assert_eq!(out.ego_qfeat.cols(), 8);
        assert_eq!(out.agent_preds[0].class_logits.rows(), 6);
        assert_eq!(out.agent_preds[0].class_logits.cols(), N_CLASS_LOGITS);
        assert_eq!(out.agent_preds[0].boxes.cols(), 5);
        assert_eq!(out.agent_preds[0].trajs.cols(), 2 * T_PRED);
        assert!(out.vlp_taps.is_none());
        assert_eq!(out.bev[0].chans(), 8);

        let again = model.forward(&refs, Mode::Infer).unwrap();
        assert_eq!(out.plan, again.plan);
        assert_eq!(out.ego_qfeat, again.ego_qfeat);
    }

    #[test]
    fn attachments_never_change_inference_and_count_exactly() {
        let attached = PlannerModel::new(tiny_config(full_switches()), 9).unwrap();
        let stripped = attached.strip_vlp();
        let plain = PlannerModel::new(tiny_config(VlpSwitches::default()), 9).unwrap();

        // Same seed => identical base weights regardless of attachments.
        assert_eq!(stripped.base_store(), plain.base_store());
        assert_eq!(stripped, plain);

        let scenes = tiny_scenes(2);
        let refs: Vec<&Scene> = scenes.iter().collect();
        let a = attached.forward(&refs, Mode::Infer).unwrap();
        let b = stripped.forward(&refs, Mode::Infer).unwrap();
        let mut max_diff = 0.0f64;
        for (pa, pb) in a.plan.iter().zip(&b.plan) {
            for (wa, wb) in pa.iter().zip(pb) {
                max_diff = max_diff.max((wa[0] - wb[0]).abs()).max((wa[1] - wb[1]).abs());
            }
        }
        assert_eq!(max_diff, 0.0);
        assert_eq!(a.ego_qfeat, b.ego_qfeat);

        // Attachment parameter count: two adapters plus two logit scales.
        let d = 64;
        let c = 8;
        let hidden = AdapterMlp::hidden_for(d, c);
        let adapter = d * hidden + hidden + hidden * c + c;
        assert_eq!(attached.vlp_param_count(), 2 * adapter + 2);
        assert_eq!(attached.param_count() - stripped.param_count(), 2 * adapter + 2);

        // The reference dims: D=64, C=32 give the documented 12482.
        let mut big = tiny_config(full_switches());
        big.c_feat = 32;
        let big_model = PlannerModel::new(big, 0).unwrap();
        assert_eq!(big_model.vlp_param_count(), 12482);
    }

    #[test]
    fn loss_breakdown_identity_and_component_semantics() {
        let scenes = tiny_scenes(3);
        let refs: Vec<&Scene> = scenes.iter().collect();

        // Baseline: both alignment losses are exactly zero.
        let base = PlannerModel::new(tiny_config(VlpSwitches::default()), 5).unwrap();
        let bd = base.total_loss(&refs).unwrap();
        bd.verify().unwrap();
        assert_eq!(bd.l_alp, 0.0);
        assert_eq!(bd.l_slp, 0.0);
        assert_eq!(bd.total, bd.l_perc + bd.l_pred + bd.l_plan);

        // Full attachments: all components present, identity still exact.
        let full = PlannerModel::new(tiny_config(full_switches()), 5).unwrap();
        let bd = full.total_loss(&refs).unwrap();
        bd.verify().unwrap();
        assert!(bd.l_alp > 0.0);
        assert!(bd.l_slp > 0.0);

        // Weight zeroing: enc weight 0 recovers the decoder-only total.
        let mut cfg = tiny_config(full_switches());
        cfg.weights = LossWeights { enc: 0.0, dec: 1.0 };
        let zeroed = PlannerModel::new(cfg, 5).unwrap();
        let bz = zeroed.total_loss(&refs).unwrap();
        bz.verify().unwrap();
        assert_eq!(bz.total, ((bz.l_perc + bz.l_pred) + bz.l_plan) + bz.l_slp);
    }

    #[test]
    fn plan_loss_mean_l1_closed_form() {
        // A plan offset by (1, 0) at every waypoint costs exactly 1.0.
        let scenes = tiny_scenes(1);
        let scene = &scenes[0];
        let pred: Vec<[f64; 2]> = scene.ego.gt_plan.iter().map(|p| [p[0] + 1.0, p[1]]).collect();
        let mut diffs = 0.0;
        for (p, g) in pred.iter().zip(&scene.ego.gt_plan) {
            diffs += (p[0] - g[0]).abs() + (p[1] - g[1]).abs();
        }
        assert_relative_eq!(diffs / PLAN_STEPS as f64, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn vlp_tap_rows_match_entity_accounting() {
        let model = PlannerModel::new(tiny_config(full_switches()), 6).unwrap();
        let scenes = tiny_scenes(3);
        let refs: Vec<&Scene> = scenes.iter().collect();
        let out = model.forward(&refs, Mode::Train).unwrap();
        let taps = out.vlp_taps.unwrap();
        let (batch, exps) = taps.alp.as_ref().unwrap();
        let expected: usize = scenes.iter().map(|s| 1 + s.agents.len() + s.lanes.len()).sum();
        assert_eq!(batch.meta.len(), expected);
        assert_eq!(batch.features.rows(), expected);
        assert_eq!(exps.features.rows(), expected);
        assert_eq!(batch.meta, exps.meta);
        let (ego, prompts) = taps.slp.as_ref().unwrap();
        assert_eq!(ego.rows(), 3);
        assert_eq!(prompts.rows(), 3);
    }

    #[test]
    fn gradient_flow_partition_between_alignment_losses() {
        let scenes = tiny_scenes(2);
        let refs: Vec<&Scene> = scenes.iter().collect();

        // ALP-only model: total = l_alp exactly (dec weight zero).
        let mut cfg = tiny_config(VlpSwitches { slp: false, alp: true, detach_alp_encoder: false });
        cfg.weights = LossWeights { enc: 1.0, dec: 0.0 };
        let model = PlannerModel::new(cfg, 7).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let encoder = make_encoder("hash-ngram-64").unwrap();
        let mut cache = None;
        let tl = model
            .total_loss_on_tape(&mut tape, &bound, &refs, Some(encoder.as_ref()), &mut cache)
            .unwrap();
        let grads = tape.backward(tl.total).unwrap();
        let has = |name: &str| grads.get(bound.v(name)).map_or(false, |g| g.iter().any(|&x| x != 0.0));
        assert!(has("conv1.w"), "ALP reaches the BEV encoder");
        assert!(has("conv2.w"));
        assert!(has("f_bev.w1"), "ALP reaches its adapter");
        assert!(has("alpha_alp.raw"));
        assert!(!has("plan.w1"), "ALP must not touch the plan head");
        assert!(!has("plan.w2"));
        assert!(!has("ego.query"));

        // Detach switch: gradients stop at the BEV map.
        let mut cfg = tiny_config(VlpSwitches { slp: false, alp: true, detach_alp_encoder: true });
        cfg.weights = LossWeights { enc: 1.0, dec: 0.0 };
        let model = PlannerModel::new(cfg, 7).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut cache = None;
        let tl = model
            .total_loss_on_tape(&mut tape, &bound, &refs, Some(encoder.as_ref()), &mut cache)
            .unwrap();
        let grads = tape.backward(tl.total).unwrap();
        let has = |name: &str| grads.get(bound.v(name)).map_or(false, |g| g.iter().any(|&x| x != 0.0));
        assert!(!has("conv1.w"), "detached ALP must not reach the encoder");
        assert!(has("f_bev.w1"), "the adapter still trains");

        // SLP in isolation: build a tape whose loss is l_slp alone, so the
        // gradient support identifies exactly the ego pathway plus adapter.
        let model = PlannerModel::new(
            tiny_config(VlpSwitches { slp: true, alp: false, detach_alp_encoder: false }),
            7,
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut cache = None;
        let mut scene_vars = Vec::new();
        for s in &refs {
            scene_vars.push(model.forward_scene_on_tape(&mut tape, &bound, s).unwrap());
        }
        let ego_vars: Vec<Var> = scene_vars.iter().map(|sv| sv.ego_q).collect();
        let ego_cat = tape.concat_rows(&ego_vars).unwrap();
        let prompts: Vec<String> = refs
            .iter()
            .map(|s| slp_prompt(s, &model.config.field_mask).unwrap())
            .collect();
        let embedded = encode_prompts(&prompts, encoder.as_ref(), cache.as_mut()).unwrap();
        let emb_var = tape.leaf(embedded.data().to_vec(), &[embedded.rows(), embedded.cols()]);
        let exps = adapter_forward_on_tape(
            &mut tape,
            emb_var,
            bound.v("f_ego.w1"),
            bound.v("f_ego.b1"),
            bound.v("f_ego.w2"),
            bound.v("f_ego.b2"),
        )
        .unwrap();
        let l_slp =
            contrastive_loss_on_tape(&mut tape, ego_cat, exps, bound.v("alpha_slp.raw")).unwrap();
        let grads = tape.backward(l_slp).unwrap();
        let has = |name: &str| grads.get(bound.v(name)).map_or(false, |g| g.iter().any(|&x| x != 0.0));
        assert!(has("ego.query"), "SLP reaches the ego pathway");
        assert!(has("inter1.wq"));
        assert!(has("f_ego.w1"));
        assert!(has("alpha_slp.raw"));
        assert!(!has("plan.w2"), "SLP sits upstream of the plan head output");
        assert!(!has("class.w"), "SLP must not touch the perception heads");
    }

    #[test]
    fn ego_query_gradient_matches_finite_differences() {
        let scenes = tiny_scenes(2);
        let refs: Vec<&Scene> = scenes.iter().collect();
        let model = PlannerModel::new(tiny_config(full_switches()), 11).unwrap();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let encoder = make_encoder("hash-ngram-64").unwrap();
        let mut cache = None;
        let tl = model
            .total_loss_on_tape(&mut tape, &bound, &refs, Some(encoder.as_ref()), &mut cache)
            .unwrap();
        let grads = tape.backward(tl.total).unwrap();
        let g = grads.get(bound.v("ego.query")).unwrap().to_vec();

        for j in (0..model.config.c_feat).step_by(3) {
            let base_val = model.base.get("ego.query").unwrap().data[j];
            let h = 1e-5 * (1.0 + base_val.abs());
            let mut up = model.clone();
            up.base.get_mut("ego.query").unwrap().data[j] += h;
            let mut down = model.clone();
            down.base.get_mut("ego.query").unwrap().data[j] -= h;
            let fd = (up.total_loss(&refs).unwrap().total - down.total_loss(&refs).unwrap().total)
                / (2.0 * h);
            let denom = fd.abs().max(g[j].abs()).max(1e-8);
            assert!(
                ((fd - g[j]) / denom).abs() < 1e-4,
                "ego.query[{j}]: fd {fd} vs ad {}",
                g[j]
            );
        }
    }

    #[test]
    fn short_training_descends_and_reproduces_bitwise_history() {
        let scenes = tiny_scenes(10);
        let tcfg = TrainConfig {
            steps: 30,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut m1 = PlannerModel::new(tiny_config(full_switches()), 13).unwrap();
        let r1 = m1.train(&scenes, &tcfg).unwrap();
        assert!(r1.diverged_at.is_none());
        assert_eq!(r1.history.len(), 30);
        for bd in &r1.history {
            bd.verify().unwrap();
        }
        let first = r1.history.first().unwrap().total;
        let last = r1.history.last().unwrap().total;
        assert!(last < first, "loss should descend: {first} -> {last}");

        let mut m2 = PlannerModel::new(tiny_config(full_switches()), 13).unwrap();
        let r2 = m2.train(&scenes, &tcfg).unwrap();
        for (a, b) in r1.history.iter().zip(&r2.history) {
            assert!((a.total - b.total).abs() < 1e-6);
        }
        assert_eq!(m1, m2);
    }

    #[test]
    fn checkpoint_round_trip_and_infer_mode_strips_attachments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ck");
        let scenes = tiny_scenes(6);
        let mut model = PlannerModel::new(tiny_config(full_switches()), 17).unwrap();
        let tcfg = TrainConfig {
            steps: 5,
            batch_size: 3,
            checkpoint_path: Some(path.clone()),
            ..TrainConfig::default()
        };
        model.train(&scenes, &tcfg).unwrap();

        let trained = PlannerModel::load_checkpoint(&path, Mode::Train).unwrap();
        assert_eq!(trained, model);

        let inferred = PlannerModel::load_checkpoint(&path, Mode::Infer).unwrap();
        assert!(!inferred.has_vlp());
        assert_eq!(inferred.base_store(), model.base_store());
        let refs: Vec<&Scene> = scenes.iter().collect();
        let a = model.forward(&refs, Mode::Infer).unwrap();
        let b = inferred.forward(&refs, Mode::Infer).unwrap();
        assert_eq!(a.plan, b.plan);
    }
}
