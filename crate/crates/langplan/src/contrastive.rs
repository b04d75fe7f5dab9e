//! Contrastive alignment machinery shared by the agent-level (ALP) and
//! sample-level (SLP) losses: learnable logit scale, row normalization, scaled
//! cosine similarity, and a symmetric cross-entropy against the identity
//! pairing.
//!
//! Two implementations exist on purpose: pure [`Matrix`] functions (used by
//! evaluation and as a test oracle) and tape ops composed by
//! [`contrastive_loss_on_tape`] (used by training). Tests hold them equal.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bev::AgentFeatureBatch;
use crate::linalg::{logsumexp, Matrix};
use crate::prompt::ExpectationBatch;
use crate::{Error, Result};

/// Learnable temperature stored in log space so the effective scale
/// `alpha = exp(raw)` stays positive by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitScale {
    raw: f64,
}

impl LogitScale {
    pub const MAX_ALPHA: f64 = 100.0;
    /// Standard contrastive initialization: alpha = 1/0.07.
    pub const INIT_ALPHA: f64 = 1.0 / 0.07;

    pub fn new() -> Self {
        LogitScale { raw: Self::INIT_ALPHA.ln() }
    }

    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Argument(format!("logit scale alpha must be positive, got {alpha}")));
        }
        Ok(LogitScale { raw: alpha.ln() })
    }

    /// Wraps a log-space value taken from a parameter buffer.
    pub fn from_raw(raw: f64) -> Self {
        LogitScale { raw }
    }

    pub fn raw(&self) -> f64 {
        self.raw
    }

    pub fn alpha(&self) -> f64 {
        self.raw.exp()
    }

    /// Applies the post-update clamp: alpha never exceeds [`Self::MAX_ALPHA`].
    pub fn set_raw_clamped(&mut self, raw: f64) {
        self.raw = raw.min(Self::MAX_ALPHA.ln());
    }

    /// Clamp helper for raw values living in an external parameter buffer.
    pub fn clamp_raw(raw: f64) -> f64 {
        raw.min(Self::MAX_ALPHA.ln())
    }
}

impl Default for LogitScale {
    fn default() -> Self {
        LogitScale::new()
    }
}

#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub values: Matrix,
    pub alpha: f64,
}

impl SimilarityMatrix {
    /// Cosine bound: every entry must satisfy `|s| <= alpha` (up to rounding).
    pub fn validate(&self) -> Result<()> {
        let bound = self.alpha * (1.0 + 1e-9);
        if self.values.data().iter().any(|v| !v.is_finite() || v.abs() > bound) {
            return Err(Error::Argument("similarity entries exceed the cosine bound".into()));
        }
        Ok(())
    }
}

/// Scales every row to unit Euclidean norm.
pub fn normalize_rows(x: &Matrix) -> Result<Matrix> {
    let mut out = x.clone();
    let n = x.cols();
    for i in 0..x.rows() {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::DegenerateFeature { row: i, norm });
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(out)
}

/// `S[i][j] = alpha * cos(Xp_i, Xe_j)`.
pub fn similarity(xp: &Matrix, xe: &Matrix, scale: &LogitScale) -> Result<SimilarityMatrix> {
    if xp.rows() != xe.rows() || xp.cols() != xe.cols() {
        return Err(Error::Argument(format!(
            "similarity shape mismatch: {}x{} vs {}x{}",
            xp.rows(),
            xp.cols(),
            xe.rows(),
            xe.cols()
        )));
    }
    if xp.rows() == 0 {
        return Err(Error::Argument("similarity needs at least one row".into()));
    }
    let np = normalize_rows(xp)?;
    let ne = normalize_rows(xe)?;
    let values = np.matmul_transpose_b(&ne)?.scale(scale.alpha());
    Ok(SimilarityMatrix { values, alpha: scale.alpha() })
}

/// Mean of row-wise and column-wise softmax cross-entropy against the
/// diagonal pairing. `N = 1` yields exactly zero.
pub fn symmetric_ce_loss(s: &SimilarityMatrix) -> Result<f64> {
    let m = &s.values;
    if m.rows() != m.cols() {
        return Err(Error::Argument(format!(
            "symmetric_ce_loss needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    let mut row_term = 0.0;
    let mut col_term = 0.0;
    for i in 0..n {
        let row = m.row(i);
        row_term += logsumexp(row) - row[i];
        let col: Vec<f64> = (0..n).map(|r| m.get(r, i)).collect();
        col_term += logsumexp(&col) - col[i];
    }
    Ok(0.5 * (row_term / n as f64) + 0.5 * (col_term / n as f64))
}

/// ALP loss: produced BEV rows against adapted expectation rows. Row pairing
/// is checked via the metadata carried by both batches.
pub fn alp_loss(
    batch: &AgentFeatureBatch,
    expectations: &ExpectationBatch,
    scale: &LogitScale,
) -> Result<f64> {
    if batch.meta != expectations.meta {
        return Err(Error::Pairing(format!(
            "feature rows and expectation rows describe different entities ({} vs {} rows)",
            batch.meta.len(),
            expectations.meta.len()
        )));
    }
    let s = similarity(&batch.features, &expectations.features, scale)?;
    symmetric_ce_loss(&s)
}

/// SLP loss: one ego feature row per sample against one prompt row per sample.
pub fn slp_loss(ego_feats: &Matrix, ego_prompts: &Matrix, scale: &LogitScale) -> Result<f64> {
    if ego_feats.rows() != ego_prompts.rows() {
        return Err(Error::Pairing(format!(
            "ego features have {} rows but prompts have {}",
            ego_feats.rows(),
            ego_prompts.rows()
        )));
    }
    let s = similarity(ego_feats, ego_prompts, scale)?;
    symmetric_ce_loss(&s)
}

/// Tape composition used during training: normalize -> scaled cosine ->
/// symmetric CE. `raw_scale` is the log-space logit scale variable so
/// gradients reach it.
pub fn contrastive_loss_on_tape(tape: &mut Tape, feats: Var, exps: Var, raw_scale: Var) -> Result<Var> {
    let nf = tape.l2_normalize_rows(feats)?;
    let ne = tape.l2_normalize_rows(exps)?;
    let sim = tape.matmul_tb(nf, ne)?;
    let scaled = tape.scale_by_exp(sim, raw_scale)?;
    tape.sym_ce_identity(scaled)
}

/// Fraction of rows whose largest similarity sits on the diagonal.
pub fn diagonal_argmax_accuracy(s: &SimilarityMatrix) -> Result<f64> {
    let m = &s.values;
    if m.rows() != m.cols() || m.rows() == 0 {
        return Err(Error::Argument("diagonal accuracy needs a square, nonempty matrix".into()));
    }
    let n = m.rows();
    let mut hits = 0usize;
    for i in 0..n {
        let row = m.row(i);
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if best == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::{RowKind, RowMeta};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn normalization_basics() {
        let x = Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(normalize_rows(&x).unwrap().data(), &[0.6, 0.8]);

        let unit = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(normalize_rows(&unit).unwrap(), unit);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_matrix(&mut rng, 3, 5);
        let scaled = x.scale(17.0);
        let (nx, ns) = (normalize_rows(&x).unwrap(), normalize_rows(&scaled).unwrap());
        for (a, b) in nx.data().iter().zip(ns.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }

        let zero = Matrix::from_vec(2, 3, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(normalize_rows(&zero), Err(Error::DegenerateFeature { row: 1, .. })));
    }

    #[test]
    fn similarity_of_orthonormal_rows_is_identity() {
        let scale = LogitScale::from_alpha(1.0).unwrap();
        let x = Matrix::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let s = similarity(&x, &x, &scale).unwrap();
        assert_eq!(s.values.data(), &[1.0, 0.0, 0.0, 1.0]);
        s.validate().unwrap();

        // Rescaling input rows changes nothing.
        let s2 = similarity(&x.scale(5.0), &x, &scale).unwrap();
        for (a, b) in s.values.data().iter().zip(s2.values.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }

        let bad = Matrix::zeros(3, 3);
        assert!(similarity(&x, &bad, &scale).is_err());
    }

    #[test]
    fn closed_form_loss_values() {
        // N = 1: single-class softmax is exactly zero.
        let one = SimilarityMatrix { values: Matrix::from_vec(1, 1, vec![2.3]).unwrap(), alpha: 5.0 };
        assert_eq!(symmetric_ce_loss(&one).unwrap(), 0.0);

        // N = 2 identity at alpha = 1: ln(1 + e^-1).
        let eye = SimilarityMatrix {
            values: Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            alpha: 1.0,
        };
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert_relative_eq!(symmetric_ce_loss(&eye).unwrap(), want, epsilon = 1e-9);
        assert_relative_eq!(symmetric_ce_loss(&eye).unwrap(), 0.313261687518, epsilon = 1e-9);

        // Constant matrix: uniform softmax, ln 2.
        let flat = SimilarityMatrix {
            values: Matrix::from_vec(2, 2, vec![0.7, 0.7, 0.7, 0.7]).unwrap(),
            alpha: 1.0,
        };
        assert_relative_eq!(
            symmetric_ce_loss(&flat).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-9
        );

        let rect = SimilarityMatrix { values: Matrix::zeros(2, 3), alpha: 1.0 };
        assert!(symmetric_ce_loss(&rect).is_err());
    }

    #[test]
    fn loss_is_symmetric_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xp = rand_matrix(&mut rng, 5, 7);
        let xe = rand_matrix(&mut rng, 5, 7);
        let scale = LogitScale::new();
        let s = similarity(&xp, &xe, &scale).unwrap();
        let loss = symmetric_ce_loss(&s).unwrap();

        // Transpose.
        let mut tdata = vec![0.0; 25];
        for i in 0..5 {
            for j in 0..5 {
                tdata[j * 5 + i] = s.values.get(i, j);
            }
        }
        let st = SimilarityMatrix { values: Matrix::from_vec(5, 5, tdata).unwrap(), alpha: s.alpha };
        assert_relative_eq!(symmetric_ce_loss(&st).unwrap(), loss, epsilon = 1e-12);

        // Permute both inputs by one permutation.
        let perm = [3usize, 0, 4, 1, 2];
        let prow = |m: &Matrix| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| m.row(i).to_vec()).collect();
            Matrix::from_rows(&rows).unwrap()
        };
        let sp = similarity(&prow(&xp), &prow(&xe), &scale).unwrap();
        assert_relative_eq!(symmetric_ce_loss(&sp).unwrap(), loss, epsilon = 1e-12);
    }

    #[test]
    fn perfectly_aligned_features_saturate_to_near_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_matrix(&mut rng, 4, 8);
        let scale = LogitScale::from_alpha(50.0).unwrap();
        let s = similarity(&x, &x, &scale).unwrap();
        let loss = symmetric_ce_loss(&s).unwrap();
        assert!(loss < 0.01, "saturated loss {loss}");
        assert_eq!(diagonal_argmax_accuracy(&s).unwrap(), 1.0);
    }

    #[test]
    fn alp_loss_requires_matching_row_metadata() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let meta: Vec<RowMeta> = (0..3)
            .map(|i| RowMeta { scene_index: 0, kind: RowKind::Fg, id: i as u64 })
            .collect();
        let batch = AgentFeatureBatch { features: rand_matrix(&mut rng, 3, 6), meta: meta.clone() };
        let good = ExpectationBatch { features: rand_matrix(&mut rng, 3, 6), meta: meta.clone() };
        let scale = LogitScale::new();
        assert!(alp_loss(&batch, &good, &scale).is_ok());

        let mut wrong_meta = meta;
        wrong_meta[2] = RowMeta { scene_index: 1, kind: RowKind::Lane, id: 0 };
        let bad = ExpectationBatch { features: good.features.clone(), meta: wrong_meta };
        assert!(matches!(alp_loss(&batch, &bad, &scale), Err(Error::Pairing(_))));
    }

    #[test]
    fn tape_route_matches_pure_route_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xp = rand_matrix(&mut rng, 6, 9);
        let xe = rand_matrix(&mut rng, 6, 9);
        let scale = LogitScale::new();
        let pure = symmetric_ce_loss(&similarity(&xp, &xe, &scale).unwrap()).unwrap();

        let mut t = Tape::new();
        let vp = t.leaf(xp.data().to_vec(), &[6, 9]);
        let ve = t.leaf(xe.data().to_vec(), &[6, 9]);
        let vs = t.leaf(vec![scale.raw()], &[1]);
        let loss = contrastive_loss_on_tape(&mut t, vp, ve, vs).unwrap();
        assert_eq!(t.value(loss)[0], pure);
    }

    #[test]
    fn gradient_descent_aligns_features_to_expectations() {
        // Fixed random expectations with distinct directions; descend on the
        // produced features until every row argmaxes on the diagonal.
        let n = 12;
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let exps: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut feats: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let raw = LogitScale::new().raw();
        let lr = 0.5;
        for _ in 0..300 {
            let mut t = Tape::new();
            let vf = t.leaf(feats.clone(), &[n, d]);
            let ve = t.leaf(exps.clone(), &[n, d]);
            let vs = t.leaf(vec![raw], &[1]);
            let loss = contrastive_loss_on_tape(&mut t, vf, ve, vs).unwrap();
            let grads = t.backward(loss).unwrap();
            let g = grads.get(vf).unwrap();
            for (p, gv) in feats.iter_mut().zip(g) {
                *p -= lr * gv;
            }
        }
        let fm = Matrix::from_vec(n, d, feats).unwrap();
        let em = Matrix::from_vec(n, d, exps).unwrap();
        let s = similarity(&fm, &em, &LogitScale::new()).unwrap();
        assert_eq!(diagonal_argmax_accuracy(&s).unwrap(), 1.0);
    }

    #[test]
    fn logit_scale_clamp_and_bounds() {
        let mut s = LogitScale::new();
        assert_relative_eq!(s.alpha(), 1.0 / 0.07, epsilon = 1e-12);
        s.set_raw_clamped(10.0); // exp(10) >> 100
        assert_relative_eq!(s.alpha(), 100.0, epsilon = 1e-9);
        s.set_raw_clamped(0.0);
        assert_relative_eq!(s.alpha(), 1.0, epsilon = 1e-12);
        assert!(LogitScale::from_alpha(0.0).is_err());
        assert!(LogitScale::from_alpha(-3.0).is_err());
    }
}
