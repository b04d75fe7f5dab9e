//! Tape-based reverse-mode autodiff over flat `f64` buffers.
//!
//! Every forward builder computes its output eagerly and records an op; calling
//! [`Tape::backward`] replays the ops in reverse, accumulating vector-Jacobian
//! products into per-buffer gradient slots. The op set is exactly what the toy
//! planner and the alignment losses need (matmuls, 3x3 conv, pooling, softmax,
//! the fused contrastive loss, ...), all in `f64` so finite-difference checks
//! can be held to tight tolerances.

use crate::{Error, Result};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Buf {
    data: Vec<f64>,
    shape: Vec<usize>,
}

enum Op {
    /// out = a (m x k) @ b (k x n)
    Matmul { a: Var, b: Var, out: Var, m: usize, k: usize, n: usize },
    /// out = a (m x k) @ b^T (n x k)
    MatmulTB { a: Var, b: Var, out: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    /// out[i, :] = a[i, :] + bias
    AddRowBroadcast { a: Var, bias: Var, out: Var, m: usize, n: usize },
    Scale { a: Var, c: f64, out: Var },
    Relu { a: Var, out: Var },
    /// 3x3 convolution, zero padding 1, stride 1 or 2.
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        out: Var,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
        stride: usize,
    },
    /// Nearest-neighbor 2x upsampling of a (c, h, w) tensor.
    Upsample2 { a: Var, out: Var, c: usize, h: usize, w: usize },
    /// Average pooling with a square factor over a (c, h, w) tensor.
    AvgPool { a: Var, out: Var, c: usize, h: usize, w: usize, f: usize },
    /// Row-wise L2 normalization of an (m x n) matrix.
    L2NormRows { a: Var, out: Var, m: usize, n: usize },
    SoftmaxRows { a: Var, out: Var, m: usize, n: usize },
    /// out = exp(s) * a for a scalar s (the learnable logit scale).
    ScaleByExp { a: Var, s: Var, out: Var },
    /// Symmetric cross-entropy of a square similarity matrix against the
    /// identity pairing, averaged over rows and columns.
    SymCeIdentity { s: Var, out: Var, n: usize },
    /// Mean cross-entropy of (m x n) logits against integer targets.
    CeRows { logits: Var, targets: Vec<usize>, out: Var, m: usize, n: usize },
    /// Mean absolute error against a constant target.
    L1Mean { a: Var, target: Vec<f64>, out: Var },
    /// Per-channel mean of a (c, h, w) tensor over a fixed set of flat cells.
    MeanCells { grid: Var, cells: Vec<usize>, out: Var, c: usize, hw: usize },
    ConcatRows { inputs: Vec<(Var, usize)>, out: Var, n: usize },
    SliceRows { a: Var, r0: usize, r1: usize, out: Var, n: usize },
    /// Per-column cumulative sum down the rows of an (m x n) matrix.
    CumsumRows { a: Var, out: Var, m: usize, n: usize },
    /// (c, h, w) -> (h*w x c) layout change so grid cells become rows.
    ChwToRows { a: Var, out: Var, c: usize, hw: usize },
    Reshape { a: Var, out: Var },
}

#[derive(Default)]
pub struct Tape {
    bufs: Vec<Buf>,
    ops: Vec<Op>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient buffer for `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.g[v.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.bufs.push(Buf { data, shape });
        Var(self.bufs.len() - 1)
    }

    /// Introduces a leaf value (parameter or input).
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize]) -> Var {
        self.push(data, shape.to_vec())
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![v], vec![1])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.bufs[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.bufs[v.0].shape
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.bufs[v.0].shape[..] {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::Argument(format!("{what}: expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Argument(format!("matmul shape mismatch: {m}x{k} @ {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        let (da, db) = (&self.bufs[a.0].data, &self.bufs[b.0].data);
        for i in 0..m {
            for kk in 0..k {
                let av = da[i * k + kk];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let out = self.push(out, vec![m, n]);
        self.ops.push(Op::Matmul { a, b, out, m, k, n });
        Ok(out)
    }

    /// `a (m x k) @ b^T` where `b` is stored as `(n x k)`.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_tb lhs")?;
        let (n, k2) = self.dims2(b, "matmul_tb rhs")?;
        if k != k2 {
            return Err(Error::Argument(format!(
                "matmul_tb shape mismatch: {m}x{k} @ ({n}x{k2})^T"
            )));
        }
        let mut out = vec![0.0; m * n];
        let (da, db) = (&self.bufs[a.0].data, &self.bufs[b.0].data);
        for i in 0..m {
            let arow = &da[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &db[j * k..(j + 1) * k];
                let mut s = 0.0;
                for (av, bv) in arow.iter().zip(brow) {
                    s += av * bv;
                }
                out[i * n + j] = s;
            }
        }
        let out = self.push(out, vec![m, n]);
        self.ops.push(Op::MatmulTB { a, b, out, m, k, n });
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.bufs[a.0].shape != self.bufs[b.0].shape {
            return Err(Error::Argument("add: shape mismatch".into()));
        }
        let data: Vec<f64> = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.bufs[a.0].shape.clone();
        let out = self.push(data, shape);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.bufs[a.0].shape != self.bufs[b.0].shape {
            return Err(Error::Argument("sub: shape mismatch".into()));
        }
        let data: Vec<f64> = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.bufs[a.0].shape.clone();
        let out = self.push(data, shape);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row_broadcast lhs")?;
        if self.bufs[bias.0].data.len() != n {
            return Err(Error::Argument(format!(
                "add_row_broadcast: bias length {} != row width {n}",
                self.bufs[bias.0].data.len()
            )));
        }
        let mut data = self.bufs[a.0].data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += self.bufs[bias.0].data[j];
            }
        }
        let out = self.push(data, vec![m, n]);
        self.ops.push(Op::AddRowBroadcast { a, bias, out, m, n });
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.bufs[a.0].data.iter().map(|x| c * x).collect();
        let shape = self.bufs[a.0].shape.clone();
        let out = self.push(data, shape);
        self.ops.push(Op::Scale { a, c, out });
        out
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.bufs[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.bufs[a.0].shape.clone();
        let out = self.push(data, shape);
        self.ops.push(Op::Relu { a, out });
        out
    }

    /// 3x3 "same" convolution (zero pad 1) over a (cin, h, w) tensor.
    /// `weight` is (cout, cin, 3, 3) flat, `bias` is (cout).
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (cin, h, w) = match self.bufs[input.0].shape[..] {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::Argument(format!("conv2d: expected (c,h,w) input, got {s:?}"))),
        };
        if stride != 1 && stride != 2 {
            return Err(Error::Argument(format!("conv2d: stride {stride} unsupported")));
        }
        let wlen = self.bufs[weight.0].data.len();
        if wlen % (cin * 9) != 0 {
            return Err(Error::Argument(format!(
                "conv2d: weight length {wlen} not a multiple of cin*9 = {}",
                cin * 9
            )));
        }
        let cout = wlen / (cin * 9);
        if self.bufs[bias.0].data.len() != cout {
            return Err(Error::Argument("conv2d: bias length != cout".into()));
        }
        let ho = (h + 2 - 3) / stride + 1;
        let wo = (w + 2 - 3) / stride + 1;
        let mut out = vec![0.0; cout * ho * wo];
        {
            let din = &self.bufs[input.0].data;
            let dw = &self.bufs[weight.0].data;
            let dbias = &self.bufs[bias.0].data;
            for co in 0..cout {
                let oc = &mut out[co * ho * wo..(co + 1) * ho * wo];
                for v in oc.iter_mut() {
                    *v = dbias[co];
                }
                for ci in 0..cin {
                    let ic = &din[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wv = dw[((co * cin + ci) * 3 + ky) * 3 + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in 0..ho {
                                let iy = (oy * stride + ky) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let irow = &ic[iy as usize * w..(iy as usize + 1) * w];
                                let orow = &mut oc[oy * wo..(oy + 1) * wo];
                                for ox in 0..wo {
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    orow[ox] += wv * irow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = self.push(out, vec![cout, ho, wo]);
        self.ops.push(Op::Conv2d { input, weight, bias, out, cin, cout, h, w, stride });
        Ok(out)
    }

    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = match self.bufs[a.0].shape[..] {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::Argument(format!("upsample2: expected (c,h,w), got {s:?}"))),
        };
        let mut out = vec![0.0; c * 4 * h * w];
        let din = &self.bufs[a.0].data;
        let (h2, w2) = (2 * h, 2 * w);
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out[(ch * h2 + y) * w2 + x] = din[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let out = self.push(out, vec![c, h2, w2]);
        self.ops.push(Op::Upsample2 { a, out, c, h, w });
        Ok(out)
    }

    pub fn avgpool(&mut self, a: Var, f: usize) -> Result<Var> {
        let (c, h, w) = match self.bufs[a.0].shape[..] {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::Argument(format!("avgpool: expected (c,h,w), got {s:?}"))),
        };
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Argument(format!("avgpool: factor {f} does not divide {h}x{w}")));
        }
        let (ho, wo) = (h / f, w / f);
        let inv = 1.0 / (f * f) as f64;
        let mut out = vec![0.0; c * ho * wo];
        let din = &self.bufs[a.0].data;
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            s += din[(ch * h + oy * f + dy) * w + ox * f + dx];
                        }
                    }
                    out[(ch * ho + oy) * wo + ox] = s * inv;
                }
            }
        }
        let out = self.push(out, vec![c, ho, wo]);
        self.ops.push(Op::AvgPool { a, out, c, h, w, f });
        Ok(out)
    }

    /// Row-wise L2 normalization; errors if any row norm falls below `1e-12`.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "l2_normalize_rows")?;
        let mut data = self.bufs[a.0].data.clone();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateFeature { row: i, norm });
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let out = self.push(data, vec![m, n]);
        self.ops.push(Op::L2NormRows { a, out, m, n });
        Ok(out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "softmax_rows")?;
        let mut data = self.bufs[a.0].data.clone();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = self.push(data, vec![m, n]);
        self.ops.push(Op::SoftmaxRows { a, out, m, n });
        Ok(out)
    }

    /// `exp(s) * a` where `s` is a scalar variable (log-space logit scale).
    pub fn scale_by_exp(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.bufs[s.0].data.len() != 1 {
            return Err(Error::Argument("scale_by_exp: s must be a scalar".into()));
        }
        let alpha = self.bufs[s.0].data[0].exp();
        let data: Vec<f64> = self.bufs[a.0].data.iter().map(|x| alpha * x).collect();
        let shape = self.bufs[a.0].shape.clone();
        let out = self.push(data, shape);
        self.ops.push(Op::ScaleByExp { a, s, out });
        Ok(out)
    }

    /// Symmetric cross-entropy of a square similarity matrix against the
    /// identity pairing: the mean of row-wise and column-wise InfoNCE terms.
    pub fn sym_ce_identity(&mut self, s: Var) -> Result<Var> {
        let (m, n) = self.dims2(s, "sym_ce_identity")?;
        if m != n {
            return Err(Error::Argument(format!("sym_ce_identity: matrix must be square, got {m}x{n}")));
        }
        let d = &self.bufs[s.0].data;
        let mut row_term = 0.0;
        let mut col_term = 0.0;
        for i in 0..n {
            let row = &d[i * n..(i + 1) * n];
            row_term += crate::linalg::logsumexp(row) - row[i];
            let col: Vec<f64> = (0..n).map(|r| d[r * n + i]).collect();
            col_term += crate::linalg::logsumexp(&col) - col[i];
        }
        let loss = 0.5 * (row_term / n as f64) + 0.5 * (col_term / n as f64);
        let out = self.push(vec![loss], vec![1]);
        self.ops.push(Op::SymCeIdentity { s, out, n });
        Ok(out)
    }

    /// Mean cross-entropy over rows of logits against integer class targets.
    pub fn ce_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(logits, "ce_rows")?;
        if targets.len() != m || m == 0 {
            return Err(Error::Argument(format!(
                "ce_rows: got {} targets for {m} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Argument(format!("ce_rows: target {bad} out of range 0..{n}")));
        }
        let d = &self.bufs[logits.0].data;
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &d[i * n..(i + 1) * n];
            loss += crate::linalg::logsumexp(row) - row[t];
        }
        loss /= m as f64;
        let out = self.push(vec![loss], vec![1]);
        self.ops.push(Op::CeRows { logits, targets: targets.to_vec(), out, m, n });
        Ok(out)
    }

    /// Mean absolute error of `a` against a constant target of equal length.
    pub fn l1_mean(&mut self, a: Var, target: &[f64]) -> Result<Var> {
        let d = &self.bufs[a.0].data;
        if d.len() != target.len() || d.is_empty() {
            return Err(Error::Argument(format!(
                "l1_mean: value length {} vs target length {}",
                d.len(),
                target.len()
            )));
        }
        let loss = d.iter().zip(target).map(|(x, t)| (x - t).abs()).sum::<f64>() / d.len() as f64;
        let out = self.push(vec![loss], vec![1]);
        self.ops.push(Op::L1Mean { a, target: target.to_vec(), out });
        Ok(out)
    }

    /// Per-channel mean over a fixed cell set of a (c, h, w) grid; the result is
    /// a `1 x c` feature row. Cells are flat `row * w + col` indices.
    pub fn mean_cells(&mut self, grid: Var, cells: &[usize]) -> Result<Var> {
        let (c, h, w) = match self.bufs[grid.0].shape[..] {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::Argument(format!("mean_cells: expected (c,h,w), got {s:?}"))),
        };
        if cells.is_empty() {
            return Err(Error::EmptyRegion);
        }
        let hw = h * w;
        if let Some(&bad) = cells.iter().find(|&&i| i >= hw) {
            return Err(Error::Argument(format!("mean_cells: cell {bad} out of range 0..{hw}")));
        }
        let d = &self.bufs[grid.0].data;
        let inv = 1.0 / cells.len() as f64;
        let mut out = vec![0.0; c];
        for (ch, o) in out.iter_mut().enumerate() {
            let plane = &d[ch * hw..(ch + 1) * hw];
            let mut s = 0.0;
            for &cell in cells {
                s += plane[cell];
            }
            *o = s * inv;
        }
        let out = self.push(out, vec![1, c]);
        self.ops.push(Op::MeanCells { grid, cells: cells.to_vec(), out, c, hw });
        Ok(out)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::Argument("concat_rows: empty input list".into()));
        }
        let (_, n) = self.dims2(vars[0], "concat_rows")?;
        let mut inputs = Vec::with_capacity(vars.len());
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in vars {
            let (mi, ni) = self.dims2(v, "concat_rows")?;
            if ni != n {
                return Err(Error::Argument(format!("concat_rows: column mismatch {ni} != {n}")));
            }
            data.extend_from_slice(&self.bufs[v.0].data);
            inputs.push((v, mi));
            rows += mi;
        }
        let out = self.push(data, vec![rows, n]);
        self.ops.push(Op::ConcatRows { inputs, out, n });
        Ok(out)
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if r0 >= r1 || r1 > m {
            return Err(Error::Argument(format!("slice_rows: bad range {r0}..{r1} of {m}")));
        }
        let data = self.bufs[a.0].data[r0 * n..r1 * n].to_vec();
        let out = self.push(data, vec![r1 - r0, n]);
        self.ops.push(Op::SliceRows { a, r0, r1, out, n });
        Ok(out)
    }

    pub fn cumsum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "cumsum_rows")?;
        let mut data = self.bufs[a.0].data.clone();
        for i in 1..m {
            let (prev, cur) = data.split_at_mut(i * n);
            for j in 0..n {
                cur[j] += prev[(i - 1) * n + j];
            }
        }
        let out = self.push(data, vec![m, n]);
        self.ops.push(Op::CumsumRows { a, out, m, n });
        Ok(out)
    }

    /// Reinterprets a (c, h, w) tensor as an (h*w x c) matrix of cell features.
    pub fn chw_to_rows(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = match self.bufs[a.0].shape[..] {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::Argument(format!("chw_to_rows: expected (c,h,w), got {s:?}"))),
        };
        let hw = h * w;
        let d = &self.bufs[a.0].data;
        let mut data = vec![0.0; hw * c];
        for ch in 0..c {
            for cell in 0..hw {
                data[cell * c + ch] = d[ch * hw + cell];
            }
        }
        let out = self.push(data, vec![hw, c]);
        self.ops.push(Op::ChwToRows { a, out, c, hw });
        Ok(out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        if len != self.bufs[a.0].data.len() {
            return Err(Error::Argument(format!(
                "reshape: cannot view {} elements as {shape:?}",
                self.bufs[a.0].data.len()
            )));
        }
        let data = self.bufs[a.0].data.clone();
        let out = self.push(data, shape.to_vec());
        self.ops.push(Op::Reshape { a, out });
        Ok(out)
    }

    /// Reverse pass from a scalar loss. Returns gradients for every reachable buffer.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.bufs[loss.0].data.len() != 1 {
            return Err(Error::Argument("backward: loss must be a scalar".into()));
        }
        let mut g: Vec<Option<Vec<f64>>> = (0..self.bufs.len()).map(|_| None).collect();
        g[loss.0] = Some(vec![1.0]);

        macro_rules! grad_out {
            ($g:expr, $v:expr) => {
                match &$g[$v.0] {
                    Some(gv) => gv.clone(),
                    None => continue,
                }
            };
        }
        macro_rules! acc {
            ($g:expr, $self:expr, $v:expr) => {
                $g[$v.0].get_or_insert_with(|| vec![0.0; $self.bufs[$v.0].data.len()])
            };
        }

        for op in self.ops.iter().rev() {
            match op {
                Op::Matmul { a, b, out, m, k, n } => {
                    let go = grad_out!(g, out);
                    {
                        let bdat = &self.bufs[b.0].data;
                        let ga = acc!(g, self, a);
                        for i in 0..*m {
                            for kk in 0..*k {
                                let brow = &bdat[kk * n..(kk + 1) * n];
                                let grow = &go[i * n..(i + 1) * n];
                                let mut s = 0.0;
                                for (gv, bv) in grow.iter().zip(brow) {
                                    s += gv * bv;
                                }
                                ga[i * k + kk] += s;
                            }
                        }
                    }
                    {
                        let adat = &self.bufs[a.0].data;
                        let gb = acc!(g, self, b);
                        for i in 0..*m {
                            for kk in 0..*k {
                                let av = adat[i * k + kk];
                                if av == 0.0 {
                                    continue;
                                }
                                let grow = &go[i * n..(i + 1) * n];
                                let brow = &mut gb[kk * n..(kk + 1) * n];
                                for (bv, gv) in brow.iter_mut().zip(grow) {
                                    *bv += av * gv;
                                }
                            }
                        }
                    }
                }
                Op::MatmulTB { a, b, out: o, m, k, n } => {
                    let go = grad_out!(g, o);
                    {
                        let bdat = &self.bufs[b.0].data;
                        let ga = acc!(g, self, a);
                        for i in 0..*m {
                            for j in 0..*n {
                                let gv = go[i * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                let brow = &bdat[j * k..(j + 1) * k];
                                let garow = &mut ga[i * k..(i + 1) * k];
                                for (gae, bv) in garow.iter_mut().zip(brow) {
                                    *gae += gv * bv;
                                }
                            }
                        }
                    }
                    {
                        let adat = &self.bufs[a.0].data;
                        let gb = acc!(g, self, b);
                        for i in 0..*m {
                            let arow = &adat[i * k..(i + 1) * k];
                            for j in 0..*n {
                                let gv = go[i * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                let gbrow = &mut gb[j * k..(j + 1) * k];
                                for (gbe, av) in gbrow.iter_mut().zip(arow) {
                                    *gbe += gv * av;
                                }
                            }
                        }
                    }
                }
                Op::Add { a, b, out } => {
                    let go = grad_out!(g, out);
                    for (ge, gv) in acc!(g, self, a).iter_mut().zip(&go) {
                        *ge += gv;
                    }
                    for (ge, gv) in acc!(g, self, b).iter_mut().zip(&go) {
                        *ge += gv;
                    }
                }
                Op::Sub { a, b, out } => {
                    let go = grad_out!(g, out);
                    for (ge, gv) in acc!(g, self, a).iter_mut().zip(&go) {
                        *ge += gv;
                    }
                    for (ge, gv) in acc!(g, self, b).iter_mut().zip(&go) {
                        *ge -= gv;
                    }
                }
                Op::AddRowBroadcast { a, bias, out, m, n } => {
                    let go = grad_out!(g, out);
                    for (ge, gv) in acc!(g, self, a).iter_mut().zip(&go) {
                        *ge += gv;
                    }
                    let gb = acc!(g, self, bias);
                    for i in 0..*m {
                        for j in 0..*n {
                            gb[j] += go[i * n + j];
                        }
                    }
                }
                Op::Scale { a, c, out } => {
                    let go = grad_out!(g, out);
                    for (ge, gv) in acc!(g, self, a).iter_mut().zip(&go) {
                        *ge += c * gv;
                    }
                }
                Op::Relu { a, out } => {
                    let go = grad_out!(g, out);
                    let adat = &self.bufs[a.0].data;
                    let mask: Vec<f64> = adat.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
                    let ga = acc!(g, self, a);
                    for ((ge, gv), m) in ga.iter_mut().zip(&go).zip(&mask) {
                        *ge += gv * m;
                    }
                }
                Op::Conv2d { input, weight, bias, out, cin, cout, h, w, stride } => {
                    let go = grad_out!(g, out);
                    let ho = (h + 2 - 3) / stride + 1;
                    let wo = (w + 2 - 3) / stride + 1;
                    {
                        let gb = acc!(g, self, bias);
                        for co in 0..*cout {
                            gb[co] += go[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
                        }
                    }
                    {
                        let din = &self.bufs[input.0].data;
                        let gw = acc!(g, self, weight);
                        for co in 0..*cout {
                            let goc = &go[co * ho * wo..(co + 1) * ho * wo];
                            for ci in 0..*cin {
                                let ic = &din[ci * h * w..(ci + 1) * h * w];
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let mut s = 0.0;
                                        for oy in 0..ho {
                                            let iy = (oy * stride + ky) as isize - 1;
                                            if iy < 0 || iy >= *h as isize {
                                                continue;
                                            }
                                            let irow = &ic[iy as usize * w..(iy as usize + 1) * w];
                                            let grow = &goc[oy * wo..(oy + 1) * wo];
                                            for ox in 0..wo {
                                                let ix = (ox * stride + kx) as isize - 1;
                                                if ix < 0 || ix >= *w as isize {
                                                    continue;
                                                }
                                                s += grow[ox] * irow[ix as usize];
                                            }
                                        }
                                        gw[((co * cin + ci) * 3 + ky) * 3 + kx] += s;
                                    }
                                }
                            }
                        }
                    }
                    {
                        let dw = &self.bufs[weight.0].data;
                        let gi = acc!(g, self, input);
                        for co in 0..*cout {
                            let goc = &go[co * ho * wo..(co + 1) * ho * wo];
                            for ci in 0..*cin {
                                let gic = &mut gi[ci * h * w..(ci + 1) * h * w];
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let wv = dw[((co * cin + ci) * 3 + ky) * 3 + kx];
                                        if wv == 0.0 {
                                            continue;
                                        }
                                        for oy in 0..ho {
                                            let iy = (oy * stride + ky) as isize - 1;
                                            if iy < 0 || iy >= *h as isize {
                                                continue;
                                            }
                                            let grow = &goc[oy * wo..(oy + 1) * wo];
                                            let girow =
                                                &mut gic[iy as usize * w..(iy as usize + 1) * w];
                                            for ox in 0..wo {
                                                let ix = (ox * stride + kx) as isize - 1;
                                                if ix < 0 || ix >= *w as isize {
                                                    continue;
                                                }
                                                girow[ix as usize] += wv * grow[ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Upsample2 { a, out, c, h, w } => {
                    let go = grad_out!(g, out);
                    let (h2, w2) = (2 * h, 2 * w);
                    let ga = acc!(g, self, a);
                    for ch in 0..*c {
                        for y in 0..h2 {
                            for x in 0..w2 {
                                ga[(ch * h + y / 2) * w + x / 2] += go[(ch * h2 + y) * w2 + x];
                            }
                        }
                    }
                }
                Op::AvgPool { a, out, c, h, w, f } => {
                    let go = grad_out!(g, out);
                    let (ho, wo) = (h / f, w / f);
                    let inv = 1.0 / (f * f) as f64;
                    let ga = acc!(g, self, a);
                    for ch in 0..*c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = go[(ch * ho + oy) * wo + ox] * inv;
                                for dy in 0..*f {
                                    for dx in 0..*f {
                                        ga[(ch * h + oy * f + dy) * w + ox * f + dx] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::L2NormRows { a, out, m, n } => {
                    let go = grad_out!(g, out);
                    let adat = &self.bufs[a.0].data;
                    let odat = &self.bufs[out.0].data;
                    let ga = acc!(g, self, a);
                    for i in 0..*m {
                        let xrow = &adat[i * n..(i + 1) * n];
                        let yrow = &odat[i * n..(i + 1) * n];
                        let grow = &go[i * n..(i + 1) * n];
                        let norm = xrow.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum();
                        let garow = &mut ga[i * n..(i + 1) * n];
                        for j in 0..*n {
                            garow[j] += (grow[j] - dot * yrow[j]) / norm;
                        }
                    }
                }
                Op::SoftmaxRows { a, out, m, n } => {
                    let go = grad_out!(g, out);
                    let odat = &self.bufs[out.0].data;
                    let ga = acc!(g, self, a);
                    for i in 0..*m {
                        let yrow = &odat[i * n..(i + 1) * n];
                        let grow = &go[i * n..(i + 1) * n];
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum();
                        let garow = &mut ga[i * n..(i + 1) * n];
                        for j in 0..*n {
                            garow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
                Op::ScaleByExp { a, s, out } => {
                    let go = grad_out!(g, out);
                    let alpha = self.bufs[s.0].data[0].exp();
                    {
                        let ga = acc!(g, self, a);
                        for (ge, gv) in ga.iter_mut().zip(&go) {
                            *ge += alpha * gv;
                        }
                    }
                    {
                        let odat = &self.bufs[out.0].data;
                        let gs = acc!(g, self, s);
                        // d/ds [e^s a] = e^s a = out
                        gs[0] += odat.iter().zip(&go).map(|(o, gv)| o * gv).sum::<f64>();
                    }
                }
                Op::SymCeIdentity { s, out, n } => {
                    let go = grad_out!(g, out);
                    let gl = go[0];
                    let d = &self.bufs[s.0].data;
                    let nn = *n;
                    let scale = 0.5 * gl / nn as f64;
                    let gs = acc!(g, self, s);
                    for i in 0..nn {
                        let row = &d[i * nn..(i + 1) * nn];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        for j in 0..nn {
                            let p = (row[j] - mx).exp() / z;
                            gs[i * nn + j] += scale * (p - if i == j { 1.0 } else { 0.0 });
                        }
                    }
                    for j in 0..nn {
                        let col: Vec<f64> = (0..nn).map(|r| d[r * nn + j]).collect();
                        let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = col.iter().map(|v| (v - mx).exp()).sum();
                        for i in 0..nn {
                            let p = (col[i] - mx).exp() / z;
                            gs[i * nn + j] += scale * (p - if i == j { 1.0 } else { 0.0 });
                        }
                    }
                }
                Op::CeRows { logits, targets, out, m, n } => {
                    let go = grad_out!(g, out);
                    let gl = go[0] / *m as f64;
                    let d = &self.bufs[logits.0].data;
                    let gg = acc!(g, self, logits);
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &d[i * n..(i + 1) * n];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        for j in 0..*n {
                            let p = (row[j] - mx).exp() / z;
                            gg[i * n + j] += gl * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                }
                Op::L1Mean { a, target, out } => {
                    let go = grad_out!(g, out);
                    let gl = go[0] / target.len() as f64;
                    let adat = &self.bufs[a.0].data;
                    let signs: Vec<f64> = adat
                        .iter()
                        .zip(target)
                        .map(|(x, t)| {
                            let d = x - t;
                            if d > 0.0 {
                                1.0
                            } else if d < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let ga = acc!(g, self, a);
                    for (ge, sgn) in ga.iter_mut().zip(&signs) {
                        *ge += gl * sgn;
                    }
                }
                Op::MeanCells { grid, cells, out, c, hw } => {
                    let go = grad_out!(g, out);
                    let inv = 1.0 / cells.len() as f64;
                    let gg = acc!(g, self, grid);
                    for ch in 0..*c {
                        let gv = go[ch] * inv;
                        for &cell in cells {
                            gg[ch * hw + cell] += gv;
                        }
                    }
                }
                Op::ConcatRows { inputs, out, n } => {
                    let go = grad_out!(g, out);
                    let mut r = 0;
                    for (v, mi) in inputs {
                        let slice = &go[r * n..(r + mi) * n];
                        let gv = acc!(g, self, v);
                        for (ge, s) in gv.iter_mut().zip(slice) {
                            *ge += s;
                        }
                        r += mi;
                    }
                }
                Op::SliceRows { a, r0, r1, out, n } => {
                    let go = grad_out!(g, out);
                    let ga = acc!(g, self, a);
                    let dst = &mut ga[r0 * n..r1 * n];
                    for (ge, gv) in dst.iter_mut().zip(&go) {
                        *ge += gv;
                    }
                }
                Op::CumsumRows { a, out, m, n } => {
                    let go = grad_out!(g, out);
                    // d a[i] = sum_{i' >= i} d out[i'] (per column): reverse cumsum.
                    let mut acc_row = vec![0.0; *n];
                    let ga = acc!(g, self, a);
                    for i in (0..*m).rev() {
                        for j in 0..*n {
                            acc_row[j] += go[i * n + j];
                            ga[i * n + j] += acc_row[j];
                        }
                    }
                }
                Op::ChwToRows { a, out, c, hw } => {
                    let go = grad_out!(g, out);
                    let ga = acc!(g, self, a);
                    for ch in 0..*c {
                        for cell in 0..*hw {
                            ga[ch * hw + cell] += go[cell * c + ch];
                        }
                    }
                }
                Op::Reshape { a, out } => {
                    let go = grad_out!(g, out);
                    for (ge, gv) in acc!(g, self, a).iter_mut().zip(&go) {
                        *ge += gv;
                    }
                }
            }
        }
        Ok(Grads { g })
    }
}

/// Decoupled-weight-decay Adam over a list of parameter buffers.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, param_sizes: &[usize]) -> Self {
        AdamW {
            cfg,
            t: 0,
            m: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    /// One update step. `grads[i]` may be `None` when no gradient reached
    /// parameter `i` this step (its moments still decay toward zero).
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Option<&[f64]>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Argument(format!(
                "optimizer sees {} params / {} grads, expected {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if p.len() != self.m[i].len() {
                return Err(Error::Argument(format!(
                    "optimizer param {i} has length {}, expected {}",
                    p.len(),
                    self.m[i].len()
                )));
            }
            let gr = grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = gr.map_or(0.0, |gz| gz[j]);
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * gj;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * gj * gj;
                let mhat = m[j] / b1t;
                let vhat = v[j] / b2t;
                p[j] -= self.cfg.lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check: `build` maps flat inputs to a scalar loss;
    /// `analytic` are the tape gradients for each input buffer.
    fn finite_diff_check(
        build: &dyn Fn(&[Vec<f64>]) -> f64,
        inputs: &[Vec<f64>],
        analytic: &[Vec<f64>],
        tol: f64,
    ) {
        let mut inputs = inputs.to_vec();
        for bi in 0..inputs.len() {
            for j in 0..inputs[bi].len() {
                let x = inputs[bi][j];
                let h = 1e-5 * (1.0 + x.abs());
                inputs[bi][j] = x + h;
                let fp = build(&inputs);
                inputs[bi][j] = x - h;
                let fm = build(&inputs);
                inputs[bi][j] = x;
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic[bi][j];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "grad mismatch at input {bi}[{j}]: fd {fd:.6e} vs tape {an:.6e}"
                );
            }
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_forward_matches_linalg() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = tape.leaf(vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0], &[3, 2]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gradients_of_dense_pipeline_match_finite_differences() {
        // x (2x3) @ w (3x4) + bias, relu, l2-normalize rows, @ v^T, softmax, CE.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_vec(&mut rng, 6);
        let w0 = rand_vec(&mut rng, 12);
        let b0 = rand_vec(&mut rng, 4);
        let v0 = rand_vec(&mut rng, 8);
        let build = |ins: &[Vec<f64>]| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(ins[0].clone(), &[2, 3]);
            let w = t.leaf(ins[1].clone(), &[3, 4]);
            let b = t.leaf(ins[2].clone(), &[4]);
            let v = t.leaf(ins[3].clone(), &[2, 4]);
            let h = t.matmul(x, w).unwrap();
            let h = t.add_row_broadcast(h, b).unwrap();
            let h = t.relu(h);
            let h = t.l2_normalize_rows(h).unwrap();
            let s = t.matmul_tb(h, v).unwrap();
            let loss = t.ce_rows(s, &[1, 0]).unwrap();
            t.value(loss)[0]
        };
        let inputs = vec![x0, w0, b0, v0];
        let mut t = Tape::new();
        let x = t.leaf(inputs[0].clone(), &[2, 3]);
        let w = t.leaf(inputs[1].clone(), &[3, 4]);
        let b = t.leaf(inputs[2].clone(), &[4]);
        let v = t.leaf(inputs[3].clone(), &[2, 4]);
        let h = t.matmul(x, w).unwrap();
        let h = t.add_row_broadcast(h, b).unwrap();
        let h = t.relu(h);
        let h = t.l2_normalize_rows(h).unwrap();
        let s = t.matmul_tb(h, v).unwrap();
        let loss = t.ce_rows(s, &[1, 0]).unwrap();
        let grads = t.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> =
            [x, w, b, v].iter().map(|&vr| grads.get(vr).unwrap().to_vec()).collect();
        finite_diff_check(&build, &inputs, &analytic, 1e-4);
    }

    #[test]
    fn conv_upsample_pool_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (cin, cout, h, w) = (2, 3, 6, 6);
        let x0 = rand_vec(&mut rng, cin * h * w);
        let w0 = rand_vec(&mut rng, cout * cin * 9);
        let b0 = rand_vec(&mut rng, cout);
        let tgt = rand_vec(&mut rng, cout * h * w);
        let build = |ins: &[Vec<f64>]| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(ins[0].clone(), &[cin, h, w]);
            let wv = t.leaf(ins[1].clone(), &[cout * cin * 9]);
            let bv = t.leaf(ins[2].clone(), &[cout]);
            let y = t.conv2d(x, wv, bv, 2).unwrap();
            let y = t.relu(y);
            let y = t.upsample2(y).unwrap();
            let p = t.avgpool(y, 2).unwrap();
            let p2 = t.upsample2(p).unwrap();
            let loss = t.l1_mean(p2, &tgt).unwrap();
            t.value(loss)[0]
        };
        let inputs = vec![x0, w0, b0];
        let mut t = Tape::new();
        let x = t.leaf(inputs[0].clone(), &[cin, h, w]);
        let wv = t.leaf(inputs[1].clone(), &[cout * cin * 9]);
        let bv = t.leaf(inputs[2].clone(), &[cout]);
        let y = t.conv2d(x, wv, bv, 2).unwrap();
        let y = t.relu(y);
        let y = t.upsample2(y).unwrap();
        let p = t.avgpool(y, 2).unwrap();
        let p2 = t.upsample2(p).unwrap();
        let loss = t.l1_mean(p2, &tgt).unwrap();
        let grads = t.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> =
            [x, wv, bv].iter().map(|&vr| grads.get(vr).unwrap().to_vec()).collect();
        finite_diff_check(&build, &inputs, &analytic, 1e-4);
    }

    #[test]
    fn stride1_conv_keeps_spatial_size_and_matches_hand_conv() {
        // Single channel, identity-ish kernel: only the center weight set.
        let mut t = Tape::new();
        let x = t.leaf((0..16).map(|v| v as f64).collect(), &[1, 4, 4]);
        let mut w = vec![0.0; 9];
        w[4] = 2.0; // center tap
        let wv = t.leaf(w, &[9]);
        let bv = t.leaf(vec![0.5], &[1]);
        let y = t.conv2d(x, wv, bv, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 4, 4]);
        let want: Vec<f64> = (0..16).map(|v| 2.0 * v as f64 + 0.5).collect();
        assert_eq!(t.value(y), &want[..]);
    }

    #[test]
    fn contrastive_ops_gradcheck_including_logit_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4;
        let d = 5;
        let xp0 = rand_vec(&mut rng, n * d);
        let xe0 = rand_vec(&mut rng, n * d);
        let s0 = vec![0.3];
        let build = |ins: &[Vec<f64>]| -> f64 {
            let mut t = Tape::new();
            let xp = t.leaf(ins[0].clone(), &[n, d]);
            let xe = t.leaf(ins[1].clone(), &[n, d]);
            let s = t.leaf(ins[2].clone(), &[1]);
            let xpn = t.l2_normalize_rows(xp).unwrap();
            let xen = t.l2_normalize_rows(xe).unwrap();
            let sim = t.matmul_tb(xpn, xen).unwrap();
            let sim = t.scale_by_exp(sim, s).unwrap();
            let loss = t.sym_ce_identity(sim).unwrap();
            t.value(loss)[0]
        };
        let inputs = vec![xp0, xe0, s0];
        let mut t = Tape::new();
        let xp = t.leaf(inputs[0].clone(), &[n, d]);
        let xe = t.leaf(inputs[1].clone(), &[n, d]);
        let s = t.leaf(inputs[2].clone(), &[1]);
        let xpn = t.l2_normalize_rows(xp).unwrap();
        let xen = t.l2_normalize_rows(xe).unwrap();
        let sim = t.matmul_tb(xpn, xen).unwrap();
        let sim = t.scale_by_exp(sim, s).unwrap();
        let loss = t.sym_ce_identity(sim).unwrap();
        let grads = t.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> =
            [xp, xe, s].iter().map(|&vr| grads.get(vr).unwrap().to_vec()).collect();
        finite_diff_check(&build, &inputs, &analytic, 1e-4);
    }

    #[test]
    fn structural_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g0 = rand_vec(&mut rng, 3 * 4 * 4);
        let q0 = rand_vec(&mut rng, 2 * 3);
        let tgt = rand_vec(&mut rng, 5 * 3);
        let cells = vec![0usize, 5, 9];
        let build = |ins: &[Vec<f64>]| -> f64 {
            let mut t = Tape::new();
            let grid = t.leaf(ins[0].clone(), &[3, 4, 4]);
            let q = t.leaf(ins[1].clone(), &[2, 3]);
            let pooled = t.mean_cells(grid, &cells).unwrap();
            let rows = t.chw_to_rows(grid).unwrap();
            let top = t.slice_rows(rows, 0, 2).unwrap();
            let cat = t.concat_rows(&[pooled, q, top]).unwrap();
            let cs = t.cumsum_rows(cat).unwrap();
            let sm = t.softmax_rows(cs).unwrap();
            let loss = t.l1_mean(sm, &tgt).unwrap();
            t.value(loss)[0]
        };
        let inputs = vec![g0, q0];
        let mut t = Tape::new();
        let grid = t.leaf(inputs[0].clone(), &[3, 4, 4]);
        let q = t.leaf(inputs[1].clone(), &[2, 3]);
        let pooled = t.mean_cells(grid, &cells).unwrap();
        let rows = t.chw_to_rows(grid).unwrap();
        let top = t.slice_rows(rows, 0, 2).unwrap();
        let cat = t.concat_rows(&[pooled, q, top]).unwrap();
        let cs = t.cumsum_rows(cat).unwrap();
        let sm = t.softmax_rows(cs).unwrap();
        let loss = t.l1_mean(sm, &tgt).unwrap();
        let grads = t.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> =
            [grid, q].iter().map(|&vr| grads.get(vr).unwrap().to_vec()).collect();
        finite_diff_check(&build, &inputs, &analytic, 1e-4);
    }

    #[test]
    fn degenerate_row_normalization_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0, 0.0, 1.0, 2.0], &[2, 2]);
        match t.l2_normalize_rows(x) {
            Err(crate::Error::DegenerateFeature { row: 0, .. }) => {}
            other => panic!("expected DegenerateFeature for row 0, got {other:?}"),
        }
    }

    #[test]
    fn one_by_one_similarity_has_exactly_zero_loss() {
        let mut t = Tape::new();
        let s = t.leaf(vec![3.7], &[1, 1]);
        let loss = t.sym_ce_identity(s).unwrap();
        assert_eq!(t.value(loss)[0], 0.0);
    }

    #[test]
    fn adamw_decays_weights_and_follows_gradient() {
        // One parameter, constant gradient 1: after one step with zero decay the
        // update is exactly -lr (mhat/vhat^0.5 = 1 regardless of betas).
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &[1]);
        let mut p = vec![1.0];
        let grad = vec![1.0];
        opt.step(&mut [&mut p], &[Some(&grad)]).unwrap();
        approx::assert_relative_eq!(p[0], 1.0 - 0.1, epsilon = 1e-7);

        // Pure decay: zero gradient shrinks the weight by lr * wd each step.
        let cfg = AdamWConfig { lr: 0.5, weight_decay: 0.1, ..Default::default() };
        let mut opt = AdamW::new(cfg, &[1]);
        let mut p = vec![2.0];
        let grad = vec![0.0];
        opt.step(&mut [&mut p], &[Some(&grad)]).unwrap();
        approx::assert_relative_eq!(p[0], 2.0 * (1.0 - 0.05), epsilon = 1e-12);
    }
}
