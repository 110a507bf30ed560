//! A minimal reverse-mode autodiff tape over 2D f64 arrays.
//!
//! Every tensor in the model is a matrix ([1,1] for scalars), which keeps
//! the op set small: matmul, broadcast add, (masked) row softmax, GELU,
//! sigmoid, layer norm, embedding gather, row/column slicing and
//! concatenation, patch-grid assembly, and the three fused losses.

use ndarray::{s, Array2, Axis};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("no supervised positions")]
    NoSupervisedPositions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

pub const BCE_CLAMP: f64 = 1e-7;

enum Op {
    Leaf { param: Option<String> },
    MatMul(usize, usize),
    Add(usize, usize),
    /// [m,n] + broadcast [1,n]
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// Row softmax of x + additive mask (0 or a large negative). The mask
    /// is applied at build time; the backward pass only needs the output.
    Softmax { x: usize },
    Gelu(usize),
    Sigmoid(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize },
    Gather { table: usize, ids: Vec<usize> },
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize, len: usize },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatCols(Vec<usize>),
    Transpose(usize),
    /// [grid_h·grid_w, patch²] → [grid_h·patch, grid_w·patch]
    PatchesToImage { x: usize, grid_h: usize, grid_w: usize, patch: usize },
    MeanAll(usize),
    CrossEntropyMean { logits: usize, targets: Vec<usize>, supervised: Vec<bool> },
    BceMean { probs: usize, labels: Array2<u8> },
    DiceLoss { probs: usize, labels: Array2<u8>, eps: f64 },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Constant input; no gradient is reported for it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Named parameter leaf; its gradient lands in the grads map.
    pub fn param(&mut self, name: &str, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf { param: Some(name.to_string()) })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(value, Op::AddRow(a.0, row.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_masked(x, None)
    }

    pub fn softmax_masked(&mut self, x: Var, mask: Option<Array2<f64>>) -> Var {
        let mut z = self.nodes[x.0].value.clone();
        if let Some(m) = &mask {
            z += m;
        }
        for mut row in z.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(z, Op::Softmax { x: x.0 })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(gelu);
        self.push(value, Op::Gelu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(x.0))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let n = xv.ncols() as f64;
        let mut out = xv.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[[0, j]] + b[[0, j]];
            }
        }
        self.push(out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0 })
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = &self.nodes[table.0].value;
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&t.row(id));
        }
        self.push(out, Op::Gather { table: table.0, ids: ids.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.nodes[parts[0].0].value.ncols();
        let rows: usize = parts.iter().map(|p| self.nodes[p.0].value.nrows()).sum();
        let mut out = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            out.slice_mut(s![at..at + v.nrows(), ..]).assign(v);
            at += v.nrows();
        }
        self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[x.0].value.slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows { x: x.0, start, len })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[x.0].value.slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols { x: x.0, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.nodes[parts[0].0].value.nrows();
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut out = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            out.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.t().to_owned();
        self.push(value, Op::Transpose(x.0))
    }

    pub fn patches_to_image(&mut self, x: Var, grid_h: usize, grid_w: usize, patch: usize) -> Var {
        let v = &self.nodes[x.0].value;
        let mut out = Array2::zeros((grid_h * patch, grid_w * patch));
        for gy in 0..grid_h {
            for gx in 0..grid_w {
                let p = gy * grid_w + gx;
                for py in 0..patch {
                    for px in 0..patch {
                        out[[gy * patch + py, gx * patch + px]] = v[[p, py * patch + px]];
                    }
                }
            }
        }
        self.push(out, Op::PatchesToImage { x: x.0, grid_h, grid_w, patch })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let mean = v.sum() / v.len() as f64;
        self.push(Array2::from_elem((1, 1), mean), Op::MeanAll(x.0))
    }

    /// Mean negative log-likelihood over supervised positions.
    pub fn cross_entropy_mean(
        &mut self,
        logits: Var,
        targets: &[usize],
        supervised: &[bool],
    ) -> Result<Var, TensorError> {
        let lv = &self.nodes[logits.0].value;
        if targets.len() != lv.nrows() || supervised.len() != lv.nrows() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_mean",
                lhs: (lv.nrows(), lv.ncols()),
                rhs: (targets.len(), supervised.len()),
            });
        }
        let count = supervised.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::NoSupervisedPositions);
        }
        let mut loss = 0.0;
        for (i, row) in lv.axis_iter(Axis(0)).enumerate() {
            if !supervised[i] {
                continue;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[targets[i]];
        }
        loss /= count as f64;
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropyMean {
                logits: logits.0,
                targets: targets.to_vec(),
                supervised: supervised.to_vec(),
            },
        ))
    }

    /// Per-pixel binary cross-entropy, probabilities clamped to
    /// [1e-7, 1−1e-7].
    pub fn bce_mean(&mut self, probs: Var, labels: &Array2<u8>) -> Result<Var, TensorError> {
        let pv = &self.nodes[probs.0].value;
        if pv.dim() != labels.dim() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_mean",
                lhs: pv.dim(),
                rhs: labels.dim(),
            });
        }
        let n = pv.len() as f64;
        let mut loss = 0.0;
        for (p, &y) in pv.iter().zip(labels.iter()) {
            let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            loss -= if y > 0 { pc.ln() } else { (1.0 - pc).ln() };
        }
        loss /= n;
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::BceMean { probs: probs.0, labels: labels.clone() },
        ))
    }

    /// Soft Dice loss 1 − (2Σpy + ε)/(Σp + Σy + ε).
    pub fn dice_loss(&mut self, probs: Var, labels: &Array2<u8>, eps: f64) -> Result<Var, TensorError> {
        let pv = &self.nodes[probs.0].value;
        if pv.dim() != labels.dim() {
            return Err(TensorError::ShapeMismatch {
                op: "dice_loss",
                lhs: pv.dim(),
                rhs: labels.dim(),
            });
        }
        let mut py = 0.0;
        let mut p_sum = 0.0;
        let mut y_sum = 0.0;
        for (p, &y) in pv.iter().zip(labels.iter()) {
            p_sum += p;
            if y > 0 {
                py += p;
                y_sum += 1.0;
            }
        }
        let loss = 1.0 - (2.0 * py + eps) / (p_sum + y_sum + eps);
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::DiceLoss { probs: probs.0, labels: labels.clone(), eps },
        ))
    }

    /// Reverse-mode sweep from a scalar root. Returns one gradient slot per
    /// node; use [`Grads::into_param_grads`] to collect named parameters.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem(self.nodes[root.0].value.dim(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { by_node: grads }
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let acc = |grads: &mut [Option<Array2<f64>>], j: usize, delta: Array2<f64>| {
            match &mut grads[j] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                acc(grads, *a, g.dot(&bv.t()));
                acc(grads, *b, av.t().dot(g));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                acc(grads, *row, summed);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * &self.nodes[*b].value);
                acc(grads, *b, g * &self.nodes[*a].value);
            }
            Op::Scale(a, c) => acc(grads, *a, g.mapv(|v| v * c)),
            Op::Softmax { x, .. } => {
                let y = &self.nodes[i].value;
                let mut dx = Array2::zeros(y.dim());
                for (r, (yr, gr)) in y.axis_iter(Axis(0)).zip(g.axis_iter(Axis(0))).enumerate() {
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for (j, (yv, gv)) in yr.iter().zip(gr.iter()).enumerate() {
                        dx[[r, j]] = yv * (gv - dot);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[*x].value;
                let mut dx = xv.mapv(gelu_grad);
                dx *= g;
                acc(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                let dx = y.mapv(|v| v * (1.0 - v)) * g;
                acc(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gamma].value;
                let n = xv.ncols() as f64;
                let mut dx = Array2::zeros(xv.dim());
                let mut dgamma = Array2::zeros((1, xv.ncols()));
                let mut dbeta = Array2::zeros((1, xv.ncols()));
                for (r, row) in xv.axis_iter(Axis(0)).enumerate() {
                    let mean = row.sum() / n;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dy: Vec<f64> = (0..xv.ncols()).map(|j| g[[r, j]]).collect();
                    let dyg: Vec<f64> =
                        (0..xv.ncols()).map(|j| dy[j] * gv[[0, j]]).collect();
                    let mean_dyg = dyg.iter().sum::<f64>() / n;
                    let mean_dyg_xhat =
                        dyg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..xv.ncols() {
                        dx[[r, j]] = inv * (dyg[j] - mean_dyg - xhat[j] * mean_dyg_xhat);
                        dgamma[[0, j]] += dy[j] * xhat[j];
                        dbeta[[0, j]] += dy[j];
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::Gather { table, ids } => {
                let t = &self.nodes[*table].value;
                let mut dt = Array2::zeros(t.dim());
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = dt.row_mut(id);
                    row += &g.row(i);
                }
                acc(grads, *table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.nrows();
                    acc(grads, p, g.slice(s![at..at + rows, ..]).to_owned());
                    at += rows;
                }
            }
            Op::SliceRows { x, start, len } => {
                let xv = &self.nodes[*x].value;
                let mut dx = Array2::zeros(xv.dim());
                dx.slice_mut(s![*start..*start + *len, ..]).assign(g);
                acc(grads, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let xv = &self.nodes[*x].value;
                let mut dx = Array2::zeros(xv.dim());
                dx.slice_mut(s![.., *start..*start + *len]).assign(g);
                acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let cols = self.nodes[p].value.ncols();
                    acc(grads, p, g.slice(s![.., at..at + cols]).to_owned());
                    at += cols;
                }
            }
            Op::Transpose(x) => acc(grads, *x, g.t().to_owned()),
            Op::PatchesToImage { x, grid_h, grid_w, patch } => {
                let (gh, gw, p) = (*grid_h, *grid_w, *patch);
                let mut dx = Array2::zeros(self.nodes[*x].value.dim());
                for gy in 0..gh {
                    for gx in 0..gw {
                        let pi = gy * gw + gx;
                        for py in 0..p {
                            for px in 0..p {
                                dx[[pi, py * p + px]] = g[[gy * p + py, gx * p + px]];
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::MeanAll(x) => {
                let xv = &self.nodes[*x].value;
                let scale = g[[0, 0]] / xv.len() as f64;
                acc(grads, *x, Array2::from_elem(xv.dim(), scale));
            }
            Op::CrossEntropyMean { logits, targets, supervised } => {
                let lv = &self.nodes[*logits].value;
                let count = supervised.iter().filter(|&&m| m).count() as f64;
                let scale = g[[0, 0]] / count;
                let mut dl = Array2::zeros(lv.dim());
                for (r, row) in lv.axis_iter(Axis(0)).enumerate() {
                    if !supervised[r] {
                        continue;
                    }
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for (j, e) in exps.iter().enumerate() {
                        let p = e / sum;
                        dl[[r, j]] = scale * (p - (j == targets[r]) as usize as f64);
                    }
                }
                acc(grads, *logits, dl);
            }
            Op::BceMean { probs, labels } => {
                let pv = &self.nodes[*probs].value;
                let n = pv.len() as f64;
                let scale = g[[0, 0]] / n;
                let mut dp = Array2::zeros(pv.dim());
                for ((idx, p), &y) in pv.indexed_iter().zip(labels.iter()) {
                    if *p < BCE_CLAMP || *p > 1.0 - BCE_CLAMP {
                        continue; // clamp region: zero gradient
                    }
                    let yv = (y > 0) as usize as f64;
                    dp[idx] = scale * (p - yv) / (p * (1.0 - p));
                }
                acc(grads, *probs, dp);
            }
            Op::DiceLoss { probs, labels, eps } => {
                let pv = &self.nodes[*probs].value;
                let mut py = 0.0;
                let mut p_sum = 0.0;
                let mut y_sum = 0.0;
                for (p, &y) in pv.iter().zip(labels.iter()) {
                    p_sum += p;
                    if y > 0 {
                        py += p;
                        y_sum += 1.0;
                    }
                }
                let s = p_sum + y_sum + eps;
                let t = 2.0 * py + eps;
                let scale = g[[0, 0]];
                let mut dp = Array2::zeros(pv.dim());
                for (idx, _) in pv.indexed_iter() {
                    let y = (labels[idx] > 0) as usize as f64;
                    dp[idx] = scale * (t - 2.0 * y * s) / (s * s);
                }
                acc(grads, *probs, dp);
            }
        }
    }

    /// Names of parameter leaves present on the tape.
    pub fn param_leaves(&self) -> impl Iterator<Item = (&str, Var)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Leaf { param: Some(name) } => Some((name.as_str(), Var(i))),
            _ => None,
        })
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x.powi(3));
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub struct Grads {
    by_node: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Array2<f64>> {
        self.by_node[v.0].as_ref()
    }

    /// Collect gradients of named parameter leaves, summing duplicates.
    pub fn into_param_grads(
        mut self,
        tape: &Tape,
    ) -> std::collections::HashMap<String, Array2<f64>> {
        let mut out: std::collections::HashMap<String, Array2<f64>> =
            std::collections::HashMap::new();
        let leaves: Vec<(String, usize)> = tape
            .param_leaves()
            .map(|(name, v)| (name.to_string(), v.0))
            .collect();
        for (name, idx) in leaves {
            if let Some(g) = self.by_node[idx].take() {
                match out.get_mut(&name) {
                    Some(existing) => *existing += &g,
                    None => {
                        out.insert(name, g);
                    }
                }
            }
        }
        out
    }
}
