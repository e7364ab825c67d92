use crate::{Error, Result};

pub type TensorId = usize;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn scalar() -> Self {
        Shape { rows: 1, cols: 1 }
    }
}

/// Reduction applied by `cross_entropy` over supervised positions.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Reduction {
    Sum,
    Mean,
}

pub fn erf(x: f64) -> f64 {
    statrs::function::erf::erf(x)
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let phi = 0.5 * (1.0 + erf(x * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    phi + x * pdf
}

enum Op {
    Leaf,
    MatmulNN(TensorId, TensorId),
    MatmulNT(TensorId, TensorId),
    Add(TensorId, TensorId),
    AddRow(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Gelu(TensorId),
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    CausalSoftmax(TensorId),
    CrossEntropy { logits: TensorId, targets: Vec<i64>, weight: f64 },
    L1Loss { preds: TensorId, targets: Vec<f64> },
    PairL2Loss { preds: TensorId, targets: Vec<f64> },
    GatherRows { src: TensorId, idx: Vec<usize> },
    PlaceRows { base: TensorId, rows: TensorId, positions: Vec<usize> },
    SliceCols { src: TensorId, start: usize, len: usize },
    ConcatCols(Vec<TensorId>),
}

struct Node {
    shape: Shape,
    data: Vec<f64>,
    op: Op,
}

/// Append-only computation graph. Nodes are created in topological order, so
/// reverse iteration is a valid backward schedule.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, shape: Shape, data: Vec<f64>, op: Op) -> TensorId {
        debug_assert_eq!(shape.len(), data.len());
        self.nodes.push(Node { shape, data, op });
        self.nodes.len() - 1
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.nodes[id].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].data
    }

    /// Scalar value of a `[1,1]` tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        self.nodes[id].data[0]
    }

    /// Gradient buffer populated by `backward`.
    pub fn grad(&self, id: TensorId) -> Result<&[f64]> {
        if self.grads.is_empty() {
            return Err(Error::Contract("backward has not been run".into()));
        }
        Ok(&self.grads[id])
    }

    pub fn leaf(&mut self, shape: Shape, data: Vec<f64>) -> TensorId {
        assert_eq!(shape.len(), data.len(), "leaf data does not match shape");
        self.push(shape, data, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(Shape::scalar(), vec![v])
    }

    /// C = A[m,k] @ B[k,n]
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(Error::Shape(format!(
                "matmul: [{},{}] x [{},{}]",
                sa.rows, sa.cols, sb.rows, sb.cols
            )));
        }
        let (m, k, n) = (sa.rows, sa.cols, sb.cols);
        let mut out = vec![0.0; m * n];
        {
            let da = &self.nodes[a].data;
            let db = &self.nodes[b].data;
            for i in 0..m {
                let arow = &da[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &db[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        Ok(self.push(Shape::new(m, n), out, Op::MatmulNN(a, b)))
    }

    /// C = A[m,k] @ B[n,k]^T
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.cols {
            return Err(Error::Shape(format!(
                "matmul_nt: [{},{}] x [{},{}]^T",
                sa.rows, sa.cols, sb.rows, sb.cols
            )));
        }
        let (m, k, n) = (sa.rows, sa.cols, sb.rows);
        let mut out = vec![0.0; m * n];
        {
            let da = &self.nodes[a].data;
            let db = &self.nodes[b].data;
            for i in 0..m {
                let arow = &da[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &db[j * k..(j + 1) * k];
                    out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
        }
        Ok(self.push(Shape::new(m, n), out, Op::MatmulNT(a, b)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!(
                "add: [{},{}] vs [{},{}]",
                sa.rows, sa.cols, sb.rows, sb.cols
            )));
        }
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(sa, data, Op::Add(a, b)))
    }

    /// Broadcast-add a `[1,n]` row to every row of `[m,n]`.
    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.rows != 1 || sa.cols != sb.cols {
            return Err(Error::Shape(format!(
                "add_row: [{},{}] + [{},{}]",
                sa.rows, sa.cols, sb.rows, sb.cols
            )));
        }
        let n = sa.cols;
        let mut data = self.nodes[a].data.clone();
        for i in 0..sa.rows {
            for j in 0..n {
                data[i * n + j] += self.nodes[b].data[j];
            }
        }
        Ok(self.push(sa, data, Op::AddRow(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape("mul: shape mismatch".into()));
        }
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(sa, data, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, s: f64) -> TensorId {
        let data = self.nodes[a].data.iter().map(|x| x * s).collect();
        self.push(self.shape(a), data, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a].data.iter().map(|&x| gelu_scalar(x)).collect();
        self.push(self.shape(a), data, Op::Gelu(a))
    }

    /// Row-wise layer normalization with affine parameters `gamma`, `beta`
    /// of shape `[1,n]`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(Error::Input("layer_norm: eps must be > 0".into()));
        }
        let s = self.shape(x);
        let (sg, sb) = (self.shape(gamma), self.shape(beta));
        if sg.rows != 1 || sb.rows != 1 || sg.cols != s.cols || sb.cols != s.cols {
            return Err(Error::Shape("layer_norm: affine params must be [1,n]".into()));
        }
        let n = s.cols;
        let mut data = vec![0.0; s.len()];
        for i in 0..s.rows {
            let row = &self.nodes[x].data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                data[i * n + j] = self.nodes[gamma].data[j] * xh + self.nodes[beta].data[j];
            }
        }
        Ok(self.push(s, data, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Row `i` is a softmax over columns `0..=i`; later columns are zero.
    /// Requires a square matrix.
    pub fn causal_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a);
        if s.rows != s.cols {
            return Err(Error::Shape("causal_softmax: matrix must be square".into()));
        }
        let n = s.cols;
        let mut data = vec![0.0; s.len()];
        for i in 0..s.rows {
            let row = &self.nodes[a].data[i * n..i * n + i + 1];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..=i {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..=i {
                data[i * n + j] /= sum;
            }
        }
        Ok(self.push(s, data, Op::CausalSoftmax(a)))
    }

    /// Cross-entropy of `logits[m,V]` against one target id per row.
    /// Rows whose target equals `ignore_id` are skipped. Returns the loss
    /// tensor and the number of supervised rows; with zero supervised rows
    /// the loss is exactly 0.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[i64],
        ignore_id: i64,
        reduction: Reduction,
    ) -> Result<(TensorId, usize)> {
        let s = self.shape(logits);
        if targets.len() != s.rows {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                s.rows
            )));
        }
        let v = s.cols;
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore_id {
                continue;
            }
            if t < 0 || t as usize >= v {
                return Err(Error::Contract(format!(
                    "cross_entropy: target {t} outside [0,{v}) at row {i}"
                )));
            }
            let row = &self.nodes[logits].data[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
            count += 1;
        }
        let weight = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => {
                if count > 0 {
                    total /= count as f64;
                }
                if count > 0 { 1.0 / count as f64 } else { 0.0 }
            }
        };
        let weight = if count == 0 { 0.0 } else { weight };
        let id = self.push(
            Shape::scalar(),
            vec![total],
            Op::CrossEntropy { logits, targets: targets.to_vec(), weight },
        );
        Ok((id, count))
    }

    /// Mean absolute error of `preds[m,1]` against targets. Empty input
    /// yields exactly 0.
    pub fn l1_loss(&mut self, preds: TensorId, targets: &[f64]) -> Result<TensorId> {
        let s = self.shape(preds);
        if s.cols != 1 || s.rows != targets.len() {
            return Err(Error::Shape(format!(
                "l1_loss: preds [{},{}] vs {} targets",
                s.rows,
                s.cols,
                targets.len()
            )));
        }
        let m = targets.len();
        let total = if m == 0 {
            0.0
        } else {
            self.nodes[preds]
                .data
                .iter()
                .zip(targets)
                .map(|(p, t)| (p - t).abs())
                .sum::<f64>()
                / m as f64
        };
        Ok(self.push(
            Shape::scalar(),
            vec![total],
            Op::L1Loss { preds, targets: targets.to_vec() },
        ))
    }

    /// Mean Euclidean distance over consecutive coordinate pairs:
    /// `preds[2T,1]` holds (x1,y1,x2,y2,...); the loss is
    /// (1/T) sum_t ||p_t - g_t||_2. Odd-length input is a contract error.
    pub fn pair_l2_loss(&mut self, preds: TensorId, targets: &[f64]) -> Result<TensorId> {
        let s = self.shape(preds);
        if s.cols != 1 || s.rows != targets.len() {
            return Err(Error::Shape("pair_l2_loss: shape mismatch".into()));
        }
        if targets.len() % 2 != 0 {
            return Err(Error::Contract(
                "pair_l2_loss: waypoint stream must have even length".into(),
            ));
        }
        let t_count = targets.len() / 2;
        let total = if t_count == 0 {
            0.0
        } else {
            let d = &self.nodes[preds].data;
            (0..t_count)
                .map(|t| {
                    let dx = d[2 * t] - targets[2 * t];
                    let dy = d[2 * t + 1] - targets[2 * t + 1];
                    (dx * dx + dy * dy).sqrt()
                })
                .sum::<f64>()
                / t_count as f64
        };
        Ok(self.push(
            Shape::scalar(),
            vec![total],
            Op::PairL2Loss { preds, targets: targets.to_vec() },
        ))
    }

    /// Select rows of `src` by index (with repetition allowed).
    pub fn gather_rows(&mut self, src: TensorId, idx: &[usize]) -> Result<TensorId> {
        let s = self.shape(src);
        let n = s.cols;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= s.rows {
                return Err(Error::Contract(format!(
                    "gather_rows: index {i} out of {} rows",
                    s.rows
                )));
            }
            data.extend_from_slice(&self.nodes[src].data[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            Shape::new(idx.len(), n),
            data,
            Op::GatherRows { src, idx: idx.to_vec() },
        ))
    }

    /// Overwrite rows of `base` at `positions` with the rows of `rows`.
    pub fn place_rows(
        &mut self,
        base: TensorId,
        rows: TensorId,
        positions: &[usize],
    ) -> Result<TensorId> {
        let (sb, sr) = (self.shape(base), self.shape(rows));
        if sr.cols != sb.cols || sr.rows != positions.len() {
            return Err(Error::Shape("place_rows: shape mismatch".into()));
        }
        let n = sb.cols;
        let mut data = self.nodes[base].data.clone();
        for (r, &pos) in positions.iter().enumerate() {
            if pos >= sb.rows {
                return Err(Error::Contract(format!(
                    "place_rows: position {pos} out of {} rows",
                    sb.rows
                )));
            }
            data[pos * n..(pos + 1) * n]
                .copy_from_slice(&self.nodes[rows].data[r * n..(r + 1) * n]);
        }
        Ok(self.push(sb, data, Op::PlaceRows { base, rows, positions: positions.to_vec() }))
    }

    pub fn slice_cols(&mut self, src: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(src);
        if start + len > s.cols {
            return Err(Error::Shape("slice_cols: out of range".into()));
        }
        let mut data = Vec::with_capacity(s.rows * len);
        for i in 0..s.rows {
            data.extend_from_slice(&self.nodes[src].data[i * s.cols + start..i * s.cols + start + len]);
        }
        Ok(self.push(Shape::new(s.rows, len), data, Op::SliceCols { src, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: no parts".into()));
        }
        let rows = self.shape(parts[0]).rows;
        let total: usize = parts.iter().map(|&p| self.shape(p).cols).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let c = self.shape(p).cols;
                if self.shape(p).rows != rows {
                    return Err(Error::Shape("concat_cols: row mismatch".into()));
                }
                data.extend_from_slice(&self.nodes[p].data[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(Shape::new(rows, total), data, Op::ConcatCols(parts.to_vec())))
    }

    /// Reverse-mode sweep from a scalar loss. Populates gradients for every
    /// node; unreachable leaves keep zero gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.shape(loss) != Shape::scalar() {
            return Err(Error::Contract("backward: loss must be a scalar".into()));
        }
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.shape.len()]).collect();
        grads[loss][0] = 1.0;

        for id in (0..self.nodes.len()).rev() {
            // Split off this node's grad so we can mutate parents' grads.
            let g = std::mem::take(&mut grads[id]);
            if g.iter().all(|&v| v == 0.0) {
                grads[id] = g;
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatmulNN(a, b) => {
                    let (a, b) = (*a, *b);
                    let (sa, sb) = (self.shape(a), self.shape(b));
                    let (m, k, n) = (sa.rows, sa.cols, sb.cols);
                    let da = &self.nodes[a].data;
                    let db = &self.nodes[b].data;
                    // dA += dC @ B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * db[p * n + j];
                            }
                            grads[a][i * k + p] += acc;
                        }
                    }
                    // dB += A^T @ dC
                    for p in 0..k {
                        for i in 0..m {
                            let av = da[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                grads[b][p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                }
                Op::MatmulNT(a, b) => {
                    let (a, b) = (*a, *b);
                    let (sa, sb) = (self.shape(a), self.shape(b));
                    let (m, k, n) = (sa.rows, sa.cols, sb.rows);
                    let da = &self.nodes[a].data;
                    let db = &self.nodes[b].data;
                    // dA += dC @ B
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                grads[a][i * k + p] += gv * db[j * k + p];
                            }
                        }
                    }
                    // dB += dC^T @ A
                    for j in 0..n {
                        for i in 0..m {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                grads[b][j * k + p] += gv * da[i * k + p];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    for (i, &gv) in g.iter().enumerate() {
                        grads[a][i] += gv;
                        grads[b][i] += gv;
                    }
                }
                Op::AddRow(a, b) => {
                    let (a, b) = (*a, *b);
                    let n = self.shape(b).cols;
                    for (i, &gv) in g.iter().enumerate() {
                        grads[a][i] += gv;
                        grads[b][i % n] += gv;
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    for (i, &gv) in g.iter().enumerate() {
                        grads[a][i] += gv * self.nodes[b].data[i];
                        grads[b][i] += gv * self.nodes[a].data[i];
                    }
                }
                Op::Scale(a, s) => {
                    let (a, s) = (*a, *s);
                    for (i, &gv) in g.iter().enumerate() {
                        grads[a][i] += gv * s;
                    }
                }
                Op::Gelu(a) => {
                    let a = *a;
                    for (i, &gv) in g.iter().enumerate() {
                        grads[a][i] += gv * gelu_grad_scalar(self.nodes[a].data[i]);
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                    let s = self.shape(x);
                    let n = s.cols;
                    for i in 0..s.rows {
                        let row = &self.nodes[x].data[i * n..(i + 1) * n];
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gy = &g[i * n..(i + 1) * n];
                        let mut sum_h = 0.0;
                        let mut sum_hx = 0.0;
                        for j in 0..n {
                            let xh = (row[j] - mean) * inv;
                            let h = gy[j] * self.nodes[gamma].data[j];
                            grads[gamma][j] += gy[j] * xh;
                            grads[beta][j] += gy[j];
                            sum_h += h;
                            sum_hx += h * xh;
                        }
                        let mean_h = sum_h / n as f64;
                        let mean_hx = sum_hx / n as f64;
                        for j in 0..n {
                            let xh = (row[j] - mean) * inv;
                            let h = gy[j] * self.nodes[gamma].data[j];
                            grads[x][i * n + j] += inv * (h - mean_h - xh * mean_hx);
                        }
                    }
                }
                Op::CausalSoftmax(a) => {
                    let a = *a;
                    let n = self.shape(a).cols;
                    for i in 0..self.shape(a).rows {
                        let p = &self.nodes[id].data[i * n..(i + 1) * n];
                        let gy = &g[i * n..(i + 1) * n];
                        let dot: f64 = (0..=i).map(|j| p[j] * gy[j]).sum();
                        for j in 0..=i {
                            grads[a][i * n + j] += p[j] * (gy[j] - dot);
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, weight } => {
                    let logits = *logits;
                    let w = *weight * g[0];
                    if w != 0.0 {
                        let v = self.shape(logits).cols;
                        for (i, &t) in targets.iter().enumerate() {
                            if t < 0 || t as usize >= v {
                                continue;
                            }
                            let row = &self.nodes[logits].data[i * v..(i + 1) * v];
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
                            for j in 0..v {
                                let p = (row[j] - max).exp() / sum;
                                let ind = if j == t as usize { 1.0 } else { 0.0 };
                                grads[logits][i * v + j] += w * (p - ind);
                            }
                        }
                    }
                }
                Op::L1Loss { preds, targets } => {
                    let preds = *preds;
                    let m = targets.len();
                    if m > 0 {
                        let w = g[0] / m as f64;
                        for (i, &t) in targets.iter().enumerate() {
                            let d = self.nodes[preds].data[i] - t;
                            grads[preds][i] += w * d.signum();
                        }
                    }
                }
                Op::PairL2Loss { preds, targets } => {
                    let preds = *preds;
                    let t_count = targets.len() / 2;
                    if t_count > 0 {
                        let w = g[0] / t_count as f64;
                        for t in 0..t_count {
                            let dx = self.nodes[preds].data[2 * t] - targets[2 * t];
                            let dy = self.nodes[preds].data[2 * t + 1] - targets[2 * t + 1];
                            let dist = (dx * dx + dy * dy).sqrt();
                            if dist > 0.0 {
                                grads[preds][2 * t] += w * dx / dist;
                                grads[preds][2 * t + 1] += w * dy / dist;
                            }
                        }
                    }
                }
                Op::GatherRows { src, idx } => {
                    let src = *src;
                    let n = self.shape(src).cols;
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            grads[src][i * n + j] += g[r * n + j];
                        }
                    }
                }
                Op::PlaceRows { base, rows, positions } => {
                    let (base, rows) = (*base, *rows);
                    let n = self.shape(base).cols;
                    let mut replaced = vec![false; self.shape(base).rows];
                    for (r, &pos) in positions.iter().enumerate() {
                        replaced[pos] = true;
                        for j in 0..n {
                            grads[rows][r * n + j] += g[pos * n + j];
                        }
                    }
                    for i in 0..self.shape(base).rows {
                        if !replaced[i] {
                            for j in 0..n {
                                grads[base][i * n + j] += g[i * n + j];
                            }
                        }
                    }
                }
                Op::SliceCols { src, start, len } => {
                    let (src, start, len) = (*src, *start, *len);
                    let cols = self.shape(src).cols;
                    for i in 0..self.shape(id).rows {
                        for j in 0..len {
                            grads[src][i * cols + start + j] += g[i * len + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let rows = self.shape(id).rows;
                    let total = self.shape(id).cols;
                    for i in 0..rows {
                        let mut off = 0;
                        for &p in &parts {
                            let c = self.shape(p).cols;
                            for j in 0..c {
                                grads[p][i * c + j] += g[i * total + off + j];
                            }
                            off += c;
                        }
                    }
                    debug_assert_eq!(
                        total,
                        parts.iter().map(|&p| self.shape(p).cols).sum::<usize>()
                    );
                }
            }
            grads[id] = g;
        }
        self.grads = grads;
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
