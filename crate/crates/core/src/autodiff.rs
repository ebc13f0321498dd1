//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse creation order and
//! accumulates gradients only along paths that reach a trainable leaf, so
//! constants (frozen parameters, input pixels) never receive a gradient.
//!
//! Loss functions are attached as fused nodes via [`Tape::loss`]: the caller
//! computes the scalar value and its closed-form input gradients outside the
//! tape, and the tape scales them by the upstream gradient.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Source of one output row of a [`Tape::gather`] node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSource {
    /// Row `row` of source number `source`.
    Row { source: usize, row: usize },
    /// An all-zero row.
    Zero,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm(Var),
    RowNormalize(Var),
    CausalSoftmax(Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Gather(Vec<Var>, Vec<RowSource>),
    Grl(Var, f64),
    Loss(Vec<(Var, Mat)>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the differentiated scalar w.r.t. `var`, if any flowed.
    pub fn get(&self, var: Var) -> Option<&Mat> {
        self.grads[var.0].as_ref()
    }

    /// Gradient w.r.t. `var`; all zeros when nothing reached it.
    pub fn get_or_zeros(&self, var: Var) -> Mat {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Mat::zeros(self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Option<Mat> {
        self.grads[var.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Mat {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.dim()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose trainability is decided by the caller.
    pub fn leaf(&mut self, value: Mat, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1 × n` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: bias must be a single row");
        let value = self.value(x) + self.value(row);
        let rg = self.any_grad(&[x, row]);
        self.push(value, Op::AddRow(x, row), rg)
    }

    /// Multiplies every row of `x` elementwise by a `1 × n` row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row: gain must be a single row");
        let value = self.value(x) * self.value(row);
        let rg = self.any_grad(&[x, row]);
        self.push(value, Op::MulRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x) * factor;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Multiplies `x` by a `1 × 1` scalar node.
    pub fn scale_by(&mut self, x: Var, scalar: Var) -> Var {
        assert_eq!(self.shape(scalar), (1, 1), "scale_by: scalar must be 1x1");
        let k = self.value(scalar)[[0, 0]];
        let value = self.value(x) * k;
        let rg = self.any_grad(&[x, scalar]);
        self.push(value, Op::ScaleBy(x, scalar), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Exp(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        let rg = self.any_grad(&[x]);
        self.push(value, Op::LayerNorm(x), rg)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let norm = row.dot(&row).sqrt().max(NORM_EPS);
            row.mapv_inplace(|v| v / norm);
        }
        let rg = self.any_grad(&[x]);
        self.push(value, Op::RowNormalize(x), rg)
    }

    /// Row softmax where entry `(i, j)` is masked out for `j > i`.
    pub fn causal_softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let visible = (i + 1).min(row.len());
            let max = row
                .iter()
                .take(visible)
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if j < visible {
                    *v = (*v - max).exp();
                    total += *v;
                } else {
                    *v = 0.0;
                }
            }
            row.mapv_inplace(|v| v / total);
        }
        let rg = self.any_grad(&[x]);
        self.push(value, Op::CausalSoftmax(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().to_owned();
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Transpose(x), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(x);
        assert_eq!(src.len(), rows * cols, "reshape: element count mismatch");
        let data: Vec<f64> = src.iter().copied().collect();
        let value = Mat::from_shape_vec((rows, cols), data).expect("row-major reshape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Reshape(x), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let rg = self.any_grad(&[x]);
        self.push(value, Op::SliceRows(x, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: nothing to concatenate");
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = self.any_grad(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Builds a matrix whose rows are copied from several sources.
    pub fn gather(&mut self, sources: &[Var], rows: Vec<RowSource>) -> Var {
        assert!(!sources.is_empty(), "gather: no sources");
        let cols = self.shape(sources[0]).1;
        let mut value = Mat::zeros((rows.len(), cols));
        for (out, src) in rows.iter().enumerate() {
            if let RowSource::Row { source, row } = *src {
                let table = self.value(sources[source]);
                assert_eq!(table.ncols(), cols, "gather: column mismatch");
                value.row_mut(out).assign(&table.row(row));
            }
        }
        let rg = self.any_grad(sources);
        self.push(value, Op::Gather(sources.to_vec(), rows), rg)
    }

    /// Convenience wrapper: rows of a single table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let rows = rows
            .iter()
            .map(|&row| RowSource::Row { source: 0, row })
            .collect();
        self.gather(&[table], rows)
    }

    /// Gradient reversal: identity forward, `-lambda · g` backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.value(x).clone();
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Grl(x, lambda), rg)
    }

    /// Scalar node with externally computed local gradients.
    pub fn loss(&mut self, value: f64, local: Vec<(Var, Mat)>) -> Var {
        for (v, g) in &local {
            assert_eq!(self.shape(*v), g.dim(), "loss: gradient shape mismatch");
        }
        let inputs: Vec<Var> = local.iter().map(|(v, _)| *v).collect();
        let rg = self.any_grad(&inputs);
        self.push(Mat::from_elem((1, 1), value), Op::Loss(local), rg)
    }

    /// Sum of `1 × 1` nodes.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Differentiates the `1 × 1` node `target` w.r.t. everything on the tape.
    pub fn backward(&self, target: Var) -> Gradients {
        assert_eq!(self.shape(target), (1, 1), "backward: target must be scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = vec![None; n];
        grads[target.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=target.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Constants keep no gradient.
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[idx] = None;
            }
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(x, row) => {
                if self.requires_grad(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.requires_grad(*row) {
                    accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(x, row) => {
                if self.requires_grad(*x) {
                    accumulate(grads, *x, g * self.value(*row));
                }
                if self.requires_grad(*row) {
                    let gx = g * self.value(*x);
                    accumulate(grads, *row, gx.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(x, k) => accumulate(grads, *x, g * *k),
            Op::ScaleBy(x, scalar) => {
                let k = self.value(*scalar)[[0, 0]];
                if self.requires_grad(*x) {
                    accumulate(grads, *x, g * k);
                }
                if self.requires_grad(*scalar) {
                    let dk = (g * self.value(*x)).sum();
                    accumulate(grads, *scalar, Mat::from_elem((1, 1), dk));
                }
            }
            Op::Exp(x) => accumulate(grads, *x, g * &node.value),
            Op::Gelu(x) => {
                let d = self.value(*x).mapv(gelu_grad);
                accumulate(grads, *x, g * &d);
            }
            Op::Tanh(x) => {
                let d = node.value.mapv(|y| 1.0 - y * y);
                accumulate(grads, *x, g * &d);
            }
            Op::LayerNorm(x) => {
                let input = self.value(*x);
                let mut dx = Mat::zeros(input.dim());
                let n = input.ncols() as f64;
                for ((xr, yr), (gr, mut dr)) in input
                    .rows()
                    .into_iter()
                    .zip(node.value.rows())
                    .zip(g.rows().into_iter().zip(dx.rows_mut()))
                {
                    let mean = xr.sum() / n;
                    let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let g_mean = gr.sum() / n;
                    let gy_mean = gr.dot(&yr) / n;
                    Zip::from(&mut dr)
                        .and(&gr)
                        .and(&yr)
                        .for_each(|d, &gi, &yi| *d = inv * (gi - g_mean - yi * gy_mean));
                }
                accumulate(grads, *x, dx);
            }
            Op::RowNormalize(x) => {
                let input = self.value(*x);
                let mut dx = Mat::zeros(input.dim());
                for ((xr, yr), (gr, mut dr)) in input
                    .rows()
                    .into_iter()
                    .zip(node.value.rows())
                    .zip(g.rows().into_iter().zip(dx.rows_mut()))
                {
                    let norm = xr.dot(&xr).sqrt().max(NORM_EPS);
                    let gy = gr.dot(&yr);
                    Zip::from(&mut dr)
                        .and(&gr)
                        .and(&yr)
                        .for_each(|d, &gi, &yi| *d = (gi - yi * gy) / norm);
                }
                accumulate(grads, *x, dx);
            }
            Op::CausalSoftmax(x) => {
                let y = &node.value;
                let mut dx = Mat::zeros(y.dim());
                for ((yr, gr), mut dr) in y.rows().into_iter().zip(g.rows()).zip(dx.rows_mut()) {
                    let dot = yr.dot(&gr);
                    Zip::from(&mut dr)
                        .and(&yr)
                        .and(&gr)
                        .for_each(|d, &yi, &gi| *d = yi * (gi - dot));
                }
                accumulate(grads, *x, dx);
            }
            Op::Transpose(x) => accumulate(grads, *x, g.t().to_owned()),
            Op::Reshape(x) => {
                let shape = self.shape(*x);
                let data: Vec<f64> = g.iter().copied().collect();
                accumulate(
                    grads,
                    *x,
                    Mat::from_shape_vec(shape, data).expect("row-major reshape"),
                );
            }
            Op::SliceRows(x, start) => {
                let mut dx = Mat::zeros(self.shape(*x));
                dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.shape(*p).0;
                    if self.requires_grad(*p) {
                        accumulate(grads, *p, g.slice(s![offset..offset + rows, ..]).to_owned());
                    }
                    offset += rows;
                }
            }
            Op::Gather(sources, rows) => {
                let mut partial: Vec<Option<Mat>> = sources
                    .iter()
                    .map(|s| self.requires_grad(*s).then(|| Mat::zeros(self.shape(*s))))
                    .collect();
                for (out, src) in rows.iter().enumerate() {
                    if let RowSource::Row { source, row } = *src {
                        if let Some(acc) = partial[source].as_mut() {
                            let mut target = acc.row_mut(row);
                            target += &g.row(out);
                        }
                    }
                }
                for (s, p) in sources.iter().zip(partial) {
                    if let Some(p) = p {
                        accumulate(grads, *s, p);
                    }
                }
            }
            Op::Grl(x, lambda) => accumulate(grads, *x, g * -*lambda),
            Op::Loss(local) => {
                let up = g[[0, 0]];
                for (v, lg) in local {
                    if self.requires_grad(*v) {
                        accumulate(grads, *v, lg * up);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], var: Var, g: Mat) {
    match &mut grads[var.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` around `x`.
    fn numeric(x: &Mat, f: impl Fn(&Mat) -> f64) -> Mat {
        let h = 1e-5;
        let mut out = Mat::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut plus = x.clone();
            plus[[r, c]] += h;
            let mut minus = x.clone();
            minus[[r, c]] -= h;
            out[[r, c]] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn max_rel(a: &Mat, b: &Mat) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    /// Weighted sum so every output entry matters.
    fn probe(tape: &mut Tape, y: Var) -> Var {
        let (r, c) = tape.shape(y);
        let w = Mat::from_shape_fn((r, c), |(i, j)| 0.3 + 0.1 * i as f64 - 0.07 * j as f64);
        let value = (tape.value(y) * &w).sum();
        tape.loss(value, vec![(y, w)])
    }

    fn check(x: Mat, build: impl Fn(&mut Tape, Var) -> Var) {
        let f = |m: &Mat| {
            let mut t = Tape::new();
            let v = t.param(m.clone());
            let y = build(&mut t, v);
            let out = probe(&mut t, y);
            t.value(out)[[0, 0]]
        };
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let y = build(&mut t, v);
        let out = probe(&mut t, y);
        let g = t.backward(out).get_or_zeros(v);
        let n = numeric(&x, f);
        assert!(max_rel(&g, &n) < 1e-6, "analytic {g:?} numeric {n:?}");
    }

    fn sample() -> Mat {
        array![[0.3, -1.2, 0.8], [1.1, 0.4, -0.5], [-0.7, 0.2, 0.9]]
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check(sample(), |t, x| t.gelu(x));
        check(sample(), |t, x| t.tanh(x));
        check(sample(), |t, x| t.exp(x));
        check(sample(), |t, x| t.layer_norm(x));
        check(sample(), |t, x| t.row_normalize(x));
        check(sample(), |t, x| t.causal_softmax(x));
        check(sample(), |t, x| t.scale(x, -2.5));
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        check(sample(), |t, x| {
            let y = t.transpose(x);
            t.matmul(x, y)
        });
        check(sample(), |t, x| t.matmul_t(x, x));
        check(sample(), |t, x| t.reshape(x, 1, 9));
        check(sample(), |t, x| {
            let a = t.slice_rows(x, 1, 2);
            let b = t.slice_rows(x, 0, 1);
            t.concat_rows(&[a, b, a])
        });
        check(sample(), |t, x| {
            let rows = vec![
                RowSource::Row { source: 0, row: 2 },
                RowSource::Zero,
                RowSource::Row { source: 0, row: 2 },
            ];
            t.gather(&[x], rows)
        });
        check(sample(), |t, x| {
            let r = t.slice_rows(x, 0, 1);
            let y = t.add_row(x, r);
            t.mul_row(y, r)
        });
        check(sample(), |t, x| {
            let k = t.slice_rows(x, 1, 1);
            let k = t.reshape(k, 3, 1);
            let k = t.slice_rows(k, 0, 1);
            t.scale_by(x, k)
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(sample());
        let p = t.param(sample());
        let y = t.matmul(c, p);
        let out = probe(&mut t, y);
        let g = t.backward(out);
        assert!(g.get(c).is_none());
        assert!(g.get(p).is_some());
    }

    #[test]
    fn grl_reverses_and_scales() {
        let mut t = Tape::new();
        let x = t.param(sample());
        let y = t.grl(x, 0.5);
        assert_eq!(t.value(y), t.value(x));
        let value = t.value(y).sum();
        let out = t.loss(value, vec![(y, Mat::ones((3, 3)))]);
        let g = t.backward(out).get_or_zeros(x);
        assert!(g.iter().all(|&v| v == -0.5));
    }
}
