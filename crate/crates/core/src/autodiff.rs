//! Minimal reverse-mode autodiff over `ndarray::Array2<f64>`.
//!
//! A [`Tape`] records an eagerly-evaluated expression graph; [`Tape::backward`]
//! replays it in reverse and accumulates gradients for every node that
//! (transitively) depends on a trainable leaf. The op set is exactly what the
//! dual-stream transformer and its losses need; each op's backward rule is
//! verified against central finite differences in the tests below.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    /// a · bᵀ
    MatmulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Broadcast-add a `[1, m]` row to every row of a `[n, m]` matrix.
    AddRow(NodeId, NodeId),
    /// Broadcast-multiply by a `[1, m]` row.
    MulRow(NodeId, NodeId),
    SoftmaxRows(NodeId),
    Silu(NodeId),
    /// Per-row RMS normalization: x / sqrt(mean(x^2) + eps).
    RmsNorm(NodeId, f64),
    ConcatRows(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    /// Gather an arbitrary column subset.
    SelectCols(NodeId, Vec<usize>),
    /// Row gather from an embedding table.
    GatherRows(NodeId, Vec<usize>),
    SumAll(NodeId),
    MeanAll(NodeId),
    Ln(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.nrows(), v.ncols())
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; its gradient is available after [`Tape::backward`].
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Matmul(a, b), g)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatmulNT(a, b), g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        let g = self.ng(a);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) + self.value(row);
        let g = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), g)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) * self.value(row);
        let g = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), g)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let g = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), g)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        let g = self.ng(a);
        self.push(v, Op::Silu(a), g)
    }

    pub fn rms_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
            let r = 1.0 / (ms + eps).sqrt();
            row.mapv_inplace(|x| x * r);
        }
        let g = self.ng(a);
        self.push(v, Op::RmsNorm(a, eps), g)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        let mut v = Array2::zeros((va.nrows() + vb.nrows(), va.ncols()));
        v.slice_mut(s![..va.nrows(), ..]).assign(va);
        v.slice_mut(s![va.nrows().., ..]).assign(vb);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::ConcatRows(a, b), g)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        let g = self.ng(a);
        self.push(v, Op::SliceRows(a, start, end), g)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let g = self.ng(a);
        self.push(v, Op::SliceCols(a, start, end), g)
    }

    pub fn select_cols(&mut self, a: NodeId, cols: Vec<usize>) -> NodeId {
        let va = self.value(a);
        let mut v = Array2::zeros((va.nrows(), cols.len()));
        for (j, &c) in cols.iter().enumerate() {
            v.column_mut(j).assign(&va.column(c));
        }
        let g = self.ng(a);
        self.push(v, Op::SelectCols(a, cols), g)
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: Vec<usize>) -> NodeId {
        let vt = self.value(table);
        let mut v = Array2::zeros((idx.len(), vt.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&vt.row(r));
        }
        let g = self.ng(table);
        self.push(v, Op::GatherRows(table, idx), g)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let g = self.ng(a);
        self.push(v, Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Array2::from_elem((1, 1), va.sum() / va.len() as f64);
        let g = self.ng(a);
        self.push(v, Op::MeanAll(a), g)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::ln);
        let g = self.ng(a);
        self.push(v, Op::Ln(a), g)
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.shape(id), (1, 1));
        self.value(id)[(0, 0)]
    }

    /// Reverse pass from a `[1, 1]` scalar node. Returns per-node gradients;
    /// entries are `None` for nodes that do not require grad.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::invalid("backward expects a scalar loss node"));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let add = |grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => *acc += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                add(grads, *a, g.dot(&self.value(*b).t()));
                add(grads, *b, self.value(*a).t().dot(g));
            }
            Op::MatmulNT(a, b) => {
                add(grads, *a, g.dot(self.value(*b)));
                add(grads, *b, g.t().dot(self.value(*a)));
            }
            Op::Add(a, b) => {
                add(grads, *a, g.clone());
                add(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add(grads, *a, g.clone());
                add(grads, *b, -g.clone());
            }
            Op::Mul(a, b) => {
                add(grads, *a, g * self.value(*b));
                add(grads, *b, g * self.value(*a));
            }
            Op::Scale(a, c) => add(grads, *a, g * *c),
            Op::AddRow(a, row) => {
                add(grads, *a, g.clone());
                add(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                add(grads, *a, g * self.value(*row));
                let ga = g * self.value(*a);
                add(grads, *row, ga.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::SoftmaxRows(a) => {
                let p = &self.nodes[i].value;
                let mut gz = g * p;
                for (mut row, prow) in gz.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f64 = row.sum();
                    for (r, pv) in row.iter_mut().zip(prow.iter()) {
                        *r -= dot * pv;
                    }
                }
                add(grads, *a, gz);
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = x.mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                add(grads, *a, g * &d);
            }
            Op::RmsNorm(a, eps) => {
                let x = self.value(*a);
                let mut gx = Array2::zeros(x.raw_dim());
                for ((xrow, grow), mut orow) in
                    x.rows().into_iter().zip(g.rows()).zip(gx.rows_mut())
                {
                    let n = xrow.len() as f64;
                    let ms = xrow.iter().map(|v| v * v).sum::<f64>() / n;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let gx_dot: f64 = grow.iter().zip(xrow.iter()).map(|(a, b)| a * b).sum();
                    let coef = gx_dot * inv.powi(3) / n;
                    for ((o, &gv), &xv) in orow.iter_mut().zip(grow.iter()).zip(xrow.iter()) {
                        *o = gv * inv - coef * xv;
                    }
                }
                add(grads, *a, gx);
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).nrows();
                add(grads, *a, g.slice(s![..na, ..]).to_owned());
                add(grads, *b, g.slice(s![na.., ..]).to_owned());
            }
            Op::SliceRows(a, start, end) => {
                let mut ga = Array2::zeros(self.value(*a).raw_dim());
                ga.slice_mut(s![*start..*end, ..]).assign(g);
                add(grads, *a, ga);
            }
            Op::SliceCols(a, start, end) => {
                let mut ga = Array2::zeros(self.value(*a).raw_dim());
                ga.slice_mut(s![.., *start..*end]).assign(g);
                add(grads, *a, ga);
            }
            Op::SelectCols(a, cols) => {
                let mut ga = Array2::zeros(self.value(*a).raw_dim());
                for (j, &c) in cols.iter().enumerate() {
                    let mut col = ga.column_mut(c);
                    col += &g.column(j);
                }
                add(grads, *a, ga);
            }
            Op::GatherRows(table, idx) => {
                let mut gt = Array2::zeros(self.value(*table).raw_dim());
                for (i, &r) in idx.iter().enumerate() {
                    let mut row = gt.row_mut(r);
                    row += &g.row(i);
                }
                add(grads, *table, gt);
            }
            Op::SumAll(a) => {
                let ga = Array2::from_elem(self.value(*a).raw_dim(), g[(0, 0)]);
                add(grads, *a, ga);
            }
            Op::MeanAll(a) => {
                let va = self.value(*a);
                let ga = Array2::from_elem(va.raw_dim(), g[(0, 0)] / va.len() as f64);
                add(grads, *a, ga);
            }
            Op::Ln(a) => {
                let ga = g / self.value(*a);
                add(grads, *a, ga);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
