use super::{NumericsError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

/// Pinhole camera description used by the differentiable projection op.
///
/// `rot`/`trans` map ego-frame points into the camera frame (z along the
/// optical axis). `pre` is an optional linear map applied to points first;
/// scene augmentation folds its inverse transform in here so projections of
/// augmented geometry match the un-augmented ones. `flip_u` mirrors the
/// horizontal image axis.
#[derive(Debug, Clone)]
pub struct PinholeParams {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rot: [[f64; 3]; 3],
    pub trans: [f64; 3],
    pub pre: Option<[[f64; 3]; 3]>,
    pub flip_u: bool,
    /// Points with camera-frame depth at or below this are out of view.
    pub eps_depth: f64,
}

impl PinholeParams {
    fn apply_pre(&self, p: [f64; 3]) -> [f64; 3] {
        match &self.pre {
            None => p,
            Some(m) => mat3_mul_vec(m, p),
        }
    }
}

fn mat3_mul_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat3_tmul_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `[r, c] + [c]`, bias broadcast across rows.
    AddBias(Var, Var),
    /// `[r, c] * [r, 1]`, column broadcast across columns.
    MulCol(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    /// `[r, c] -> [r, 1]`.
    SumRows(Var),
    /// `[g*k, c] -> [g, c]`, summing `k` consecutive rows.
    SumRowGroups {
        x: Var,
        k: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    GatherCols {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    /// Samples `grid: [H, W, C]` at continuous `uv: [N, 2]` coordinates.
    BilinearSample {
        grid: Var,
        uv: Var,
        oob: Vec<bool>,
    },
    /// Same-resolution 3x3 convolution with zero padding.
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
    },
    /// Row-wise outer product: `[N, D] x [N, C] -> [N, D*C]`.
    OuterLift {
        depth: Var,
        feat: Var,
    },
    /// Scatter-add rows into `cells` output rows; `None` drops the row.
    PoolByIndex {
        x: Var,
        idx: Vec<Option<usize>>,
    },
    /// Box keypoints from anchors `[M, 11]` and box-frame offsets `[M, K*3]`.
    GenKeypoints {
        anchors: Var,
        offsets: Var,
    },
    /// Pinhole projection of ego-frame points `[N, 3]` to pixels `[N, 2]`.
    ProjectCamera {
        pts: Var,
        cam: Box<PinholeParams>,
        valid: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    inner: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.inner.get(v.id).and_then(|g| g.as_deref())
    }

    /// Number of nodes a gradient reached. Each node is visited at most once
    /// by the reverse sweep, so this doubles as a structure probe in tests.
    pub fn n_visited(&self) -> usize {
        self.inner.iter().filter(|g| g.is_some()).count()
    }
}

/// Records operations eagerly and replays them in reverse for gradients.
///
/// Node ids are topologically ordered by construction (an op only refers to
/// earlier nodes), so one reverse sweep visits every node exactly once.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, details: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, details }
}

/// `C[m,n] = A[m,k] * B[k,n]`.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// `C[m,n] = A[m,k] * B[n,k]^T`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for t in 0..k {
                acc += arow[t] * brow[t];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// `C[k,n] = A[m,k]^T * B[m,n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let crow = &mut c[t * n..(t + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var { id: self.nodes.len() - 1 }
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Out-of-bounds flags of a [`Tape::bilinear_sample`] node.
    pub fn bilinear_oob(&self, v: Var) -> Option<&[bool]> {
        match &self.nodes[v.id].op {
            Op::BilinearSample { oob, .. } => Some(oob),
            _ => None,
        }
    }

    /// Per-point visibility flags of a [`Tape::project_camera`] node.
    pub fn project_valid(&self, v: Var) -> Option<&[bool]> {
        match &self.nodes[v.id].op {
            Op::ProjectCamera { valid, .. } => Some(valid),
            _ => None,
        }
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (ta, tb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                op_name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let t = &self.nodes[x.id].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * c).collect())?;
        Ok(self.push(out, Op::Scale(x, c)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let t = &self.nodes[x.id].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v + c).collect())?;
        Ok(self.push(out, Op::AddScalar(x)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let (tx, tb) = (&self.nodes[x.id].value, &self.nodes[b.id].value);
        if tx.ndim() != 2 || tb.ndim() != 1 || tx.dim(1) != tb.dim(0) {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let (r, c) = (tx.dim(0), tx.dim(1));
        let mut data = tx.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += tb.data()[j];
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var, NumericsError> {
        let (tx, tc) = (&self.nodes[x.id].value, &self.nodes[col.id].value);
        if tx.ndim() != 2 || tc.shape() != [tx.dim(0), 1] {
            return Err(shape_err(
                "mul_col",
                format!("{:?} * {:?}", tx.shape(), tc.shape()),
            ));
        }
        let (r, c) = (tx.dim(0), tx.dim(1));
        let mut data = tx.data().to_vec();
        for i in 0..r {
            let s = tc.data()[i];
            for j in 0..c {
                data[i * c + j] *= s;
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        Ok(self.push(out, Op::MulCol(x, col)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (ta, tb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        if ta.ndim() != 2 || tb.ndim() != 2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k) = (ta.dim(0), ta.dim(1));
        let (bk, n) = if trans_b {
            (tb.dim(1), tb.dim(0))
        } else {
            (tb.dim(0), tb.dim(1))
        };
        if k != bk {
            return Err(shape_err(
                "matmul",
                format!("inner dims {:?} x {:?} (trans_b={trans_b})", ta.shape(), tb.shape()),
            ));
        }
        let data = if trans_b {
            matmul_nt(ta.data(), tb.data(), m, k, n)
        } else {
            matmul_nn(ta.data(), tb.data(), m, k, n)
        };
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b }))
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let t = &self.nodes[x.id].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        Ok(self.push(out, op))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var, NumericsError> {
        if self.nodes[x.id].value.data().iter().any(|&v| v <= 0.0) {
            return Err(NumericsError::Domain {
                op: "ln",
                details: "input must be strictly positive".into(),
            });
        }
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, NumericsError> {
        if self.nodes[x.id].value.data().iter().any(|&v| v < 0.0) {
            return Err(NumericsError::Domain {
                op: "sqrt",
                details: "input must be non-negative".into(),
            });
        }
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// Clamp to `[lo, hi]`. Gradient passes through strictly interior values.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, NumericsError> {
        if lo >= hi || lo.is_nan() || hi.is_nan() {
            return Err(NumericsError::Domain {
                op: "clamp",
                details: format!("lo {lo} must be < hi {hi}"),
            });
        }
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let t = &self.nodes[x.id].value;
        if axis >= t.ndim() {
            return Err(shape_err(
                "softmax",
                format!("axis {axis} out of range for {:?}", t.shape()),
            ));
        }
        let d = t.dim(axis);
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let outer: usize = t.shape()[..axis].iter().product();
        let mut data = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * d + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..d {
                    mx = mx.max(data[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..d {
                    let e = (data[at(j)] - mx).exp();
                    data[at(j)] = e;
                    sum += e;
                }
                for j in 0..d {
                    data[at(j)] /= sum;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax { x, axis }))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s: f64 = self.nodes[x.id].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x)))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = &self.nodes[x.id].value;
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(x)))
    }

    pub fn sum_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = &self.nodes[x.id].value;
        if t.ndim() != 2 {
            return Err(shape_err("sum_rows", format!("{:?}", t.shape())));
        }
        let (r, c) = (t.dim(0), t.dim(1));
        let data = (0..r)
            .map(|i| t.data()[i * c..(i + 1) * c].iter().sum())
            .collect();
        let out = Tensor::new(vec![r, 1], data)?;
        Ok(self.push(out, Op::SumRows(x)))
    }

    pub fn sum_row_groups(&mut self, x: Var, k: usize) -> Result<Var, NumericsError> {
        let t = &self.nodes[x.id].value;
        if t.ndim() != 2 || k == 0 || !t.dim(0).is_multiple_of(k) {
            return Err(shape_err(
                "sum_row_groups",
                format!("{:?} with group size {k}", t.shape()),
            ));
        }
        let (r, c) = (t.dim(0), t.dim(1));
        let g = r / k;
        let mut data = vec![0.0; g * c];
        for i in 0..r {
            let gi = i / k;
            for j in 0..c {
                data[gi * c + j] += t.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![g, c], data)?;
        Ok(self.push(out, Op::SumRowGroups { x, k }))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        if xs.is_empty() {
            return Err(shape_err("concat_rows", "no inputs".into()));
        }
        let c = self.nodes[xs[0].id].value.dim(1);
        let mut rows = 0;
        for &x in xs {
            let t = &self.nodes[x.id].value;
            if t.ndim() != 2 || t.dim(1) != c {
                return Err(shape_err(
                    "concat_rows",
                    format!("expected [_, {c}], got {:?}", t.shape()),
                ));
            }
            rows += t.dim(0);
        }
        let mut data = Vec::with_capacity(rows * c);
        for &x in xs {
            data.extend_from_slice(self.nodes[x.id].value.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(xs.to_vec())))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        if xs.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        let r = self.nodes[xs[0].id].value.dim(0);
        let mut cols = 0;
        for &x in xs {
            let t = &self.nodes[x.id].value;
            if t.ndim() != 2 || t.dim(0) != r {
                return Err(shape_err(
                    "concat_cols",
                    format!("expected [{r}, _], got {:?}", t.shape()),
                ));
            }
            cols += t.dim(1);
        }
        let mut data = vec![0.0; r * cols];
        let mut off = 0;
        for &x in xs {
            let t = &self.nodes[x.id].value;
            let c = t.dim(1);
            for i in 0..r {
                data[i * cols + off..i * cols + off + c]
                    .copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let out = Tensor::new(vec![r, cols], data)?;
        Ok(self.push(out, Op::ConcatCols(xs.to_vec())))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let t = &self.nodes[x.id].value;
        if t.ndim() != 2 {
            return Err(shape_err("gather_rows", format!("{:?}", t.shape())));
        }
        let (r, c) = (t.dim(0), t.dim(1));
        if idx.is_empty() {
            return Err(shape_err("gather_rows", "empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} >= {r}")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let t = &self.nodes[x.id].value;
        if t.ndim() != 2 || idx.is_empty() {
            return Err(shape_err(
                "gather_cols",
                format!("{:?} with {} indices", t.shape(), idx.len()),
            ));
        }
        let (r, c) = (t.dim(0), t.dim(1));
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(shape_err("gather_cols", format!("col {bad} >= {c}")));
        }
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            for &j in idx {
                data.push(t.data()[i * c + j]);
            }
        }
        let out = Tensor::new(vec![r, idx.len()], data)?;
        Ok(self.push(out, Op::GatherCols { x, idx: idx.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = &self.nodes[x.id].value;
        let numel: usize = shape.iter().product();
        if numel != t.numel() || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", t.shape(), shape),
            ));
        }
        let out = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Bilinear samples of `grid: [H, W, C]` at `uv: [N, 2]` (u along width,
    /// v along height). Coordinates outside `[0, W-1] x [0, H-1]` produce a
    /// zero row and set the out-of-bounds flag (see [`Tape::bilinear_oob`]).
    pub fn bilinear_sample(&mut self, grid: Var, uv: Var) -> Result<Var, NumericsError> {
        let (tg, tu) = (&self.nodes[grid.id].value, &self.nodes[uv.id].value);
        if tg.ndim() != 3 || tu.ndim() != 2 || tu.dim(1) != 2 {
            return Err(shape_err(
                "bilinear_sample",
                format!("grid {:?}, uv {:?}", tg.shape(), tu.shape()),
            ));
        }
        let (h, w, c) = (tg.dim(0), tg.dim(1), tg.dim(2));
        let n = tu.dim(0);
        let mut data = vec![0.0; n * c];
        let mut oob = vec![false; n];
        for s in 0..n {
            let u = tu.data()[s * 2];
            let v = tu.data()[s * 2 + 1];
            if !(0.0..=(w - 1) as f64).contains(&u) || !(0.0..=(h - 1) as f64).contains(&v) {
                oob[s] = true;
                continue;
            }
            let (x0, y0, du, dv, x1, y1) = bilinear_cell(u, v, w, h);
            let g = tg.data();
            for ch in 0..c {
                let g00 = g[(y0 * w + x0) * c + ch];
                let g01 = g[(y0 * w + x1) * c + ch];
                let g10 = g[(y1 * w + x0) * c + ch];
                let g11 = g[(y1 * w + x1) * c + ch];
                data[s * c + ch] = (1.0 - dv) * ((1.0 - du) * g00 + du * g01)
                    + dv * ((1.0 - du) * g10 + du * g11);
            }
        }
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push(out, Op::BilinearSample { grid, uv, oob }))
    }

    /// 3x3 convolution over `x: [H, W, Cin]` with weights `[3, 3, Cin, Cout]`
    /// and bias `[Cout]`, zero padded to keep the resolution.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let (tx, tw, tb) = (
            &self.nodes[x.id].value,
            &self.nodes[w.id].value,
            &self.nodes[b.id].value,
        );
        if tx.ndim() != 3 || tw.ndim() != 4 || tw.dim(0) != 3 || tw.dim(1) != 3 {
            return Err(shape_err(
                "conv3x3",
                format!("x {:?}, w {:?}", tx.shape(), tw.shape()),
            ));
        }
        let (h, wd, ci) = (tx.dim(0), tx.dim(1), tx.dim(2));
        let co = tw.dim(3);
        if tw.dim(2) != ci || tb.shape() != [co] {
            return Err(shape_err(
                "conv3x3",
                format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let mut data = vec![0.0; h * wd * co];
        for i in 0..h {
            for j in 0..wd {
                for o in 0..co {
                    let mut acc = tb.data()[o];
                    for di in 0..3usize {
                        let pi = i as isize + di as isize - 1;
                        if pi < 0 || pi >= h as isize {
                            continue;
                        }
                        for dj in 0..3usize {
                            let pj = j as isize + dj as isize - 1;
                            if pj < 0 || pj >= wd as isize {
                                continue;
                            }
                            let xbase = ((pi as usize) * wd + pj as usize) * ci;
                            let wbase = ((di * 3) + dj) * ci * co;
                            for ch in 0..ci {
                                acc += tx.data()[xbase + ch] * tw.data()[wbase + ch * co + o];
                            }
                        }
                    }
                    data[(i * wd + j) * co + o] = acc;
                }
            }
        }
        let out = Tensor::new(vec![h, wd, co], data)?;
        Ok(self.push(out, Op::Conv3x3 { x, w, b }))
    }

    /// Row-wise outer product used by the lift step:
    /// `out[n, d*C + c] = depth[n, d] * feat[n, c]`.
    pub fn outer_lift(&mut self, depth: Var, feat: Var) -> Result<Var, NumericsError> {
        let (td, tf) = (&self.nodes[depth.id].value, &self.nodes[feat.id].value);
        if td.ndim() != 2 || tf.ndim() != 2 || td.dim(0) != tf.dim(0) {
            return Err(shape_err(
                "outer_lift",
                format!("depth {:?}, feat {:?}", td.shape(), tf.shape()),
            ));
        }
        let (n, d, c) = (td.dim(0), td.dim(1), tf.dim(1));
        let mut data = vec![0.0; n * d * c];
        for s in 0..n {
            for bd in 0..d {
                let dv = td.data()[s * d + bd];
                for ch in 0..c {
                    data[s * d * c + bd * c + ch] = dv * tf.data()[s * c + ch];
                }
            }
        }
        let out = Tensor::new(vec![n, d * c], data)?;
        Ok(self.push(out, Op::OuterLift { depth, feat }))
    }

    /// Scatter-adds rows of `x: [N, C]` into `cells` output rows following
    /// `idx`; rows mapped to `None` are dropped. Accumulation order is the
    /// input row order, so results are bit-reproducible.
    pub fn pool_by_index(
        &mut self,
        x: Var,
        idx: &[Option<usize>],
        cells: usize,
    ) -> Result<Var, NumericsError> {
        let t = &self.nodes[x.id].value;
        if t.ndim() != 2 || idx.len() != t.dim(0) || cells == 0 {
            return Err(shape_err(
                "pool_by_index",
                format!("x {:?}, {} indices, {cells} cells", t.shape(), idx.len()),
            ));
        }
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= cells) {
            return Err(shape_err("pool_by_index", format!("cell {bad} >= {cells}")));
        }
        let c = t.dim(1);
        let mut data = vec![0.0; cells * c];
        for (n, cell) in idx.iter().enumerate() {
            if let Some(ci) = cell {
                for ch in 0..c {
                    data[ci * c + ch] += t.data()[n * c + ch];
                }
            }
        }
        let out = Tensor::new(vec![cells, c], data)?;
        Ok(self.push(out, Op::PoolByIndex { x, idx: idx.to_vec() }))
    }

    /// Box-frame keypoints for each anchor. `anchors: [M, 11]` hold
    /// `(x, y, z, ln w, ln h, ln l, sin yaw, cos yaw, vx, vy, vz)`;
    /// `offsets: [M, K*3]` are box-normalized (an offset of +-1 reaches the
    /// face along that box axis). Output is `[M*K, 3]` in the ego frame.
    pub fn gen_keypoints(&mut self, anchors: Var, offsets: Var) -> Result<Var, NumericsError> {
        let (ta, to) = (&self.nodes[anchors.id].value, &self.nodes[offsets.id].value);
        if ta.ndim() != 2 || ta.dim(1) != 11 || to.ndim() != 2 || to.dim(0) != ta.dim(0)
            || to.dim(1) % 3 != 0 || to.dim(1) == 0
        {
            return Err(shape_err(
                "gen_keypoints",
                format!("anchors {:?}, offsets {:?}", ta.shape(), to.shape()),
            ));
        }
        let m = ta.dim(0);
        let k = to.dim(1) / 3;
        let mut data = vec![0.0; m * k * 3];
        for i in 0..m {
            let a = &ta.data()[i * 11..(i + 1) * 11];
            let (el, ew, eh) = (a[5].exp(), a[3].exp(), a[4].exp());
            let (s, c) = (a[6], a[7]);
            for q in 0..k {
                let o = &to.data()[i * k * 3 + q * 3..i * k * 3 + q * 3 + 3];
                let lx = o[0] * el * 0.5;
                let ly = o[1] * ew * 0.5;
                let lz = o[2] * eh * 0.5;
                let base = (i * k + q) * 3;
                data[base] = a[0] + c * lx - s * ly;
                data[base + 1] = a[1] + s * lx + c * ly;
                data[base + 2] = a[2] + lz;
            }
        }
        let out = Tensor::new(vec![m * k, 3], data)?;
        Ok(self.push(out, Op::GenKeypoints { anchors, offsets }))
    }

    /// Projects ego-frame points into a camera, returning full-resolution
    /// pixel coordinates `[N, 2]`. Points at or behind the depth epsilon are
    /// flagged invalid (see [`Tape::project_valid`]) and mapped far outside
    /// the image so downstream sampling treats them as out of view.
    pub fn project_camera(
        &mut self,
        pts: Var,
        cam: &PinholeParams,
    ) -> Result<Var, NumericsError> {
        let t = &self.nodes[pts.id].value;
        if t.ndim() != 2 || t.dim(1) != 3 {
            return Err(shape_err("project_camera", format!("{:?}", t.shape())));
        }
        let n = t.dim(0);
        let mut data = vec![0.0; n * 2];
        let mut valid = vec![false; n];
        for i in 0..n {
            let p = [t.data()[i * 3], t.data()[i * 3 + 1], t.data()[i * 3 + 2]];
            let q = cam.apply_pre(p);
            let pc = [
                mat3_mul_vec(&cam.rot, q)[0] + cam.trans[0],
                mat3_mul_vec(&cam.rot, q)[1] + cam.trans[1],
                mat3_mul_vec(&cam.rot, q)[2] + cam.trans[2],
            ];
            if pc[2] > cam.eps_depth {
                valid[i] = true;
                let mut u = cam.fx * pc[0] / pc[2] + cam.cx;
                if cam.flip_u {
                    u = (cam.width - 1) as f64 - u;
                }
                data[i * 2] = u;
                data[i * 2 + 1] = cam.fy * pc[1] / pc[2] + cam.cy;
            } else {
                data[i * 2] = -1.0e9;
                data[i * 2 + 1] = -1.0e9;
            }
        }
        let out = Tensor::new(vec![n, 2], data)?;
        Ok(self.push(
            out,
            Op::ProjectCamera { pts, cam: Box::new(cam.clone()), valid },
        ))
    }

    /// Reverse sweep from a scalar `root`. Fails on a non-scalar root or if
    /// any node holds a non-finite value.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericsError> {
        if self.nodes[root.id].value.numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("root must be scalar, got {:?}", self.nodes[root.id].value.shape()),
            ));
        }
        for node in &self.nodes[..=root.id] {
            if !node.value.is_finite() {
                return Err(NumericsError::NonFinite("backward"));
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
        }
        Ok(Gradients { inner: grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]) {
        let slot = grads[v.id].get_or_insert_with(|| vec![0.0; self.nodes[v.id].value.numel()]);
        for (s, c) in slot.iter_mut().zip(contrib) {
            *s += c;
        }
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let value = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                self.acc(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.nodes[a.id].value.data(), self.nodes[b.id].value.data());
                let da: Vec<f64> = g.iter().zip(tb).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<f64> = g.iter().zip(ta).map(|(&gv, &av)| gv * av).collect();
                self.acc(grads, *a, &da);
                self.acc(grads, *b, &db);
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.nodes[a.id].value.data(), self.nodes[b.id].value.data());
                let da: Vec<f64> = g.iter().zip(tb).map(|(&gv, &bv)| gv / bv).collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(ta.iter().zip(tb))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect();
                self.acc(grads, *a, &da);
                self.acc(grads, *b, &db);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|&v| v * c).collect();
                self.acc(grads, *x, &dx);
            }
            Op::AddScalar(x) => self.acc(grads, *x, g),
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g);
                let c = self.nodes[b.id].value.numel();
                let mut db = vec![0.0; c];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % c] += gv;
                }
                self.acc(grads, *b, &db);
            }
            Op::MulCol(x, col) => {
                let tx = self.nodes[x.id].value.data();
                let tc = self.nodes[col.id].value.data();
                let c = self.nodes[x.id].value.dim(1);
                let dx: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * tc[i / c])
                    .collect();
                let mut dc = vec![0.0; tc.len()];
                for (i, &gv) in g.iter().enumerate() {
                    dc[i / c] += gv * tx[i];
                }
                self.acc(grads, *x, &dx);
                self.acc(grads, *col, &dc);
            }
            Op::MatMul { a, b, trans_b } => {
                let ta = &self.nodes[a.id].value;
                let tb = &self.nodes[b.id].value;
                let (m, k) = (ta.dim(0), ta.dim(1));
                let n = value.dim(1);
                if *trans_b {
                    // C = A * B^T, B stored [n, k].
                    let da = matmul_nn(g, tb.data(), m, n, k);
                    let db = matmul_tn(g, ta.data(), m, n, k);
                    self.acc(grads, *a, &da);
                    self.acc(grads, *b, &db);
                } else {
                    let da = matmul_nt(g, tb.data(), m, n, k);
                    let db = matmul_tn(ta.data(), g, m, k, n);
                    self.acc(grads, *a, &da);
                    self.acc(grads, *b, &db);
                }
            }
            Op::Relu(x) => {
                let tx = self.nodes[x.id].value.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(tx)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.acc(grads, *x, &dx);
            }
            Op::Sigmoid(x) => {
                let s = value.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(s)
                    .map(|(&gv, &sv)| gv * sv * (1.0 - sv))
                    .collect();
                self.acc(grads, *x, &dx);
            }
            Op::Exp(x) => {
                let e = value.data();
                let dx: Vec<f64> = g.iter().zip(e).map(|(&gv, &ev)| gv * ev).collect();
                self.acc(grads, *x, &dx);
            }
            Op::Ln(x) => {
                let tx = self.nodes[x.id].value.data();
                let dx: Vec<f64> = g.iter().zip(tx).map(|(&gv, &xv)| gv / xv).collect();
                self.acc(grads, *x, &dx);
            }
            Op::Sqrt(x) => {
                let s = value.data();
                let dx: Vec<f64> = g.iter().zip(s).map(|(&gv, &sv)| gv / (2.0 * sv)).collect();
                self.acc(grads, *x, &dx);
            }
            Op::Abs(x) => {
                let tx = self.nodes[x.id].value.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(tx)
                    .map(|(&gv, &xv)| gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                self.acc(grads, *x, &dx);
            }
            Op::Clamp { x, lo, hi } => {
                let tx = self.nodes[x.id].value.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(tx)
                    .map(|(&gv, &xv)| if xv > *lo && xv < *hi { gv } else { 0.0 })
                    .collect();
                self.acc(grads, *x, &dx);
            }
            Op::Softmax { x, axis } => {
                let s = value.data();
                let t = &self.nodes[x.id].value;
                let d = t.dim(*axis);
                let inner: usize = t.shape()[*axis + 1..].iter().product();
                let outer: usize = t.shape()[..*axis].iter().product();
                let mut dx = vec![0.0; s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * d + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..d {
                            dot += g[at(j)] * s[at(j)];
                        }
                        for j in 0..d {
                            dx[at(j)] = s[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::SumAll(x) => {
                let n = self.nodes[x.id].value.numel();
                self.acc(grads, *x, &vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.id].value.numel();
                self.acc(grads, *x, &vec![g[0] / n as f64; n]);
            }
            Op::SumRows(x) => {
                let t = &self.nodes[x.id].value;
                let (r, c) = (t.dim(0), t.dim(1));
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[i];
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::SumRowGroups { x, k } => {
                let t = &self.nodes[x.id].value;
                let (r, c) = (t.dim(0), t.dim(1));
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let gi = i / k;
                    for j in 0..c {
                        dx[i * c + j] = g[gi * c + j];
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.nodes[x.id].value.numel();
                    self.acc(grads, x, &g[off..off + n]);
                    off += n;
                }
            }
            Op::ConcatCols(xs) => {
                let r = value.dim(0);
                let cols = value.dim(1);
                let mut off = 0;
                for &x in xs {
                    let c = self.nodes[x.id].value.dim(1);
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        dx[i * c..(i + 1) * c]
                            .copy_from_slice(&g[i * cols + off..i * cols + off + c]);
                    }
                    self.acc(grads, x, &dx);
                    off += c;
                }
            }
            Op::GatherRows { x, idx } => {
                let t = &self.nodes[x.id].value;
                let c = t.dim(1);
                let mut dx = vec![0.0; t.numel()];
                for (out_i, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += g[out_i * c + j];
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::GatherCols { x, idx } => {
                let t = &self.nodes[x.id].value;
                let (r, c) = (t.dim(0), t.dim(1));
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for (out_j, &src) in idx.iter().enumerate() {
                        dx[i * c + src] += g[i * idx.len() + out_j];
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::Reshape(x) => self.acc(grads, *x, g),
            Op::BilinearSample { grid, uv, oob } => {
                let tg = &self.nodes[grid.id].value;
                let tu = &self.nodes[uv.id].value;
                let (h, w, c) = (tg.dim(0), tg.dim(1), tg.dim(2));
                let mut dgrid = vec![0.0; tg.numel()];
                let mut duv = vec![0.0; tu.numel()];
                for s in 0..tu.dim(0) {
                    if oob[s] {
                        continue;
                    }
                    let u = tu.data()[s * 2];
                    let v = tu.data()[s * 2 + 1];
                    let (x0, y0, du, dv, x1, y1) = bilinear_cell(u, v, w, h);
                    let gd = tg.data();
                    let mut gu = 0.0;
                    let mut gv = 0.0;
                    for ch in 0..c {
                        let gout = g[s * c + ch];
                        let g00 = gd[(y0 * w + x0) * c + ch];
                        let g01 = gd[(y0 * w + x1) * c + ch];
                        let g10 = gd[(y1 * w + x0) * c + ch];
                        let g11 = gd[(y1 * w + x1) * c + ch];
                        dgrid[(y0 * w + x0) * c + ch] += gout * (1.0 - dv) * (1.0 - du);
                        dgrid[(y0 * w + x1) * c + ch] += gout * (1.0 - dv) * du;
                        dgrid[(y1 * w + x0) * c + ch] += gout * dv * (1.0 - du);
                        dgrid[(y1 * w + x1) * c + ch] += gout * dv * du;
                        gu += gout * ((1.0 - dv) * (g01 - g00) + dv * (g11 - g10));
                        gv += gout * ((1.0 - du) * (g10 - g00) + du * (g11 - g01));
                    }
                    duv[s * 2] += gu;
                    duv[s * 2 + 1] += gv;
                }
                self.acc(grads, *grid, &dgrid);
                self.acc(grads, *uv, &duv);
            }
            Op::Conv3x3 { x, w, b } => {
                let tx = &self.nodes[x.id].value;
                let tw = &self.nodes[w.id].value;
                let (h, wd, ci) = (tx.dim(0), tx.dim(1), tx.dim(2));
                let co = tw.dim(3);
                let mut dx = vec![0.0; tx.numel()];
                let mut dw = vec![0.0; tw.numel()];
                let mut db = vec![0.0; co];
                for i in 0..h {
                    for j in 0..wd {
                        for o in 0..co {
                            let gout = g[(i * wd + j) * co + o];
                            if gout == 0.0 {
                                continue;
                            }
                            db[o] += gout;
                            for di in 0..3usize {
                                let pi = i as isize + di as isize - 1;
                                if pi < 0 || pi >= h as isize {
                                    continue;
                                }
                                for dj in 0..3usize {
                                    let pj = j as isize + dj as isize - 1;
                                    if pj < 0 || pj >= wd as isize {
                                        continue;
                                    }
                                    let xbase = ((pi as usize) * wd + pj as usize) * ci;
                                    let wbase = ((di * 3) + dj) * ci * co;
                                    for ch in 0..ci {
                                        dx[xbase + ch] += gout * tw.data()[wbase + ch * co + o];
                                        dw[wbase + ch * co + o] += gout * tx.data()[xbase + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, &dx);
                self.acc(grads, *w, &dw);
                self.acc(grads, *b, &db);
            }
            Op::OuterLift { depth, feat } => {
                let td = &self.nodes[depth.id].value;
                let tf = &self.nodes[feat.id].value;
                let (n, d, c) = (td.dim(0), td.dim(1), tf.dim(1));
                let mut dd = vec![0.0; n * d];
                let mut df = vec![0.0; n * c];
                for s in 0..n {
                    for bd in 0..d {
                        let dv = td.data()[s * d + bd];
                        for ch in 0..c {
                            let gout = g[s * d * c + bd * c + ch];
                            dd[s * d + bd] += gout * tf.data()[s * c + ch];
                            df[s * c + ch] += gout * dv;
                        }
                    }
                }
                self.acc(grads, *depth, &dd);
                self.acc(grads, *feat, &df);
            }
            Op::PoolByIndex { x, idx } => {
                let t = &self.nodes[x.id].value;
                let c = t.dim(1);
                let mut dx = vec![0.0; t.numel()];
                for (n, cell) in idx.iter().enumerate() {
                    if let Some(ci) = cell {
                        dx[n * c..(n + 1) * c].copy_from_slice(&g[ci * c..(ci + 1) * c]);
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::GenKeypoints { anchors, offsets } => {
                let ta = &self.nodes[anchors.id].value;
                let to = &self.nodes[offsets.id].value;
                let m = ta.dim(0);
                let k = to.dim(1) / 3;
                let mut da = vec![0.0; ta.numel()];
                let mut dof = vec![0.0; to.numel()];
                for i in 0..m {
                    let a = &ta.data()[i * 11..(i + 1) * 11];
                    let (el, ew, eh) = (a[5].exp(), a[3].exp(), a[4].exp());
                    let (s, c) = (a[6], a[7]);
                    for q in 0..k {
                        let o = &to.data()[i * k * 3 + q * 3..i * k * 3 + q * 3 + 3];
                        let lx = o[0] * el * 0.5;
                        let ly = o[1] * ew * 0.5;
                        let lz = o[2] * eh * 0.5;
                        let base = (i * k + q) * 3;
                        let (gx, gy, gz) = (g[base], g[base + 1], g[base + 2]);
                        da[i * 11] += gx;
                        da[i * 11 + 1] += gy;
                        da[i * 11 + 2] += gz;
                        let dlx = c * gx + s * gy;
                        let dly = -s * gx + c * gy;
                        let dlz = gz;
                        da[i * 11 + 6] += -ly * gx + lx * gy;
                        da[i * 11 + 7] += lx * gx + ly * gy;
                        // d exp(t)/dt = exp(t), so d/d(ln dim) scales by the
                        // local offset itself.
                        da[i * 11 + 5] += dlx * lx;
                        da[i * 11 + 3] += dly * ly;
                        da[i * 11 + 4] += dlz * lz;
                        dof[i * k * 3 + q * 3] += dlx * el * 0.5;
                        dof[i * k * 3 + q * 3 + 1] += dly * ew * 0.5;
                        dof[i * k * 3 + q * 3 + 2] += dlz * eh * 0.5;
                    }
                }
                self.acc(grads, *anchors, &da);
                self.acc(grads, *offsets, &dof);
            }
            Op::ProjectCamera { pts, cam, valid } => {
                let t = &self.nodes[pts.id].value;
                let mut dp = vec![0.0; t.numel()];
                let su = if cam.flip_u { -1.0 } else { 1.0 };
                for i in 0..t.dim(0) {
                    if !valid[i] {
                        continue;
                    }
                    let p = [t.data()[i * 3], t.data()[i * 3 + 1], t.data()[i * 3 + 2]];
                    let q = cam.apply_pre(p);
                    let r = mat3_mul_vec(&cam.rot, q);
                    let pc = [r[0] + cam.trans[0], r[1] + cam.trans[1], r[2] + cam.trans[2]];
                    let (gu, gv) = (g[i * 2], g[i * 2 + 1]);
                    let z = pc[2];
                    let g_pc = [
                        gu * su * cam.fx / z,
                        gv * cam.fy / z,
                        -gu * su * cam.fx * pc[0] / (z * z) - gv * cam.fy * pc[1] / (z * z),
                    ];
                    let g_q = mat3_tmul_vec(&cam.rot, g_pc);
                    let g_p = match &cam.pre {
                        None => g_q,
                        Some(m) => mat3_tmul_vec(m, g_q),
                    };
                    dp[i * 3] += g_p[0];
                    dp[i * 3 + 1] += g_p[1];
                    dp[i * 3 + 2] += g_p[2];
                }
                self.acc(grads, *pts, &dp);
            }
        }
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

/// Lattice cell and fractional offsets for bilinear interpolation, with the
/// upper indices clamped so exact upper-edge coordinates stay in bounds
/// (their weight is zero there).
fn bilinear_cell(u: f64, v: f64, w: usize, h: usize) -> (usize, usize, f64, f64, usize, usize) {
    let x0 = (u.floor() as usize).min(w - 1);
    let y0 = (v.floor() as usize).min(h - 1);
    let du = u - x0 as f64;
    let dv = v - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    (x0, y0, du, dv, x1, y1)
}

#[cfg(test)]
mod tests {
    use super::super::check::grad_check;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn softmax_of_one_two_three_matches_direct_computation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = tape.softmax(x, 1).unwrap();
        let got = tape.value(s).data();
        // exp(1..3) / sum, evaluated directly.
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let total: f64 = e.iter().sum();
        for (g, want) in got.iter().zip(e.iter().map(|v| v / total)) {
            assert!((g - want).abs() < 1e-15);
        }
        let sum: f64 = got.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_lanes_sum_to_one_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for axis in 0..3 {
            let mut tape = Tape::new();
            let x = tape.leaf(rand_tensor(&mut rng, &[3, 4, 5]));
            let s = tape.softmax(x, axis).unwrap();
            let t = tape.value(s);
            let d = t.dim(axis);
            let inner: usize = t.shape()[axis + 1..].iter().product();
            let outer: usize = t.shape()[..axis].iter().product();
            for o in 0..outer {
                for i in 0..inner {
                    let sum: f64 = (0..d).map(|j| t.data()[(o * d + j) * inner + i]).sum();
                    assert!((sum - 1.0).abs() < 1e-12, "axis {axis}: sum {sum}");
                }
            }
        }
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap().with_grad());
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_visits_each_node_exactly_once() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.5, 2.0]).unwrap().with_grad());
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.mul(a, a).unwrap();
        let c = tape.add(a, b).unwrap();
        let loss = tape.sum_all(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        // Every node in this chain receives a gradient, and the diamond
        // through `a` accumulates: d/da (a + a^2) = 1 + 2a.
        assert_eq!(grads.n_visited(), tape.n_nodes());
        let want: Vec<f64> = [0.5f64, 2.0].iter().map(|&v| (1.0 + 4.0 * v) * 2.0).collect();
        let got = grads.get(x).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_finite_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![f64::NAN]).unwrap());
        let loss = tape.sum_all(x).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(NumericsError::NonFinite(_))
        ));
    }

    #[test]
    fn bilinear_matches_four_neighbor_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid_t = rand_tensor(&mut rng, &[4, 4, 2]);
        let (u, v) = (1.25, 2.75);
        let mut tape = Tape::new();
        let grid = tape.leaf(grid_t.clone());
        let uv = tape.leaf(Tensor::new(vec![1, 2], vec![u, v]).unwrap());
        let out = tape.bilinear_sample(grid, uv).unwrap();
        // Oracle: direct four-neighbor interpolation with du=0.25, dv=0.75.
        let g = |y: usize, x: usize, c: usize| grid_t.data()[(y * 4 + x) * 2 + c];
        for c in 0..2 {
            let want = (1.0 - 0.75) * ((1.0 - 0.25) * g(2, 1, c) + 0.25 * g(2, 2, c))
                + 0.75 * ((1.0 - 0.25) * g(3, 1, c) + 0.25 * g(3, 2, c));
            assert!((tape.value(out).data()[c] - want).abs() < 1e-14);
        }
        assert_eq!(tape.bilinear_oob(out).unwrap(), &[false]);
    }

    #[test]
    fn bilinear_out_of_bounds_returns_zero_and_flags() {
        let mut tape = Tape::new();
        let grid = tape.leaf(Tensor::full(&[3, 3, 1], 5.0));
        let uv = tape.leaf(
            Tensor::new(vec![3, 2], vec![-0.1, 1.0, 1.0, 2.0001, 2.0, 1.0]).unwrap(),
        );
        let out = tape.bilinear_sample(grid, uv).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 5.0]);
        assert_eq!(tape.bilinear_oob(out).unwrap(), &[true, true, false]);
    }

    #[test]
    fn exact_upper_edge_coordinate_is_in_bounds() {
        let mut tape = Tape::new();
        let grid = tape.leaf(Tensor::from_fn(&[2, 3, 1], |i| i as f64));
        let uv = tape.leaf(Tensor::new(vec![1, 2], vec![2.0, 1.0]).unwrap());
        let out = tape.bilinear_sample(grid, uv).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0]);
        assert_eq!(tape.bilinear_oob(out).unwrap(), &[false]);
    }

    #[test]
    fn projection_flags_points_behind_camera() {
        let cam = PinholeParams {
            fx: 50.0,
            fy: 50.0,
            cx: 32.0,
            cy: 24.0,
            width: 64,
            height: 48,
            rot: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            trans: [0.0; 3],
            pre: None,
            flip_u: false,
            eps_depth: 1e-6,
        };
        let mut tape = Tape::new();
        let pts = tape.leaf(
            Tensor::new(vec![2, 3], vec![0.1, 0.2, 5.0, 0.1, 0.2, -5.0]).unwrap(),
        );
        let uv = tape.project_camera(pts, &cam).unwrap();
        assert_eq!(tape.project_valid(uv).unwrap(), &[true, false]);
        let got = tape.value(uv).data();
        assert!((got[0] - (50.0 * 0.1 / 5.0 + 32.0)).abs() < 1e-12);
        assert!((got[1] - (50.0 * 0.2 / 5.0 + 24.0)).abs() < 1e-12);
        assert!(got[2] < -1.0e8);
    }

    /// Central-difference validation of every registered op.
    #[test]
    fn op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tol = 1e-5;
        let eps = 1e-5;

        // Binary elementwise ops and broadcasts, checked per input by holding
        // the other input fixed.
        let other = rand_tensor(&mut rng, &[3, 4]);
        let positive = Tensor::from_fn(&[3, 4], |i| 0.5 + 0.1 * i as f64);
        for (name, f) in [
            (
                "add",
                Box::new({
                    let o = other.clone();
                    move |t: &mut Tape, x: Var| {
                        let o = t.leaf(o.clone());
                        let y = t.add(x, o)?;
                        t.sum_all(y)
                    }
                }) as Box<dyn Fn(&mut Tape, Var) -> Result<Var, NumericsError>>,
            ),
            (
                "sub",
                Box::new({
                    let o = other.clone();
                    move |t: &mut Tape, x: Var| {
                        let o = t.leaf(o.clone());
                        let y = t.sub(o, x)?;
                        t.sum_all(y)
                    }
                }),
            ),
            (
                "mul",
                Box::new({
                    let o = other.clone();
                    move |t: &mut Tape, x: Var| {
                        let o = t.leaf(o.clone());
                        let y = t.mul(x, o)?;
                        t.sum_all(y)
                    }
                }),
            ),
            (
                "div_num",
                Box::new({
                    let o = positive.clone();
                    move |t: &mut Tape, x: Var| {
                        let o = t.leaf(o.clone());
                        let y = t.div(x, o)?;
                        t.sum_all(y)
                    }
                }),
            ),
            (
                "div_den",
                Box::new({
                    let o = other.clone();
                    move |t: &mut Tape, x: Var| {
                        let o = t.leaf(o.clone());
                        let half = t.add_scalar(x, 3.0)?; // keep denominator away from 0
                        let y = t.div(o, half)?;
                        t.sum_all(y)
                    }
                }),
            ),
            (
                "scale_addscalar",
                Box::new(|t: &mut Tape, x: Var| {
                    let y = t.scale(x, -1.7)?;
                    let z = t.add_scalar(y, 0.3)?;
                    t.sum_all(z)
                }),
            ),
            (
                "sigmoid",
                Box::new(|t: &mut Tape, x: Var| {
                    let y = t.sigmoid(x)?;
                    t.sum_all(y)
                }),
            ),
            (
                "exp",
                Box::new(|t: &mut Tape, x: Var| {
                    let y = t.exp(x)?;
                    t.sum_all(y)
                }),
            ),
            (
                "softmax",
                Box::new(|t: &mut Tape, x: Var| {
                    let s = t.softmax(x, 1)?;
                    let w = t.leaf(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin()));
                    let y = t.mul(s, w)?;
                    t.sum_all(y)
                }),
            ),
            (
                "mean_sumrows",
                Box::new(|t: &mut Tape, x: Var| {
                    let r = t.sum_rows(x)?;
                    t.mean_all(r)
                }),
            ),
            (
                "reshape_gather",
                Box::new(|t: &mut Tape, x: Var| {
                    let r = t.reshape(x, &[4, 3])?;
                    let gr = t.gather_rows(r, &[0, 2, 2])?;
                    let gc = t.gather_cols(gr, &[1, 1, 0])?;
                    t.sum_all(gc)
                }),
            ),
            (
                "sum_row_groups",
                Box::new(|t: &mut Tape, x: Var| {
                    let r = t.reshape(x, &[6, 2])?;
                    let s = t.sum_row_groups(r, 3)?;
                    let w = t.leaf(Tensor::from_fn(&[2, 2], |i| 1.0 + i as f64));
                    let y = t.mul(s, w)?;
                    t.sum_all(y)
                }),
            ),
        ] {
            let x = rand_tensor(&mut rng, &[3, 4]);
            let report = grad_check(&f, &x, eps, tol).unwrap();
            assert!(report.pass, "{name}: max rel err {}", report.max_rel_err);
        }

        // Ops needing constrained inputs.
        let pos = Tensor::from_fn(&[2, 3], |i| 0.4 + 0.3 * i as f64);
        for (name, f) in [
            (
                "ln",
                Box::new(|t: &mut Tape, x: Var| {
                    let y = t.ln(x)?;
                    t.sum_all(y)
                }) as Box<dyn Fn(&mut Tape, Var) -> Result<Var, NumericsError>>,
            ),
            (
                "sqrt",
                Box::new(|t: &mut Tape, x: Var| {
                    let y = t.sqrt(x)?;
                    t.sum_all(y)
                }),
            ),
        ] {
            let report = grad_check(&f, &pos, eps, tol).unwrap();
            assert!(report.pass, "{name}: max rel err {}", report.max_rel_err);
        }

        // relu/abs/clamp: keep evaluation away from their kinks.
        let offside = Tensor::from_fn(&[2, 3], |i| if i % 2 == 0 { 0.8 + i as f64 } else { -0.9 - i as f64 });
        for (name, f) in [
            (
                "relu",
                Box::new(|t: &mut Tape, x: Var| {
                    let y = t.relu(x)?;
                    t.sum_all(y)
                }) as Box<dyn Fn(&mut Tape, Var) -> Result<Var, NumericsError>>,
            ),
            (
                "abs",
                Box::new(|t: &mut Tape, x: Var| {
                    let y = t.abs(x)?;
                    t.sum_all(y)
                }),
            ),
            (
                "clamp",
                Box::new(|t: &mut Tape, x: Var| {
                    let y = t.clamp(x, -2.0, 2.0)?;
                    let z = t.mul(y, y)?;
                    t.sum_all(z)
                }),
            ),
        ] {
            let report = grad_check(&f, &offside, eps, tol).unwrap();
            assert!(report.pass, "{name}: max rel err {}", report.max_rel_err);
        }

        // matmul, both orientations, both operands.
        let b_mat = rand_tensor(&mut rng, &[4, 2]);
        let report = grad_check(
            |t, x| {
                let b = t.leaf(b_mat.clone());
                let y = t.matmul(x, b)?;
                t.sum_all(y)
            },
            &rand_tensor(&mut rng, &[3, 4]),
            eps,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "matmul lhs: {}", report.max_rel_err);

        let a_mat = rand_tensor(&mut rng, &[3, 4]);
        let report = grad_check(
            |t, x| {
                let a = t.leaf(a_mat.clone());
                let y = t.matmul(a, x)?;
                t.sum_all(y)
            },
            &rand_tensor(&mut rng, &[4, 2]),
            eps,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "matmul rhs: {}", report.max_rel_err);

        let report = grad_check(
            |t, x| {
                let a = t.leaf(a_mat.clone());
                let y = t.matmul_tb(a, x)?;
                t.sum_all(y)
            },
            &rand_tensor(&mut rng, &[2, 4]),
            eps,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "matmul_tb rhs: {}", report.max_rel_err);

        // add_bias / mul_col.
        let report = grad_check(
            |t, x| {
                let m = t.leaf(Tensor::from_fn(&[3, 2], |i| i as f64 * 0.21 - 0.4));
                let y = t.add_bias(m, x)?;
                let z = t.mul(y, y)?;
                t.sum_all(z)
            },
            &rand_tensor(&mut rng, &[2]),
            eps,
            tol,
        )
        .unwrap();
        assert!(report.pass, "add_bias: {}", report.max_rel_err);

        let report = grad_check(
            |t, x| {
                let m = t.leaf(Tensor::from_fn(&[3, 2], |i| i as f64 * 0.13 + 0.2));
                let y = t.mul_col(m, x)?;
                let z = t.mul(y, y)?;
                t.sum_all(z)
            },
            &rand_tensor(&mut rng, &[3, 1]),
            eps,
            tol,
        )
        .unwrap();
        assert!(report.pass, "mul_col: {}", report.max_rel_err);

        // concat.
        let report = grad_check(
            |t, x| {
                let o = t.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.31));
                let rows = t.concat_rows(&[x, o])?;
                let cols = t.concat_cols(&[rows, rows])?;
                let w = t.leaf(Tensor::from_fn(&[4, 6], |i| (i as f64 * 0.11).cos()));
                let y = t.mul(cols, w)?;
                t.sum_all(y)
            },
            &rand_tensor(&mut rng, &[2, 3]),
            eps,
            tol,
        )
        .unwrap();
        assert!(report.pass, "concat: {}", report.max_rel_err);

        // bilinear sample, both the grid and the coordinates.
        let uv_t = Tensor::new(vec![3, 2], vec![0.3, 0.7, 1.4, 1.1, 2.6, 0.2]).unwrap();
        let report = grad_check(
            |t, x| {
                let g3 = t.reshape(x, &[2, 4, 2])?;
                let uv = t.leaf(uv_t.clone());
                let s = t.bilinear_sample(g3, uv)?;
                let w = t.leaf(Tensor::from_fn(&[3, 2], |i| 1.0 + 0.5 * i as f64));
                let y = t.mul(s, w)?;
                t.sum_all(y)
            },
            &rand_tensor(&mut rng, &[2, 8]),
            eps,
            tol,
        )
        .unwrap();
        assert!(report.pass, "bilinear grid: {}", report.max_rel_err);

        let grid_t = rand_tensor(&mut rng, &[3, 4, 2]);
        let report = grad_check(
            |t, x| {
                let g = t.leaf(grid_t.clone());
                let s = t.bilinear_sample(g, x)?;
                let w = t.leaf(Tensor::from_fn(&[2, 2], |i| 1.0 - 0.3 * i as f64));
                let y = t.mul(s, w)?;
                t.sum_all(y)
            },
            &Tensor::new(vec![2, 2], vec![0.4, 1.3, 2.2, 0.6]).unwrap(),
            eps,
            tol,
        )
        .unwrap();
        assert!(report.pass, "bilinear uv: {}", report.max_rel_err);

        // conv3x3: input, weights, bias.
        let conv_w = rand_tensor(&mut rng, &[3, 3, 2, 3]);
        let conv_b = rand_tensor(&mut rng, &[3]);
        let conv_x = rand_tensor(&mut rng, &[3, 4, 2]);
        let report = grad_check(
            |t, x| {
                let w = t.leaf(conv_w.clone());
                let b = t.leaf(conv_b.clone());
                let y = t.conv3x3(x, w, b)?;
                let z = t.mul(y, y)?;
                t.sum_all(z)
            },
            &conv_x,
            eps,
            tol,
        )
        .unwrap();
        assert!(report.pass, "conv3x3 x: {}", report.max_rel_err);
        let report = grad_check(
            |t, x| {
                let xi = t.leaf(conv_x.clone());
                let b = t.leaf(conv_b.clone());
                let y = t.conv3x3(xi, x, b)?;
                let z = t.mul(y, y)?;
                t.sum_all(z)
            },
            &conv_w,
            eps,
            tol,
        )
        .unwrap();
        assert!(report.pass, "conv3x3 w: {}", report.max_rel_err);
        let report = grad_check(
            |t, x| {
                let xi = t.leaf(conv_x.clone());
                let w = t.leaf(conv_w.clone());
                let y = t.conv3x3(xi, w, x)?;
                let z = t.mul(y, y)?;
                t.sum_all(z)
            },
            &conv_b,
            eps,
            tol,
        )
        .unwrap();
        assert!(report.pass, "conv3x3 b: {}", report.max_rel_err);

        // outer_lift, both factors.
        let feat_t = rand_tensor(&mut rng, &[4, 3]);
        let report = grad_check(
            |t, x| {
                let f = t.leaf(feat_t.clone());
                let y = t.outer_lift(x, f)?;
                let w = t.leaf(Tensor::from_fn(&[4, 6], |i| (0.19 * i as f64).sin()));
                let z = t.mul(y, w)?;
                t.sum_all(z)
            },
            &rand_tensor(&mut rng, &[4, 2]),
            eps,
            tol,
        )
        .unwrap();
        assert!(report.pass, "outer_lift depth: {}", report.max_rel_err);
        let depth_t = rand_tensor(&mut rng, &[4, 2]);
        let report = grad_check(
            |t, x| {
                let d = t.leaf(depth_t.clone());
                let y = t.outer_lift(d, x)?;
                let w = t.leaf(Tensor::from_fn(&[4, 6], |i| (0.23 * i as f64).cos()));
                let z = t.mul(y, w)?;
                t.sum_all(z)
            },
            &feat_t,
            eps,
            tol,
        )
        .unwrap();
        assert!(report.pass, "outer_lift feat: {}", report.max_rel_err);

        // pool_by_index.
        let idx = vec![Some(1), None, Some(0), Some(1), Some(2), Some(0)];
        let report = grad_check(
            |t, x| {
                let p = t.pool_by_index(x, &idx, 3)?;
                let w = t.leaf(Tensor::from_fn(&[3, 2], |i| 0.7 + 0.2 * i as f64));
                let y = t.mul(p, w)?;
                t.sum_all(y)
            },
            &rand_tensor(&mut rng, &[6, 2]),
            eps,
            tol,
        )
        .unwrap();
        assert!(report.pass, "pool_by_index: {}", report.max_rel_err);

        // gen_keypoints: anchors and offsets.
        let anchors_t = Tensor::new(
            vec![2, 11],
            vec![
                1.0, -2.0, 0.5, 0.3, 0.1, 0.9, 0.6, 0.8, 0.0, 0.0, 0.0, //
                -0.5, 1.5, 0.2, -0.2, 0.4, 0.5, -0.38, 0.92, 0.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let offsets_t = rand_tensor(&mut rng, &[2, 9]);
        let report = grad_check(
            |t, x| {
                let o = t.leaf(offsets_t.clone());
                let kp = t.gen_keypoints(x, o)?;
                let w = t.leaf(Tensor::from_fn(&[6, 3], |i| (0.41 * i as f64).sin()));
                let y = t.mul(kp, w)?;
                t.sum_all(y)
            },
            &anchors_t,
            eps,
            tol,
        )
        .unwrap();
        assert!(report.pass, "gen_keypoints anchors: {}", report.max_rel_err);
        let report = grad_check(
            |t, x| {
                let a = t.leaf(anchors_t.clone());
                let kp = t.gen_keypoints(a, x)?;
                let w = t.leaf(Tensor::from_fn(&[6, 3], |i| (0.29 * i as f64).cos()));
                let y = t.mul(kp, w)?;
                t.sum_all(y)
            },
            &offsets_t,
            eps,
            tol,
        )
        .unwrap();
        assert!(report.pass, "gen_keypoints offsets: {}", report.max_rel_err);

        // project_camera through a rotated, flipped, pre-transformed camera.
        let cam = PinholeParams {
            fx: 60.0,
            fy: 55.0,
            cx: 40.0,
            cy: 30.0,
            width: 80,
            height: 60,
            rot: [
                [0.36, 0.48, -0.8],
                [-0.8, 0.6, 0.0],
                [0.48, 0.64, 0.6],
            ],
            trans: [0.2, -0.1, 0.3],
            pre: Some([[0.9, 0.1, 0.0], [-0.1, 0.9, 0.05], [0.0, -0.05, 1.1]]),
            flip_u: true,
            eps_depth: 1e-6,
        };
        let pts_t = Tensor::new(
            vec![2, 3],
            vec![1.0, 0.5, 6.0, -0.8, 0.2, 9.0],
        )
        .unwrap();
        let report = grad_check(
            |t, x| {
                let uv = t.project_camera(x, &cam)?;
                let w = t.leaf(Tensor::from_fn(&[2, 2], |i| 0.01 + 0.005 * i as f64));
                let y = t.mul(uv, w)?;
                t.sum_all(y)
            },
            &pts_t,
            eps,
            tol,
        )
        .unwrap();
        assert!(report.pass, "project_camera: {}", report.max_rel_err);
    }
}
