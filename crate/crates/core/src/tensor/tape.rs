//! Wengert tape: ops recorded in forward order, replayed in reverse.
//!
//! Values live in the tape arena; [`Var`] is an index into it. Leaves are
//! registered from [`Tensor`]s (memoized by tensor identity, so a parameter
//! used many times in one step is registered once). Every op validates its
//! output for finiteness and fails fast naming the op — non-finite values are
//! an error state, never silently propagated.

use std::collections::HashMap;

use super::{check_finite, softmax_rows_kernel, Result, Tensor, TensorError, TensorId};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Constant,
    /// C = A·B, A:[m,k] B:[k,n]
    Matmul { a: Var, b: Var },
    /// C = A·Bᵀ, A:[m,k] B:[n,k]
    MatmulTb { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// [n,c] + broadcast [c]
    AddRow { a: Var, row: Var },
    Scale { a: Var, k: f32 },
    Relu { a: Var },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        // per-row statistics saved for backward
        means: Vec<f32>,
        inv_stds: Vec<f32>,
    },
    /// softmax(x/tau) over the last axis
    SoftmaxRows { x: Var, tau: f32 },
    /// [n,c] -> [c], mean over rows
    MeanRows { x: Var },
    MeanAll { x: Var },
    SumAll { x: Var },
    /// rows scaled to unit L2 norm; inverse norms saved
    L2NormalizeRows { x: Var, inv_norms: Vec<f32> },
    /// [n,d],[n,d] -> [n]
    RowwiseDot { a: Var, b: Var },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    /// rank-1 parts stacked into a matrix
    StackRows { parts: Vec<Var> },
    SliceCols { x: Var, start: usize, len: usize },
    SliceRows { x: Var, start: usize, len: usize },
    /// out[t] = table[ids[t]]
    GatherRows { table: Var, ids: Vec<usize> },
    /// [c] -> [n,c]
    BroadcastRow { v: Var, n: usize },
    /// out[t] = if mask[t] { b[t] } else { a[t] }
    SelectRows { a: Var, b: Var, mask: Vec<bool> },
    /// Σ coeffs[i]·inputs[i]
    LinComb { inputs: Vec<Var>, coeffs: Var },
    /// mean over active rows of −log softmax(logits)[target]
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        active: Vec<bool>,
    },
    /// [H,W,F] -> [g²,F], mean over each grid cell
    PatchMeans { x: Var, grid: usize },
    Reshape { x: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Matmul { a, b }
            | Op::MatmulTb { a, b }
            | Op::Add { a, b }
            | Op::RowwiseDot { a, b } => vec![*a, *b],
            Op::AddRow { a, row } => vec![*a, *row],
            Op::Scale { a, .. } | Op::Relu { a } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::SoftmaxRows { x, .. }
            | Op::MeanRows { x }
            | Op::MeanAll { x }
            | Op::SumAll { x }
            | Op::L2NormalizeRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::PatchMeans { x, .. }
            | Op::Reshape { x } => vec![*x],
            Op::ConcatCols { parts } | Op::ConcatRows { parts } | Op::StackRows { parts } => {
                parts.clone()
            }
            Op::GatherRows { table, .. } => vec![*table],
            Op::BroadcastRow { v, .. } => vec![*v],
            Op::SelectRows { a, b, .. } => vec![*a, *b],
            Op::LinComb { inputs, coeffs } => {
                let mut v = inputs.clone();
                v.push(*coeffs);
                v
            }
            Op::CrossEntropyRows { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    data: Vec<f32>,
    shape: Vec<usize>,
    needs_grad: bool,
    op: Op,
    /// Wide copy of scalar reductions; keeps loss accumulation in 64-bit.
    f64_val: Option<f64>,
}

/// Recorded computation for one forward/backward cycle.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_memo: HashMap<TensorId, Var>,
    consumed: bool,
}

/// Gradients produced by a backward pass, addressable by tensor identity.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    by_id: HashMap<TensorId, usize>,
}

impl Gradients {
    /// Gradient that flowed to `t`'s leaf, if any.
    pub fn of(&self, t: &Tensor) -> Option<&[f32]> {
        self.by_id
            .get(&t.id())
            .and_then(|ix| self.grads[*ix].as_deref())
    }

    /// Gradient for an arbitrary tape var (used by tests).
    pub fn of_var(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }
}

fn mm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for l in 0..k {
                acc += (a[i * k + l] as f64) * (b[l * n + j] as f64);
            }
            out[i * n + j] = acc as f32;
        }
    }
}

fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    // C = A·Bᵀ with A:[m,k], B:[n,k]
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for l in 0..k {
                acc += (a[i * k + l] as f64) * (b[j * k + l] as f64);
            }
            out[i * n + j] = acc as f32;
        }
    }
}

fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    // C = Aᵀ·B with A:[m,k], B:[m,n] -> C:[k,n]
    for l in 0..k {
        for j in 0..n {
            let mut acc = 0.0f64;
            for i in 0..m {
                acc += (a[i * k + l] as f64) * (b[i * n + j] as f64);
            }
            out[l * n + j] = acc as f32;
        }
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = if cols == 0 { 0 } else { shape.iter().product::<usize>() / cols };
    (rows, cols)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, data: Vec<f32>, shape: Vec<usize>, name: &'static str) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        check_finite(&data, name)?;
        let needs_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            data,
            shape,
            needs_grad,
            op,
            f64_val: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Scalar value of a one-element var, at f64 precision when the value was
    /// produced by a wide reduction (and propagated through add/scale).
    pub fn scalar_value(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        debug_assert_eq!(node.data.len(), 1);
        node.f64_val.unwrap_or(node.data[0] as f64)
    }

    /// Register a tensor as a leaf. Repeated registration of the same tensor
    /// on one tape returns the same var.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        if let Some(v) = self.leaf_memo.get(&t.id()) {
            return *v;
        }
        let op = if t.requires_grad() { Op::Leaf } else { Op::Constant };
        self.nodes.push(Node {
            data: t.data().to_vec(),
            shape: t.shape().to_vec(),
            needs_grad: t.requires_grad(),
            op,
            f64_val: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.leaf_memo.insert(t.id(), v);
        v
    }

    /// Register raw data as a non-differentiable constant.
    pub fn constant(&mut self, data: Vec<f32>, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                op: "constant",
                len: data.len(),
                shape,
            });
        }
        self.push(Op::Constant, data, shape, "constant")
    }

    /// Extract a value from the tape as an owned tensor.
    pub fn extract(&self, v: Var) -> Tensor {
        Tensor::new(self.value(v).to_vec(), self.shape(v).to_vec())
            .expect("tape values are validated when recorded")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        mm_nn(self.value(a), self.value(b), m, k, n, &mut out);
        self.push(Op::Matmul { a, b }, out, vec![m, n], "matmul")
    }

    /// A·Bᵀ with A:[m,k], B:[n,k].
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tb",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0f32; m * n];
        mm_nt(self.value(a), self.value(b), m, k, n, &mut out);
        self.push(Op::MatmulTb { a, b }, out, vec![m, n], "matmul_tb")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let wide = match (self.nodes[a.0].f64_val, self.nodes[b.0].f64_val) {
            (Some(x), Some(y)) => Some(x + y),
            _ => None,
        };
        let v = self.push(Op::Add { a, b }, out, shape, "add")?;
        self.nodes[v.0].f64_val = wide;
        Ok(v)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a).to_vec(), self.shape(row).to_vec());
        if sa.len() != 2 || sr.len() != 1 || sa[1] != sr[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: sa,
                rhs: sr,
            });
        }
        let c = sa[1];
        let rdat = self.value(row).to_vec();
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + rdat[i % c])
            .collect();
        self.push(Op::AddRow { a, row }, out, sa, "add_row")
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Result<Var> {
        let out: Vec<f32> = self.value(a).iter().map(|x| x * k).collect();
        let shape = self.shape(a).to_vec();
        let wide = self.nodes[a.0].f64_val.map(|x| x * k as f64);
        let v = self.push(Op::Scale { a, k }, out, shape, "scale")?;
        self.nodes[v.0].f64_val = wide;
        Ok(v)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f32> = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Relu { a }, out, shape, "relu")
    }

    /// Normalize the last axis to mean 0 / variance 1, then apply the affine
    /// gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if cols == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        if eps <= 0.0 {
            return Err(TensorError::Parameter {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![cols],
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xd = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = vec![0.0f32; xd.len()];
        let mut means = vec![0.0f32; rows];
        let mut inv_stds = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|v| *v as f64).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = *v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / cols as f64;
            let inv_std = 1.0 / (var + eps as f64).sqrt();
            means[r] = mean as f32;
            inv_stds[r] = inv_std as f32;
            for j in 0..cols {
                let xhat = (row[j] as f64 - mean) * inv_std;
                out[r * cols + j] = (xhat * g[j] as f64 + b[j] as f64) as f32;
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                inv_stds,
            },
            out,
            shape,
            "layer_norm",
        )
    }

    /// softmax(x/tau) over the last axis, computed with max subtraction.
    pub fn softmax_rows(&mut self, x: Var, tau: f32) -> Result<Var> {
        if tau <= 0.0 {
            return Err(TensorError::Parameter {
                op: "softmax_rows",
                msg: format!("tau must be positive, got {tau}"),
            });
        }
        let shape = self.shape(x).to_vec();
        let (_, cols) = rows_cols(&shape);
        if cols == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax_rows" });
        }
        let mut out = vec![0.0f32; self.numel(x)];
        softmax_rows_kernel(self.value(x), cols, tau as f64, &mut out);
        self.push(Op::SoftmaxRows { x, tau }, out, shape, "softmax_rows")
    }

    /// [n,c] -> [c]: arithmetic mean over rows.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "mean_rows",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (n, c) = (shape[0], shape[1]);
        let xd = self.value(x);
        let mut out = vec![0.0f32; c];
        for j in 0..c {
            let mut acc = 0.0f64;
            for i in 0..n {
                acc += xd[i * c + j] as f64;
            }
            out[j] = (acc / n as f64) as f32;
        }
        self.push(Op::MeanRows { x }, out, vec![c], "mean_rows")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.numel(x);
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "mean_all" });
        }
        let acc: f64 = self.value(x).iter().map(|v| *v as f64).sum();
        let v = self.push(
            Op::MeanAll { x },
            vec![(acc / n as f64) as f32],
            vec![],
            "mean_all",
        )?;
        self.nodes[v.0].f64_val = Some(acc / n as f64);
        Ok(v)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let acc: f64 = self.value(x).iter().map(|v| *v as f64).sum();
        let v = self.push(Op::SumAll { x }, vec![acc as f32], vec![], "sum_all")?;
        self.nodes[v.0].f64_val = Some(acc);
        Ok(v)
    }

    /// Scale each row to unit L2 norm. Zero-norm rows are an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if cols == 0 {
            return Err(TensorError::EmptyAxis {
                op: "l2_normalize_rows",
            });
        }
        let xd = self.value(x);
        let mut out = vec![0.0f32; xd.len()];
        let mut inv_norms = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let norm = row
                .iter()
                .map(|v| (*v as f64) * (*v as f64))
                .sum::<f64>()
                .sqrt();
            if norm < 1e-9 {
                return Err(TensorError::DegenerateVector {
                    op: "l2_normalize_rows",
                });
            }
            let inv = 1.0 / norm;
            inv_norms[r] = inv as f32;
            for j in 0..cols {
                out[r * cols + j] = (row[j] as f64 * inv) as f32;
            }
        }
        self.push(
            Op::L2NormalizeRows { x, inv_norms },
            out,
            shape,
            "l2_normalize_rows",
        )
    }

    /// Per-row dot product of two equal-shape matrices: [n,d]x[n,d] -> [n].
    pub fn rowwise_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || sa.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "rowwise_dot",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, d) = (sa[0], sa[1]);
        let (ad, bd) = (self.value(a), self.value(b));
        let mut out = vec![0.0f32; n];
        for i in 0..n {
            let mut acc = 0.0f64;
            for j in 0..d {
                acc += (ad[i * d + j] as f64) * (bd[i * d + j] as f64);
            }
            out[i] = acc as f32;
        }
        self.push(Op::RowwiseDot { a, b }, out, vec![n], "rowwise_dot")
    }

    /// Concatenate matrices along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Parameter {
                op: "concat_cols",
                msg: "no parts".into(),
            });
        }
        let n = self.shape(parts[0]).first().copied().unwrap_or(0);
        let mut total_c = 0usize;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[0] != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total_c += s[1];
        }
        let mut out = vec![0.0f32; n * total_c];
        let mut offset = 0usize;
        for p in parts {
            let c = self.shape(*p)[1];
            let pd = self.value(*p);
            for i in 0..n {
                out[i * total_c + offset..i * total_c + offset + c]
                    .copy_from_slice(&pd[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            out,
            vec![n, total_c],
            "concat_cols",
        )
    }

    /// Concatenate matrices along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Parameter {
                op: "concat_rows",
                msg: "no parts".into(),
            });
        }
        let c = match self.shape(parts[0]) {
            s if s.len() == 2 => s[1],
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: s.to_vec(),
                    rhs: vec![],
                })
            }
        };
        let mut out = Vec::new();
        let mut n = 0usize;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[1] != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            n += s[0];
            out.extend_from_slice(self.value(*p));
        }
        self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            out,
            vec![n, c],
            "concat_rows",
        )
    }

    /// Stack rank-1 vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Parameter {
                op: "stack_rows",
                msg: "no parts".into(),
            });
        }
        let d = self.numel(parts[0]);
        let mut out = Vec::with_capacity(parts.len() * d);
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 1 || s[0] != d {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![d],
                    rhs: s.to_vec(),
                });
            }
            out.extend_from_slice(self.value(*p));
        }
        self.push(
            Op::StackRows {
                parts: parts.to_vec(),
            },
            out,
            vec![parts.len(), d],
            "stack_rows",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: if s.len() == 2 { s[1] } else { 0 },
            });
        }
        let (n, c) = (s[0], s[1]);
        let xd = self.value(x);
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols { x, start, len }, out, vec![n, len], "slice_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[0] || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                extent: if s.len() == 2 { s[0] } else { 0 },
            });
        }
        let c = s[1];
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        self.push(Op::SliceRows { x, start, len }, out, vec![len, c], "slice_rows")
    }

    /// Row lookup: out[t] = table[ids[t]]. Backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                lhs: s,
                rhs: vec![],
            });
        }
        let (v, c) = (s[0], s[1]);
        let td = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    extent: v,
                });
            }
            out.extend_from_slice(&td[id * c..(id + 1) * c]);
        }
        let n = ids.len();
        self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            out,
            vec![n, c],
            "gather_rows",
        )
    }

    pub fn broadcast_row(&mut self, v: Var, n: usize) -> Result<Var> {
        let s = self.shape(v).to_vec();
        if s.len() != 1 || n == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_row",
                lhs: s,
                rhs: vec![n],
            });
        }
        let c = s[0];
        let vd = self.value(v);
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(vd);
        }
        self.push(Op::BroadcastRow { v, n }, out, vec![n, c], "broadcast_row")
    }

    /// Per-row select between two matrices: rows where `mask` is true come
    /// from `b`, the rest from `a`.
    pub fn select_rows(&mut self, a: Var, b: Var, mask: &[bool]) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || sa.len() != 2 || mask.len() != sa[0] {
            return Err(TensorError::ShapeMismatch {
                op: "select_rows",
                lhs: sa,
                rhs: sb,
            });
        }
        let c = sa[1];
        let (ad, bd) = (self.value(a), self.value(b));
        let mut out = vec![0.0f32; ad.len()];
        for (i, &m) in mask.iter().enumerate() {
            let src = if m { bd } else { ad };
            out[i * c..(i + 1) * c].copy_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(
            Op::SelectRows {
                a,
                b,
                mask: mask.to_vec(),
            },
            out,
            sa,
            "select_rows",
        )
    }

    /// Weighted sum of equal-shape tensors with a coefficient vector.
    pub fn lin_comb(&mut self, inputs: &[Var], coeffs: Var) -> Result<Var> {
        if inputs.is_empty() {
            return Err(TensorError::Parameter {
                op: "lin_comb",
                msg: "no inputs".into(),
            });
        }
        if self.numel(coeffs) != inputs.len() {
            return Err(TensorError::ShapeMismatch {
                op: "lin_comb",
                lhs: vec![inputs.len()],
                rhs: self.shape(coeffs).to_vec(),
            });
        }
        let shape = self.shape(inputs[0]).to_vec();
        for p in inputs {
            if self.shape(*p) != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "lin_comb",
                    lhs: shape,
                    rhs: self.shape(*p).to_vec(),
                });
            }
        }
        let cd = self.value(coeffs).to_vec();
        let mut out = vec![0.0f32; shape.iter().product()];
        for (p, w) in inputs.iter().zip(&cd) {
            for (o, x) in out.iter_mut().zip(self.value(*p)) {
                *o += w * x;
            }
        }
        self.push(
            Op::LinComb {
                inputs: inputs.to_vec(),
                coeffs,
            },
            out,
            shape,
            "lin_comb",
        )
    }

    /// Cross-entropy against integer targets, averaged over the active rows.
    /// Log-sum-exp runs in f64.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
        active: &[bool],
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || active.len() != s[0] {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_rows",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let (n, c) = (s[0], s[1]);
        let n_active = active.iter().filter(|m| **m).count();
        if n_active == 0 {
            return Err(TensorError::Parameter {
                op: "cross_entropy_rows",
                msg: "no active rows".into(),
            });
        }
        let ld = self.value(logits);
        let mut total = 0.0f64;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            if targets[i] >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_rows",
                    index: targets[i],
                    extent: c,
                });
            }
            let row = &ld[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max
                + row
                    .iter()
                    .map(|v| (*v as f64 - max).exp())
                    .sum::<f64>()
                    .ln();
            total += lse - row[targets[i]] as f64;
        }
        let v = self.push(
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
            },
            vec![(total / n_active as f64) as f32],
            vec![],
            "cross_entropy_rows",
        )?;
        self.nodes[v.0].f64_val = Some(total / n_active as f64);
        Ok(v)
    }

    /// Divide an [H,W,F] map into a grid of sub-regions and mean each one,
    /// producing [grid²,F] patch vectors in raster order.
    pub fn patch_means(&mut self, x: Var, grid: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "patch_means",
                lhs: s,
                rhs: vec![],
            });
        }
        let (h, w, f) = (s[0], s[1], s[2]);
        if grid == 0 || h % grid != 0 || w % grid != 0 {
            return Err(TensorError::Parameter {
                op: "patch_means",
                msg: format!("map {h}x{w} not divisible by grid {grid}"),
            });
        }
        let (bh, bw) = (h / grid, w / grid);
        let xd = self.value(x);
        let mut out = vec![0.0f32; grid * grid * f];
        for gy in 0..grid {
            for gx in 0..grid {
                let cell = gy * grid + gx;
                for ch in 0..f {
                    let mut acc = 0.0f64;
                    for dy in 0..bh {
                        for dx in 0..bw {
                            let (y, xx) = (gy * bh + dy, gx * bw + dx);
                            acc += xd[(y * w + xx) * f + ch] as f64;
                        }
                    }
                    out[cell * f + ch] = (acc / (bh * bw) as f64) as f32;
                }
            }
        }
        self.push(
            Op::PatchMeans { x, grid },
            out,
            vec![grid * grid, f],
            "patch_means",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(x) {
            return Err(TensorError::LengthMismatch {
                op: "reshape",
                len: self.numel(x),
                shape,
            });
        }
        let data = self.value(x).to_vec();
        self.push(Op::Reshape { x }, data, shape, "reshape")
    }

    /// Reverse accumulation from a scalar loss. One pass per tape; leaves the
    /// tape consumed.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dout) = grads[i].take() else { continue };
            self.backward_op(i, &dout, &mut grads);
            grads[i] = Some(dout);
        }

        let by_id = self
            .leaf_memo
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(id, v)| (*id, v.0))
            .collect();
        Ok(Gradients { grads, by_id })
    }

    fn acc(&self, grads: &mut [Option<Vec<f32>>], target: Var, contrib: &[f32]) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b += c;
                }
            }
            slot @ None => *slot = Some(contrib.to_vec()),
        }
    }

    fn backward_op(&self, i: usize, dout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}

            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0f32; m * k];
                    mm_nt(dout, self.value(*b), m, n, k, &mut da);
                    self.acc(grads, *a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0f32; k * n];
                    mm_tn(self.value(*a), dout, m, k, n, &mut db);
                    self.acc(grads, *b, &db);
                }
            }

            Op::MatmulTb { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0f32; m * k];
                    mm_nn(dout, self.value(*b), m, n, k, &mut da);
                    self.acc(grads, *a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0f32; n * k];
                    mm_tn(dout, self.value(*a), m, n, k, &mut db);
                    self.acc(grads, *b, &db);
                }
            }

            Op::Add { a, b } => {
                self.acc(grads, *a, dout);
                self.acc(grads, *b, dout);
            }

            Op::AddRow { a, row } => {
                self.acc(grads, *a, dout);
                if self.nodes[row.0].needs_grad {
                    let c = self.numel(*row);
                    let mut dr = vec![0.0f32; c];
                    for (i, d) in dout.iter().enumerate() {
                        dr[i % c] += d;
                    }
                    self.acc(grads, *row, &dr);
                }
            }

            Op::Scale { a, k } => {
                let da: Vec<f32> = dout.iter().map(|d| d * k).collect();
                self.acc(grads, *a, &da);
            }

            Op::Relu { a } => {
                let xd = self.value(*a);
                let da: Vec<f32> = dout
                    .iter()
                    .zip(xd)
                    .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }

            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                inv_stds,
            } => {
                let shape = self.shape(*x);
                let (rows, cols) = rows_cols(shape);
                let xd = self.value(*x);
                let g = self.value(*gain);
                let mut dx = vec![0.0f32; xd.len()];
                let mut dg = vec![0.0f32; cols];
                let mut db = vec![0.0f32; cols];
                for r in 0..rows {
                    let base = r * cols;
                    let (mean, inv_std) = (means[r] as f64, inv_stds[r] as f64);
                    // accumulate the two row means needed by the VJP
                    let mut mean_dxhat = 0.0f64;
                    let mut mean_dxhat_xhat = 0.0f64;
                    let mut xhat = vec![0.0f64; cols];
                    let mut dxhat = vec![0.0f64; cols];
                    for j in 0..cols {
                        xhat[j] = (xd[base + j] as f64 - mean) * inv_std;
                        dxhat[j] = dout[base + j] as f64 * g[j] as f64;
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                        dg[j] += (dout[base + j] as f64 * xhat[j]) as f32;
                        db[j] += dout[base + j];
                    }
                    mean_dxhat /= cols as f64;
                    mean_dxhat_xhat /= cols as f64;
                    for j in 0..cols {
                        dx[base + j] =
                            (inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat)) as f32;
                    }
                }
                self.acc(grads, *x, &dx);
                self.acc(grads, *gain, &dg);
                self.acc(grads, *bias, &db);
            }

            Op::SoftmaxRows { x, tau } => {
                let y = &self.nodes[i].data;
                let (_, cols) = rows_cols(self.shape(*x));
                let mut dx = vec![0.0f32; y.len()];
                for (r, (yrow, drow)) in y.chunks(cols).zip(dout.chunks(cols)).enumerate() {
                    let dot: f64 = yrow
                        .iter()
                        .zip(drow)
                        .map(|(a, b)| (*a as f64) * (*b as f64))
                        .sum();
                    for j in 0..cols {
                        dx[r * cols + j] =
                            ((yrow[j] as f64) * (drow[j] as f64 - dot) / (*tau as f64)) as f32;
                    }
                }
                self.acc(grads, *x, &dx);
            }

            Op::MeanRows { x } => {
                let (n, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0f32; n * c];
                for i2 in 0..n {
                    for j in 0..c {
                        dx[i2 * c + j] = dout[j] / n as f32;
                    }
                }
                self.acc(grads, *x, &dx);
            }

            Op::MeanAll { x } => {
                let n = self.numel(*x) as f32;
                let dx = vec![dout[0] / n; self.numel(*x)];
                self.acc(grads, *x, &dx);
            }

            Op::SumAll { x } => {
                let dx = vec![dout[0]; self.numel(*x)];
                self.acc(grads, *x, &dx);
            }

            Op::L2NormalizeRows { x, inv_norms } => {
                let (rows, cols) = rows_cols(self.shape(*x));
                let y = &self.nodes[i].data;
                let mut dx = vec![0.0f32; y.len()];
                for r in 0..rows {
                    let base = r * cols;
                    let dot: f64 = (0..cols)
                        .map(|j| (y[base + j] as f64) * (dout[base + j] as f64))
                        .sum();
                    let inv = inv_norms[r] as f64;
                    for j in 0..cols {
                        dx[base + j] =
                            ((dout[base + j] as f64 - y[base + j] as f64 * dot) * inv) as f32;
                    }
                }
                self.acc(grads, *x, &dx);
            }

            Op::RowwiseDot { a, b } => {
                let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let (ad, bd) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0f32; n * d];
                    for i2 in 0..n {
                        for j in 0..d {
                            da[i2 * d + j] = dout[i2] * bd[i2 * d + j];
                        }
                    }
                    self.acc(grads, *a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0f32; n * d];
                    for i2 in 0..n {
                        for j in 0..d {
                            db[i2 * d + j] = dout[i2] * ad[i2 * d + j];
                        }
                    }
                    self.acc(grads, *b, &db);
                }
            }

            Op::ConcatCols { parts } => {
                let n = self.shape(parts[0])[0];
                let total_c: usize = parts.iter().map(|p| self.shape(*p)[1]).sum();
                let mut offset = 0usize;
                for p in parts {
                    let c = self.shape(*p)[1];
                    if self.nodes[p.0].needs_grad {
                        let mut dp = vec![0.0f32; n * c];
                        for i2 in 0..n {
                            dp[i2 * c..(i2 + 1) * c].copy_from_slice(
                                &dout[i2 * total_c + offset..i2 * total_c + offset + c],
                            );
                        }
                        self.acc(grads, *p, &dp);
                    }
                    offset += c;
                }
            }

            Op::ConcatRows { parts } => {
                let mut offset = 0usize;
                for p in parts {
                    let len = self.numel(*p);
                    if self.nodes[p.0].needs_grad {
                        self.acc(grads, *p, &dout[offset..offset + len]);
                    }
                    offset += len;
                }
            }

            Op::StackRows { parts } => {
                let d = self.numel(parts[0]);
                for (r, p) in parts.iter().enumerate() {
                    self.acc(grads, *p, &dout[r * d..(r + 1) * d]);
                }
            }

            Op::SliceCols { x, start, len } => {
                let (n, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0f32; n * c];
                for i2 in 0..n {
                    dx[i2 * c + start..i2 * c + start + len]
                        .copy_from_slice(&dout[i2 * len..(i2 + 1) * len]);
                }
                self.acc(grads, *x, &dx);
            }

            Op::SliceRows { x, start, len } => {
                let c = self.shape(*x)[1];
                let mut dx = vec![0.0f32; self.numel(*x)];
                dx[start * c..(start + len) * c].copy_from_slice(dout);
                self.acc(grads, *x, &dx);
            }

            Op::GatherRows { table, ids } => {
                let c = self.shape(*table)[1];
                let mut dt = vec![0.0f32; self.numel(*table)];
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt[id * c + j] += dout[t * c + j];
                    }
                }
                self.acc(grads, *table, &dt);
            }

            Op::BroadcastRow { v, n } => {
                let c = self.numel(*v);
                let mut dv = vec![0.0f32; c];
                for i2 in 0..*n {
                    for j in 0..c {
                        dv[j] += dout[i2 * c + j];
                    }
                }
                self.acc(grads, *v, &dv);
            }

            Op::SelectRows { a, b, mask } => {
                let c = self.shape(*a)[1];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0f32; self.numel(*a)];
                    for (i2, &m) in mask.iter().enumerate() {
                        if !m {
                            da[i2 * c..(i2 + 1) * c].copy_from_slice(&dout[i2 * c..(i2 + 1) * c]);
                        }
                    }
                    self.acc(grads, *a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0f32; self.numel(*b)];
                    for (i2, &m) in mask.iter().enumerate() {
                        if m {
                            db[i2 * c..(i2 + 1) * c].copy_from_slice(&dout[i2 * c..(i2 + 1) * c]);
                        }
                    }
                    self.acc(grads, *b, &db);
                }
            }

            Op::LinComb { inputs, coeffs } => {
                let cd = self.value(*coeffs);
                for (ix, p) in inputs.iter().enumerate() {
                    if self.nodes[p.0].needs_grad {
                        let dp: Vec<f32> = dout.iter().map(|d| d * cd[ix]).collect();
                        self.acc(grads, *p, &dp);
                    }
                }
                if self.nodes[coeffs.0].needs_grad {
                    let mut dc = vec![0.0f32; inputs.len()];
                    for (ix, p) in inputs.iter().enumerate() {
                        let dot: f64 = dout
                            .iter()
                            .zip(self.value(*p))
                            .map(|(d, x)| (*d as f64) * (*x as f64))
                            .sum();
                        dc[ix] = dot as f32;
                    }
                    self.acc(grads, *coeffs, &dc);
                }
            }

            Op::CrossEntropyRows {
                logits,
                targets,
                active,
            } => {
                let (n, c) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                let ld = self.value(*logits);
                let n_active = active.iter().filter(|m| **m).count() as f64;
                let upstream = dout[0] as f64;
                let mut dl = vec![0.0f32; n * c];
                for i2 in 0..n {
                    if !active[i2] {
                        continue;
                    }
                    let row = &ld[i2 * c..(i2 + 1) * c];
                    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                    let mut exps = vec![0.0f64; c];
                    let mut sum = 0.0f64;
                    for j in 0..c {
                        exps[j] = (row[j] as f64 - max).exp();
                        sum += exps[j];
                    }
                    for j in 0..c {
                        let p = exps[j] / sum;
                        let onehot = if j == targets[i2] { 1.0 } else { 0.0 };
                        dl[i2 * c + j] = ((p - onehot) * upstream / n_active) as f32;
                    }
                }
                self.acc(grads, *logits, &dl);
            }

            Op::PatchMeans { x, grid } => {
                let s = self.shape(*x);
                let (h, w, f) = (s[0], s[1], s[2]);
                let (bh, bw) = (h / grid, w / grid);
                let scale = 1.0 / (bh * bw) as f32;
                let mut dx = vec![0.0f32; h * w * f];
                for gy in 0..*grid {
                    for gx in 0..*grid {
                        let cell = gy * grid + gx;
                        for ch in 0..f {
                            let d = dout[cell * f + ch] * scale;
                            for dy in 0..bh {
                                for dxx in 0..bw {
                                    let (y, xx) = (gy * bh + dy, gx * bw + dxx);
                                    dx[(y * w + xx) * f + ch] += d;
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, &dx);
            }

            Op::Reshape { x } => {
                self.acc(grads, *x, dout);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f32], shape: &[usize]) -> Tensor {
        Tensor::param(data.to_vec(), shape.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let m = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let (ve, vm) = (tape.leaf(&eye), tape.leaf(&m));
        let c = tape.matmul(ve, vm).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);

        let z = t(&[0.0; 6], &[2, 3]);
        let any = t(&[1.5, -2.0, 0.5, 9.0, 3.0, -1.0, 2.0, 0.0, 4.0, 1.0, 1.0, 1.0], &[3, 4]);
        let (vz, va) = (tape.leaf(&z), tape.leaf(&any));
        let c2 = tape.matmul(vz, va).unwrap();
        assert_eq!(tape.shape(c2), &[2, 4]);
        assert!(tape.value(c2).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop_reference() {
        // independent naive reference
        fn reference(a: &[f32], b: &[f32], n: usize) -> Vec<f32> {
            let mut out = vec![0.0f32; n * n];
            for i in 0..n {
                for j in 0..n {
                    for l in 0..n {
                        out[i * n + j] += a[i * n + l] * b[l * n + j];
                    }
                }
            }
            out
        }
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(3, crate::rng::Stream::Eval, 0);
        let a: Vec<f32> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let (va, vb) = (
            tape.leaf(&t(&a, &[3, 3])),
            tape.leaf(&t(&b, &[3, 3])),
        );
        let c = tape.matmul(va, vb).unwrap();
        for (got, want) in tape.value(c).iter().zip(reference(&a, &b, 3)) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1.0, 2.0], &[1, 2]));
        let b = tape.leaf(&t(&[1.0, 2.0, 3.0], &[3, 1]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 1]"), "{msg}");
    }

    #[test]
    fn matmul_gradients() {
        // loss = sum(A·B); dA = 1·Bᵀ, dB = Aᵀ·1
        let mut tape = Tape::new();
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
        let c = tape.matmul(va, vb).unwrap();
        let loss = tape.sum_all(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(&a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.of(&b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn layer_norm_constant_row_maps_to_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[5.0, 5.0, 5.0], &[1, 3]));
        let gain = tape.leaf(&t(&[1.0, 1.0, 1.0], &[3]));
        let bias = tape.leaf(&t(&[0.0, 0.0, 0.0], &[3]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        for v in tape.value(y) {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_normalizes_random_row() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(11, crate::rng::Stream::Eval, 0);
        let xs: Vec<f32> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&xs, &[1, 16]));
        let gain = tape.leaf(&t(&[1.0; 16], &[16]));
        let bias = tape.leaf(&t(&[0.0; 16], &[16]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        let out = tape.value(y);
        let mean: f64 = out.iter().map(|v| *v as f64).sum::<f64>() / 16.0;
        let var: f64 = out.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }

    #[test]
    fn layer_norm_near_identity_on_normalized_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1.0, -1.0], &[1, 2]));
        let gain = tape.leaf(&t(&[1.0, 1.0], &[2]));
        let bias = tape.leaf(&t(&[0.0, 0.0], &[2]));
        let y = tape.layer_norm(x, gain, bias, 1e-9).unwrap();
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-4);
        assert!((tape.value(y)[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut tape = Tape::new();
        let x = t(&[-1.0, 0.0, 2.0], &[3]);
        let v = tape.leaf(&x);
        let y = tape.relu(v).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        // subgradient at 0 is 0; at x=2 the upstream 1 passes through
        assert_eq!(grads.of(&x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = t(&[3.0, -1.0, 0.5], &[3]);
        let v = tape.leaf(&x);
        let loss = tape.sum_all(v).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(&x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_scaled_loss_gives_zero_grads() {
        let mut tape = Tape::new();
        let x = t(&[3.0, -1.0], &[2]);
        let v = tape.leaf(&x);
        let s = tape.sum_all(v).unwrap();
        let loss = tape.scale(s, 0.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(&x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn fanout_accumulates_both_contributions() {
        // y = sum(x) + 2*sum(x) -> dx = 3
        let mut tape = Tape::new();
        let x = t(&[1.0, 2.0], &[2]);
        let v = tape.leaf(&x);
        let s1 = tape.sum_all(v).unwrap();
        let s2 = tape.sum_all(v).unwrap();
        let s2x2 = tape.scale(s2, 2.0).unwrap();
        let loss = tape.add(s1, s2x2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(&x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = t(&[1.0], &[1]);
        let v = tape.leaf(&x);
        let loss = tape.sum_all(v).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(TensorError::TapeConsumed)
        ));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut tape = Tape::new();
        let x = t(&[1.0, 2.0], &[2]);
        let v = tape.leaf(&x);
        assert!(matches!(
            tape.backward(v),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn untouched_leaf_has_no_flow() {
        let mut tape = Tape::new();
        let x = t(&[1.0], &[1]);
        let unused = t(&[9.0], &[1]);
        let v = tape.leaf(&x);
        let _vu = tape.leaf(&unused);
        let loss = tape.sum_all(v).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.of(&unused).is_none());
    }

    #[test]
    fn leaf_registration_is_memoized() {
        let mut tape = Tape::new();
        let x = t(&[1.0], &[1]);
        let v1 = tape.leaf(&x);
        let v2 = tape.leaf(&x);
        assert_eq!(v1, v2);
    }

    #[test]
    fn non_finite_forward_is_rejected_naming_the_op() {
        let mut tape = Tape::new();
        let big = tape.leaf(&t(&[f32::MAX, f32::MAX], &[1, 2]));
        let err = tape.matmul_tb(big, big).unwrap_err();
        assert!(err.to_string().contains("matmul_tb"), "{err}");
    }

    #[test]
    fn l2_normalize_rejects_zero_rows() {
        let mut tape = Tape::new();
        let z = tape.leaf(&t(&[0.0, 0.0], &[1, 2]));
        assert!(matches!(
            tape.l2_normalize_rows(z),
            Err(TensorError::DegenerateVector { .. })
        ));
    }

    #[test]
    fn patch_means_block_means() {
        // 4x4x1 map of ones, grid 4 -> 16 patches of [1]
        let mut tape = Tape::new();
        let ones = tape.leaf(&t(&[1.0; 16], &[4, 4, 1]));
        let p = tape.patch_means(ones, 4).unwrap();
        assert_eq!(tape.shape(p), &[16, 1]);
        assert!(tape.value(p).iter().all(|v| (*v - 1.0).abs() < 1e-7));

        // grid 1 -> global mean
        let vals: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let m = tape.leaf(&t(&vals, &[4, 4, 1]));
        let g = tape.patch_means(m, 1).unwrap();
        assert_eq!(tape.shape(g), &[1, 1]);
        assert!((tape.value(g)[0] - 7.5).abs() < 1e-6);
    }

    #[test]
    fn patch_means_rejects_indivisible() {
        let mut tape = Tape::new();
        let m = tape.leaf(&t(&[0.0; 6 * 4 * 1], &[6, 4, 1]));
        assert!(tape.patch_means(m, 4).is_err());
    }

    #[test]
    fn cross_entropy_matches_manual_value() {
        // one row, logits [2, 0, 0], target 0:
        // loss = ln(e^2 + 2) - 2
        let mut tape = Tape::new();
        let l = tape.leaf(&t(&[2.0, 0.0, 0.0], &[1, 3]));
        let loss = tape.cross_entropy_rows(l, &[0], &[true]).unwrap();
        let want = ((2f64.exp() + 2.0).ln() - 2.0) as f32;
        assert!((tape.value(loss)[0] - want).abs() < 1e-6);
    }

    #[test]
    fn gather_rows_rejects_out_of_range() {
        let mut tape = Tape::new();
        let table = tape.leaf(&t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]));
        assert!(matches!(
            tape.gather_rows(table, &[0, 2]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }
}
