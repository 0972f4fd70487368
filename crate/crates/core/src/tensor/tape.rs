use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{axpy, dot, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, transpose};
use super::{Scalar, Tensor, TensorId};
use crate::error::{ensure, Error, Result};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, producing a `1×cols` result.
    Rows,
    /// Reduce over columns, producing a `rows×1` result.
    Cols,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Exp(Var),
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { src: Var, start: usize },
    SliceCols { src: Var, start: usize },
    Mean { src: Var, axis: Axis },
    Max { src: Var, arg: Vec<usize> },
    SumAll(Var),
    Transpose(Var),
    CausalMask { src: Var, offset: usize },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    L2Normalize { src: Var, norms: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Exp(..) => "exp",
            Op::Gelu(..) => "gelu",
            Op::Embedding { .. } => "embedding_lookup",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Mean { .. } => "mean",
            Op::Max { .. } => "max",
            Op::SumAll(..) => "sum",
            Op::Transpose(..) => "transpose",
            Op::CausalMask { .. } => "causal_mask_fill",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::ScaleBy(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Gelu(a)
            | Op::SumAll(a)
            | Op::Transpose(a)
            | Op::Softmax(a) => vec![*a],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::SliceRows { src, .. }
            | Op::SliceCols { src, .. }
            | Op::Mean { src, .. }
            | Op::Max { src, .. }
            | Op::CausalMask { src, .. }
            | Op::L2Normalize { src, .. } => vec![*src],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, [T]>,
    rows: usize,
    cols: usize,
    op: Op<T>,
    requires_grad: bool,
    tensor: Option<TensorId>,
}

/// Reverse-mode recording of matrix operations.
///
/// Every value is a `rows×cols` matrix. Parameters enter as borrowed leaves via
/// [`Tape::param`]; a leaf whose tensor has `requires_grad == false` never
/// receives gradient storage, and nothing downstream of only such leaves is
/// differentiated.
pub struct Tape<'a, T: Scalar> {
    id: u32,
    nodes: Vec<Node<'a, T>>,
    params: HashMap<TensorId, Var>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of recorded operations in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Input handles of the operation that produced `v`.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.index].op.inputs()
    }

    pub fn index_of(&self, v: Var) -> usize {
        v.index
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.index].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.index];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        ensure!(
            v.tape == self.id && v.index < self.nodes.len(),
            Contract,
            "variable does not belong to this tape"
        );
        Ok(())
    }

    fn push(&mut self, value: Cow<'a, [T]>, rows: usize, cols: usize, op: Op<T>) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.index].requires_grad);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad,
            tensor: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a borrowed parameter. Repeated calls with the same tensor
    /// return the same handle, so shared parameters accumulate one gradient.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&t.id()) {
            return v;
        }
        let (rows, cols) = t.matrix_dims();
        self.nodes.push(Node {
            value: Cow::Borrowed(t.data()),
            rows,
            cols,
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
            tensor: Some(t.id()),
        });
        let v = Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        };
        self.params.insert(t.id(), v);
        v
    }

    /// Records an owned leaf. With `requires_grad` its gradient is available
    /// through [`Gradients::wrt`].
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<T>, requires_grad: bool) -> Result<Var> {
        ensure!(
            rows * cols == data.len(),
            Dimension,
            "{}x{} input with {} elements",
            rows,
            cols,
            data.len()
        );
        self.nodes.push(Node {
            value: Cow::Owned(data),
            rows,
            cols,
            op: Op::Leaf,
            requires_grad,
            tensor: None,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        self.input(rows, cols, data, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        ensure!(k == k2, Dimension, "matmul {}x{} by {}x{}", m, k, k2, n);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(Cow::Owned(out), m, n, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        ensure!(
            self.dims(a) == self.dims(b),
            Dimension,
            "add {:?} and {:?}",
            self.dims(a),
            self.dims(b)
        );
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let (r, c) = self.dims(a);
        Ok(self.push(Cow::Owned(out), r, c, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        ensure!(
            self.dims(a) == self.dims(b),
            Dimension,
            "mul {:?} and {:?}",
            self.dims(a),
            self.dims(b)
        );
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let (r, c) = self.dims(a);
        Ok(self.push(Cow::Owned(out), r, c, Op::Mul(a, b)))
    }

    /// Adds a `1×cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check(a)?;
        self.check(row)?;
        let (r, c) = self.dims(a);
        ensure!(
            self.dims(row) == (1, c),
            Dimension,
            "row bias {:?} for {}x{}",
            self.dims(row),
            r,
            c
        );
        let bias = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(bias) {
                *o = *o + b;
            }
        }
        Ok(self.push(Cow::Owned(out), r, c, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let (r, c) = self.dims(a);
        Ok(self.push(Cow::Owned(out), r, c, Op::Scale(a, factor)))
    }

    /// Multiplies every element of `a` by the `1×1` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check(a)?;
        self.check(s)?;
        ensure!(self.dims(s) == (1, 1), Dimension, "scale_by needs a 1x1 factor");
        let f = self.value(s)[0];
        let out = self.value(a).iter().map(|&x| x * f).collect();
        let (r, c) = self.dims(a);
        Ok(self.push(Cow::Owned(out), r, c, Op::ScaleBy(a, s)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).iter().map(|&x| x.exp()).collect();
        let (r, c) = self.dims(a);
        Ok(self.push(Cow::Owned(out), r, c, Op::Exp(a)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let (r, c) = self.dims(a);
        Ok(self.push(Cow::Owned(out), r, c, Op::Gelu(a)))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let (v, d) = self.dims(table);
        ensure!(!ids.is_empty(), Input, "empty id list");
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            ensure!(id < v, Input, "id {} out of range for table of {} rows", id, v);
            out.extend_from_slice(&self.value(table)[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Cow::Owned(out),
            ids.len(),
            d,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Stacks matrices along the sequence (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Dimension, "concat of nothing");
        for &p in parts {
            self.check(p)?;
        }
        let cols = self.dims(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            ensure!(c == cols, Dimension, "concat_rows width {} vs {}", c, cols);
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(Cow::Owned(out), rows, cols, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Dimension, "concat of nothing");
        for &p in parts {
            self.check(p)?;
        }
        let rows = self.dims(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            ensure!(r == rows, Dimension, "concat_cols height {} vs {}", r, rows);
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(Cow::Owned(out), rows, cols, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        self.check(src)?;
        let (r, c) = self.dims(src);
        ensure!(
            len >= 1 && start + len <= r,
            Dimension,
            "rows {}..{} of {}",
            start,
            start + len,
            r
        );
        let out = self.value(src)[start * c..(start + len) * c].to_vec();
        Ok(self.push(Cow::Owned(out), len, c, Op::SliceRows { src, start }))
    }

    /// The trailing `n` rows, order preserved.
    pub fn slice_last_n(&mut self, src: Var, n: usize) -> Result<Var> {
        let (r, _) = self.dims(src);
        ensure!(n >= 1 && n <= r, Dimension, "last {} rows of {}", n, r);
        self.slice_rows(src, r - n, n)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        self.check(src)?;
        let (r, c) = self.dims(src);
        ensure!(
            len >= 1 && start + len <= c,
            Dimension,
            "cols {}..{} of {}",
            start,
            start + len,
            c
        );
        let v = self.value(src);
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&v[row * c + start..row * c + start + len]);
        }
        Ok(self.push(Cow::Owned(out), r, len, Op::SliceCols { src, start }))
    }

    pub fn mean(&mut self, src: Var, axis: Axis) -> Result<Var> {
        self.check(src)?;
        let (r, c) = self.dims(src);
        let v = self.value(src);
        let (out, or, oc) = match axis {
            Axis::Rows => {
                let mut acc = vec![T::zero(); c];
                for row in v.chunks(c) {
                    axpy(T::one(), row, &mut acc);
                }
                let n = T::lit(r as f64);
                (acc.into_iter().map(|x| x / n).collect(), 1, c)
            }
            Axis::Cols => {
                let n = T::lit(c as f64);
                (v.chunks(c).map(|row| row.iter().copied().sum::<T>() / n).collect(), r, 1)
            }
        };
        Ok(self.push(Cow::Owned(out), or, oc, Op::Mean { src, axis }))
    }

    /// Maximum along `axis`; ties resolve to the first index.
    pub fn max(&mut self, src: Var, axis: Axis) -> Result<Var> {
        self.check(src)?;
        let (r, c) = self.dims(src);
        let v = self.value(src);
        let (arg, or, oc): (Vec<usize>, usize, usize) = match axis {
            Axis::Rows => {
                let arg = (0..c)
                    .map(|col| {
                        (0..r)
                            .map(|row| row * c + col)
                            .fold(col, |best, i| if v[i] > v[best] { i } else { best })
                    })
                    .collect();
                (arg, 1, c)
            }
            Axis::Cols => {
                let arg = (0..r)
                    .map(|row| {
                        (0..c)
                            .map(|col| row * c + col)
                            .fold(row * c, |best, i| if v[i] > v[best] { i } else { best })
                    })
                    .collect();
                (arg, r, 1)
            }
        };
        let out = arg.iter().map(|&i| v[i]).collect();
        Ok(self.push(Cow::Owned(out), or, oc, Op::Max { src, arg }))
    }

    pub fn sum(&mut self, src: Var) -> Result<Var> {
        self.check(src)?;
        let s = self.value(src).iter().copied().sum::<T>();
        Ok(self.push(Cow::Owned(vec![s]), 1, 1, Op::SumAll(src)))
    }

    pub fn transpose(&mut self, src: Var) -> Result<Var> {
        self.check(src)?;
        let (r, c) = self.dims(src);
        let out = transpose(self.value(src), r, c);
        Ok(self.push(Cow::Owned(out), c, r, Op::Transpose(src)))
    }

    /// Sets entry `(i, j)` to `-inf` wherever `j > i`.
    pub fn causal_mask_fill(&mut self, src: Var) -> Result<Var> {
        self.causal_mask_fill_offset(src, 0)
    }

    /// Causal mask for rows that sit `offset` positions after the first
    /// column: entry `(i, j)` is set to `-inf` when `j > i + offset`.
    pub fn causal_mask_fill_offset(&mut self, src: Var, offset: usize) -> Result<Var> {
        self.check(src)?;
        let (r, c) = self.dims(src);
        let mut out = self.value(src).to_vec();
        for i in 0..r {
            for j in (i + offset + 1)..c {
                out[i * c + j] = T::neg_infinity();
            }
        }
        Ok(self.push(Cow::Owned(out), r, c, Op::CausalMask { src, offset }))
    }

    /// Row-wise softmax with max subtraction. `-inf` entries are permitted
    /// (they receive zero mass) as long as each row has one finite entry.
    pub fn softmax(&mut self, src: Var) -> Result<Var> {
        self.check(src)?;
        let (r, c) = self.dims(src);
        ensure!(c >= 1, Dimension, "softmax over empty rows");
        let v = self.value(src);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            softmax_row(row, &mut out[i * c..(i + 1) * c])?;
        }
        Ok(self.push(Cow::Owned(out), r, c, Op::Softmax(src)))
    }

    /// Per-row normalization to zero mean and unit variance followed by the
    /// `1×cols` affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        let (r, c) = self.dims(x);
        ensure!(
            self.dims(gain) == (1, c) && self.dims(bias) == (1, c),
            Dimension,
            "layer_norm affine {:?}/{:?} for width {}",
            self.dims(gain),
            self.dims(bias),
            c
        );
        let v = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let n = T::lit(c as f64);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Cow::Owned(out),
            r,
            c,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Scales each row to unit Euclidean norm. A zero row is an error rather
    /// than a silent NaN.
    pub fn l2_normalize(&mut self, src: Var) -> Result<Var> {
        self.check(src)?;
        let (r, c) = self.dims(src);
        let v = self.value(src);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in v.chunks(c) {
            let n = dot(row, row).sqrt();
            ensure!(n.is_finite(), Numeric, "non-finite row norm");
            if n <= T::zero() {
                return Err(Error::Degenerate("zero vector cannot be normalized".into()));
            }
            norms.push(n);
            out.extend(row.iter().map(|&x| x / n));
        }
        Ok(self.push(Cow::Owned(out), r, c, Op::L2Normalize { src, norms }))
    }

    /// Mean negative log-likelihood of `(row, class)` targets under a row-wise
    /// softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        self.check(logits)?;
        let (r, c) = self.dims(logits);
        ensure!(!targets.is_empty(), Input, "cross entropy over no targets");
        let v = self.value(logits);
        let mut probs = vec![T::zero(); targets.len() * c];
        let mut total = T::zero();
        for (t, &(row, class)) in targets.iter().enumerate() {
            ensure!(row < r && class < c, Input, "target ({}, {}) outside {}x{}", row, class, r, c);
            let p = &mut probs[t * c..(t + 1) * c];
            let lse = log_softmax_row(&v[row * c..(row + 1) * c], p)?;
            total = total - (v[row * c + class] - lse);
        }
        let loss = total / T::lit(targets.len() as f64);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            1,
            1,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Differentiates a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        ensure!(
            self.dims(loss) == (1, 1),
            Contract,
            "backward needs a scalar loss, got {:?}",
            self.dims(loss)
        );
        self.backward_from(loss, &[T::one()])
    }

    /// Differentiates `sum(seed ⊙ value(root))`, i.e. propagates an upstream
    /// gradient `seed` from `root`.
    pub fn backward_from(&self, root: Var, seed: &[T]) -> Result<Gradients<T>> {
        self.check(root)?;
        let (r, c) = self.dims(root);
        ensure!(seed.len() == r * c, Dimension, "seed of {} for {}x{}", seed.len(), r, c);
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.index].requires_grad {
            grads[root.index] = Some(seed.to_vec());
        }
        for idx in (0..=root.index).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let tensors = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.tensor.map(|id| (id, i)))
            .filter(|&(_, i)| grads[i].is_some())
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            tensors,
        })
    }

    fn propagate(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if let Some(da) = self.slot(grads, *a) {
                    matmul_a_bt_acc(g, self.value(*b), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    matmul_at_b_acc(self.value(*a), g, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        axpy(T::one(), g, d);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d = *d + gi * y;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &gi), &x) in db.iter_mut().zip(g).zip(av) {
                        *d = *d + gi * x;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(T::one(), g, da);
                }
                if let Some(dr) = self.slot(grads, *row) {
                    for grow in g.chunks(cols) {
                        axpy(T::one(), grow, dr);
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(*f, g, da);
                }
            }
            Op::ScaleBy(a, s) => {
                let f = self.value(*s)[0];
                if let Some(da) = self.slot(grads, *a) {
                    axpy(f, g, da);
                }
                let ds_val = dot(g, self.value(*a));
                if let Some(ds) = self.slot(grads, *s) {
                    ds[0] = ds[0] + ds_val;
                }
            }
            Op::Exp(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(node.value.iter()) {
                        *d = *d + gi * y;
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gi), &xi) in da.iter_mut().zip(g).zip(x) {
                        *d = *d + gi * gelu_grad(xi);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(dt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(T::one(), &g[r * cols..(r + 1) * cols], &mut dt[id * cols..(id + 1) * cols]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(dp) = self.slot(grads, p) {
                        axpy(T::one(), &g[offset..offset + len], dp);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if let Some(dp) = self.slot(grads, p) {
                        for r in 0..rows {
                            axpy(
                                T::one(),
                                &g[r * cols + offset..r * cols + offset + pc],
                                &mut dp[r * pc..(r + 1) * pc],
                            );
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceRows { src, start } => {
                if let Some(ds) = self.slot(grads, *src) {
                    axpy(T::one(), g, &mut ds[start * cols..(start + rows) * cols]);
                }
            }
            Op::SliceCols { src, start } => {
                let sc = self.dims(*src).1;
                if let Some(ds) = self.slot(grads, *src) {
                    for r in 0..rows {
                        axpy(
                            T::one(),
                            &g[r * cols..(r + 1) * cols],
                            &mut ds[r * sc + start..r * sc + start + cols],
                        );
                    }
                }
            }
            Op::Mean { src, axis } => {
                let (sr, sc) = self.dims(*src);
                if let Some(ds) = self.slot(grads, *src) {
                    match axis {
                        Axis::Rows => {
                            let f = T::one() / T::lit(sr as f64);
                            for drow in ds.chunks_mut(sc) {
                                axpy(f, g, drow);
                            }
                        }
                        Axis::Cols => {
                            let f = T::one() / T::lit(sc as f64);
                            for (drow, &gi) in ds.chunks_mut(sc).zip(g) {
                                drow.iter_mut().for_each(|d| *d = *d + gi * f);
                            }
                        }
                    }
                }
            }
            Op::Max { src, arg } => {
                if let Some(ds) = self.slot(grads, *src) {
                    for (&i, &gi) in arg.iter().zip(g) {
                        ds[i] = ds[i] + gi;
                    }
                }
            }
            Op::SumAll(src) => {
                if let Some(ds) = self.slot(grads, *src) {
                    ds.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Transpose(src) => {
                if let Some(ds) = self.slot(grads, *src) {
                    axpy(T::one(), &transpose(g, rows, cols), ds);
                }
            }
            Op::CausalMask { src, offset } => {
                if let Some(ds) = self.slot(grads, *src) {
                    for i in 0..rows {
                        let keep = (i + offset + 1).min(cols);
                        axpy(T::one(), &g[i * cols..i * cols + keep], &mut ds[i * cols..i * cols + keep]);
                    }
                }
            }
            Op::Softmax(src) => {
                if let Some(ds) = self.slot(grads, *src) {
                    for i in 0..rows {
                        let y = &node.value[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let s = dot(gr, y);
                        for j in 0..cols {
                            ds[i * cols + j] = ds[i * cols + j] + y[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                if let Some(dg) = self.slot(grads, *gain) {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            dg[j] = dg[j] + grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for grow in g.chunks(cols) {
                        axpy(T::one(), grow, db);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let n = T::lit(cols as f64);
                    let mut dh = vec![T::zero(); cols];
                    for i in 0..rows {
                        let grow = &g[i * cols..(i + 1) * cols];
                        let hrow = &xhat[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            dh[j] = grow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dh_h = dot(&dh, hrow) / n;
                        for j in 0..cols {
                            dx[i * cols + j] =
                                dx[i * cols + j] + rstd[i] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::L2Normalize { src, norms } => {
                if let Some(ds) = self.slot(grads, *src) {
                    for i in 0..rows {
                        let y = &node.value[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let s = dot(gr, y);
                        for j in 0..cols {
                            ds[i * cols + j] = ds[i * cols + j] + (gr[j] - y[j] * s) / norms[i];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lc = self.dims(*logits).1;
                let f = g[0] / T::lit(targets.len() as f64);
                if let Some(dl) = self.slot(grads, *logits) {
                    for (t, &(row, class)) in targets.iter().enumerate() {
                        let p = &probs[t * lc..(t + 1) * lc];
                        let drow = &mut dl[row * lc..(row + 1) * lc];
                        axpy(f, p, drow);
                        drow[class] = drow[class] - f;
                    }
                }
            }
        }
    }

    /// Mutable gradient buffer for `v`, allocated on first use; `None` when
    /// `v` does not require grad.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.index];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.index].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T: Scalar> {
    tape: u32,
    grads: Vec<Option<Vec<T>>>,
    tensors: Vec<(TensorId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any recorded value that requires grad.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    pub fn of_tensor(&self, id: TensorId) -> Option<&[T]> {
        self.tensors
            .iter()
            .find(|(t, _)| *t == id)
            .and_then(|&(_, i)| self.grads[i].as_deref())
    }

    /// Adds this pass's gradient into `t`'s accumulator, if `t` was a leaf.
    pub fn accumulate_into(&self, t: &mut Tensor<T>) -> Result<()> {
        match self.of_tensor(t.id()) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn tensor_grads(&self) -> impl Iterator<Item = (TensorId, &[T])> {
        self.tensors
            .iter()
            .filter_map(|&(id, i)| self.grads[i].as_deref().map(|g| (id, g)))
    }
}

/// Parameter gradients summed over several tapes in a fixed order.
#[derive(Debug, Default, Clone)]
pub struct GradSum<T: Scalar> {
    sums: BTreeMap<TensorId, Vec<T>>,
}

impl<T: Scalar> GradSum<T> {
    pub fn new() -> Self {
        GradSum { sums: BTreeMap::new() }
    }

    pub fn add(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.tensor_grads() {
            match self.sums.get_mut(&id) {
                Some(acc) => axpy(T::one(), g, acc),
                None => {
                    self.sums.insert(id, g.to_vec());
                }
            }
        }
    }

    pub fn get(&self, id: TensorId) -> Option<&[T]> {
        self.sums.get(&id).map(|v| v.as_slice())
    }

    pub fn accumulate_into(&self, t: &mut Tensor<T>) -> Result<()> {
        match self.sums.get(&t.id()) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

/// Writes softmax of `row` into `out`.
pub(crate) fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) -> Result<()> {
    ensure!(
        row.iter().all(|x| !x.is_nan() && *x != T::infinity()),
        Numeric,
        "softmax input contains NaN or +inf"
    );
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    ensure!(m.is_finite(), Numeric, "softmax row has no finite entry");
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        total = total + *o;
    }
    out.iter_mut().for_each(|o| *o = *o / total);
    Ok(())
}

/// Writes softmax of `row` into `probs` and returns `logsumexp(row)`.
pub(crate) fn log_softmax_row<T: Scalar>(row: &[T], probs: &mut [T]) -> Result<T> {
    softmax_row(row, probs)?;
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s = row.iter().map(|&x| (x - m).exp()).sum::<T>();
    Ok(m + s.ln())
}
