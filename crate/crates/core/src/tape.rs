//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward calls append nodes; [`Tape::backward`] walks the node list in
//! reverse, accumulating adjoints in a fixed order so two runs over identical
//! inputs produce bitwise-identical gradients. Parameters enter the graph via
//! [`Tape::param`], which copies the tensor out of a [`ParameterStore`] and
//! tags the leaf with its name; `backward` returns gradients keyed by those
//! names.
//!
//! Shape rules are deliberately narrow: everything is a 2-D row-major matrix,
//! and the only broadcasts are a 1 x n row against an m x n matrix and a
//! 1 x 1 scalar against anything. Violations are programming errors in the
//! model code and panic rather than returning `Err`.

use std::collections::BTreeMap;

use crate::tensor::{kernels, NumericsError, ParameterStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param { name: String },
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddConst { a: NodeId },
    Sigmoid { a: NodeId },
    Gelu { a: NodeId },
    Log { a: NodeId },
    Relu { a: NodeId },
    Abs { a: NodeId },
    Huber { a: NodeId, delta: f64 },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    SoftmaxRows { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, norm: Vec<f64>, inv_std: Vec<f64> },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    GatherRows { table: NodeId, indices: Vec<usize> },
    RepeatRows { a: NodeId },
    SumRows { a: NodeId },
    SumCols { a: NodeId },
    SumAll { a: NodeId },
    CumProdRow { a: NodeId },
    Reshape { a: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::Scale { .. } => "scale",
            Op::AddConst { .. } => "add_const",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Gelu { .. } => "gelu",
            Op::Log { .. } => "log",
            Op::Relu { .. } => "relu",
            Op::Abs { .. } => "abs",
            Op::Huber { .. } => "huber",
            Op::Clamp { .. } => "clamp",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatRows { .. } => "concat_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::SumRows { .. } => "sum_rows",
            Op::SumCols { .. } => "sum_cols",
            Op::SumAll { .. } => "sum_all",
            Op::CumProdRow { .. } => "cumprod_row",
            Op::Reshape { .. } => "reshape",
        }
    }
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    op: Op,
}

/// Gradients of a scalar loss with respect to named parameters.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(values.len(), rows * cols);
        self.nodes.push(Node { rows, cols, values, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn value_scalar(&self, id: NodeId) -> f64 {
        let n = &self.nodes[id.0];
        assert_eq!((n.rows, n.cols), (1, 1), "node is not a scalar");
        n.values[0]
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::from_values(n.rows, n.cols, n.values.clone())
    }

    /// Constant leaf; receives no exported gradient.
    pub fn input(&mut self, t: &Tensor) -> NodeId {
        self.push(t.rows, t.cols, t.values.clone(), Op::Input)
    }

    pub fn input_row(&mut self, values: Vec<f64>) -> NodeId {
        let cols = values.len();
        self.push(1, cols, values, Op::Input)
    }

    pub fn input_scalar(&mut self, v: f64) -> NodeId {
        self.push(1, 1, vec![v], Op::Input)
    }

    /// Leaf bound to a named store parameter. Binding the same name twice is
    /// allowed; exported gradients accumulate across bindings.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> NodeId {
        let t = store
            .get(name)
            .unwrap_or_else(|e| panic!("param binding failed: {e}"));
        self.push(t.rows, t.cols, t.values.clone(), Op::Param { name: name.to_string() })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul shape mismatch: ({m},{k}) x ({k2},{n})");
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n, &mut out);
        self.push(m, n, out, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let src = &self.nodes[a.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(n, m, out, Op::Transpose { a })
    }

    /// Elementwise add. `b` may be a 1 x n row broadcast over the rows of
    /// `a`, or a 1 x 1 scalar broadcast over everything.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let bs = self.shape(b);
        let bvals = &self.nodes[b.0].values;
        let avals = &self.nodes[a.0].values;
        let out: Vec<f64> = if bs == (m, n) {
            avals.iter().zip(bvals).map(|(x, y)| x + y).collect()
        } else if bs == (1, n) {
            avals
                .iter()
                .enumerate()
                .map(|(i, x)| x + bvals[i % n])
                .collect()
        } else if bs == (1, 1) {
            avals.iter().map(|x| x + bvals[0]).collect()
        } else {
            panic!("add shape mismatch: ({m},{n}) vs {bs:?}");
        };
        self.push(m, n, out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise multiply. `b` may be 1 x 1 (scalar broadcast).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let bs = self.shape(b);
        let bvals = &self.nodes[b.0].values;
        let avals = &self.nodes[a.0].values;
        let out: Vec<f64> = if bs == (m, n) {
            avals.iter().zip(bvals).map(|(x, y)| x * y).collect()
        } else if bs == (1, 1) {
            avals.iter().map(|x| x * bvals[0]).collect()
        } else {
            panic!("mul shape mismatch: ({m},{n}) vs {bs:?}");
        };
        self.push(m, n, out, Op::Mul { a, b })
    }

    /// Elementwise divide, same shapes only.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.shape(a);
        assert_eq!(s, self.shape(b), "div shape mismatch");
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x / y)
            .collect();
        self.push(s.0, s.1, out, Op::Div { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        self.push(m, n, out, Op::Scale { a, c })
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.nodes[a.0].values.iter().map(|x| x + c).collect();
        self.push(m, n, out, Op::AddConst { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.nodes[a.0].values.iter().map(|&x| kernels::sigmoid(x)).collect();
        self.push(m, n, out, Op::Sigmoid { a })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.nodes[a.0].values.iter().map(|&x| kernels::gelu(x)).collect();
        self.push(m, n, out, Op::Gelu { a })
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.nodes[a.0].values.iter().map(|x| x.ln()).collect();
        self.push(m, n, out, Op::Log { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.nodes[a.0].values.iter().map(|x| x.max(0.0)).collect();
        self.push(m, n, out, Op::Relu { a })
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.nodes[a.0].values.iter().map(|x| x.abs()).collect();
        self.push(m, n, out, Op::Abs { a })
    }

    pub fn huber(&mut self, a: NodeId, delta: f64) -> NodeId {
        assert!(delta > 0.0, "huber delta must be positive");
        let (m, n) = self.shape(a);
        let out = self.nodes[a.0].values.iter().map(|&x| kernels::huber(x, delta)).collect();
        self.push(m, n, out, Op::Huber { a, delta })
    }

    /// Clamp with pass-through gradient inside [lo, hi] and zero outside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.nodes[a.0].values.iter().map(|x| x.clamp(lo, hi)).collect();
        self.push(m, n, out, Op::Clamp { a, lo, hi })
    }

    /// Row-wise softmax. With a mask, `mask[j] == false` columns get -1e9
    /// added pre-softmax; the resulting weight underflows to exactly zero.
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> NodeId {
        let (m, n) = self.shape(a);
        if let Some(mk) = &mask {
            assert_eq!(mk.len(), n, "softmax mask length mismatch");
            assert!(mk.iter().any(|&v| v), "softmax mask excludes every column");
        }
        let mut out = vec![0.0; m * n];
        kernels::softmax_rows(&self.nodes[a.0].values, m, n, mask.as_deref(), &mut out);
        self.push(m, n, out, Op::SoftmaxRows { a })
    }

    /// Row-wise layer norm with elementwise affine; rows must be width >= 2.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        assert!(n >= 2, "layer_norm requires row width >= 2, got {n}");
        assert_eq!(self.shape(gain), (1, n), "layer_norm gain shape");
        assert_eq!(self.shape(bias), (1, n), "layer_norm bias shape");
        let mut out = vec![0.0; m * n];
        let mut norm = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        kernels::layer_norm(
            &self.nodes[x.0].values,
            m,
            n,
            &self.nodes[gain.0].values,
            &self.nodes[bias.0].values,
            &mut out,
            &mut norm,
            &mut inv_std,
        );
        self.push(m, n, out, Op::LayerNorm { x, gain, bias, norm, inv_std })
    }

    /// Stack parts vertically; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (_, n) = self.shape(parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pn) = self.shape(p);
            assert_eq!(pn, n, "concat_rows column mismatch");
            rows += pr;
            out.extend_from_slice(&self.nodes[p.0].values);
        }
        self.push(rows, n, out, Op::ConcatRows { parts: parts.to_vec() })
    }

    /// Concatenate parts horizontally; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (m, _) = self.shape(parts[0]);
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pm, pn) = self.shape(p);
                assert_eq!(pm, m, "concat_cols row mismatch");
                pn
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].values;
            for r in 0..m {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        self.push(m, total, out, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert!(start + len <= m, "slice_rows out of range");
        let out = self.nodes[a.0].values[start * n..(start + len) * n].to_vec();
        self.push(len, n, out, Op::SliceRows { a, start })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert!(start + len <= n, "slice_cols out of range");
        let src = &self.nodes[a.0].values;
        let mut out = vec![0.0; m * len];
        for r in 0..m {
            out[r * len..(r + 1) * len].copy_from_slice(&src[r * n + start..r * n + start + len]);
        }
        self.push(m, len, out, Op::SliceCols { a, start })
    }

    /// Select rows of a table by index; repeated indices accumulate their
    /// gradients into the same table row.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let (m, n) = self.shape(table);
        let src = &self.nodes[table.0].values;
        let mut out = vec![0.0; indices.len() * n];
        for (r, &idx) in indices.iter().enumerate() {
            assert!(idx < m, "gather index {idx} out of range for {m} rows");
            out[r * n..(r + 1) * n].copy_from_slice(&src[idx * n..(idx + 1) * n]);
        }
        self.push(indices.len(), n, out, Op::GatherRows { table, indices: indices.to_vec() })
    }

    /// Tile a 1 x n row into m x n.
    pub fn repeat_rows(&mut self, a: NodeId, m: usize) -> NodeId {
        let (ar, n) = self.shape(a);
        assert_eq!(ar, 1, "repeat_rows expects a row vector");
        let src = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(src);
        }
        self.push(m, n, out, Op::RepeatRows { a })
    }

    /// m x n -> 1 x n, summing over rows.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let src = &self.nodes[a.0].values;
        let mut out = vec![0.0; n];
        for r in 0..m {
            for j in 0..n {
                out[j] += src[r * n + j];
            }
        }
        self.push(1, n, out, Op::SumRows { a })
    }

    /// m x n -> m x 1, summing each row.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let src = &self.nodes[a.0].values;
        let out = (0..m).map(|r| src[r * n..(r + 1) * n].iter().sum()).collect();
        self.push(m, 1, out, Op::SumCols { a })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let out = vec![self.nodes[a.0].values.iter().sum()];
        self.push(1, 1, out, Op::SumAll { a })
    }

    /// Cumulative product along a single row: out_i = prod_{t<=i} a_t.
    pub fn cumprod_row(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(m, 1, "cumprod_row expects a row vector");
        let src = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(n);
        let mut run = 1.0;
        for &q in src {
            run *= q;
            out.push(run);
        }
        self.push(1, n, out, Op::CumProdRow { a })
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let n = &self.nodes[a.0];
        assert_eq!(n.values.len(), rows * cols, "reshape element count mismatch");
        let out = n.values.clone();
        self.push(rows, cols, out, Op::Reshape { a })
    }

    /// Mean of all elements as a 1 x 1 scalar.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let count = self.nodes[a.0].values.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / count as f64)
    }

    /// Reverse pass from a scalar loss node. Fails if any node in the graph
    /// holds a non-finite value, naming the first offending operation.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap, NumericsError> {
        let ln = &self.nodes[loss.0];
        assert_eq!((ln.rows, ln.cols), (1, 1), "backward requires a scalar loss");
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if !node.values.iter().all(|v| v.is_finite()) {
                return Err(NumericsError::NonFinite { op: node.op.name(), node: i });
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = GradMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let (m, n) = (node.rows, node.cols);
            // Accumulate `delta` into the gradient slot of node `target`.
            macro_rules! acc {
                ($target:expr, $f:expr) => {{
                    let t: NodeId = $target;
                    let len = self.nodes[t.0].values.len();
                    let slot = grads[t.0].get_or_insert_with(|| vec![0.0; len]);
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(&mut slot[..]);
                }};
            }
            match &node.op {
                Op::Input => {}
                Op::Param { name } => {
                    let t = Tensor::from_values(m, n, g.clone());
                    out.entry(name.clone())
                        .and_modify(|acc| {
                            for (x, y) in acc.values.iter_mut().zip(&t.values) {
                                *x += y;
                            }
                        })
                        .or_insert(t);
                }
                Op::MatMul { a, b } => {
                    let (am, ak) = self.shape(*a);
                    let bn = self.shape(*b).1;
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    // dA[i,p] += sum_j g[i,j] B[p,j]
                    acc!(*a, |ga: &mut [f64]| {
                        for i in 0..am {
                            for p in 0..ak {
                                let mut s = 0.0;
                                for j in 0..bn {
                                    s += g[i * bn + j] * bv[p * bn + j];
                                }
                                ga[i * ak + p] += s;
                            }
                        }
                    });
                    // dB[p,j] += sum_i A[i,p] g[i,j]
                    acc!(*b, |gb: &mut [f64]| {
                        for p in 0..ak {
                            for j in 0..bn {
                                let mut s = 0.0;
                                for i in 0..am {
                                    s += av[i * ak + p] * g[i * bn + j];
                                }
                                gb[p * bn + j] += s;
                            }
                        }
                    });
                }
                Op::Transpose { a } => {
                    let (am, an) = self.shape(*a);
                    acc!(*a, |ga: &mut [f64]| {
                        for i in 0..am {
                            for j in 0..an {
                                ga[i * an + j] += g[j * am + i];
                            }
                        }
                    });
                }
                Op::Add { a, b } => {
                    acc!(*a, |ga: &mut [f64]| {
                        for (x, y) in ga.iter_mut().zip(&g) {
                            *x += y;
                        }
                    });
                    let bs = self.shape(*b);
                    if bs == (m, n) {
                        acc!(*b, |gb: &mut [f64]| {
                            for (x, y) in gb.iter_mut().zip(&g) {
                                *x += y;
                            }
                        });
                    } else if bs == (1, n) {
                        acc!(*b, |gb: &mut [f64]| {
                            for (idx, y) in g.iter().enumerate() {
                                gb[idx % n] += y;
                            }
                        });
                    } else {
                        acc!(*b, |gb: &mut [f64]| gb[0] += g.iter().sum::<f64>());
                    }
                }
                Op::Mul { a, b } => {
                    let bs = self.shape(*b);
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    if bs == (m, n) {
                        acc!(*a, |ga: &mut [f64]| {
                            for ((x, y), z) in ga.iter_mut().zip(&g).zip(bv) {
                                *x += y * z;
                            }
                        });
                        acc!(*b, |gb: &mut [f64]| {
                            for ((x, y), z) in gb.iter_mut().zip(&g).zip(av) {
                                *x += y * z;
                            }
                        });
                    } else {
                        let c = bv[0];
                        acc!(*a, |ga: &mut [f64]| {
                            for (x, y) in ga.iter_mut().zip(&g) {
                                *x += y * c;
                            }
                        });
                        acc!(*b, |gb: &mut [f64]| {
                            gb[0] += g.iter().zip(av).map(|(y, z)| y * z).sum::<f64>();
                        });
                    }
                }
                Op::Div { a, b } => {
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    acc!(*a, |ga: &mut [f64]| {
                        for ((x, y), z) in ga.iter_mut().zip(&g).zip(bv) {
                            *x += y / z;
                        }
                    });
                    acc!(*b, |gb: &mut [f64]| {
                        for idx in 0..gb.len() {
                            gb[idx] -= g[idx] * av[idx] / (bv[idx] * bv[idx]);
                        }
                    });
                }
                Op::Scale { a, c } => {
                    let c = *c;
                    acc!(*a, |ga: &mut [f64]| {
                        for (x, y) in ga.iter_mut().zip(&g) {
                            *x += y * c;
                        }
                    });
                }
                Op::AddConst { a } => {
                    acc!(*a, |ga: &mut [f64]| {
                        for (x, y) in ga.iter_mut().zip(&g) {
                            *x += y;
                        }
                    });
                }
                Op::Sigmoid { a } => {
                    let yv = &node.values;
                    acc!(*a, |ga: &mut [f64]| {
                        for ((x, gy), y) in ga.iter_mut().zip(&g).zip(yv) {
                            *x += gy * y * (1.0 - y);
                        }
                    });
                }
                Op::Gelu { a } => {
                    let xv = &self.nodes[a.0].values;
                    acc!(*a, |ga: &mut [f64]| {
                        for ((x, gy), &xi) in ga.iter_mut().zip(&g).zip(xv) {
                            *x += gy * kernels::gelu_grad(xi);
                        }
                    });
                }
                Op::Log { a } => {
                    let xv = &self.nodes[a.0].values;
                    acc!(*a, |ga: &mut [f64]| {
                        for ((x, gy), &xi) in ga.iter_mut().zip(&g).zip(xv) {
                            *x += gy / xi;
                        }
                    });
                }
                Op::Relu { a } => {
                    let xv = &self.nodes[a.0].values;
                    acc!(*a, |ga: &mut [f64]| {
                        for ((x, gy), &xi) in ga.iter_mut().zip(&g).zip(xv) {
                            if xi > 0.0 {
                                *x += gy;
                            }
                        }
                    });
                }
                Op::Abs { a } => {
                    let xv = &self.nodes[a.0].values;
                    acc!(*a, |ga: &mut [f64]| {
                        for ((x, gy), &xi) in ga.iter_mut().zip(&g).zip(xv) {
                            if xi > 0.0 {
                                *x += gy;
                            } else if xi < 0.0 {
                                *x -= gy;
                            }
                        }
                    });
                }
                Op::Huber { a, delta } => {
                    let d = *delta;
                    let xv = &self.nodes[a.0].values;
                    acc!(*a, |ga: &mut [f64]| {
                        for ((x, gy), &xi) in ga.iter_mut().zip(&g).zip(xv) {
                            *x += gy * kernels::huber_grad(xi, d);
                        }
                    });
                }
                Op::Clamp { a, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let xv = &self.nodes[a.0].values;
                    acc!(*a, |ga: &mut [f64]| {
                        for ((x, gy), &xi) in ga.iter_mut().zip(&g).zip(xv) {
                            if xi >= lo && xi <= hi {
                                *x += gy;
                            }
                        }
                    });
                }
                Op::SoftmaxRows { a } => {
                    // ds_j = s_j (g_j - sum_k g_k s_k) per row; masked columns
                    // have s_j = 0 and so receive no gradient. The -1e9 mask
                    // offset is a constant and contributes nothing.
                    let sv = &node.values;
                    acc!(*a, |ga: &mut [f64]| {
                        for r in 0..m {
                            let row = r * n;
                            let dot: f64 = (0..n).map(|j| g[row + j] * sv[row + j]).sum();
                            for j in 0..n {
                                ga[row + j] += sv[row + j] * (g[row + j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, norm, inv_std } => {
                    let gv = &self.nodes[gain.0].values;
                    acc!(*gain, |gg: &mut [f64]| {
                        for r in 0..m {
                            for j in 0..n {
                                gg[j] += g[r * n + j] * norm[r * n + j];
                            }
                        }
                    });
                    acc!(*bias, |gb: &mut [f64]| {
                        for r in 0..m {
                            for j in 0..n {
                                gb[j] += g[r * n + j];
                            }
                        }
                    });
                    acc!(*x, |gx: &mut [f64]| {
                        let nn = n as f64;
                        for r in 0..m {
                            let row = r * n;
                            let mut sum_dn = 0.0;
                            let mut sum_dn_n = 0.0;
                            for j in 0..n {
                                let dn = g[row + j] * gv[j];
                                sum_dn += dn;
                                sum_dn_n += dn * norm[row + j];
                            }
                            for j in 0..n {
                                let dn = g[row + j] * gv[j];
                                gx[row + j] +=
                                    inv_std[r] / nn * (nn * dn - sum_dn - norm[row + j] * sum_dn_n);
                            }
                        }
                    });
                }
                Op::ConcatRows { parts } => {
                    let mut row = 0;
                    for &p in parts {
                        let (pr, _) = self.shape(p);
                        acc!(p, |gp: &mut [f64]| {
                            for (x, y) in gp.iter_mut().zip(&g[row * n..(row + pr) * n]) {
                                *x += y;
                            }
                        });
                        row += pr;
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let (_, pw) = self.shape(p);
                        acc!(p, |gp: &mut [f64]| {
                            for r in 0..m {
                                for j in 0..pw {
                                    gp[r * pw + j] += g[r * n + offset + j];
                                }
                            }
                        });
                        offset += pw;
                    }
                }
                Op::SliceRows { a, start } => {
                    let start = *start;
                    acc!(*a, |ga: &mut [f64]| {
                        for (x, y) in ga[start * n..(start + m) * n].iter_mut().zip(&g) {
                            *x += y;
                        }
                    });
                }
                Op::SliceCols { a, start } => {
                    let (_, an) = self.shape(*a);
                    let start = *start;
                    acc!(*a, |ga: &mut [f64]| {
                        for r in 0..m {
                            for j in 0..n {
                                ga[r * an + start + j] += g[r * n + j];
                            }
                        }
                    });
                }
                Op::GatherRows { table, indices } => {
                    acc!(*table, |gt: &mut [f64]| {
                        for (r, &idx) in indices.iter().enumerate() {
                            for j in 0..n {
                                gt[idx * n + j] += g[r * n + j];
                            }
                        }
                    });
                }
                Op::RepeatRows { a } => {
                    acc!(*a, |ga: &mut [f64]| {
                        for r in 0..m {
                            for j in 0..n {
                                ga[j] += g[r * n + j];
                            }
                        }
                    });
                }
                Op::SumRows { a } => {
                    let (am, _) = self.shape(*a);
                    acc!(*a, |ga: &mut [f64]| {
                        for r in 0..am {
                            for j in 0..n {
                                ga[r * n + j] += g[j];
                            }
                        }
                    });
                }
                Op::SumCols { a } => {
                    let (_, an) = self.shape(*a);
                    acc!(*a, |ga: &mut [f64]| {
                        for r in 0..m {
                            for j in 0..an {
                                ga[r * an + j] += g[r];
                            }
                        }
                    });
                }
                Op::SumAll { a } => {
                    acc!(*a, |ga: &mut [f64]| {
                        for x in ga.iter_mut() {
                            *x += g[0];
                        }
                    });
                }
                Op::CumProdRow { a } => {
                    // d/dq_t sum_i g_i p_i = sum_{i>=t} g_i prod_{u<=i, u!=t} q_u.
                    // Built without division so exact zeros in q stay safe.
                    let qv = &self.nodes[a.0].values;
                    let pv = &node.values;
                    acc!(*a, |ga: &mut [f64]| {
                        for t in 0..n {
                            let pre = if t == 0 { 1.0 } else { pv[t - 1] };
                            let mut run = pre;
                            let mut acc_g = 0.0;
                            for i in t..n {
                                if i > t {
                                    run *= qv[i];
                                }
                                acc_g += g[i] * run;
                            }
                            ga[t] += acc_g;
                        }
                    });
                }
                Op::Reshape { a } => {
                    acc!(*a, |ga: &mut [f64]| {
                        for (x, y) in ga.iter_mut().zip(&g) {
                            *x += y;
                        }
                    });
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient of `f` at `x0`, elementwise.
    fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x0.len());
        let mut x = x0.to_vec();
        for i in 0..x0.len() {
            x[i] = x0[i] + h;
            let up = f(&x);
            x[i] = x0[i] - h;
            let down = f(&x);
            x[i] = x0[i];
            out.push((up - down) / (2.0 * h));
        }
        out
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel <= tol, "{what}[{i}]: analytic {a} vs numeric {n} (rel {rel:.3e})");
        }
    }

    /// Checks d loss / d param for a loss built by `graph` from a single
    /// named parameter, against central differences.
    fn check_op(
        what: &str,
        rows: usize,
        cols: usize,
        x0: Vec<f64>,
        graph: impl Fn(&mut Tape, NodeId) -> NodeId,
    ) {
        let mut store = ParameterStore::new(0);
        store.insert("x", Tensor::from_values(rows, cols, x0.clone()));
        // Weighted sum of the op output so every element matters differently.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let run = |vals: &[f64], weights: &Tensor| -> (f64, GradMap) {
            let mut s = ParameterStore::new(0);
            s.insert("x", Tensor::from_values(rows, cols, vals.to_vec()));
            let mut tape = Tape::new();
            let x = tape.param(&s, "x");
            let y = graph(&mut tape, x);
            let w = tape.input(weights);
            let prod = tape.mul(y, w);
            let loss = tape.sum_all(prod);
            (tape.value_scalar(loss), tape.backward(loss).unwrap())
        };
        // Probe the output shape first to size the weights.
        let mut probe = Tape::new();
        let xp = probe.param(&store, "x");
        let yp = graph(&mut probe, xp);
        let (om, on) = probe.shape(yp);
        let weights = Tensor::from_values(
            om,
            on,
            (0..om * on).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let (_, grads) = run(&x0, &weights);
        let analytic = &grads["x"];
        let f = |v: &[f64]| run(v, &weights).0;
        let numeric = numeric_grad(&f, &x0, 1e-5);
        assert_close(&analytic.values, &numeric, 1e-6, what);
    }

    fn random_vec(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    #[test]
    fn square_of_scalar_gradient() {
        // d/dw w^2 = 2w; at w = 3 the gradient is 6.
        let mut store = ParameterStore::new(0);
        store.insert("w", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w");
        let sq = tape.mul(w, w);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["w"].values, vec![6.0]);
    }

    #[test]
    fn sigmoid_sum_gradient_at_zero() {
        // d/dx sigma(x) at 0 is 0.25 for every element.
        let mut store = ParameterStore::new(0);
        store.insert("x", Tensor::row(vec![0.0; 4]));
        let mut tape = Tape::new();
        let x = tape.param(&store, "x");
        let s = tape.sigmoid(x);
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss).unwrap();
        for v in &grads["x"].values {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_both_sides_match_finite_differences() {
        let (m, k, n) = (3, 4, 2);
        let a0 = random_vec(m * k, -1.5, 1.5, 1);
        let b0 = random_vec(k * n, -1.5, 1.5, 2);
        let weights = Tensor::from_values(m, n, random_vec(m * n, -1.0, 1.0, 3));
        let run = |av: &[f64], bv: &[f64]| -> (f64, GradMap) {
            let mut s = ParameterStore::new(0);
            s.insert("a", Tensor::from_values(m, k, av.to_vec()));
            s.insert("b", Tensor::from_values(k, n, bv.to_vec()));
            let mut tape = Tape::new();
            let a = tape.param(&s, "a");
            let b = tape.param(&s, "b");
            let c = tape.matmul(a, b);
            let w = tape.input(&weights);
            let p = tape.mul(c, w);
            let loss = tape.sum_all(p);
            (tape.value_scalar(loss), tape.backward(loss).unwrap())
        };
        let (_, grads) = run(&a0, &b0);
        let fa = |v: &[f64]| run(v, &b0).0;
        let fb = |v: &[f64]| run(&a0, v).0;
        assert_close(&grads["a"].values, &numeric_grad(&fa, &a0, 1e-5), 1e-6, "dA");
        assert_close(&grads["b"].values, &numeric_grad(&fb, &b0, 1e-5), 1e-6, "dB");
    }

    #[test]
    fn elementwise_op_gradients_match_finite_differences() {
        check_op("sigmoid", 2, 3, random_vec(6, -2.0, 2.0, 10), |t, x| t.sigmoid(x));
        check_op("gelu", 2, 3, random_vec(6, -2.0, 2.0, 11), |t, x| t.gelu(x));
        check_op("log", 1, 5, random_vec(5, 0.2, 3.0, 12), |t, x| t.log(x));
        // Keep probes away from the relu/abs kinks at zero.
        check_op("relu", 1, 6, random_vec(6, 0.3, 2.0, 13), |t, x| t.relu(x));
        check_op("abs", 1, 6, random_vec(6, -2.0, -0.3, 14), |t, x| t.abs(x));
        check_op("huber_in", 1, 4, random_vec(4, -0.8, 0.8, 15), |t, x| t.huber(x, 1.0));
        check_op("huber_out", 1, 4, random_vec(4, 1.5, 3.0, 16), |t, x| t.huber(x, 1.0));
        check_op("clamp", 1, 4, random_vec(4, 0.1, 0.9, 17), |t, x| t.clamp(x, 0.0, 1.0));
        check_op("scale", 2, 2, random_vec(4, -2.0, 2.0, 18), |t, x| t.scale(x, -1.7));
        check_op("tanh_chain", 1, 4, random_vec(4, -1.0, 1.0, 19), |t, x| {
            let s = t.sigmoid(x);
            t.log(s)
        });
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        check_op("softmax", 2, 4, random_vec(8, -2.0, 2.0, 20), |t, x| t.softmax_rows(x, None));
        check_op(
            "softmax_masked",
            2,
            4,
            random_vec(8, -2.0, 2.0, 21),
            |t, x| t.softmax_rows(x, Some(vec![true, false, true, true])),
        );
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let (m, n) = (2, 4);
        let x0 = random_vec(m * n, -2.0, 2.0, 30);
        let g0 = random_vec(n, 0.5, 1.5, 31);
        let b0 = random_vec(n, -0.5, 0.5, 32);
        let weights = Tensor::from_values(m, n, random_vec(m * n, -1.0, 1.0, 33));
        let run = |xv: &[f64], gv: &[f64], bv: &[f64]| -> (f64, GradMap) {
            let mut s = ParameterStore::new(0);
            s.insert("x", Tensor::from_values(m, n, xv.to_vec()));
            s.insert("g", Tensor::row(gv.to_vec()));
            s.insert("b", Tensor::row(bv.to_vec()));
            let mut tape = Tape::new();
            let x = tape.param(&s, "x");
            let g = tape.param(&s, "g");
            let b = tape.param(&s, "b");
            let y = tape.layer_norm(x, g, b);
            let w = tape.input(&weights);
            let p = tape.mul(y, w);
            let loss = tape.sum_all(p);
            (tape.value_scalar(loss), tape.backward(loss).unwrap())
        };
        let (_, grads) = run(&x0, &g0, &b0);
        let fx = |v: &[f64]| run(v, &g0, &b0).0;
        let fg = |v: &[f64]| run(&x0, v, &b0).0;
        let fb = |v: &[f64]| run(&x0, &g0, v).0;
        assert_close(&grads["x"].values, &numeric_grad(&fx, &x0, 1e-5), 1e-5, "dx");
        assert_close(&grads["g"].values, &numeric_grad(&fg, &g0, 1e-5), 1e-6, "dgain");
        assert_close(&grads["b"].values, &numeric_grad(&fb, &b0, 1e-5), 1e-6, "dbias");
    }

    #[test]
    fn structural_op_gradients_match_finite_differences() {
        check_op("transpose", 3, 2, random_vec(6, -2.0, 2.0, 40), |t, x| t.transpose(x));
        check_op("slice_rows", 4, 3, random_vec(12, -2.0, 2.0, 41), |t, x| t.slice_rows(x, 1, 2));
        check_op("slice_cols", 2, 5, random_vec(10, -2.0, 2.0, 42), |t, x| t.slice_cols(x, 2, 2));
        check_op("reshape", 2, 6, random_vec(12, -2.0, 2.0, 43), |t, x| t.reshape(x, 3, 4));
        check_op("repeat_rows", 1, 3, random_vec(3, -2.0, 2.0, 44), |t, x| t.repeat_rows(x, 4));
        check_op("sum_rows", 3, 4, random_vec(12, -2.0, 2.0, 45), |t, x| t.sum_rows(x));
        check_op("sum_cols", 3, 4, random_vec(12, -2.0, 2.0, 46), |t, x| t.sum_cols(x));
        check_op("concat_split", 2, 6, random_vec(12, -2.0, 2.0, 47), |t, x| {
            let left = t.slice_cols(x, 0, 2);
            let right = t.slice_cols(x, 2, 4);
            t.concat_cols(&[right, left])
        });
        check_op("concat_rows", 4, 3, random_vec(12, -2.0, 2.0, 48), |t, x| {
            let top = t.slice_rows(x, 0, 1);
            let rest = t.slice_rows(x, 1, 3);
            t.concat_rows(&[rest, top, top])
        });
        // Repeated gather indices must accumulate into the same table row.
        check_op("gather_rows", 5, 3, random_vec(15, -2.0, 2.0, 49), |t, x| {
            t.gather_rows(x, &[4, 0, 2, 0])
        });
        check_op("cumprod", 1, 6, random_vec(6, 0.2, 0.95, 50), |t, x| t.cumprod_row(x));
        check_op("div", 1, 4, random_vec(4, 0.5, 2.0, 51), |t, x| {
            let c = t.add_const(x, 1.5);
            t.div(x, c)
        });
    }

    #[test]
    fn add_broadcast_gradients_match_finite_differences() {
        // Row-vector bias broadcast over a matrix.
        let (m, n) = (3, 4);
        let x0 = random_vec(m * n, -1.0, 1.0, 60);
        let b0 = random_vec(n, -1.0, 1.0, 61);
        let weights = Tensor::from_values(m, n, random_vec(m * n, -1.0, 1.0, 62));
        let run = |xv: &[f64], bv: &[f64]| -> (f64, GradMap) {
            let mut s = ParameterStore::new(0);
            s.insert("x", Tensor::from_values(m, n, xv.to_vec()));
            s.insert("b", Tensor::row(bv.to_vec()));
            let mut tape = Tape::new();
            let x = tape.param(&s, "x");
            let b = tape.param(&s, "b");
            let y = tape.add(x, b);
            let w = tape.input(&weights);
            let p = tape.mul(y, w);
            let loss = tape.sum_all(p);
            (tape.value_scalar(loss), tape.backward(loss).unwrap())
        };
        let (_, grads) = run(&x0, &b0);
        let fx = |v: &[f64]| run(v, &b0).0;
        let fb = |v: &[f64]| run(&x0, v).0;
        assert_close(&grads["x"].values, &numeric_grad(&fx, &x0, 1e-5), 1e-6, "dx");
        assert_close(&grads["b"].values, &numeric_grad(&fb, &b0, 1e-5), 1e-6, "dbias");
    }

    #[test]
    fn cumprod_handles_exact_zero_without_nan() {
        let mut store = ParameterStore::new(0);
        store.insert("q", Tensor::row(vec![0.5, 0.0, 0.5]));
        let mut tape = Tape::new();
        let q = tape.param(&store, "q");
        let p = tape.cumprod_row(q);
        assert_eq!(tape.values(p), &[0.5, 0.0, 0.0]);
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap();
        assert!(grads["q"].values.iter().all(|v| v.is_finite()));
        // dp/dq_1 at q = (0.5, 0, 0.5): p_1 + p_2 terms give 0.5 + 0.25.
        assert!((grads["q"].values[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            let mut store = ParameterStore::new(0);
            store.insert("w", Tensor::from_values(3, 3, random_vec(9, -1.0, 1.0, 70)));
            store.insert("x", Tensor::from_values(2, 3, random_vec(6, -1.0, 1.0, 71)));
            let mut tape = Tape::new();
            let w = tape.param(&store, "w");
            let x = tape.param(&store, "x");
            let h = tape.matmul(x, w);
            let s = tape.sigmoid(h);
            let sm = tape.softmax_rows(s, None);
            let loss = tape.sum_all(sm);
            tape.backward(loss).unwrap()
        };
        let a = run();
        let b = run();
        for (name, t) in &a {
            let bits_a: Vec<u64> = t.values.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b[name].values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "gradient {name} not bitwise reproducible");
        }
    }

    #[test]
    fn non_finite_intermediate_is_reported_with_op_name() {
        let mut store = ParameterStore::new(0);
        store.insert("x", Tensor::row(vec![-1.0, 0.5]));
        let mut tape = Tape::new();
        let x = tape.param(&store, "x");
        let l = tape.log(x); // log(-1) = NaN
        let loss = tape.sum_all(l);
        let err = tape.backward(loss).unwrap_err();
        match err {
            NumericsError::NonFinite { op, .. } => assert_eq!(op, "log"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn double_binding_accumulates_exported_gradients() {
        let mut store = ParameterStore::new(0);
        store.insert("w", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let w1 = tape.param(&store, "w");
        let w2 = tape.param(&store, "w");
        let s = tape.add(w1, w2);
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["w"].values, vec![2.0]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns_exactly() {
        let mut tape = Tape::new();
        let x = tape.input_row(vec![1.0, 2.0, 3.0, 4.0]);
        let s = tape.softmax_rows(x, Some(vec![true, false, true, false]));
        let v = tape.values(s);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
    }
}
