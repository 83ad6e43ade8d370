//! Reverse-mode automatic differentiation over 2-D double-precision
//! tensors. Nodes are created in evaluation order, so walking the tape
//! backwards is a valid reverse topological order. All reductions run in a
//! fixed sequential order, which keeps gradients bitwise reproducible.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Value {
    Owned(Array2<f64>),
    Shared(Arc<Array2<f64>>),
}

impl Value {
    fn get(&self) -> &Array2<f64> {
        match self {
            Value::Owned(a) => a,
            Value::Shared(a) => a,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// C = A . B
    MatMul { a: NodeId, b: NodeId },
    /// C = A . B^T
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// row (1 x d) broadcast-added to every row of a (m x d)
    AddRow { a: NodeId, row: NodeId },
    Scale { a: NodeId, c: f64 },
    AddConst { a: NodeId },
    MulConst { a: NodeId, k: Array2<f64> },
    SoftmaxRows { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Gelu { a: NodeId },
    Sigmoid { a: NodeId },
    ConcatCols { parts: Vec<(NodeId, usize)> },
    SliceCols { a: NodeId, start: usize, len: usize },
    GatherRows { table: NodeId, ids: Vec<usize> },
    /// Mean binary cross-entropy of a column of scores in (0,1).
    BceMean { scores: NodeId, labels: Vec<f64> },
    /// Mean cross-entropy of logit rows against (row, class) targets.
    MaskedCe { logits: NodeId, targets: Vec<(usize, usize)> },
}

struct Node {
    value: Value,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn layer_norm_stats(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mu = mean[i];
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
        inv_std[i] = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    }
    (mean, inv_std)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        self.nodes[id.0].value.get()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_shared(&mut self, value: Arc<Array2<f64>>) -> NodeId {
        self.nodes.push(Node {
            value: Value::Shared(value),
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul { a, b })
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNT { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add { a, b })
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row).row(0).to_owned();
        let v = self.value(a) + &r;
        self.push(v, Op::AddRow { a, row })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(v, Op::Scale { a, c })
    }

    pub fn add_const(&mut self, a: NodeId, k: &Array2<f64>) -> NodeId {
        let v = self.value(a) + k;
        self.push(v, Op::AddConst { a })
    }

    pub fn mul_const(&mut self, a: NodeId, k: Array2<f64>) -> NodeId {
        let v = self.value(a) * &k;
        self.push(v, Op::MulConst { a, k })
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows { a })
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (mean, inv_std) = layer_norm_stats(xv);
        let mut out = Array2::zeros(xv.raw_dim());
        let g = self.value(gain).row(0).to_owned();
        let b = self.value(bias).row(0).to_owned();
        for (i, row) in xv.rows().into_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                out[[i, j]] = g[j] * (v - mean[i]) * inv_std[i] + b[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid { a })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).nrows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Array2::zeros((rows, total));
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            out.slice_mut(s![.., offset..offset + w])
                .assign(self.value(p));
            offset += w;
        }
        let parts = parts.iter().cloned().zip(widths).collect();
        self.push(out, Op::ConcatCols { parts })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { a, start, len })
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean over candidates of -[y ln s + (1-y) ln(1-s)], scores clipped
    /// into [BCE_EPS, 1 - BCE_EPS].
    pub fn bce_mean(&mut self, scores: NodeId, labels: Vec<f64>) -> NodeId {
        let s = self.value(scores);
        assert_eq!(s.ncols(), 1, "scores must be a column");
        assert_eq!(s.nrows(), labels.len(), "scores/labels length mismatch");
        let n = labels.len() as f64;
        let mut loss = 0.0;
        for (row, &y) in s.rows().into_iter().zip(&labels) {
            let sc = row[0].clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss -= y * sc.ln() + (1.0 - y) * (1.0 - sc).ln();
        }
        let v = Array2::from_elem((1, 1), loss / n);
        self.push(v, Op::BceMean { scores, labels })
    }

    /// Mean over `(row, class)` targets of the row's softmax cross-entropy.
    pub fn masked_ce(&mut self, logits: NodeId, targets: Vec<(usize, usize)>) -> NodeId {
        assert!(!targets.is_empty(), "cross-entropy needs at least one target");
        let z = self.value(logits);
        let n = targets.len() as f64;
        let mut loss = 0.0;
        for &(row, class) in &targets {
            let r = z.row(row);
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - r[class];
        }
        let v = Array2::from_elem((1, 1), loss / n);
        self.push(v, Op::MaskedCe { logits, targets })
    }

    /// Gradients of the scalar at `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(loss).len(), 1, "loss must be scalar");
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let add_grad = |grads: &mut Vec<Option<Array2<f64>>>, id: NodeId, d: Array2<f64>| {
                match &mut grads[id.0] {
                    Some(acc) => *acc += &d,
                    slot => *slot = Some(d),
                }
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::MatMulNT { a, b } => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    add_grad(&mut grads, *a, g.clone());
                    add_grad(&mut grads, *b, g);
                }
                Op::AddRow { a, row } => {
                    let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    add_grad(&mut grads, *a, g);
                    add_grad(&mut grads, *row, drow);
                }
                Op::Scale { a, c } => {
                    add_grad(&mut grads, *a, &g * *c);
                }
                Op::AddConst { a } => {
                    add_grad(&mut grads, *a, g);
                }
                Op::MulConst { a, k } => {
                    add_grad(&mut grads, *a, &g * k);
                }
                Op::SoftmaxRows { a } => {
                    let y = self.value(NodeId(idx));
                    let mut da = Array2::zeros(y.raw_dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..y.ncols() {
                            da[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    add_grad(&mut grads, *a, da);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xv = self.value(*x);
                    let (mean, inv_std) = layer_norm_stats(xv);
                    let gv = self.value(*gain).row(0).to_owned();
                    let d = xv.ncols() as f64;
                    let mut dx = Array2::zeros(xv.raw_dim());
                    let mut dgain = Array2::zeros((1, xv.ncols()));
                    let mut dbias = Array2::zeros((1, xv.ncols()));
                    for i in 0..xv.nrows() {
                        let inv = inv_std[i];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..xv.ncols() {
                            let xhat = (xv[[i, j]] - mean[i]) * inv;
                            let dxhat = g[[i, j]] * gv[j];
                            dgain[[0, j]] += g[[i, j]] * xhat;
                            dbias[[0, j]] += g[[i, j]];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for j in 0..xv.ncols() {
                            let xhat = (xv[[i, j]] - mean[i]) * inv;
                            let dxhat = g[[i, j]] * gv[j];
                            dx[[i, j]] =
                                inv * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
                        }
                    }
                    add_grad(&mut grads, *x, dx);
                    add_grad(&mut grads, *gain, dgain);
                    add_grad(&mut grads, *bias, dbias);
                }
                Op::Gelu { a } => {
                    let da = ndarray::Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|gv, xv| gv * gelu_prime(*xv));
                    add_grad(&mut grads, *a, da);
                }
                Op::Sigmoid { a } => {
                    let y = self.value(NodeId(idx));
                    let da = ndarray::Zip::from(&g)
                        .and(y)
                        .map_collect(|gv, yv| gv * yv * (1.0 - yv));
                    add_grad(&mut grads, *a, da);
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &(p, w) in parts {
                        let dp = g.slice(s![.., offset..offset + w]).to_owned();
                        add_grad(&mut grads, p, dp);
                        offset += w;
                    }
                }
                Op::SliceCols { a, start, len } => {
                    let src = self.value(*a);
                    let mut da = Array2::zeros(src.raw_dim());
                    da.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    add_grad(&mut grads, *a, da);
                }
                Op::GatherRows { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Array2::zeros(t.raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = dt.row_mut(id);
                        dst += &g.row(r);
                    }
                    add_grad(&mut grads, *table, dt);
                }
                Op::BceMean { scores, labels } => {
                    let scale = g[[0, 0]] / labels.len() as f64;
                    let s = self.value(*scores);
                    let mut ds = Array2::zeros(s.raw_dim());
                    for (i, &y) in labels.iter().enumerate() {
                        let v = s[[i, 0]];
                        if v > BCE_EPS && v < 1.0 - BCE_EPS {
                            ds[[i, 0]] = scale * (-y / v + (1.0 - y) / (1.0 - v));
                        }
                    }
                    add_grad(&mut grads, *scores, ds);
                }
                Op::MaskedCe { logits, targets } => {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let z = self.value(*logits);
                    let mut dz = Array2::zeros(z.raw_dim());
                    for &(row, class) in targets {
                        let r = z.row(row);
                        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = r.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..z.ncols() {
                            let p = (z[[row, j]] - max).exp() / denom;
                            dz[[row, j]] += scale * (p - if j == class { 1.0 } else { 0.0 });
                        }
                    }
                    add_grad(&mut grads, *logits, dz);
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads[id.0].take()
    }

    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    /// Central finite differences over every entry of every leaf.
    fn finite_diff<F>(leaves: &mut [Array2<f64>], f: F, eps: f64) -> Vec<Array2<f64>>
    where
        F: Fn(&[Array2<f64>]) -> f64,
    {
        let mut out = Vec::new();
        for li in 0..leaves.len() {
            let mut grad = Array2::zeros(leaves[li].raw_dim());
            for idx in 0..leaves[li].len() {
                let (r, c) = (idx / leaves[li].ncols(), idx % leaves[li].ncols());
                let orig = leaves[li][[r, c]];
                leaves[li][[r, c]] = orig + eps;
                let fp = f(leaves);
                leaves[li][[r, c]] = orig - eps;
                let fm = f(leaves);
                leaves[li][[r, c]] = orig;
                grad[[r, c]] = (fp - fm) / (2.0 * eps);
            }
            out.push(grad);
        }
        out
    }

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = (a - b).mapv(f64::abs).sum();
        let norm = a.mapv(f64::abs).sum() + b.mapv(f64::abs).sum();
        if norm == 0.0 {
            0.0
        } else {
            diff / norm
        }
    }

    /// A scalar function exercising every differentiable op on the tape,
    /// checked against central finite differences.
    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(42);
        let rand = |rng: &mut rand_chacha::ChaCha20Rng, r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.gen::<f64>() - 0.5)
        };
        let mut leaves = vec![
            rand(&mut rng, 3, 4), // x
            rand(&mut rng, 4, 4), // w
            rand(&mut rng, 1, 4), // bias row
            rand(&mut rng, 1, 4), // ln gain
            rand(&mut rng, 1, 4), // ln bias
            rand(&mut rng, 2, 4), // m (for matmul_nt)
            rand(&mut rng, 5, 4), // table (gather)
        ];
        let k = rand(&mut rng, 3, 4);

        let build = |tape: &mut Tape, leaves: &[Array2<f64>]| -> NodeId {
            let x = tape.leaf(leaves[0].clone());
            let w = tape.leaf(leaves[1].clone());
            let brow = tape.leaf(leaves[2].clone());
            let gain = tape.leaf(leaves[3].clone());
            let bias = tape.leaf(leaves[4].clone());
            let m = tape.leaf(leaves[5].clone());
            let table = tape.leaf(leaves[6].clone());

            let gathered = tape.gather_rows(table, &[0, 2, 2]); // 3 x 4, repeated row
            let xg = tape.add(x, gathered);
            let xw = tape.matmul(xg, w);
            let xb = tape.add_row(xw, brow);
            let xc = tape.add_const(xb, &k);
            let xs = tape.scale(xc, 0.7);
            let ln = tape.layer_norm(xs, gain, bias);
            let ge = tape.gelu(ln);
            let att = tape.matmul_nt(m, ge); // 2 x 3
            let sm = tape.softmax_rows(att);
            let ctx = tape.matmul(sm, ge); // 2 x 4
            let left = tape.slice_cols(ctx, 0, 2);
            let right = tape.slice_cols(ctx, 2, 2);
            let cat = tape.concat_cols(&[left, right]);
            let sg = tape.sigmoid(cat);
            let mask = Array2::from_shape_fn((2, 4), |(i, j)| ((i + j) % 2) as f64 + 0.5);
            let masked = tape.mul_const(sg, mask);
            let col = tape.slice_cols(masked, 0, 1);
            tape.bce_mean(col, vec![1.0, 0.0])
        };

        let mut tape = Tape::new();
        let leaf_arrays = leaves.clone();
        let loss = build(&mut tape, &leaf_arrays);
        // Leaves are the first 7 nodes in creation order.
        let leaf_ids: Vec<NodeId> = (0..7).map(NodeId).collect();
        let mut grads = tape.backward(loss);

        let numeric = finite_diff(
            &mut leaves,
            |ls| {
                let mut t = Tape::new();
                let out = build(&mut t, ls);
                t.value(out)[[0, 0]]
            },
            1e-6,
        );
        for (i, id) in leaf_ids.iter().enumerate() {
            let analytic = grads.take(*id).expect("leaf gradient");
            let err = rel_err(&analytic, &numeric[i]);
            assert!(err < 1e-7, "leaf {i}: rel err {err}");
        }
    }

    #[test]
    fn masked_ce_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
        let mut leaves = vec![Array2::from_shape_fn((4, 6), |_| rng.gen::<f64>() - 0.5)];
        let targets = vec![(0usize, 3usize), (2, 1), (3, 5)];
        let build = |tape: &mut Tape, ls: &[Array2<f64>], targets: &[(usize, usize)]| {
            let z = tape.leaf(ls[0].clone());
            tape.masked_ce(z, targets.to_vec())
        };
        let mut tape = Tape::new();
        let loss = build(&mut tape, &leaves, &targets);
        let mut grads = tape.backward(loss);
        let analytic = grads.take(NodeId(0)).unwrap();
        let numeric = finite_diff(
            &mut leaves,
            |ls| {
                let mut t = Tape::new();
                let out = build(&mut t, ls, &targets);
                t.value(out)[[0, 0]]
            },
            1e-6,
        );
        assert!(rel_err(&analytic, &numeric[0]) < 1e-8);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_stabilize() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1000.0, 1001.0, 999.0], [-5.0, 0.0, 5.0]]);
        let y = tape.softmax_rows(x);
        for row in tape.value(y).rows() {
            let sum: f64 = row.iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn bce_mean_known_values() {
        let mut tape = Tape::new();
        let s = tape.leaf(array![[0.5], [0.5]]);
        let l = tape.bce_mean(s, vec![1.0, 0.0]);
        assert_relative_eq!(tape.value(l)[[0, 0]], 2f64.ln(), epsilon = 1e-12);

        let mut tape = Tape::new();
        let s = tape.leaf(array![[0.9], [0.2]]);
        let l = tape.bce_mean(s, vec![1.0, 0.0]);
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert_relative_eq!(tape.value(l)[[0, 0]], expected, epsilon = 1e-12);
    }

    #[test]
    fn shared_leaves_share_storage() {
        let data = Arc::new(array![[1.0, 2.0], [3.0, 4.0]]);
        let mut tape = Tape::new();
        let a = tape.leaf_shared(data.clone());
        let b = tape.scale(a, 2.0);
        assert_eq!(tape.value(b)[[1, 1]], 8.0);
        assert_eq!(Arc::strong_count(&data), 2);
    }
}
