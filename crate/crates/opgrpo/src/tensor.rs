//! Minimal dense f64 tensors with tape-based reverse-mode autodiff.
//!
//! Everything is 64-bit: the SDE transition log-prob has a sigma^2
//! denominator that vanishes at late denoising steps, and f32 rounding
//! would be indistinguishable from the ill-conditioning under study.
//! Any NaN/Inf produced by a forward or backward pass is an immediate
//! error carrying the originating op name.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called twice without a fresh forward pass")]
    DoubleBackward,
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Handle into a [`Tape`]. Cheap to copy; only valid for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Min(TensorId, TensorId),
    Exp(TensorId),
    Log(TensorId),
    Tanh(TensorId),
    Square(TensorId),
    Neg(TensorId),
    Clamp(TensorId, f64, f64),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    Sum(TensorId),
    Mean(TensorId),
    Concat(Vec<TensorId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Min(..) => "min",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Square(..) => "square",
            Op::Neg(..) => "neg",
            Op::Clamp(..) => "clamp",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat(..) => "concat",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Wengert tape: records primitive ops during the forward pass and
/// replays them in exact reverse order in [`Tape::backward`].
///
/// A tape is single-use for gradients: build a fresh tape per loss
/// evaluation. Tensors are confined to their tape; no shared mutation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    pub fn leaf(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> TensorResult<TensorId> {
        if numel(&shape) != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {:?} vs {} elements", shape, data.len()),
            });
        }
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> TensorResult<TensorId> {
        self.leaf(vec![1], vec![value], false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient of the last `backward` loss w.r.t. this tensor.
    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> TensorResult<TensorId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let grad = if requires_grad { vec![0.0; data.len()] } else { Vec::new() };
        self.nodes.push(Node { shape, data, grad, requires_grad, op });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn child_flags(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * db[p * n + j];
                }
            }
        }
        let rg = self.child_flags(&[a, b]);
        self.push(vec![m, n], out, rg, Op::Matmul(a, b))
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> TensorResult<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (na, nb) = (numel(sa), numel(sb));
        // Equal shapes, or a one-element operand broadcast against the other.
        let (shape, len) = if sa == sb {
            (sa.clone(), na)
        } else if na == 1 {
            (sb.clone(), nb)
        } else if nb == 1 {
            (sa.clone(), na)
        } else {
            return Err(TensorError::ShapeMismatch {
                op: op.name(),
                detail: format!("{:?} vs {:?}", sa, sb),
            });
        };
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let x = da[if na == 1 { 0 } else { i }];
            let y = db[if nb == 1 { 0 } else { i }];
            out.push(f(x, y));
        }
        let rg = self.child_flags(&[a, b]);
        self.push(shape, out, rg, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        if self.nodes[b.0].data.iter().any(|v| *v == 0.0) {
            return Err(TensorError::Domain { op: "div", detail: "division by zero".into() });
        }
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn min(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary(a, b, Op::Min(a, b), f64::min)
    }

    fn unary(
        &mut self,
        a: TensorId,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> TensorResult<TensorId> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, data, rg, op)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorResult<TensorId> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: TensorId) -> TensorResult<TensorId> {
        if self.nodes[a.0].data.iter().any(|v| *v <= 0.0) {
            return Err(TensorError::Domain { op: "log", detail: "log of non-positive value".into() });
        }
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorResult<TensorId> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn square(&mut self, a: TensorId) -> TensorResult<TensorId> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn neg(&mut self, a: TensorId) -> TensorResult<TensorId> {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorResult<TensorId> {
        if !(lo <= hi) {
            return Err(TensorError::Domain {
                op: "clamp",
                detail: format!("invalid interval [{lo}, {hi}]"),
            });
        }
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn add_scalar(&mut self, a: TensorId, k: f64) -> TensorResult<TensorId> {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn mul_scalar(&mut self, a: TensorId, k: f64) -> TensorResult<TensorId> {
        self.unary(a, Op::MulScalar(a, k), |x| x * k)
    }

    pub fn sum(&mut self, a: TensorId) -> TensorResult<TensorId> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: TensorId) -> TensorResult<TensorId> {
        let n = self.nodes[a.0].data.len();
        if n == 0 {
            return Err(TensorError::Domain { op: "mean", detail: "empty tensor".into() });
        }
        let s: f64 = self.nodes[a.0].data.iter().sum::<f64>() / n as f64;
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s], rg, Op::Mean(a))
    }

    /// Concatenate row vectors `[1, k_i]` (or flat `[k_i]`) into `[1, sum k_i]`.
    pub fn concat(&mut self, parts: &[TensorId]) -> TensorResult<TensorId> {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let rg = self.child_flags(parts);
        let n = data.len();
        self.push(vec![1, n], data, rg, Op::Concat(parts.to_vec()))
    }

    fn accumulate(&mut self, id: TensorId, contrib: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        if numel(&node.shape) == 1 && contrib.len() > 1 {
            // broadcast operand: reduce
            node.grad[0] += contrib.iter().sum::<f64>();
        } else {
            for (g, c) in node.grad.iter_mut().zip(contrib) {
                *g += c;
            }
        }
    }

    /// Populate `grad` of every `requires_grad` leaf with d(loss)/d(leaf).
    pub fn backward(&mut self, loss: TensorId) -> TensorResult<()> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if self.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let cg = self.nodes[i].grad.clone();
            if cg.iter().all(|v| *v == 0.0) {
                continue;
            }
            if cg.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: self.nodes[i].op.name() });
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => unreachable!(),
                Op::Matmul(a, b) => {
                    let sa = self.nodes[a.0].shape.clone();
                    let sb = self.nodes[b.0].shape.clone();
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let da = self.nodes[a.0].data.clone();
                    let db = self.nodes[b.0].data.clone();
                    // dA = dC . B^T
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += cg[r * n + j] * db[p * n + j];
                            }
                            ga[r * k + p] = s;
                        }
                    }
                    // dB = A^T . dC
                    let mut gb = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for r in 0..m {
                                s += da[r * k + p] * cg[r * n + j];
                            }
                            gb[p * n + j] = s;
                        }
                    }
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, &cg);
                    self.accumulate(b, &cg);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &cg);
                    let neg: Vec<f64> = cg.iter().map(|v| -v).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul(a, b) => {
                    let (da, db) = (self.nodes[a.0].data.clone(), self.nodes[b.0].data.clone());
                    let ga = Self::broadcast_zip(&cg, &db, |g, y| g * y);
                    let gb = Self::broadcast_zip(&cg, &da, |g, x| g * x);
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::Div(a, b) => {
                    let (da, db) = (self.nodes[a.0].data.clone(), self.nodes[b.0].data.clone());
                    let ga = Self::broadcast_zip(&cg, &db, |g, y| g / y);
                    let gb: Vec<f64> = (0..cg.len())
                        .map(|idx| {
                            let x = da[if da.len() == 1 { 0 } else { idx }];
                            let y = db[if db.len() == 1 { 0 } else { idx }];
                            -cg[idx] * x / (y * y)
                        })
                        .collect();
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::Min(a, b) => {
                    let (da, db) = (self.nodes[a.0].data.clone(), self.nodes[b.0].data.clone());
                    let mut ga = vec![0.0; cg.len()];
                    let mut gb = vec![0.0; cg.len()];
                    for idx in 0..cg.len() {
                        let x = da[if da.len() == 1 { 0 } else { idx }];
                        let y = db[if db.len() == 1 { 0 } else { idx }];
                        if x <= y {
                            ga[idx] = cg[idx];
                        } else {
                            gb[idx] = cg[idx];
                        }
                    }
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::Exp(a) => {
                    let out = self.nodes[i].data.clone();
                    let ga: Vec<f64> = cg.iter().zip(&out).map(|(g, y)| g * y).collect();
                    self.accumulate(a, &ga);
                }
                Op::Log(a) => {
                    let da = self.nodes[a.0].data.clone();
                    let ga: Vec<f64> = cg.iter().zip(&da).map(|(g, x)| g / x).collect();
                    self.accumulate(a, &ga);
                }
                Op::Tanh(a) => {
                    let out = self.nodes[i].data.clone();
                    let ga: Vec<f64> = cg.iter().zip(&out).map(|(g, y)| g * (1.0 - y * y)).collect();
                    self.accumulate(a, &ga);
                }
                Op::Square(a) => {
                    let da = self.nodes[a.0].data.clone();
                    let ga: Vec<f64> = cg.iter().zip(&da).map(|(g, x)| g * 2.0 * x).collect();
                    self.accumulate(a, &ga);
                }
                Op::Neg(a) => {
                    let ga: Vec<f64> = cg.iter().map(|v| -v).collect();
                    self.accumulate(a, &ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let da = self.nodes[a.0].data.clone();
                    let ga: Vec<f64> = cg
                        .iter()
                        .zip(&da)
                        .map(|(g, &x)| if x >= lo && x <= hi { *g } else { 0.0 })
                        .collect();
                    self.accumulate(a, &ga);
                }
                Op::AddScalar(a) => self.accumulate(a, &cg),
                Op::MulScalar(a, k) => {
                    let ga: Vec<f64> = cg.iter().map(|v| v * k).collect();
                    self.accumulate(a, &ga);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].data.len();
                    self.accumulate(a, &vec![cg[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].data.len();
                    self.accumulate(a, &vec![cg[0] / n as f64; n]);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].data.len();
                        let slice = cg[off..off + n].to_vec();
                        self.accumulate(p, &slice);
                        off += n;
                    }
                }
            }
        }
        // Leaf gradients must be finite too.
        for node in &self.nodes {
            if node.requires_grad && node.grad.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(())
    }

    fn broadcast_zip(cg: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        (0..cg.len())
            .map(|i| f(cg[i], other[if other.len() == 1 { 0 } else { i }]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_leaf(tape: &mut Tape, v: f64) -> TensorId {
        tape.leaf(vec![1], vec![v], true).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.leaf(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
        let b = t.leaf(vec![2, 1], vec![3.0, 4.0], false).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_inner_product() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1, 2], vec![1.0, 2.0], false).unwrap();
        let b = t.leaf(vec![2, 1], vec![3.0, 4.0], false).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.leaf(vec![2, 3], vec![0.0; 6], false).unwrap();
        let b = t.leaf(vec![4, 2], vec![0.0; 8], false).unwrap();
        assert!(matches!(t.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn elementwise_basics() {
        let mut t = Tape::new();
        let z = t.leaf(vec![1], vec![0.0], false).unwrap();
        let one = t.leaf(vec![1], vec![1.0], false).unwrap();
        assert_eq!(t.exp(z).map(|id| t.value(id)).unwrap(), 1.0);
        assert_eq!(t.log(one).map(|id| t.value(id)).unwrap(), 0.0);
        let x = t.leaf(vec![1], vec![1.5], false).unwrap();
        assert_eq!(t.clamp(x, 0.8, 1.2).map(|id| t.value(id)).unwrap(), 1.2);
    }

    #[test]
    fn log_domain_error() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1], vec![-1.0], false).unwrap();
        assert!(matches!(t.log(x), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn div_by_zero_error() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1], vec![1.0], false).unwrap();
        let b = t.leaf(vec![1], vec![0.0], false).unwrap();
        assert!(matches!(t.div(a, b), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn backward_square() {
        let mut t = Tape::new();
        let w = scalar_leaf(&mut t, 3.0);
        let sq = t.square(w).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w), &[6.0]);
    }

    #[test]
    fn backward_product() {
        let mut t = Tape::new();
        let w = scalar_leaf(&mut t, 2.0);
        let x = t.leaf(vec![1], vec![5.0], false).unwrap();
        let loss = t.mul(w, x).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w), &[5.0]);
    }

    #[test]
    fn double_backward_is_error() {
        let mut t = Tape::new();
        let w = scalar_leaf(&mut t, 1.0);
        let loss = t.square(w).unwrap();
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(TensorError::DoubleBackward)));
    }

    #[test]
    fn non_scalar_loss_is_error() {
        let mut t = Tape::new();
        let w = t.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(t.backward(w), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn clamp_gradient_gating() {
        // unit gradient inside the interval, zero outside
        let mut t = Tape::new();
        let w = t.leaf(vec![3], vec![0.5, 1.5, -0.2], true).unwrap();
        let c = t.clamp(w, 0.0, 1.0).unwrap();
        let loss = t.sum(c).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn nan_input_rejected() {
        let mut t = Tape::new();
        assert!(matches!(
            t.leaf(vec![1], vec![f64::NAN], false),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn overflow_exp_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1], vec![1e9], false).unwrap();
        assert!(matches!(t.exp(x), Err(TensorError::NonFinite { op: "exp" })));
    }
}
