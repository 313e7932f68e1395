//! Define-by-run reverse-mode autodiff over vector-valued nodes.
//!
//! Every op computes its value eagerly and records enough structure for one
//! reverse sweep. Nodes are created in topological order by construction, so
//! `backward` visits each node exactly once in reverse creation order.

use super::kernels;
use super::tensor::Tensor;
use super::AutoError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddN(Vec<NodeId>),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId, Option<Vec<bool>>),
    Pick(NodeId, usize),
    Sum(NodeId),
    Square(NodeId),
    Exp(NodeId),
    Clamp(NodeId, f64, f64),
    Concat(Vec<NodeId>),
    NormalizeSum(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward sweep, indexed by the node they belong to.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. `id`, or `None` if the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient w.r.t. `id`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    /// `w` must be a `[rows, cols]` matrix and `x` a `[cols]` vector.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId, AutoError> {
        let ws = self.value(w).shape();
        let xs = self.value(x).shape();
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(AutoError::ShapeMismatch(format!(
                "matvec: weight {ws:?} against input {xs:?}"
            )));
        }
        let (rows, cols) = (ws[0], ws[1]);
        let mut out = vec![0.0; rows];
        kernels::matvec(self.value(w).data(), rows, cols, self.value(x).data(), &mut out);
        Ok(self.push(Tensor::vector(out), Op::MatVec(w, x)))
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<(), AutoError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutoError::ShapeMismatch(format!(
                "{what}: {:?} against {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutoError> {
        self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b)))
    }

    /// Elementwise sum of any number of same-shaped nodes.
    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId, AutoError> {
        let first = *parts
            .first()
            .ok_or_else(|| AutoError::ShapeMismatch("add_n: empty operand list".into()))?;
        for &p in &parts[1..] {
            self.binary_same_shape(first, p, "add_n")?;
        }
        let mut data = self.value(first).data().to_vec();
        for &p in &parts[1..] {
            for (o, v) in data.iter_mut().zip(self.value(p).data()) {
                *o += v;
            }
        }
        let shape = self.value(first).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddN(parts.to_vec())))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutoError> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutoError> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let t = self.map_unary(a, |v| -v);
        self.push(t, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.map_unary(a, |v| c * v);
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.map_unary(a, |v| v + c);
        self.push(t, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        kernels::relu(src.data(), &mut out);
        let shape = src.shape().to_vec();
        self.push(
            Tensor::new(shape, out).expect("relu preserves shape"),
            Op::Relu(a),
        )
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        kernels::softmax(src.data(), &mut out);
        let shape = src.shape().to_vec();
        self.push(
            Tensor::new(shape, out).expect("softmax preserves shape"),
            Op::Softmax(a),
        )
    }

    /// Masked log-softmax; see [`kernels::log_softmax_masked`]. Fails when the
    /// mask annihilates every entry.
    pub fn log_softmax(
        &mut self,
        a: NodeId,
        mask: Option<&[bool]>,
    ) -> Result<NodeId, AutoError> {
        let src = self.value(a);
        if let Some(m) = mask {
            if m.len() != src.len() {
                return Err(AutoError::ShapeMismatch(format!(
                    "log_softmax: mask length {} against values {}",
                    m.len(),
                    src.len()
                )));
            }
        }
        let mut out = vec![0.0; src.len()];
        if !kernels::log_softmax_masked(src.data(), mask, &mut out) {
            return Err(AutoError::DeadBranch);
        }
        let shape = src.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out).expect("log_softmax preserves shape"),
            Op::LogSoftmax(a, mask.map(|m| m.to_vec())),
        ))
    }

    /// Scalar node holding `a[i]`.
    pub fn pick(&mut self, a: NodeId, i: usize) -> Result<NodeId, AutoError> {
        let src = self.value(a);
        if i >= src.len() {
            return Err(AutoError::ShapeMismatch(format!(
                "pick: index {i} out of bounds for length {}",
                src.len()
            )));
        }
        Ok(self.push(Tensor::scalar(src.data()[i]), Op::Pick(a, i)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let t = self.map_unary(a, |v| v * v);
        self.push(t, Op::Square(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let t = self.map_unary(a, |v| v.exp());
        self.push(t, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let t = self.map_unary(a, |v| v.clamp(lo, hi));
        self.push(t, Op::Clamp(a, lo, hi))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, AutoError> {
        if parts.is_empty() {
            return Err(AutoError::ShapeMismatch("concat: empty operand list".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    /// `y = x / sum(x)`; fails unless the total is positive and finite.
    pub fn normalize_sum(&mut self, a: NodeId) -> Result<NodeId, AutoError> {
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        if !kernels::normalize_sum(src.data(), &mut out) {
            return Err(AutoError::ShapeMismatch(
                "normalize_sum: total is not positive and finite".into(),
            ));
        }
        let shape = src.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out).expect("normalize_sum preserves shape"),
            Op::NormalizeSum(a),
        ))
    }

    fn map_unary(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let src = self.value(a);
        let data = src.data().iter().map(|v| f(*v)).collect();
        Tensor::new(src.shape().to_vec(), data).expect("unary op preserves shape")
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, AutoError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(AutoError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let g_data = g.data();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatVec(w, x) => {
                    let ws = self.value(*w).shape();
                    let (rows, cols) = (ws[0], ws[1]);
                    let wv = self.value(*w).data();
                    let xv = self.value(*x).data();
                    {
                        let gw = Self::grad_slot(&mut grads, *w, &[rows, cols]);
                        for r in 0..rows {
                            for c in 0..cols {
                                gw[r * cols + c] += g_data[r] * xv[c];
                            }
                        }
                    }
                    let gx = Self::grad_slot(&mut grads, *x, &[cols]);
                    for r in 0..rows {
                        let gr = g_data[r];
                        for c in 0..cols {
                            gx[c] += wv[r * cols + c] * gr;
                        }
                    }
                }
                Op::Add(a, b) => {
                    Self::accumulate(&mut grads, *a, g_data);
                    Self::accumulate(&mut grads, *b, g_data);
                }
                Op::AddN(parts) => {
                    for &p in parts {
                        Self::accumulate(&mut grads, p, g_data);
                    }
                }
                Op::Sub(a, b) => {
                    Self::accumulate(&mut grads, *a, g_data);
                    let gb = Self::grad_slot(&mut grads, *b, &[g_data.len()]);
                    for (o, v) in gb.iter_mut().zip(g_data) {
                        *o -= v;
                    }
                }
                Op::Mul(a, b) => {
                    let av: Vec<f64> = self.value(*a).data().to_vec();
                    let bv: Vec<f64> = self.value(*b).data().to_vec();
                    {
                        let ga = Self::grad_slot(&mut grads, *a, &[g_data.len()]);
                        for ((o, gv), y) in ga.iter_mut().zip(g_data).zip(&bv) {
                            *o += gv * y;
                        }
                    }
                    let gb = Self::grad_slot(&mut grads, *b, &[g_data.len()]);
                    for ((o, gv), x) in gb.iter_mut().zip(g_data).zip(&av) {
                        *o += gv * x;
                    }
                }
                Op::Neg(a) => {
                    let ga = Self::grad_slot(&mut grads, *a, &[g_data.len()]);
                    for (o, v) in ga.iter_mut().zip(g_data) {
                        *o -= v;
                    }
                }
                Op::Scale(a, c) => {
                    let ga = Self::grad_slot(&mut grads, *a, &[g_data.len()]);
                    for (o, v) in ga.iter_mut().zip(g_data) {
                        *o += c * v;
                    }
                }
                Op::AddConst(a) => {
                    Self::accumulate(&mut grads, *a, g_data);
                }
                Op::Relu(a) => {
                    let xv: Vec<f64> = self.value(*a).data().to_vec();
                    let ga = Self::grad_slot(&mut grads, *a, &[g_data.len()]);
                    for ((o, v), x) in ga.iter_mut().zip(g_data).zip(&xv) {
                        if *x > 0.0 {
                            *o += v;
                        }
                    }
                }
                Op::Softmax(a) => {
                    // y = softmax(x): dx_j = y_j * (g_j - <g, y>)
                    let yv: Vec<f64> = self.nodes[i].value.data().to_vec();
                    let dot: f64 = g_data.iter().zip(&yv).map(|(gv, y)| gv * y).sum();
                    let ga = Self::grad_slot(&mut grads, *a, &[g_data.len()]);
                    for ((o, gv), y) in ga.iter_mut().zip(g_data).zip(&yv) {
                        *o += y * (gv - dot);
                    }
                }
                Op::LogSoftmax(a, mask) => {
                    // out_j = x_j - lse: dx_j = g_j - p_j * sum_live(g)
                    let out: Vec<f64> = self.nodes[i].value.data().to_vec();
                    let live = |j: usize| mask.as_ref().map_or(true, |m| m[j]);
                    let mut gsum = 0.0;
                    for (j, gv) in g_data.iter().enumerate() {
                        if live(j) {
                            gsum += gv;
                        } else {
                            debug_assert_eq!(*gv, 0.0, "gradient flowed into a masked entry");
                        }
                    }
                    let ga = Self::grad_slot(&mut grads, *a, &[g_data.len()]);
                    for (j, o) in ga.iter_mut().enumerate() {
                        if live(j) {
                            *o += g_data[j] - out[j].exp() * gsum;
                        }
                    }
                }
                Op::Pick(a, idx) => {
                    let n = self.value(*a).len();
                    let ga = Self::grad_slot(&mut grads, *a, &[n]);
                    ga[*idx] += g_data[0];
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    let ga = Self::grad_slot(&mut grads, *a, &[n]);
                    for o in ga.iter_mut() {
                        *o += g_data[0];
                    }
                }
                Op::Square(a) => {
                    let xv: Vec<f64> = self.value(*a).data().to_vec();
                    let ga = Self::grad_slot(&mut grads, *a, &[g_data.len()]);
                    for ((o, gv), x) in ga.iter_mut().zip(g_data).zip(&xv) {
                        *o += 2.0 * x * gv;
                    }
                }
                Op::Exp(a) => {
                    let yv: Vec<f64> = self.nodes[i].value.data().to_vec();
                    let ga = Self::grad_slot(&mut grads, *a, &[g_data.len()]);
                    for ((o, gv), y) in ga.iter_mut().zip(g_data).zip(&yv) {
                        *o += gv * y;
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let xv: Vec<f64> = self.value(*a).data().to_vec();
                    let ga = Self::grad_slot(&mut grads, *a, &[g_data.len()]);
                    for ((o, gv), x) in ga.iter_mut().zip(g_data).zip(&xv) {
                        if *x > *lo && *x < *hi {
                            *o += gv;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let gp = Self::grad_slot(&mut grads, p, &[n]);
                        for (o, v) in gp.iter_mut().zip(&g_data[off..off + n]) {
                            *o += v;
                        }
                        off += n;
                    }
                }
                Op::NormalizeSum(a) => {
                    // y = x / S: dx_k = (g_k - <g, y>) / S
                    let yv: Vec<f64> = self.nodes[i].value.data().to_vec();
                    let total: f64 = self.value(*a).data().iter().sum();
                    let dot: f64 = g_data.iter().zip(&yv).map(|(gv, y)| gv * y).sum();
                    let ga = Self::grad_slot(&mut grads, *a, &[g_data.len()]);
                    for (o, gv) in ga.iter_mut().zip(g_data) {
                        *o += (gv - dot) / total;
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(
        grads: &'g mut [Option<Tensor>],
        id: NodeId,
        shape: &[usize],
    ) -> &'g mut [f64] {
        grads[id.0]
            .get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
            .data_mut()
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: &[f64]) {
        let slot = Self::grad_slot(grads, id, &[g.len()]);
        for (o, v) in slot.iter_mut().zip(g) {
            *o += v;
        }
    }
}

/// Central finite differences of `f` around `x`, step `h`. Used throughout
/// the test suites to check analytic gradients.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        out[i] = (up - down) / (2.0 * h);
    }
    out
}
