use crate::error::{Error, Result};
use crate::num::Real;

use super::tensor::{matvec, mm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    /// [m,k] x [k,n]
    MatMul(usize, usize),
    /// [m,k] x [k]
    MatVec(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Dot(usize, usize),
    AddScalar(usize, F),
    MulScalar(usize, F),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
    /// Row lookup into a [rows, cols] table.
    Gather { table: usize, row: usize },
    /// `sum_i w_i * items_i` with `w` a vector of matching length.
    WeightedSum { weights: usize, items: Vec<usize> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    grad: bool,
}

/// Gradient buffers produced by a backward pass, indexed by node.
/// Every differentiable node has a buffer (zeros if the root does not
/// depend on it); non-differentiable nodes have none.
pub struct Gradients<F> {
    g: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.g.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.g.get_mut(id.0).and_then(|s| s.take())
    }
}

/// Wengert list: append-only record of operations whose reverse sweep
/// accumulates adjoints. Construction order is the evaluation order, so a
/// fixed program yields a byte-identical tape.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input; backward never reaches it.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, grad });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::Dim(format!(
                "matmul {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let v = mm(va, vb);
        let g = self.any_grad(&[a.0, b.0]);
        Ok(self.push(v, Op::MatMul(a.0, b.0), g))
    }

    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> Result<NodeId> {
        let (va, vx) = (&self.nodes[a.0].value, &self.nodes[x.0].value);
        if va.rank() != 2 || vx.rank() != 1 || va.shape()[1] != vx.len() {
            return Err(Error::Dim(format!(
                "matvec {:?} x {:?}",
                va.shape(),
                vx.shape()
            )));
        }
        let v = matvec(va, vx);
        let g = self.any_grad(&[a.0, x.0]);
        Ok(self.push(v, Op::MatVec(a.0, x.0), g))
    }

    fn elementwise2(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<()> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::Dim(format!(
                "{} {:?} vs {:?}",
                name,
                va.shape(),
                vb.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "add")?;
        let mut v = self.nodes[a.0].value.clone();
        v.add_assign(&self.nodes[b.0].value);
        let g = self.any_grad(&[a.0, b.0]);
        Ok(self.push(v, Op::Add(a.0, b.0), g))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "sub")?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let g = self.any_grad(&[a.0, b.0]);
        Ok(self.push(v, Op::Sub(a.0, b.0), g))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "mul")?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let g = self.any_grad(&[a.0, b.0]);
        Ok(self.push(v, Op::Mul(a.0, b.0), g))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 1 || vb.rank() != 1 || va.len() != vb.len() {
            return Err(Error::Dim(format!("dot {:?} . {:?}", va.shape(), vb.shape())));
        }
        let v = Tensor::scalar(va.dot(vb));
        let g = self.any_grad(&[a.0, b.0]);
        Ok(self.push(v, Op::Dot(a.0, b.0), g))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x + c);
        let g = self.nodes[a.0].grad;
        self.push(v, Op::AddScalar(a.0, c), g)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x * c);
        let g = self.nodes[a.0].grad;
        self.push(v, Op::MulScalar(a.0, c), g)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.tanh());
        let g = self.nodes[a.0].grad;
        self.push(v, Op::Tanh(a.0), g)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = F::one();
        let v = self.nodes[a.0].value.map(|x| one / (one + (-x).exp()));
        let g = self.nodes[a.0].grad;
        self.push(v, Op::Sigmoid(a.0), g)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.exp());
        let g = self.nodes[a.0].grad;
        self.push(v, Op::Exp(a.0), g)
    }

    /// Natural log; the caller is responsible for keeping inputs positive.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.ln());
        let g = self.nodes[a.0].grad;
        self.push(v, Op::Log(a.0), g)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.softmax_1d()?;
        let g = self.nodes[a.0].grad;
        Ok(self.push(v, Op::Softmax(a.0), g))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.log_softmax_1d()?;
        let g = self.nodes[a.0].grad;
        Ok(self.push(v, Op::LogSoftmax(a.0), g))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.nodes[a.0].value.sum());
        let g = self.nodes[a.0].grad;
        self.push(v, Op::Sum(a.0), g)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a.0].value.len();
        if n == 0 {
            return Err(Error::Dim("mean of empty tensor".into()));
        }
        let v = Tensor::scalar(self.nodes[a.0].value.sum() / F::from_f64(n as f64));
        let g = self.nodes[a.0].grad;
        Ok(self.push(v, Op::Mean(a.0), g))
    }

    /// Concatenate vectors and scalars into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dim("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.rank() > 1 {
                return Err(Error::Dim(format!("concat of rank-{} tensor", v.rank())));
            }
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let g = self.any_grad(&ids);
        Ok(self.push(Tensor::vector(data), Op::Concat(ids), g))
    }

    /// Row `row` of a [rows, cols] table, as a vector. Used for embeddings;
    /// backward accumulates only into that row.
    pub fn gather(&mut self, table: NodeId, row: usize) -> Result<NodeId> {
        let t = &self.nodes[table.0].value;
        if t.rank() != 2 {
            return Err(Error::Dim(format!("gather from rank-{} tensor", t.rank())));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if row >= rows {
            return Err(Error::Data(format!("gather row {} out of {} rows", row, rows)));
        }
        let v = Tensor::vector(t.data()[row * cols..(row + 1) * cols].to_vec());
        let g = self.nodes[table.0].grad;
        Ok(self.push(v, Op::Gather { table: table.0, row }, g))
    }

    /// `sum_i weights[i] * items[i]` over equally shaped vectors. This is the
    /// attention context reduction.
    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> Result<NodeId> {
        let w = &self.nodes[weights.0].value;
        if w.rank() != 1 || w.len() != items.len() {
            return Err(Error::Dim(format!(
                "weighted_sum of {} items with weight shape {:?}",
                items.len(),
                w.shape()
            )));
        }
        if items.is_empty() {
            return Err(Error::Dim("weighted_sum of zero items".into()));
        }
        let shape = self.nodes[items[0].0].value.shape().to_vec();
        for it in items {
            if self.nodes[it.0].value.shape() != shape.as_slice() {
                return Err(Error::Dim("weighted_sum items differ in shape".into()));
            }
        }
        let mut out = Tensor::zeros(&shape);
        for (i, it) in items.iter().enumerate() {
            let wi = w.data()[i];
            for (o, &x) in out.data_mut().iter_mut().zip(self.nodes[it.0].value.data()) {
                *o += wi * x;
            }
        }
        let ids: Vec<usize> = items.iter().map(|p| p.0).collect();
        let g = self.nodes[weights.0].grad || self.any_grad(&ids);
        Ok(self.push(out, Op::WeightedSum { weights: weights.0, items: ids }, g))
    }

    /// Reverse sweep from a scalar root, seeding its adjoint with 1.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<F>> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Dim(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.backward_seeded(&[(root, Tensor::scalar(F::one()))])
    }

    /// Reverse sweep from explicit adjoint seeds. Seeds accumulate if a node
    /// appears more than once.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Tensor<F>)]) -> Result<Gradients<F>> {
        let mut g: Vec<Option<Tensor<F>>> = self
            .nodes
            .iter()
            .map(|n| n.grad.then(|| Tensor::zeros(n.value.shape())))
            .collect();
        for (id, seed) in seeds {
            let node = &self.nodes[id.0];
            if seed.shape() != node.value.shape() {
                return Err(Error::Dim(format!(
                    "seed shape {:?} vs node shape {:?}",
                    seed.shape(),
                    node.value.shape()
                )));
            }
            match &mut g[id.0] {
                Some(slot) => slot.add_assign(seed),
                None => {
                    return Err(Error::Data(
                        "gradient seed on a non-differentiable node".into(),
                    ))
                }
            }
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].grad {
                continue;
            }
            let (lo, hi) = g.split_at_mut(i);
            let gout = hi[0].as_ref().expect("differentiable node has a buffer");
            self.accumulate(i, gout, lo);
        }
        Ok(Gradients { g })
    }

    /// Add this node's contribution to its inputs' adjoints. `lo` holds the
    /// buffers of all earlier nodes; inputs always precede their consumers.
    fn accumulate(&self, i: usize, gout: &Tensor<F>, lo: &mut [Option<Tensor<F>>]) {
        macro_rules! slot {
            ($j:expr) => {
                lo[$j].as_mut()
            };
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if let Some(ga) = lo[*a].as_mut() {
                    // dA += dC . B^T
                    for r in 0..m {
                        for c in 0..k {
                            let mut s = F::zero();
                            for q in 0..n {
                                s += gout.data()[r * n + q] * vb.data()[c * n + q];
                            }
                            ga.data_mut()[r * k + c] += s;
                        }
                    }
                }
                if let Some(gb) = lo[*b].as_mut() {
                    // dB += A^T . dC
                    for r in 0..k {
                        for c in 0..n {
                            let mut s = F::zero();
                            for q in 0..m {
                                s += va.data()[q * k + r] * gout.data()[q * n + c];
                            }
                            gb.data_mut()[r * n + c] += s;
                        }
                    }
                }
            }
            Op::MatVec(a, x) => {
                let (va, vx) = (&self.nodes[*a].value, &self.nodes[*x].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                if let Some(ga) = lo[*a].as_mut() {
                    // dA += dy (outer) x
                    for r in 0..m {
                        let gyr = gout.data()[r];
                        let row = &mut ga.data_mut()[r * k..(r + 1) * k];
                        for (gav, &xv) in row.iter_mut().zip(vx.data()) {
                            *gav += gyr * xv;
                        }
                    }
                }
                if let Some(gx) = lo[*x].as_mut() {
                    // dx += A^T dy
                    for r in 0..m {
                        let gyr = gout.data()[r];
                        let row = &va.data()[r * k..(r + 1) * k];
                        for (gxv, &av) in gx.data_mut().iter_mut().zip(row) {
                            *gxv += gyr * av;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.add_assign(gout);
                }
                if let Some(gb) = slot!(*b) {
                    gb.add_assign(gout);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.add_assign(gout);
                }
                if let Some(gb) = slot!(*b) {
                    for (g, &d) in gb.data_mut().iter_mut().zip(gout.data()) {
                        *g -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = lo[*a].as_mut() {
                    for ((g, &d), &bv) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(gout.data())
                        .zip(self.nodes[*b].value.data())
                    {
                        *g += d * bv;
                    }
                }
                if let Some(gb) = lo[*b].as_mut() {
                    for ((g, &d), &av) in gb
                        .data_mut()
                        .iter_mut()
                        .zip(gout.data())
                        .zip(self.nodes[*a].value.data())
                    {
                        *g += d * av;
                    }
                }
            }
            Op::Dot(a, b) => {
                let d = gout.item();
                if let Some(ga) = lo[*a].as_mut() {
                    for (g, &bv) in ga.data_mut().iter_mut().zip(self.nodes[*b].value.data()) {
                        *g += d * bv;
                    }
                }
                if let Some(gb) = lo[*b].as_mut() {
                    for (g, &av) in gb.data_mut().iter_mut().zip(self.nodes[*a].value.data()) {
                        *g += d * av;
                    }
                }
            }
            Op::AddScalar(a, _) => {
                if let Some(ga) = slot!(*a) {
                    ga.add_assign(gout);
                }
            }
            Op::MulScalar(a, c) => {
                if let Some(ga) = slot!(*a) {
                    for (g, &d) in ga.data_mut().iter_mut().zip(gout.data()) {
                        *g += *c * d;
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = slot!(*a) {
                    let out = &self.nodes[i].value;
                    for ((g, &d), &y) in ga.data_mut().iter_mut().zip(gout.data()).zip(out.data()) {
                        *g += d * (F::one() - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot!(*a) {
                    let out = &self.nodes[i].value;
                    for ((g, &d), &y) in ga.data_mut().iter_mut().zip(gout.data()).zip(out.data()) {
                        *g += d * y * (F::one() - y);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = slot!(*a) {
                    let out = &self.nodes[i].value;
                    for ((g, &d), &y) in ga.data_mut().iter_mut().zip(gout.data()).zip(out.data()) {
                        *g += d * y;
                    }
                }
            }
            Op::Log(a) => {
                if let Some(ga) = lo[*a].as_mut() {
                    for ((g, &d), &x) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(gout.data())
                        .zip(self.nodes[*a].value.data())
                    {
                        *g += d / x;
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = slot!(*a) {
                    let s = &self.nodes[i].value;
                    let inner: F = gout.data().iter().zip(s.data()).map(|(&d, &y)| d * y).sum();
                    for ((g, &d), &y) in ga.data_mut().iter_mut().zip(gout.data()).zip(s.data()) {
                        *g += y * (d - inner);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(ga) = slot!(*a) {
                    let out = &self.nodes[i].value;
                    let total: F = gout.data().iter().copied().sum();
                    for ((g, &d), &ls) in ga.data_mut().iter_mut().zip(gout.data()).zip(out.data())
                    {
                        *g += d - ls.exp() * total;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    let d = gout.item();
                    for g in ga.data_mut() {
                        *g += d;
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = slot!(*a) {
                    let n = F::from_f64(self.nodes[*a].value.len() as f64);
                    let d = gout.item() / n;
                    for g in ga.data_mut() {
                        *g += d;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    if let Some(gp) = lo[p].as_mut() {
                        for (g, &d) in gp.data_mut().iter_mut().zip(&gout.data()[off..off + n]) {
                            *g += d;
                        }
                    }
                    off += n;
                }
            }
            Op::Gather { table, row } => {
                if let Some(gt) = lo[*table].as_mut() {
                    let cols = gout.len();
                    let start = row * cols;
                    for (g, &d) in gt.data_mut()[start..start + cols]
                        .iter_mut()
                        .zip(gout.data())
                    {
                        *g += d;
                    }
                }
            }
            Op::WeightedSum { weights, items } => {
                for (idx, &it) in items.iter().enumerate() {
                    let wi = self.nodes[*weights].value.data()[idx];
                    if let Some(gi) = lo[it].as_mut() {
                        for (g, &d) in gi.data_mut().iter_mut().zip(gout.data()) {
                            *g += wi * d;
                        }
                    }
                }
                if let Some(gw) = lo[*weights].as_mut() {
                    for (idx, &it) in items.iter().enumerate() {
                        gw.data_mut()[idx] += self.nodes[it].value.dot(gout);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, max_rel_err};

    fn vec64(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let x = vec64(&[1.0, -2.0, 3.0]);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let sq = tape.mul(xid, xid).unwrap();
        let root = tape.sum(sq);
        let grads = tape.backward(root).unwrap();
        let g = grads.wrt(xid).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradient_and_prune_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec64(&[2.0]));
        let c = tape.constant(vec64(&[5.0]));
        let y = tape.mul(x, c).unwrap();
        let root = tape.sum(y);
        let grads = tape.backward(root).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap().data()[0], 5.0);
        // A graph of constants is entirely non-differentiable.
        let mut t2: Tape<f64> = Tape::new();
        let a = t2.constant(vec64(&[1.0]));
        let s = t2.sum(a);
        assert!(!t2.requires_grad(s));
        assert!(matches!(
            t2.backward_seeded(&[(s, Tensor::scalar(1.0))]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn shape_mismatches_are_dim_errors() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(matches!(tape.matmul(a, b), Err(Error::Dim(_))));
        let v = tape.leaf(vec64(&[1.0, 2.0]));
        assert!(matches!(tape.matvec(a, v), Err(Error::Dim(_))));
        assert!(matches!(tape.add(a, v), Err(Error::Dim(_))));
        let s = tape.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(a), Err(Error::Dim(_))));
        let ok = tape.sum(s);
        assert!(tape.backward(ok).is_ok());
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec64(&[1.5]));
        let y = tape.tanh(x);
        let root = tape.sum(y);
        let g1 = tape.backward(root).unwrap();
        let g2 = tape.backward(root).unwrap();
        assert_eq!(g1.wrt(x).unwrap().data(), g2.wrt(x).unwrap().data());
    }

    #[test]
    fn seeds_accumulate_when_repeated() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec64(&[3.0]));
        let y = tape.mul_scalar(x, 2.0);
        let seeds = vec![
            (y, Tensor::vector(vec![1.0])),
            (y, Tensor::vector(vec![1.0])),
        ];
        let grads = tape.backward_seeded(&seeds).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data()[0], 4.0);
    }

    // Finite-difference checks per op family; eps 1e-5, tolerance 1e-6.
    fn fd_check(
        build: impl Fn(&mut Tape<f64>, NodeId) -> crate::Result<NodeId>,
        x: &Tensor<f64>,
    ) {
        let err = grad_check(build, x, 1e-5).unwrap();
        assert!(err < 1e-6, "max rel err {}", err);
    }

    #[test]
    fn fd_matmul_chain() {
        let x = Tensor::matrix(2, 3, vec![0.3, -0.7, 1.1, 0.2, 0.5, -0.4]).unwrap();
        fd_check(
            |t, xid| {
                let w = t.constant(
                    Tensor::matrix(3, 2, vec![0.1, -0.2, 0.4, 0.3, -0.5, 0.6]).unwrap(),
                );
                let y = t.matmul(xid, w)?;
                let y2 = t.tanh(y);
                Ok(t.sum(y2))
            },
            &x,
        );
    }

    #[test]
    fn fd_matvec_both_arguments() {
        let a = Tensor::matrix(3, 2, vec![0.2, -0.1, 0.7, 0.4, -0.3, 0.9]).unwrap();
        fd_check(
            |t, aid| {
                let x = t.constant(vec64(&[0.5, -1.2]));
                let y = t.matvec(aid, x)?;
                Ok(t.sum(y))
            },
            &a,
        );
        let x = vec64(&[0.5, -1.2]);
        fd_check(
            |t, xid| {
                let a = t.constant(
                    Tensor::matrix(3, 2, vec![0.2, -0.1, 0.7, 0.4, -0.3, 0.9]).unwrap(),
                );
                let y = t.matvec(a, xid)?;
                let y2 = t.sigmoid(y);
                Ok(t.sum(y2))
            },
            &x,
        );
    }

    #[test]
    fn fd_softmax_weighted_output() {
        let x = vec64(&[0.1, 1.3, -0.8, 0.4]);
        fd_check(
            |t, xid| {
                let s = t.softmax(xid)?;
                let w = t.constant(vec64(&[1.0, -2.0, 0.5, 3.0]));
                t.dot(s, w)
            },
            &x,
        );
    }

    #[test]
    fn fd_log_softmax_component() {
        let x = vec64(&[0.2, -0.9, 1.7]);
        fd_check(
            |t, xid| {
                let ls = t.log_softmax(xid)?;
                let pick = t.constant(vec64(&[0.0, 1.0, 0.0]));
                t.dot(ls, pick)
            },
            &x,
        );
    }

    #[test]
    fn fd_unary_chain() {
        let x = vec64(&[0.3, 0.9, 1.4]);
        fd_check(
            |t, xid| {
                let e = t.exp(xid);
                let l = t.log(e);
                let sc = t.mul_scalar(l, 0.7);
                let sh = t.add_scalar(sc, -0.2);
                let tn = t.tanh(sh);
                let sg = t.sigmoid(tn);
                t.mean(sg)
            },
            &x,
        );
    }

    #[test]
    fn fd_concat_gather_weighted_sum() {
        let table = Tensor::matrix(3, 2, vec![0.1, 0.2, -0.4, 0.8, 0.5, -0.6]).unwrap();
        fd_check(
            |t, tid| {
                let r0 = t.gather(tid, 0)?;
                let r2 = t.gather(tid, 2)?;
                let w = t.constant(vec64(&[0.3, 0.7]));
                let ws = t.weighted_sum(w, &[r0, r2])?;
                let cat = t.concat(&[ws, r2])?;
                let sq = t.mul(cat, cat)?;
                Ok(t.sum(sq))
            },
            &table,
        );
        // And through the weights argument.
        let w = vec64(&[0.3, 0.7]);
        fd_check(
            |t, wid| {
                let a = t.constant(vec64(&[0.5, -0.1]));
                let b = t.constant(vec64(&[0.2, 0.9]));
                let sm = t.softmax(wid)?;
                let ws = t.weighted_sum(sm, &[a, b])?;
                Ok(t.sum(ws))
            },
            &w,
        );
    }

    #[test]
    fn fd_dot_sub_add() {
        let x = vec64(&[0.4, -0.2, 0.9]);
        fd_check(
            |t, xid| {
                let c = t.constant(vec64(&[0.1, 0.1, 0.1]));
                let d = t.sub(xid, c)?;
                let e = t.add(d, xid)?;
                t.dot(e, e)
            },
            &x,
        );
    }

    #[test]
    fn max_rel_err_uses_unit_floor() {
        // |0 - 1e-7| / max(1, 0) = 1e-7 and |10 - (10 + 1e-4)| / 10 = 1e-5.
        let a = vec64(&[0.0, 10.0]);
        let n = vec64(&[1e-7, 10.0 + 1e-4]);
        let e: f64 = max_rel_err(&a, &n);
        assert!((e - 1e-5).abs() < 1e-9, "{}", e);
    }
}
