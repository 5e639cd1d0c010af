//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each recorded node owns
//! its value and, when it descends from a gradient-requiring leaf, a boxed
//! [`Function`] holding whatever the backward rule needs. Node ids increase
//! in recording order, so parents always precede children and a reverse
//! sweep over ids is a valid topological order.
//!
//! Gradients accumulate: every call to [`Graph::backward`] adds into the
//! per-node gradient buffers. A given root may be backpropagated once until
//! [`Graph::zero_grad`] resets the buffers.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
pub trait Function: Send + Sync {
    /// Tag naming the rule, used in diagnostics.
    fn name(&self) -> &'static str;

    /// Gradients with respect to each parent given the upstream gradient.
    /// Entries for parents with `needs[i] == false` may be `None`.
    fn backward(&self, upstream: &Tensor, parents: &[&Tensor], needs: &[bool])
        -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    parents: Vec<VarId>,
    rule: Option<Box<dyn Function>>,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Read-only view of one node's bookkeeping.
#[derive(Debug, Clone)]
pub struct GradientRecord {
    pub id: VarId,
    pub parents: Vec<VarId>,
    pub rule: Option<&'static str>,
    pub requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed_roots: HashSet<VarId>,
    macs: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(Node {
            value,
            parents: Vec::new(),
            rule: None,
            requires_grad,
            grad: None,
        })
    }

    /// Records a constant (a leaf that never receives gradients).
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    /// Records the result of an operation on `parents`. The rule is kept only
    /// when some parent requires gradients.
    pub fn record(
        &mut self,
        value: Tensor,
        parents: Vec<VarId>,
        rule: Box<dyn Function>,
    ) -> VarId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Node {
            value,
            parents,
            rule: requires_grad.then_some(rule),
            requires_grad,
            grad: None,
        })
    }

    fn push(&mut self, node: Node) -> VarId {
        self.nodes.push(node);
        VarId(self.nodes.len() - 1)
    }

    /// Multiply-adds executed by convolution and dense ops recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub(crate) fn add_macs(&mut self, n: u64) {
        self.macs += n;
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, id: VarId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Accumulated gradient, or zeros shaped like the value when none arrived.
    pub fn grad_or_zeros(&self, id: VarId) -> Tensor {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(self.value(id)))
    }

    pub fn take_grad(&mut self, id: VarId) -> Option<Tensor> {
        self.nodes[id.0].grad.take()
    }

    pub fn record_of(&self, id: VarId) -> GradientRecord {
        let n = &self.nodes[id.0];
        GradientRecord {
            id,
            parents: n.parents.clone(),
            rule: n.rule.as_ref().map(|r| r.name()),
            requires_grad: n.requires_grad,
        }
    }

    /// Clears all accumulated gradients and re-arms every root.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.consumed_roots.clear();
    }

    /// Accumulates d(root)/d(node) into every node that depends on a
    /// gradient-requiring leaf.
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        let shape = self.nodes[root.0].value.shape();
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        if !self.consumed_roots.insert(root) {
            return Err(Error::AlreadyBackpropagated);
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }

        let mut pass: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        pass[root.0] = Some(Tensor::full(shape, 1.0));

        for i in (0..=root.0).rev() {
            let Some(upstream) = pass[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(rule) = &node.rule {
                let parent_vals: Vec<&Tensor> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect();
                let grads = rule.backward(&upstream, &parent_vals, &needs);
                debug_assert_eq!(grads.len(), node.parents.len(), "{}", rule.name());
                for ((p, g), need) in node.parents.iter().zip(grads).zip(&needs) {
                    if !need {
                        continue;
                    }
                    let Some(g) = g else { continue };
                    debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape(), "{}", rule.name());
                    match &mut pass[p.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&upstream),
                slot => *slot = Some(upstream),
            }
        }
        Ok(())
    }

    // Elementwise and structural ops.

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, "add")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(out, vec![a, b], Box::new(AddRule)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(out, vec![a, b], Box::new(MulRule)))
    }

    pub fn scale(&mut self, a: VarId, factor: f64) -> VarId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.record(out, vec![a], Box::new(ScaleRule(factor)))
    }

    /// Sum of all elements as a `[1]` scalar.
    pub fn sum(&mut self, a: VarId) -> VarId {
        let out = Tensor::scalar(self.value(a).sum());
        self.record(out, vec![a], Box::new(SumRule))
    }

    /// Joins two tensors along their last axis.
    pub fn concat(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (la, lb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = va.len() / la;
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * la..(r + 1) * la]);
            data.extend_from_slice(&vb.data()[r * lb..(r + 1) * lb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = la + lb;
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, vec![a, b], Box::new(ConcatRule { la, lb })))
    }

    /// Keeps positions `start..end` of the last axis.
    pub fn slice(&mut self, a: VarId, start: usize, end: usize) -> Result<VarId> {
        let va = self.value(a);
        let s = va.shape();
        let len = s[s.len() - 1];
        if start >= end || end > len {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: s.to_vec(),
                reason: format!("range {start}..{end} outside last axis"),
            });
        }
        let rows = va.len() / len;
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * len + start..r * len + end]);
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = end - start;
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, vec![a], Box::new(SliceRule { len, start, end })))
    }

    /// Column `col` of a `[rows, cols]` tensor, as `[rows]`.
    pub fn select_column(&mut self, a: VarId, col: usize) -> Result<VarId> {
        let va = self.value(a);
        let (rows, cols) = va.dims2("select_column")?;
        if col >= cols {
            return Err(Error::InvalidShape {
                op: "select_column",
                shape: va.shape().to_vec(),
                reason: format!("column {col} out of range"),
            });
        }
        let data = (0..rows).map(|r| va.data()[r * cols + col]).collect();
        let out = Tensor::new(vec![rows], data)?;
        Ok(self.record(out, vec![a], Box::new(SelectRule { rows, cols, col })))
    }
}

struct AddRule;

impl Function for AddRule {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, up: &Tensor, _: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        needs.iter().map(|&n| n.then(|| up.clone())).collect()
    }
}

struct MulRule;

impl Function for MulRule {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, up: &Tensor, p: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        let times = |other: &Tensor| {
            let d = up.data().iter().zip(other.data()).map(|(u, o)| u * o).collect();
            Tensor::new(up.shape().to_vec(), d).expect("same shape")
        };
        vec![
            needs[0].then(|| times(p[1])),
            needs[1].then(|| times(p[0])),
        ]
    }
}

struct ScaleRule(f64);

impl Function for ScaleRule {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, up: &Tensor, _: &[&Tensor], _: &[bool]) -> Vec<Option<Tensor>> {
        let d = up.data().iter().map(|u| u * self.0).collect();
        vec![Some(Tensor::new(up.shape().to_vec(), d).expect("same shape"))]
    }
}

struct SumRule;

impl Function for SumRule {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, up: &Tensor, p: &[&Tensor], _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(p[0].shape(), up.data()[0]))]
    }
}

struct ConcatRule {
    la: usize,
    lb: usize,
}

impl Function for ConcatRule {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, up: &Tensor, p: &[&Tensor], needs: &[bool]) -> Vec<Option<Tensor>> {
        let l = self.la + self.lb;
        let rows = up.len() / l;
        let part = |off: usize, w: usize, like: &Tensor| {
            let mut d = Vec::with_capacity(rows * w);
            for r in 0..rows {
                d.extend_from_slice(&up.data()[r * l + off..r * l + off + w]);
            }
            Tensor::new(like.shape().to_vec(), d).expect("part shape")
        };
        vec![
            needs[0].then(|| part(0, self.la, p[0])),
            needs[1].then(|| part(self.la, self.lb, p[1])),
        ]
    }
}

struct SliceRule {
    len: usize,
    start: usize,
    end: usize,
}

impl Function for SliceRule {
    fn name(&self) -> &'static str {
        "slice"
    }
    fn backward(&self, up: &Tensor, p: &[&Tensor], _: &[bool]) -> Vec<Option<Tensor>> {
        let w = self.end - self.start;
        let mut g = Tensor::zeros_like(p[0]);
        let rows = g.len() / self.len;
        for r in 0..rows {
            g.data_mut()[r * self.len + self.start..r * self.len + self.end]
                .copy_from_slice(&up.data()[r * w..(r + 1) * w]);
        }
        vec![Some(g)]
    }
}

struct SelectRule {
    rows: usize,
    cols: usize,
    col: usize,
}

impl Function for SelectRule {
    fn name(&self) -> &'static str {
        "select_column"
    }
    fn backward(&self, up: &Tensor, p: &[&Tensor], _: &[bool]) -> Vec<Option<Tensor>> {
        let mut g = Tensor::zeros_like(p[0]);
        for r in 0..self.rows {
            g.data_mut()[r * self.cols + self.col] = up.data()[r];
        }
        vec![Some(g)]
    }
}

/// Evaluates `f` at `x` on a fresh graph and returns `(value, d f / d x)`.
pub fn value_and_grad<F>(f: &F, x: &Tensor) -> Result<(f64, Tensor)>
where
    F: Fn(&mut Graph, VarId) -> Result<VarId>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = f(&mut g, xv)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {value}")));
    }
    g.backward(loss)?;
    Ok((value, g.grad_or_zeros(xv)))
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, VarId) -> Result<VarId>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), false);
    let out = f(&mut g, xv)?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("f(x+h) = {v}")));
    }
    Ok(v)
}

/// Largest relative disagreement between the analytic gradient of `f` at `x`
/// and central differences with the given step, over every coordinate.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, VarId) -> Result<VarId>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_difference_check_at(f, x, step, &coords)
}

/// As [`finite_difference_check`], restricted to the listed coordinates.
pub fn finite_difference_check_at<F>(f: F, x: &Tensor, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, VarId) -> Result<VarId>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("step must be positive, got {step}")));
    }
    let (_, analytic) = value_and_grad(&f, x)?;
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let hi = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let lo = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (hi - lo) / (2.0 * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn add_and_slice_forward() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1.0, 2.0]));
        let b = g.constant(t(&[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);

        let z = g.constant(t(&[0.0, 0.0]));
        let same = g.add(a, z).unwrap();
        assert_eq!(g.value(same), g.value(a));

        let x = g.constant(t(&[10.0, 11.0, 12.0, 13.0]));
        let mid = g.slice(x, 1, 3).unwrap();
        assert_eq!(g.value(mid).data(), &[11.0, 12.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1.0, 2.0]));
        let b = g.constant(t(&[1.0, 2.0, 3.0]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn concat_then_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let b = g.leaf(Tensor::new(vec![1, 2, 1], vec![5.0, 6.0]).unwrap(), true);
        let c = g.concat(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let tail = g.slice(c, 2, 3).unwrap();
        assert_eq!(g.value(tail).data(), &[5.0, 6.0]);
        let l = g.sum(tail);
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.grad(a).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn linear_loss_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1.0, 1.0]), true);
        let y = g.scale(x, 2.0);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3.0]), true);
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::AlreadyBackpropagated)));
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn accumulation_matches_summed_loss() {
        let x0 = t(&[0.3, -1.2, 2.5]);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let sq = g.mul(x, x).unwrap();
        let l1 = g.sum(sq);
        let tr = g.scale(x, -3.0);
        let l2 = g.sum(tr);
        g.backward(l1).unwrap();
        g.backward(l2).unwrap();
        let separate = g.grad(x).unwrap().clone();

        let mut h = Graph::new();
        let x = h.leaf(x0, true);
        let sq = h.mul(x, x).unwrap();
        let l1 = h.sum(sq);
        let tr = h.scale(x, -3.0);
        let l2 = h.sum(tr);
        let total = h.add(l1, l2).unwrap();
        h.backward(total).unwrap();
        for (a, b) in separate.data().iter().zip(h.grad(x).unwrap().data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_leaf_grads() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1.0, -2.0, 4.0]), true);
        let sq = g.mul(x, x).unwrap();
        let z = g.scale(sq, 0.0);
        let l = g.sum(z);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn graph_records_parents_in_order() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1.0]), true);
        let b = g.constant(t(&[2.0]));
        let c = g.mul(a, b).unwrap();
        let rec = g.record_of(c);
        assert_eq!(rec.parents, vec![a, b]);
        assert_eq!(rec.rule, Some("mul"));
        assert!(rec.parents.iter().all(|p| *p < c));
        assert_eq!(g.record_of(b).rule, None);
    }

    #[test]
    fn fd_check_on_sum_and_square() {
        let x = t(&[0.7, -0.1, 5.0]);
        let err = finite_difference_check(|g, x| Ok(g.sum(x)), &x, 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");

        let x = t(&[1.0, 2.0, 3.0]);
        let err = finite_difference_check(
            |g, x| {
                let s = g.mul(x, x)?;
                Ok(g.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn fd_check_rejects_non_finite() {
        let x = t(&[f64::NAN]);
        assert!(finite_difference_check(|g, x| Ok(g.sum(x)), &x, 1e-5).is_err());
        let x = t(&[1.0]);
        assert!(finite_difference_check(|g, x| Ok(g.sum(x)), &x, 0.0).is_err());
    }
}
