//! Training losses: softmax cross-entropy, contrastive, and the two triplet
//! variants, plus a probe for the zero-gradient saddle of the standard
//! triplet loss.
//!
//! Each loss is available as a plain function of tensors (value and
//! analytic gradients) and as a graph node via [`LossGraphExt`].

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{CustomOp, Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("label {label} at row {row} outside [0, {classes})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// Which triplet formulation to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletKind {
    /// `max[0, m + |a−p|² − |a−n|²]`
    Standard,
    /// `max[0, m + |2a−p|² − |2a−n|²]`
    Modified,
}

impl TripletKind {
    /// Factor applied to the anchor inside the distances.
    pub fn anchor_factor(self) -> f32 {
        match self {
            TripletKind::Standard => 1.0,
            TripletKind::Modified => 2.0,
        }
    }

    /// Scale a query embedding must receive before it is compared against
    /// photo embeddings trained under this loss.
    pub fn query_scale(self) -> f32 {
        self.anchor_factor()
    }
}

/// Anchor/positive/negative embeddings for one mini-batch.
#[derive(Debug, Clone)]
pub struct TripletBatchFeatures {
    pub a: Tensor,
    pub p: Tensor,
    pub n: Tensor,
    pub margin: f32,
}

impl TripletBatchFeatures {
    pub fn new(a: Tensor, p: Tensor, n: Tensor, margin: f32) -> Result<Self> {
        check_triplet_shapes(&a, &p, &n)?;
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(LossError::Invalid(format!("margin must be positive, got {margin}")));
        }
        if !(a.all_finite() && p.all_finite() && n.all_finite()) {
            return Err(LossError::Invalid("triplet features contain non-finite values".into()));
        }
        Ok(Self { a, p, n, margin })
    }

    pub fn batch_size(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.a.shape()[1]
    }
}

fn check_triplet_shapes(a: &Tensor, p: &Tensor, n: &Tensor) -> Result<()> {
    if a.rank() != 2 {
        return Err(LossError::Invalid(format!("triplet features must be [N, D], got {:?}", a.shape())));
    }
    for other in [p, n] {
        if other.shape() != a.shape() {
            return Err(LossError::Shape {
                op: "triplet",
                left: a.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Loss value and gradients w.r.t. anchor, positive and negative.
#[derive(Debug, Clone)]
pub struct TripletGrad {
    pub loss: f32,
    pub da: Tensor,
    pub dp: Tensor,
    pub dn: Tensor,
    /// Triplets whose hinge is active.
    pub active: usize,
}

fn triplet_eval(a: &Tensor, p: &Tensor, n: &Tensor, margin: f32, kind: TripletKind, want_grad: bool) -> TripletGrad {
    let rows = a.shape()[0];
    let dim = a.shape()[1];
    let c = kind.anchor_factor();
    let inv_n = 1.0 / rows as f32;
    let mut loss = 0.0f64;
    let mut active = 0;
    let (mut da, mut dp, mut dn) = if want_grad {
        (Tensor::zeros(a.shape()), Tensor::zeros(a.shape()), Tensor::zeros(a.shape()))
    } else {
        (Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0))
    };
    for i in 0..rows {
        let (ar, pr, nr) = (a.row(i), p.row(i), n.row(i));
        let mut d_pos = 0.0f32;
        let mut d_neg = 0.0f32;
        for k in 0..dim {
            let ap = c * ar[k] - pr[k];
            let an = c * ar[k] - nr[k];
            d_pos += ap * ap;
            d_neg += an * an;
        }
        let hinge = margin + d_pos - d_neg;
        if hinge <= 0.0 {
            continue;
        }
        active += 1;
        loss += hinge as f64;
        if want_grad {
            let span = i * dim..(i + 1) * dim;
            let (ga, gp, gn) = (
                &mut da.data_mut()[span.clone()],
                &mut dp.data_mut()[span.clone()],
                &mut dn.data_mut()[span],
            );
            for k in 0..dim {
                let ap = c * ar[k] - pr[k];
                let an = c * ar[k] - nr[k];
                ga[k] = c * (nr[k] - pr[k]) * inv_n;
                gp[k] = -ap * inv_n;
                gn[k] = an * inv_n;
            }
        }
    }
    TripletGrad {
        loss: (0.5 * loss / rows as f64) as f32,
        da,
        dp,
        dn,
        active,
    }
}

/// `1/2N Σ max[0, m + |a−p|² − |a−n|²]`
pub fn triplet_standard(b: &TripletBatchFeatures) -> f32 {
    triplet_eval(&b.a, &b.p, &b.n, b.margin, TripletKind::Standard, false).loss
}

/// `1/2N Σ max[0, m + |2a−p|² − |2a−n|²]`
pub fn triplet_modified(b: &TripletBatchFeatures) -> f32 {
    triplet_eval(&b.a, &b.p, &b.n, b.margin, TripletKind::Modified, false).loss
}

pub fn triplet_loss(b: &TripletBatchFeatures, kind: TripletKind) -> f32 {
    triplet_eval(&b.a, &b.p, &b.n, b.margin, kind, false).loss
}

/// Loss and analytic gradients. A hinge that is exactly zero contributes
/// neither loss nor gradient.
pub fn triplet_grad(b: &TripletBatchFeatures, kind: TripletKind) -> TripletGrad {
    triplet_eval(&b.a, &b.p, &b.n, b.margin, kind, true)
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(LossError::Shape {
            op: "softmax_xent",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let classes = logits.shape()[1];
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(LossError::LabelOutOfRange { row, label, classes });
    }
    Ok(())
}

fn softmax_eval(logits: &Tensor, labels: &[usize], want_grad: bool) -> (f32, Option<Tensor>) {
    let rows = labels.len();
    let classes = logits.shape()[1];
    let inv_n = 1.0 / rows as f32;
    let mut loss = 0.0f32;
    let mut grad = want_grad.then(|| Tensor::zeros(logits.shape()));
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let (top, max) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
        // ln_1p keeps precision when one logit dominates.
        let rest: f32 = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != top)
            .map(|(_, v)| (v - max).exp())
            .sum();
        let lse = max + rest.ln_1p();
        loss += lse - row[label];
        if let Some(g) = grad.as_mut() {
            let out = &mut g.data_mut()[i * classes..(i + 1) * classes];
            for (k, o) in out.iter_mut().enumerate() {
                let prob = (row[k] - lse).exp();
                *o = (prob - if k == label { 1.0 } else { 0.0 }) * inv_n;
            }
        }
    }
    (loss * inv_n, grad)
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    check_labels(logits, labels)?;
    Ok(softmax_eval(logits, labels, false).0)
}

pub fn softmax_xent_grad(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    check_labels(logits, labels)?;
    let (l, g) = softmax_eval(logits, labels, true);
    Ok((l, g.expect("gradient requested")))
}

fn check_pairs(x1: &Tensor, x2: &Tensor, same: &[bool], margin: f32) -> Result<()> {
    if x1.shape() != x2.shape() || x1.rank() != 2 || x1.shape()[0] != same.len() {
        return Err(LossError::Shape {
            op: "contrastive",
            left: x1.shape().to_vec(),
            right: x2.shape().to_vec(),
        });
    }
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(LossError::Invalid(format!("contrastive margin must be positive, got {margin}")));
    }
    Ok(())
}

fn contrastive_eval(x1: &Tensor, x2: &Tensor, same: &[bool], margin: f32, want_grad: bool) -> (f32, Option<Tensor>) {
    let rows = same.len();
    let dim = x1.shape()[1];
    let inv_n = 1.0 / rows as f32;
    let mut loss = 0.0f32;
    let mut grad = want_grad.then(|| Tensor::zeros(x1.shape()));
    for (i, &is_same) in same.iter().enumerate() {
        let (r1, r2) = (x1.row(i), x2.row(i));
        let d2: f32 = r1.iter().zip(r2).map(|(a, b)| (a - b) * (a - b)).sum();
        let d = d2.sqrt();
        // Per-row factor multiplying (x1 − x2) in the gradient.
        let coeff = if is_same {
            loss += d2;
            inv_n
        } else if d < margin {
            loss += (margin - d) * (margin - d);
            if d > 0.0 {
                -(margin - d) / d * inv_n
            } else {
                0.0
            }
        } else {
            0.0
        };
        if let Some(g) = grad.as_mut() {
            let out = &mut g.data_mut()[i * dim..(i + 1) * dim];
            for k in 0..dim {
                out[k] = coeff * (r1[k] - r2[k]);
            }
        }
    }
    (0.5 * inv_n * loss, grad)
}

/// `1/2N Σ [same·d² + (1−same)·max(0, margin − d)²]` with `d = |x1 − x2|`.
pub fn contrastive(x1: &Tensor, x2: &Tensor, same: &[bool], margin: f32) -> Result<f32> {
    check_pairs(x1, x2, same, margin)?;
    Ok(contrastive_eval(x1, x2, same, margin, false).0)
}

/// Loss and gradient w.r.t. `x1`; the gradient w.r.t. `x2` is its negation.
pub fn contrastive_grad(x1: &Tensor, x2: &Tensor, same: &[bool], margin: f32) -> Result<(f32, Tensor)> {
    check_pairs(x1, x2, same, margin)?;
    let (l, g) = contrastive_eval(x1, x2, same, margin, true);
    Ok((l, g.expect("gradient requested")))
}

// Graph adapters.

fn scaled(t: Tensor, s: f32) -> Tensor {
    if s == 1.0 {
        return t;
    }
    let shape = t.shape().to_vec();
    let data = t.into_data().into_iter().map(|v| v * s).collect();
    Tensor::new(shape, data).expect("shape preserved")
}

struct TripletOp {
    kind: TripletKind,
    margin: f32,
}

impl CustomOp for TripletOp {
    fn name(&self) -> &'static str {
        "triplet"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let g = triplet_eval(inputs[0], inputs[1], inputs[2], self.margin, self.kind, true);
        let s = grad_out.item();
        vec![Some(scaled(g.da, s)), Some(scaled(g.dp, s)), Some(scaled(g.dn, s))]
    }

    fn regime(&self, inputs: &[&Tensor]) -> Vec<bool> {
        let (a, p, n) = (inputs[0], inputs[1], inputs[2]);
        let c = self.kind.anchor_factor();
        (0..a.shape()[0])
            .map(|i| {
                let (ar, pr, nr) = (a.row(i), p.row(i), n.row(i));
                let d = |o: &[f32]| ar.iter().zip(o).map(|(x, y)| (c * x - y) * (c * x - y)).sum::<f32>();
                self.margin + d(pr) - d(nr) > 0.0
            })
            .collect()
    }
}

struct SoftmaxOp {
    labels: Vec<usize>,
}

impl CustomOp for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax_xent"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let (_, g) = softmax_eval(inputs[0], &self.labels, true);
        vec![g.map(|g| scaled(g, grad_out.item()))]
    }
}

struct ContrastiveOp {
    same: Vec<bool>,
    margin: f32,
}

impl CustomOp for ContrastiveOp {
    fn name(&self) -> &'static str {
        "contrastive"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let (_, g) = contrastive_eval(inputs[0], inputs[1], &self.same, self.margin, true);
        let g = scaled(g.expect("gradient requested"), grad_out.item());
        let neg = scaled(g.clone(), -1.0);
        vec![Some(g), Some(neg)]
    }

    fn regime(&self, inputs: &[&Tensor]) -> Vec<bool> {
        let (x1, x2) = (inputs[0], inputs[1]);
        let mut out = Vec::new();
        for i in 0..x1.shape()[0] {
            let (r1, r2) = (x1.row(i), x2.row(i));
            let d2: f32 = r1.iter().zip(r2).map(|(a, b)| (a - b) * (a - b)).sum();
            let pushing = !self.same[i] && d2.sqrt() < self.margin;
            out.push(pushing);
            // The push term has a cone point where the pair coincides.
            if pushing {
                out.extend(r1.iter().zip(r2).map(|(a, b)| a > b));
            }
        }
        out
    }
}

/// Loss nodes on a [`Graph`].
pub trait LossGraphExt {
    fn triplet_loss(&mut self, a: NodeId, p: NodeId, n: NodeId, kind: TripletKind, margin: f32) -> Result<NodeId>;
    fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId>;
    fn contrastive(&mut self, x1: NodeId, x2: NodeId, same: &[bool], margin: f32) -> Result<NodeId>;
}

impl LossGraphExt for Graph {
    fn triplet_loss(&mut self, a: NodeId, p: NodeId, n: NodeId, kind: TripletKind, margin: f32) -> Result<NodeId> {
        let (va, vp, vn) = (self.value(a), self.value(p), self.value(n));
        check_triplet_shapes(va, vp, vn)?;
        let loss = triplet_eval(va, vp, vn, margin, kind, false).loss;
        Ok(self.custom(Box::new(TripletOp { kind, margin }), &[a, p, n], Tensor::scalar(loss)))
    }

    fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let loss = softmax_xent(self.value(logits), labels)?;
        Ok(self.custom(
            Box::new(SoftmaxOp { labels: labels.to_vec() }),
            &[logits],
            Tensor::scalar(loss),
        ))
    }

    fn contrastive(&mut self, x1: NodeId, x2: NodeId, same: &[bool], margin: f32) -> Result<NodeId> {
        let loss = contrastive(self.value(x1), self.value(x2), same, margin)?;
        Ok(self.custom(
            Box::new(ContrastiveOp { same: same.to_vec(), margin }),
            &[x1, x2],
            Tensor::scalar(loss),
        ))
    }
}

/// Loss value and per-input gradient norms at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SaddleReport {
    pub loss: f32,
    pub grad_norm_a: f32,
    pub grad_norm_p: f32,
    pub grad_norm_n: f32,
}

pub fn saddle_probe(b: &TripletBatchFeatures, kind: TripletKind) -> SaddleReport {
    let g = triplet_grad(b, kind);
    SaddleReport {
        loss: g.loss,
        grad_norm_a: g.da.l2_norm(),
        grad_norm_p: g.dp.l2_norm(),
        grad_norm_n: g.dn.l2_norm(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SaddleTraceRow {
    pub step: usize,
    #[serde(flatten)]
    pub report: SaddleReport,
}

/// Plain gradient descent on the features themselves, recording a probe
/// before every update (and once after the last).
pub fn saddle_trace(start: &TripletBatchFeatures, kind: TripletKind, steps: usize, lr: f32) -> Vec<SaddleTraceRow> {
    let mut b = start.clone();
    let mut rows = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let g = triplet_grad(&b, kind);
        rows.push(SaddleTraceRow {
            step,
            report: SaddleReport {
                loss: g.loss,
                grad_norm_a: g.da.l2_norm(),
                grad_norm_p: g.dp.l2_norm(),
                grad_norm_n: g.dn.l2_norm(),
            },
        });
        if step == steps {
            break;
        }
        for (x, d) in [(&mut b.a, &g.da), (&mut b.p, &g.dp), (&mut b.n, &g.dn)] {
            x.data_mut().iter_mut().zip(d.data()).for_each(|(v, g)| *v -= lr * g);
        }
    }
    rows
}

pub fn write_trace_csv<W: Write>(mut w: W, rows: &[SaddleTraceRow]) -> std::io::Result<()> {
    writeln!(w, "step,loss,grad_norm_a,grad_norm_p,grad_norm_n")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.step, r.report.loss, r.report.grad_norm_a, r.report.grad_norm_p, r.report.grad_norm_n
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn degenerate(v: &[f32], rows: usize, margin: f32) -> TripletBatchFeatures {
        let t = Tensor::from_fn(&[rows, v.len()], |i| v[i % v.len()]);
        TripletBatchFeatures::new(t.clone(), t.clone(), t, margin).unwrap()
    }

    #[test]
    fn standard_saddle_is_flat_at_half_margin() {
        let b = degenerate(&[0.3, -1.2, 4.0], 5, 1.0);
        let g = triplet_grad(&b, TripletKind::Standard);
        assert_eq!(g.loss, 0.5);
        for d in [&g.da, &g.dp, &g.dn] {
            assert!(d.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn modified_breaks_the_saddle() {
        let v = [0.5f32, -2.0, 1.5];
        let b = degenerate(&v, 1, 1.0);
        let g = triplet_grad(&b, TripletKind::Modified);
        assert_eq!(g.loss, 0.5);
        for k in 0..3 {
            assert_eq!(g.dp.data()[k], -v[k]);
            assert_eq!(g.dn.data()[k], v[k]);
            assert_eq!(g.da.data()[k], 0.0);
        }
    }

    #[test]
    fn inactive_hinge_gives_zero() {
        // |a−n|² − |a−p|² = 4 ≥ m.
        let a = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let p = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let n = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
        let b = TripletBatchFeatures::new(a, p, n, 1.0).unwrap();
        let g = triplet_grad(&b, TripletKind::Standard);
        assert_eq!(g.loss, 0.0);
        assert_eq!(g.active, 0);
        assert!(g.dp.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn modified_equilibrium_at_doubled_anchor() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 0.5]).unwrap();
        let p = Tensor::new(vec![1, 2], vec![2.0, 1.0]).unwrap();
        let n = Tensor::new(vec![1, 2], vec![-1.0, 1.0]).unwrap();
        let b = TripletBatchFeatures::new(a, p, n, 1.0).unwrap();
        assert_eq!(triplet_modified(&b), 0.0);
    }

    #[test]
    fn hinge_exactly_zero_has_zero_gradient() {
        // m + |a−p|² − |a−n|² = 1 + 0 − 1 = 0.
        let a = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let p = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let n = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let b = TripletBatchFeatures::new(a, p, n, 1.0).unwrap();
        let g = triplet_grad(&b, TripletKind::Standard);
        assert_eq!(g.loss, 0.0);
        assert_eq!(g.dn.data(), &[0.0]);
    }

    #[test]
    fn softmax_uniform_is_ln_c() {
        let logits = Tensor::full(&[3, 4], 0.7);
        let l = softmax_xent(&logits, &[0, 1, 3]).unwrap();
        assert!((l - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn softmax_confident_correct_goes_to_zero() {
        let mut last = f32::INFINITY;
        for margin in [1.0f32, 5.0, 10.0, 20.0] {
            let logits = Tensor::new(vec![1, 3], vec![margin, 0.0, 0.0]).unwrap();
            let l = softmax_xent(&logits, &[0]).unwrap();
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-8);
    }

    #[test]
    fn softmax_rejects_bad_label() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            softmax_xent(&logits, &[0, 3]),
            Err(LossError::LabelOutOfRange { row: 1, label: 3, classes: 3 })
        ));
    }

    #[test]
    fn contrastive_edge_cases() {
        let x = Tensor::new(vec![1, 2], vec![0.4, -0.1]).unwrap();
        assert_eq!(contrastive(&x, &x, &[true], 1.0).unwrap(), 0.0);
        let far = Tensor::new(vec![1, 2], vec![3.0, -0.1]).unwrap();
        assert_eq!(contrastive(&x, &far, &[false], 1.0).unwrap(), 0.0);
        assert!(contrastive(&x, &Tensor::zeros(&[1, 3]), &[true], 1.0).is_err());
        assert!(contrastive(&x, &x, &[true], 0.0).is_err());
    }

    #[test]
    fn probe_reports_saddle() {
        let v = [0.6f32, 0.8];
        let b = degenerate(&v, 1, 1.0);
        let s = saddle_probe(&b, TripletKind::Standard);
        assert_eq!((s.loss, s.grad_norm_a, s.grad_norm_p, s.grad_norm_n), (0.5, 0.0, 0.0, 0.0));
        let m = saddle_probe(&b, TripletKind::Modified);
        assert!((m.grad_norm_p - 1.0).abs() < 1e-6 && (m.grad_norm_n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let b = degenerate(&[1.0, 0.0], 2, 1.0);
        let rows = saddle_trace(&b, TripletKind::Modified, 3, 0.1);
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("step,loss,grad_norm_a,grad_norm_p,grad_norm_n\n0,0.5,"));
    }
}
