//! Central finite-difference checks of graph gradients.

use std::error::Error;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

pub type BuildError = Box<dyn Error + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Central-difference half step.
    pub step: f32,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error. Entries with gradients
    /// below it are held to an absolute error of `tolerance * floor`.
    pub floor: f64,
    /// Coordinates probed per tensor; `None` probes all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            floor: 1.0,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tolerance
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

/// Objective evaluated at a point: loss, regime hash and, on request, the
/// analytic gradient of every variable.
struct Eval {
    loss: f64,
    regime: u64,
    grads: Option<Vec<Tensor>>,
}

/// Reduces a node to a scalar with fixed random weights. The returned
/// node feeds `backward`; the f64 value is used for differencing.
fn project(g: &mut Graph, out: NodeId, seed: u64) -> Result<(NodeId, f64), BuildError> {
    let v = g.value(out);
    if v.is_scalar() {
        return Ok((out, v.item() as f64));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(v.shape(), |_| rng.sample::<f32, _>(StandardNormal));
    let loss: f64 = v.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
    let rn = g.input(r);
    let m = g.mul(out, rn)?;
    Ok((g.sum(m), loss))
}

impl GradCheck {
    fn run(
        &self,
        point: &[Tensor],
        eval: impl Fn(&[Tensor], bool) -> Result<Eval, BuildError>,
    ) -> Result<GradCheckReport, BuildError> {
        let base = eval(point, true)?;
        let grads = base.grads.expect("gradients requested");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        let mut report = GradCheckReport::default();
        let mut work = point.to_vec();
        for (t, tensor) in point.iter().enumerate() {
            let n = tensor.len();
            let coords: Vec<usize> = match self.max_coords {
                Some(k) if k < n => {
                    let mut c = sample(&mut rng, n, k).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..n).collect(),
            };
            for i in coords {
                let x = tensor.data()[i];
                work[t].data_mut()[i] = x + self.step;
                let plus = eval(&work, false)?;
                work[t].data_mut()[i] = x - self.step;
                let minus = eval(&work, false)?;
                work[t].data_mut()[i] = x;
                if plus.regime != base.regime || minus.regime != base.regime {
                    report.skipped += 1;
                    continue;
                }
                // Divide by the step actually representable around x.
                let h = ((x + self.step) as f64) - ((x - self.step) as f64);
                let numeric = (plus.loss - minus.loss) / h;
                let analytic = grads[t].data()[i] as f64;
                let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor);
                report.checked += 1;
                if rel_err > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(rel_err);
                    report.worst = Some(Mismatch {
                        tensor: t,
                        index: i,
                        analytic,
                        numeric,
                        rel_err,
                    });
                }
            }
        }
        Ok(report)
    }

    /// Checks d(output)/d(inputs) for a graph built from leaf inputs.
    /// Non-scalar outputs are contracted with fixed random weights.
    pub fn check_inputs<F>(&self, inputs: &[Tensor], build: F) -> Result<GradCheckReport, BuildError>
    where
        F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, BuildError>,
    {
        self.run(inputs, |values, want_grad| {
            let mut g = Graph::new();
            let leaves: Vec<NodeId> = values.iter().map(|v| g.leaf(v.clone())).collect();
            let out = build(&mut g, &leaves)?;
            let (loss_node, loss) = project(&mut g, out, self.seed)?;
            let grads = if want_grad {
                g.backward(loss_node)?;
                Some(
                    leaves
                        .iter()
                        .zip(values)
                        .map(|(&l, v)| g.grad(l).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
                        .collect(),
                )
            } else {
                None
            };
            Ok(Eval {
                loss,
                regime: g.regime(),
                grads,
            })
        })
    }

    /// Checks the parameter gradients that `build` produces through
    /// `Graph::param_grads`, perturbing the parameters in `ids`.
    pub fn check_params<F>(&self, store: &ParamStore, ids: &[ParamId], build: F) -> Result<GradCheckReport, BuildError>
    where
        F: Fn(&mut Graph, &ParamStore) -> Result<NodeId, BuildError>,
    {
        let point: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
        let scratch = std::cell::RefCell::new(store.clone());
        self.run(&point, |values, want_grad| {
            let mut s = scratch.borrow_mut();
            for (&id, v) in ids.iter().zip(values) {
                *s.get_mut(id) = v.clone();
            }
            let mut g = Graph::new();
            let out = build(&mut g, &s)?;
            let (loss_node, loss) = project(&mut g, out, self.seed)?;
            let grads = if want_grad {
                g.backward(loss_node)?;
                let pg = g.param_grads();
                Some(
                    ids.iter()
                        .zip(values)
                        .map(|(&id, v)| pg.get(id).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
                        .collect(),
                )
            } else {
                None
            };
            Ok(Eval {
                loss,
                regime: g.regime(),
                grads,
            })
        })
    }
}

/// Result of repeated randomized checks of one op.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub trials: usize,
    pub failed_trials: usize,
    pub report: GradCheckReport,
}

fn randn(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.sample::<f32, _>(StandardNormal))
}

type Case = (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId, BuildError>>);

fn ri(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn random_case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    use crate::losses::{LossGraphExt, TripletKind};
    match name {
        "conv2d" => {
            let (n, c, h, w, k) = (ri(rng, 1, 2), ri(rng, 1, 3), ri(rng, 3, 7), ri(rng, 3, 7), ri(rng, 1, 3));
            let (kh, kw, stride, pad) = (ri(rng, 1, 3), ri(rng, 1, 3), ri(rng, 1, 2), ri(rng, 0, 1));
            let fan_in = (c * kh * kw) as f32;
            let v = vec![
                randn(rng, &[n, c, h, w], 1.0),
                randn(rng, &[k, c, kh, kw], fan_in.powf(-0.5)),
                randn(rng, &[k], 0.1),
            ];
            (v, Box::new(move |g, x| Ok(g.conv2d(x[0], x[1], x[2], stride, pad)?)))
        }
        "maxpool2d" => {
            let (n, c, h, w) = (ri(rng, 1, 2), ri(rng, 1, 2), ri(rng, 2, 7), ri(rng, 2, 7));
            let (k, stride) = (ri(rng, 1, h.min(w).min(3)), ri(rng, 1, 2));
            (vec![randn(rng, &[n, c, h, w], 1.0)], Box::new(move |g, x| Ok(g.maxpool2d(x[0], k, stride)?)))
        }
        "linear" => {
            let (n, f, o) = (ri(rng, 1, 4), ri(rng, 1, 6), ri(rng, 1, 5));
            let v = vec![
                randn(rng, &[n, f], 1.0),
                randn(rng, &[o, f], (f as f32).powf(-0.5)),
                randn(rng, &[o], 0.1),
            ];
            (v, Box::new(|g, x| Ok(g.linear(x[0], x[1], x[2])?)))
        }
        "relu" => {
            let s = [ri(rng, 1, 24)];
            (vec![randn(rng, &s, 1.0)], Box::new(|g, x| Ok(g.relu(x[0]))))
        }
        "dropout" => {
            let (p, seed) = (rng.random_range(0.0..0.8f32), rng.random::<u64>());
            let s = [ri(rng, 1, 24)];
            (vec![randn(rng, &s, 1.0)], Box::new(move |g, x| Ok(g.dropout(x[0], p, seed)?)))
        }
        "flatten" => {
            let s = [ri(rng, 1, 3), ri(rng, 1, 3), ri(rng, 1, 4)];
            (vec![randn(rng, &s, 1.0)], Box::new(|g, x| Ok(g.flatten(x[0])?)))
        }
        "scale" => {
            let f = rng.random_range(-3.0..3.0f32);
            let s = [ri(rng, 1, 12)];
            (vec![randn(rng, &s, 1.0)], Box::new(move |g, x| Ok(g.scale(x[0], f))))
        }
        "add" | "sub" | "mul" => {
            let s = [ri(rng, 1, 4), ri(rng, 1, 5)];
            let v = vec![randn(rng, &s, 1.0), randn(rng, &s, 1.0)];
            let op = name.to_string();
            (
                v,
                Box::new(move |g, x| {
                    Ok(match op.as_str() {
                        "add" => g.add(x[0], x[1])?,
                        "sub" => g.sub(x[0], x[1])?,
                        _ => g.mul(x[0], x[1])?,
                    })
                }),
            )
        }
        "sum" => {
            let s = [ri(rng, 1, 4), ri(rng, 1, 5)];
            (vec![randn(rng, &s, 1.0)], Box::new(|g, x| Ok(g.sum(x[0]))))
        }
        "triplet_standard" | "triplet_modified" => {
            let kind = if name == "triplet_standard" {
                TripletKind::Standard
            } else {
                TripletKind::Modified
            };
            let s = [ri(rng, 1, 4), ri(rng, 1, 6)];
            let margin = rng.random_range(0.5..2.0f32);
            let v = (0..3).map(|_| randn(rng, &s, 0.5)).collect();
            (v, Box::new(move |g, x| Ok(g.triplet_loss(x[0], x[1], x[2], kind, margin)?)))
        }
        "softmax_xent" => {
            let (n, c) = (ri(rng, 1, 5), ri(rng, 2, 6));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            (vec![randn(rng, &[n, c], 2.0)], Box::new(move |g, x| Ok(g.softmax_xent(x[0], &labels)?)))
        }
        "contrastive" => {
            let s = [ri(rng, 1, 4), ri(rng, 1, 5)];
            let same: Vec<bool> = (0..s[0]).map(|_| rng.random_bool(0.5)).collect();
            let margin = rng.random_range(1.0..3.0f32);
            let v = vec![randn(rng, &s, 0.5), randn(rng, &s, 0.5)];
            (v, Box::new(move |g, x| Ok(g.contrastive(x[0], x[1], &same, margin)?)))
        }
        other => panic!("no gradient case named `{other}`"),
    }
}

/// Layers and losses covered by [`op_suite`].
pub const SUITE_OPS: [&str; 15] = [
    "conv2d",
    "maxpool2d",
    "linear",
    "relu",
    "dropout",
    "flatten",
    "scale",
    "add",
    "sub",
    "mul",
    "sum",
    "triplet_standard",
    "triplet_modified",
    "softmax_xent",
    "contrastive",
];

fn repeat(
    name: &'static str,
    trials: usize,
    seed: u64,
    mut trial: impl FnMut(&GradCheck, &mut ChaCha8Rng) -> Result<GradCheckReport, BuildError>,
) -> Result<SuiteEntry, BuildError> {
    let tag = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, &[tag]));
    let mut entry = SuiteEntry {
        name,
        trials,
        failed_trials: 0,
        report: GradCheckReport::default(),
    };
    for _ in 0..trials {
        let gc = GradCheck {
            seed: rng.random(),
            ..GradCheck::default()
        };
        let report = trial(&gc, &mut rng)?;
        // A trial where every coordinate crossed a kink checks nothing; it
        // counts as neither pass nor failure.
        if report.checked > 0 && !report.passed(gc.tolerance) {
            entry.failed_trials += 1;
        }
        entry.report.merge(&report);
    }
    Ok(entry)
}

/// Runs `trials` randomized checks of one entry of [`SUITE_OPS`] on small
/// random shapes.
pub fn op_suite(name: &'static str, trials: usize, seed: u64) -> Result<SuiteEntry, BuildError> {
    repeat(name, trials, seed, |gc, rng| {
        let (inputs, build) = random_case(name, rng);
        gc.check_inputs(&inputs, build)
    })
}

/// Differentiates a full mini sketch branch with its classifier head and
/// a softmax loss w.r.t. every parameter tensor, probing `coords` random
/// coordinates of each.
pub fn branch_suite(trials: usize, coords: usize, seed: u64) -> Result<SuiteEntry, BuildError> {
    repeat("mini_branch", trials, seed, |gc, rng| {
        let gc = GradCheck {
            max_coords: Some(coords),
            ..*gc
        };
        mini_branch_trial(&gc, rng.random())
    })
}

fn mini_branch_trial(gc: &GradCheck, seed: u64) -> Result<GradCheckReport, BuildError> {
    use crate::losses::LossGraphExt;
    use crate::data::{rasterize, skeletonize, StrokeSketch};
    use crate::model::{build_sketch_branch, ForwardCtx, Preset};
    let mut net = build_sketch_branch(Preset::Mini, seed)?;
    net.attach_classifier_head(4, seed ^ 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Sparse ink images like the ones the branch sees in training.
    let mut image = || -> Result<Tensor, BuildError> {
        let strokes = (0..6)
            .map(|_| (0..5).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect())
            .collect();
        let sketch = StrokeSketch::new(100.0, 100.0, strokes)?;
        Ok(skeletonize(&rasterize(&sketch, 64, 2)?).to_input())
    };
    let x = Tensor::stack(&[image()?, image()?])?;
    let labels = [rng.random_range(0..4), rng.random_range(0..4)];
    let ids: Vec<ParamId> = net.store.iter().map(|(id, _, _)| id).collect();
    let branch = &net.branch;
    gc.check_params(&net.store, &ids, |g, store| {
        let xin = g.input(x.clone());
        let out = branch.forward(g, store, xin, &ForwardCtx::eval_with_grads())?;
        let logits = branch.logits(g, store, out.embedding, &ForwardCtx::eval_with_grads())?;
        Ok(g.softmax_xent(logits, &labels)?)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{LossGraphExt, TripletKind};

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
    }

    fn assert_passes(name: &str, report: &GradCheckReport) {
        assert!(
            report.passed(1e-3),
            "{name}: max rel err {} over {} coords ({} skipped), worst {:?}",
            report.max_rel_err,
            report.checked,
            report.skipped,
            report.worst
        );
    }

    #[test]
    fn detects_a_wrong_gradient() {
        struct Wrong;
        impl crate::tensor::CustomOp for Wrong {
            fn name(&self) -> &'static str {
                "wrong"
            }
            fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
                // d(x²)/dx reported as x instead of 2x.
                vec![Some(Tensor::from_fn(inputs[0].shape(), |i| inputs[0].data()[i] * g.data()[i]))]
            }
        }
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = GradCheck::default()
            .check_inputs(&[x], |g, v| {
                let val = Tensor::from_fn(g.value(v[0]).shape(), |i| g.value(v[0]).data()[i].powi(2));
                Ok(g.custom(Box::new(Wrong), &[v[0]], val))
            })
            .unwrap();
        assert!(!report.passed(1e-3));
        assert!((report.max_rel_err - 0.5).abs() < 1e-2);
    }

    #[test]
    fn relu_kinks_are_skipped_not_failed() {
        let x = Tensor::new(vec![4], vec![-1.0, 2e-4, 0.3, 1.0]).unwrap();
        let report = GradCheck::default().check_inputs(&[x], |g, v| Ok(g.relu(v[0]))).unwrap();
        assert_eq!(report.skipped, 1);
        assert_passes("relu", &report);
    }

    #[test]
    fn layers_and_losses_pass_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gc = GradCheck::default();
        let (x, w, b) = (randn(&mut rng, &[2, 2, 5, 5]), randn(&mut rng, &[3, 2, 3, 3]), randn(&mut rng, &[3]));
        let r = gc.check_inputs(&[x, w, b], |g, v| Ok(g.conv2d(v[0], v[1], v[2], 2, 1)?)).unwrap();
        assert_passes("conv2d", &r);
        let x = randn(&mut rng, &[1, 2, 6, 6]);
        let r = gc.check_inputs(&[x], |g, v| Ok(g.maxpool2d(v[0], 3, 2)?)).unwrap();
        assert_passes("maxpool2d", &r);
        let (a, p, n) = (randn(&mut rng, &[3, 4]), randn(&mut rng, &[3, 4]), randn(&mut rng, &[3, 4]));
        let r = gc
            .check_inputs(&[a, p, n], |g, v| Ok(g.triplet_loss(v[0], v[1], v[2], TripletKind::Modified, 1.0)?))
            .unwrap();
        assert_passes("triplet", &r);
    }

    #[test]
    fn randomized_suite_passes() {
        for name in SUITE_OPS {
            let e = op_suite(name, 100, 7).unwrap();
            assert_eq!(e.failed_trials, 0, "{name}: {:?}", e.report);
            assert!(e.report.checked > 0, "{name}");
        }
    }

    #[test]
    fn mini_branch_parameter_gradients_match() {
        let e = branch_suite(2, 6, 0).unwrap();
        assert_eq!(e.failed_trials, 0, "{:?}", e.report);
        assert!(e.report.checked >= 100, "{:?}", e.report);
    }
}
