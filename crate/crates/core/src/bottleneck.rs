//! Concept bottleneck projection: cosine-cubed alignment, distillation
//! regularization, expansion, and full-batch training.
//!
//! The per-concept similarity standardizes both activation vectors to mean 0
//! and population std 1, cubes them elementwise, and takes the cosine of the
//! results. Cubing emphasizes strongly activating samples; standardization
//! makes the similarity invariant to affine rescaling of either side.
//! Constant vectors standardize to zero and contribute zero similarity.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::Real;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// The projection W mapping d-dimensional features to per-concept
/// activations; row i belongs to concept i.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckWeights<F = Real> {
    pub weights: Array2<F>,
    pub phase_id: u32,
}

impl<F: Scalar> BottleneckWeights<F> {
    pub fn new(weights: Array2<F>, phase_id: u32) -> Result<Self> {
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "bottleneck weights contain NaN/Inf".into(),
            ));
        }
        Ok(BottleneckWeights { weights, phase_id })
    }

    /// Fresh phase-1 weights: rows from a seeded Gaussian with std 1/sqrt(d).
    pub fn seeded_init(concepts: usize, feature_dim: usize, seed: u64, phase_id: u32) -> Self {
        BottleneckWeights {
            weights: seeded_rows(concepts, feature_dim, seed),
            phase_id,
        }
    }

    pub fn concept_count(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Concept activations for a feature batch: rows x concepts.
    pub fn project(&self, features: ArrayView2<'_, F>) -> Result<Array2<F>> {
        if features.ncols() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "features have dim {}, bottleneck expects {}",
                features.ncols(),
                self.feature_dim()
            )));
        }
        Ok(features.dot(&self.weights.t()))
    }
}

fn seeded_rows<F: Scalar>(rows: usize, dim: usize, seed: u64) -> Array2<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (dim.max(1) as f64).sqrt();
    let mut out = Array2::<F>::zeros((rows, dim));
    for v in out.iter_mut() {
        let x: f64 = StandardNormal.sample(&mut rng);
        *v = F::from(x * scale).unwrap();
    }
    out
}

/// Map a vector to mean 0, population std 1. Inputs whose std does not
/// exceed `eps` (constants in particular) map to the zero vector.
pub fn standardize<F: Scalar>(v: ArrayView1<'_, F>, eps: F) -> Array1<F> {
    let n = v.len();
    if n == 0 {
        return Array1::zeros(0);
    }
    let len = F::from(n).unwrap();
    let mean = v.sum() / len;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / len;
    let std = var.sqrt();
    if std <= eps {
        return Array1::zeros(n);
    }
    v.mapv(|x| (x - mean) / std)
}

fn cubed_normalized<F: Scalar>(v: ArrayView1<'_, F>, eps: F) -> Option<Array1<F>> {
    let u = standardize(v, eps);
    if u.iter().all(|&x| x == F::zero()) {
        return None;
    }
    let a = u.mapv(|x| x * x * x);
    let norm = a.dot(&a).sqrt();
    Some(a / norm)
}

/// Cosine of the standardized, elementwise-cubed vectors, in [-1, 1].
/// Pairs involving a constant vector score 0 by convention.
pub fn cos_cubed_sim<F: Scalar>(a: ArrayView1<'_, F>, b: ArrayView1<'_, F>, eps: F) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine-cubed arguments of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    match (cubed_normalized(a, eps), cubed_normalized(b, eps)) {
        (Some(x), Some(y)) => Ok(x.dot(&y)),
        _ => Ok(F::zero()),
    }
}

/// Precomputed per-concept targets: standardized, cubed, unit-normalized
/// activation columns. Constant columns are dropped (they contribute zero).
#[derive(Debug, Clone)]
pub struct ConceptTargets<F = Real> {
    cols: Vec<Option<Array1<F>>>,
    samples: usize,
}

impl<F: Scalar> ConceptTargets<F> {
    pub fn from_activations(activations: ArrayView2<'_, F>, eps: F) -> Self {
        let cols = (0..activations.ncols())
            .map(|j| cubed_normalized(activations.column(j), eps))
            .collect();
        ConceptTargets {
            cols,
            samples: activations.nrows(),
        }
    }

    pub fn concepts(&self) -> usize {
        self.cols.len()
    }
}

/// Previous-bottleneck activations on current-phase data, processed once at
/// cache time into similarity targets for the distillation term.
#[derive(Debug, Clone)]
pub struct DistillationCache<F = Real> {
    pub q_prev: Array2<F>,
    targets: ConceptTargets<F>,
}

impl<F: Scalar> DistillationCache<F> {
    pub fn from_previous(
        prev: &BottleneckWeights<F>,
        features: ArrayView2<'_, F>,
        eps: F,
    ) -> Result<Self> {
        let q_prev = prev.project(features)?;
        let targets = ConceptTargets::from_activations(q_prev.view(), eps);
        Ok(DistillationCache { q_prev, targets })
    }

    pub fn old_concepts(&self) -> usize {
        self.targets.cols.len()
    }
}

fn sim_and_q_grad<F: Scalar>(
    q: ArrayView1<'_, F>,
    target: &Array1<F>,
    eps: F,
    with_grad: bool,
) -> (F, Option<Array1<F>>) {
    let n = q.len();
    let len = F::from(n).unwrap();
    let mean = q.sum() / len;
    let var = q.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / len;
    let std = var.sqrt();
    if std <= eps {
        return (F::zero(), None);
    }
    let u = q.mapv(|x| (x - mean) / std);
    let a = u.mapv(|x| x * x * x);
    let na = a.dot(&a).sqrt();
    let ahat = &a / na;
    let sim = ahat.dot(target);
    if !with_grad {
        return (sim, None);
    }
    // dsim/da = (target - sim * ahat) / ||a||; da/du = 3 u^2;
    // pulling through the standardization: (g - mean(g) - u (u.g)/n) / std.
    let dsim_da = (target - &(&ahat * sim)) / na;
    let g = &dsim_da * &u.mapv(|x| F::from(3.0).unwrap() * x * x);
    let gmean = g.sum() / len;
    let ug = u.dot(&g) / len;
    let dq = g.mapv(|x| x - gmean) - &(&u * ug);
    (sim, Some(dq / std))
}

fn check_shapes<F: Scalar>(
    w: &BottleneckWeights<F>,
    features: ArrayView2<'_, F>,
    targets: &ConceptTargets<F>,
    distill: Option<&DistillationCache<F>>,
) -> Result<()> {
    if features.ncols() != w.feature_dim() {
        return Err(Error::Shape(format!(
            "features have dim {}, bottleneck expects {}",
            features.ncols(),
            w.feature_dim()
        )));
    }
    if targets.concepts() != w.concept_count() {
        return Err(Error::Shape(format!(
            "{} activation columns for {} bottleneck rows",
            targets.concepts(),
            w.concept_count()
        )));
    }
    if targets.samples != features.nrows() {
        return Err(Error::Shape(format!(
            "{} activation rows for {} feature rows",
            targets.samples,
            features.nrows()
        )));
    }
    if let Some(cache) = distill {
        if cache.old_concepts() > w.concept_count() {
            return Err(Error::Shape(format!(
                "distillation cache covers {} concepts, bottleneck has {}",
                cache.old_concepts(),
                w.concept_count()
            )));
        }
        if cache.q_prev.nrows() != features.nrows() {
            return Err(Error::Shape(format!(
                "distillation cache built on {} rows, features have {}",
                cache.q_prev.nrows(),
                features.nrows()
            )));
        }
    }
    Ok(())
}

fn loss_impl<F: Scalar>(
    w: &BottleneckWeights<F>,
    features: ArrayView2<'_, F>,
    targets: &ConceptTargets<F>,
    distill: Option<(&DistillationCache<F>, F)>,
    eps: F,
    with_grad: bool,
) -> Result<(F, Option<Array2<F>>)> {
    check_shapes(w, features, targets, distill.map(|d| d.0))?;
    let q = features.dot(&w.weights.t());
    let m = w.concept_count();
    // Per-concept terms are independent; the reduction below runs in index
    // order so results do not depend on the thread count.
    let terms: Vec<(F, Option<Array1<F>>)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let qi = q.column(i);
            let mut loss_i = F::zero();
            let mut dq: Option<Array1<F>> = None;
            if let Some(t) = &targets.cols[i] {
                let (sim, g) = sim_and_q_grad(qi, t, eps, with_grad);
                loss_i -= sim;
                if let Some(g) = g {
                    dq = Some(-g);
                }
            }
            if let Some((cache, beta)) = distill {
                if beta > F::zero() && i < cache.old_concepts() {
                    if let Some(t) = &cache.targets.cols[i] {
                        let (sim, g) = sim_and_q_grad(qi, t, eps, with_grad);
                        loss_i -= beta * sim;
                        if let Some(g) = g {
                            let scaled = g.mapv(|x| -(beta * x));
                            dq = Some(match dq {
                                Some(d) => d + &scaled,
                                None => scaled,
                            });
                        }
                    }
                }
            }
            let grad_row = if with_grad {
                dq.map(|d| features.t().dot(&d))
            } else {
                None
            };
            (loss_i, grad_row)
        })
        .collect();
    let mut loss = F::zero();
    let mut grad = with_grad.then(|| Array2::<F>::zeros(w.weights.raw_dim()));
    for (i, (l, g)) in terms.into_iter().enumerate() {
        loss += l;
        if let (Some(grad), Some(g)) = (grad.as_mut(), g) {
            grad.row_mut(i).assign(&g);
        }
    }
    Ok((loss, grad))
}

/// Alignment loss over all concepts: minus the summed cosine-cubed
/// similarity between each projection column and its activation column.
/// The minimum possible value is -M.
pub fn alignment_loss<F: Scalar>(
    w: &BottleneckWeights<F>,
    features: ArrayView2<'_, F>,
    activations: ArrayView2<'_, F>,
    eps: F,
) -> Result<F> {
    let targets = ConceptTargets::from_activations(activations, eps);
    Ok(loss_impl(w, features, &targets, None, eps, false)?.0)
}

/// Alignment loss plus the beta-weighted distillation term over the cached
/// old concepts. `beta = 0` is exactly the alignment loss.
pub fn combined_loss<F: Scalar>(
    w: &BottleneckWeights<F>,
    features: ArrayView2<'_, F>,
    activations: ArrayView2<'_, F>,
    cache: &DistillationCache<F>,
    beta: F,
    eps: F,
) -> Result<F> {
    let targets = ConceptTargets::from_activations(activations, eps);
    let distill = (beta > F::zero()).then_some((cache, beta));
    Ok(loss_impl(w, features, &targets, distill, eps, false)?.0)
}

/// Loss value and analytic gradient of the combined objective. Pass no
/// cache (or beta = 0) for the plain alignment loss.
pub fn loss_gradient<F: Scalar>(
    w: &BottleneckWeights<F>,
    features: ArrayView2<'_, F>,
    activations: ArrayView2<'_, F>,
    cache: Option<&DistillationCache<F>>,
    beta: F,
    eps: F,
) -> Result<(F, Array2<F>)> {
    let targets = ConceptTargets::from_activations(activations, eps);
    let distill = cache.and_then(|c| (beta > F::zero()).then_some((c, beta)));
    let (loss, grad) = loss_impl(w, features, &targets, distill, eps, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

/// Mean cosine-cubed similarity between current projections and the cached
/// previous-bottleneck outputs over the old concepts (a drift diagnostic).
pub fn distillation_similarity<F: Scalar>(
    w: &BottleneckWeights<F>,
    features: ArrayView2<'_, F>,
    cache: &DistillationCache<F>,
    eps: F,
) -> Result<F> {
    let q = w.project(features)?;
    let mut total = F::zero();
    let mut count = 0usize;
    for i in 0..cache.old_concepts() {
        if let Some(t) = &cache.targets.cols[i] {
            let (sim, _) = sim_and_q_grad(q.column(i), t, eps, false);
            total += sim;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(F::zero());
    }
    Ok(total / F::from(count).unwrap())
}

/// Append seeded rows for new concepts; existing rows are untouched.
pub fn expand_bottleneck<F: Scalar>(
    prev: &BottleneckWeights<F>,
    new_concepts: usize,
    seed: u64,
) -> BottleneckWeights<F> {
    let d = prev.feature_dim();
    let m_prev = prev.concept_count();
    let mut weights = Array2::<F>::zeros((m_prev + new_concepts, d));
    weights
        .slice_mut(ndarray::s![..m_prev, ..])
        .assign(&prev.weights);
    if new_concepts > 0 {
        let fresh = seeded_rows::<F>(new_concepts, d, seed);
        weights.slice_mut(ndarray::s![m_prev.., ..]).assign(&fresh);
    }
    BottleneckWeights {
        weights,
        phase_id: prev.phase_id + 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant,
    /// Cosine decay from the base step down to 10% of it.
    Cosine,
}

impl StepSchedule {
    fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            StepSchedule::Constant => 1.0,
            StepSchedule::Cosine => {
                let t = (step - 1) as f64 / total.max(1) as f64;
                0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig<F = Real> {
    /// Distillation weight; ignored when no cache is supplied.
    pub beta: F,
    pub steps: usize,
    pub base_step: F,
    pub schedule: StepSchedule,
    /// Carried for provenance; training itself is deterministic and only
    /// initialization/expansion consume randomness.
    pub seed: u64,
    /// Standardization floor.
    pub std_eps: F,
}

impl<F: Scalar> Default for TrainConfig<F> {
    fn default() -> Self {
        TrainConfig {
            beta: F::one(),
            steps: 1000,
            base_step: F::from(1e-2).unwrap(),
            schedule: StepSchedule::Constant,
            seed: 1993,
            std_eps: F::from(1e-8).unwrap(),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MAX_BACKTRACKS: u32 = 30;

/// Full-batch Adam on the combined loss with a monotone guard: a step that
/// would raise the loss is retried at halved lengths and skipped if none
/// helps, so the final loss never exceeds the initial one. Returns the
/// trained weights and the loss after every step (index 0 = initial loss).
pub fn train_bottleneck<F: Scalar>(
    w_init: &BottleneckWeights<F>,
    features: ArrayView2<'_, F>,
    activations: ArrayView2<'_, F>,
    cache: Option<&DistillationCache<F>>,
    cfg: &TrainConfig<F>,
) -> Result<(BottleneckWeights<F>, Vec<F>)> {
    if cfg.beta < F::zero() {
        return Err(Error::Validation(format!(
            "distillation weight must be nonnegative, got {}",
            cfg.beta
        )));
    }
    let eps = cfg.std_eps;
    let targets = ConceptTargets::from_activations(activations, eps);
    let distill = cache.and_then(|c| (cfg.beta > F::zero()).then_some((c, cfg.beta)));

    let mut w = w_init.clone();
    let (mut loss, grad0) = loss_impl(&w, features, &targets, distill, eps, true)?;
    let mut grad = grad0.expect("gradient requested");
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            detail: "non-finite initial loss".into(),
        });
    }
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    trajectory.push(loss);

    let b1 = F::from(ADAM_BETA1).unwrap();
    let b2 = F::from(ADAM_BETA2).unwrap();
    let adam_eps = F::from(ADAM_EPS).unwrap();
    let mut m = Array2::<F>::zeros(w.weights.raw_dim());
    let mut v = Array2::<F>::zeros(w.weights.raw_dim());

    for step in 1..=cfg.steps {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        m = &m * b1 + &(&grad * (F::one() - b1));
        v = &v * b2 + &(&grad.mapv(|g| g * g) * (F::one() - b2));
        let bc1 = F::one() - b1.powi(step as i32);
        let bc2 = F::one() - b2.powi(step as i32);
        let lr = cfg.base_step * F::from(cfg.schedule.factor(step, cfg.steps)).unwrap();
        let dir = ndarray::Zip::from(&m)
            .and(&v)
            .map_collect(|&mi, &vi| (mi / bc1) / ((vi / bc2).sqrt() + adam_eps));

        let mut accepted = false;
        let mut scale = F::one();
        for _ in 0..=MAX_BACKTRACKS {
            let w_try = BottleneckWeights {
                weights: &w.weights - &(&dir * (lr * scale)),
                phase_id: w.phase_id,
            };
            let (loss_try, _) = loss_impl(&w_try, features, &targets, distill, eps, false)?;
            if !loss_try.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: "non-finite loss during backtracking".into(),
                });
            }
            if loss_try <= loss {
                let (l, g) = loss_impl(&w_try, features, &targets, distill, eps, true)?;
                w = w_try;
                loss = l;
                grad = g.expect("gradient requested");
                accepted = true;
                break;
            }
            scale *= F::from(0.5).unwrap();
        }
        if !accepted {
            // No step length along this direction improves the loss; the
            // moments still advance so a later direction can.
        }
        trajectory.push(loss);
    }
    Ok((w, trajectory))
}
