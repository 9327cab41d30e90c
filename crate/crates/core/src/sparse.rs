//! Sparse interpretable final layer: multinomial logistic regression with an
//! elastic-net penalty, solved by proximal gradient (ISTA) with backtracking
//! and momentum restarts.
//!
//! The smooth part is the mean cross-entropy plus the ridge component of the
//! penalty; the L1 component enters through soft-thresholding, which produces
//! exact zeros. The bias is unregularized. Concept features are standardized
//! internally by default and the solution is folded back to the raw scale on
//! exit, so the returned predictor always satisfies `logits = W x + b` on
//! raw concept activations.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::Real;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// The interpretable prediction layer. Row k of `weights` scores class
/// `class_ids[k]`; zeros are exact.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePredictor<F = Real> {
    pub weights: Array2<F>,
    pub bias: Array1<F>,
    pub lambda: F,
    pub alpha: F,
    pub class_ids: Vec<i32>,
}

impl<F: Scalar> SparsePredictor<F> {
    pub fn zeros(class_ids: Vec<i32>, concepts: usize, lambda: F, alpha: F) -> Self {
        let k = class_ids.len();
        SparsePredictor {
            weights: Array2::zeros((k, concepts)),
            bias: Array1::zeros(k),
            lambda,
            alpha,
            class_ids,
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn concepts(&self) -> usize {
        self.weights.ncols()
    }

    pub fn row_of_class(&self, class_id: i32) -> Result<usize> {
        self.class_ids
            .iter()
            .position(|&c| c == class_id)
            .ok_or(Error::UnseenClass { class_id })
    }

    /// Nonzero weight count per class, in row order. An entry counts as
    /// nonzero iff it is exactly nonzero.
    pub fn per_class_nonzeros(&self) -> Vec<(i32, usize)> {
        self.weights
            .rows()
            .into_iter()
            .zip(&self.class_ids)
            .map(|(row, &c)| (c, row.iter().filter(|w| **w != F::zero()).count()))
            .collect()
    }

    pub fn total_nonzeros(&self) -> usize {
        self.weights.iter().filter(|w| **w != F::zero()).count()
    }

    pub fn mean_nonzeros_per_class(&self) -> Real {
        if self.classes() == 0 {
            return 0.0;
        }
        self.total_nonzeros() as Real / self.classes() as Real
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSource {
    Real,
    Pseudo,
}

/// Mixed concept-space training batch: real rows for current-phase classes,
/// pseudo rows for past classes.
#[derive(Debug, Clone)]
pub struct TrainingBatch<F = Real> {
    pub concepts: Array2<F>,
    pub labels: Vec<i32>,
    pub source: Vec<SampleSource>,
}

impl<F: Scalar> TrainingBatch<F> {
    pub fn new(concepts: Array2<F>, labels: Vec<i32>, source: Vec<SampleSource>) -> Result<Self> {
        if concepts.nrows() == 0 {
            return Err(Error::Validation("empty training batch".into()));
        }
        if labels.len() != concepts.nrows() || source.len() != concepts.nrows() {
            return Err(Error::Shape(format!(
                "batch with {} rows, {} labels, {} source tags",
                concepts.nrows(),
                labels.len(),
                source.len()
            )));
        }
        if concepts.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("training batch contains NaN/Inf".into()));
        }
        Ok(TrainingBatch {
            concepts,
            labels,
            source,
        })
    }

    pub fn all_real(concepts: Array2<F>, labels: Vec<i32>) -> Result<Self> {
        let n = labels.len();
        Self::new(concepts, labels, vec![SampleSource::Real; n])
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig<F = Real> {
    /// Stationarity tolerance on the sub-gradient optimality violation.
    pub tol: F,
    pub max_iters: usize,
    /// Standardize concept columns internally (folded back on exit).
    pub standardize: bool,
    /// Weight samples by inverse class frequency.
    pub balance: bool,
    /// Force a momentum restart every this many iterations (0 = never).
    pub restart_period: usize,
    /// Hold the first `frozen_classes` rows (and bias entries) fixed at the
    /// warm start; see [`freeze_old_rows_fit`].
    pub frozen_classes: usize,
}

impl<F: Scalar> Default for SolverConfig<F> {
    fn default() -> Self {
        SolverConfig {
            tol: F::from(1e-5).unwrap(),
            max_iters: 2000,
            standardize: true,
            balance: false,
            restart_period: 200,
            frozen_classes: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport<F = Real> {
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: F,
    pub objective: F,
    /// Objective after every accepted step, starting from the initial point.
    pub trajectory: Vec<F>,
    /// Seen classes with no rows in the batch (expected only under the
    /// no-pseudo ablation).
    pub missing_classes: Vec<i32>,
}

// ---------------------------------------------------------------------------
// Elementary pieces
// ---------------------------------------------------------------------------

/// Elastic-net penalty R_alpha(W) = (1-alpha)/2 ||W||_F^2 + alpha ||W||_1,1.
pub fn elastic_net_penalty<F: Scalar>(w: ArrayView2<'_, F>, alpha: F) -> F {
    let half = F::from(0.5).unwrap();
    let fro: F = w.iter().map(|&x| x * x).sum();
    let l1: F = w.iter().map(|&x| x.abs()).sum();
    (F::one() - alpha) * half * fro + alpha * l1
}

/// prox of t * |.|: sign(w) * max(|w| - t, 0), with exact zeros.
pub fn soft_threshold<F: Scalar>(w: F, t: F) -> F {
    let mag = w.abs() - t;
    if mag > F::zero() {
        mag * w.signum()
    } else {
        F::zero()
    }
}

/// Numerically stable log-sum-exp minus the label logit.
pub fn softmax_cross_entropy<F: Scalar>(logits: ArrayView1<'_, F>, label: usize) -> Result<F> {
    if label >= logits.len() {
        return Err(Error::Validation(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = logits.iter().map(|&z| (z - max).exp()).sum();
    Ok(max + sum.ln() - logits[label])
}

/// Cross-entropy and its gradient with respect to the logits
/// (softmax minus one-hot).
pub fn softmax_cross_entropy_grad<F: Scalar>(
    logits: ArrayView1<'_, F>,
    label: usize,
) -> Result<(F, Array1<F>)> {
    let loss = softmax_cross_entropy(logits, label)?;
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps = logits.mapv(|z| (z - max).exp());
    let sum = exps.sum();
    let mut grad = exps / sum;
    grad[label] -= F::one();
    Ok((loss, grad))
}

/// Argmax over rows with ties broken toward the smaller class id.
pub fn predict<F: Scalar>(
    pred: &SparsePredictor<F>,
    concepts: ArrayView2<'_, F>,
) -> Result<(Vec<i32>, Array2<F>)> {
    if concepts.ncols() != pred.concepts() {
        return Err(Error::Shape(format!(
            "{} concept features for a predictor over {} concepts",
            concepts.ncols(),
            pred.concepts()
        )));
    }
    let logits = concepts.dot(&pred.weights.t()) + &pred.bias;
    let labels = logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = (F::neg_infinity(), i32::MAX);
            for (k, &z) in row.iter().enumerate() {
                let c = pred.class_ids[k];
                if z > best.0 || (z == best.0 && c < best.1) {
                    best = (z, c);
                }
            }
            best.1
        })
        .collect();
    Ok((labels, logits))
}

/// Grow the predictor for new classes and concepts. The old block of
/// weights and biases is copied exactly; everything new starts at zero.
pub fn expand_predictor<F: Scalar>(
    pred: &SparsePredictor<F>,
    new_class_ids: &[i32],
    new_concepts: usize,
) -> Result<SparsePredictor<F>> {
    for c in new_class_ids {
        if pred.class_ids.contains(c) {
            return Err(Error::Validation(format!(
                "class {c} already present in the predictor"
            )));
        }
    }
    let (k, m) = (pred.classes(), pred.concepts());
    let mut weights = Array2::zeros((k + new_class_ids.len(), m + new_concepts));
    weights
        .slice_mut(ndarray::s![..k, ..m])
        .assign(&pred.weights);
    let mut bias = Array1::zeros(k + new_class_ids.len());
    bias.slice_mut(ndarray::s![..k]).assign(&pred.bias);
    let mut class_ids = pred.class_ids.clone();
    class_ids.extend_from_slice(new_class_ids);
    Ok(SparsePredictor {
        weights,
        bias,
        lambda: pred.lambda,
        alpha: pred.alpha,
        class_ids,
    })
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

struct Problem<F> {
    x: Array2<F>,
    label_rows: Vec<usize>,
    sample_w: Array1<F>,
    lambda: F,
    alpha: F,
    frozen: usize,
}

impl<F: Scalar> Problem<F> {
    fn n(&self) -> usize {
        self.x.nrows()
    }

    fn smooth_value(&self, w: &Array2<F>, b: &Array1<F>) -> F {
        let logits = self.x.dot(&w.t()) + b;
        let n = F::from(self.n()).unwrap();
        let mut ce = F::zero();
        for (i, row) in logits.rows().into_iter().enumerate() {
            let l = softmax_cross_entropy(row, self.label_rows[i]).expect("label validated");
            ce += self.sample_w[i] * l;
        }
        let half = F::from(0.5).unwrap();
        let ridge: F = w.iter().map(|&x| x * x).sum();
        ce / n + self.lambda * (F::one() - self.alpha) * half * ridge
    }

    fn smooth_grad(&self, w: &Array2<F>, b: &Array1<F>) -> (Array2<F>, Array1<F>) {
        let logits = self.x.dot(&w.t()) + b;
        let n = F::from(self.n()).unwrap();
        let mut resid = Array2::<F>::zeros(logits.raw_dim());
        for (i, row) in logits.rows().into_iter().enumerate() {
            let (_, g) = softmax_cross_entropy_grad(row, self.label_rows[i])
                .expect("label validated");
            let scaled = g * (self.sample_w[i] / n);
            resid.row_mut(i).assign(&scaled);
        }
        let mut gw = resid.t().dot(&self.x) + &(w * (self.lambda * (F::one() - self.alpha)));
        let mut gb = resid.sum_axis(Axis(0));
        for k in 0..self.frozen {
            gw.row_mut(k).fill(F::zero());
            gb[k] = F::zero();
        }
        (gw, gb)
    }

    fn objective(&self, w: &Array2<F>, b: &Array1<F>) -> F {
        let l1: F = w.iter().map(|&x| x.abs()).sum();
        self.smooth_value(w, b) + self.lambda * self.alpha * l1
    }

    fn prox_step(&self, w: &Array2<F>, b: &Array1<F>, gw: &Array2<F>, gb: &Array1<F>, step: F) -> (Array2<F>, Array1<F>) {
        let t = self.lambda * self.alpha * step;
        let mut w_new = ndarray::Zip::from(w)
            .and(gw)
            .map_collect(|&wi, &gi| soft_threshold(wi - step * gi, t));
        let mut b_new = b - &(gb * step);
        for k in 0..self.frozen {
            w_new.row_mut(k).assign(&w.row(k));
            b_new[k] = b[k];
        }
        (w_new, b_new)
    }

    /// Inf-norm violation of the stationarity conditions, skipping frozen rows.
    fn kkt_residual(&self, w: &Array2<F>, b: &Array1<F>) -> F {
        let (gw, gb) = self.smooth_grad(w, b);
        let la = self.lambda * self.alpha;
        let mut r = F::zero();
        for k in self.frozen..w.nrows() {
            for j in 0..w.ncols() {
                let g = gw[[k, j]];
                let wi = w[[k, j]];
                let v = if wi != F::zero() {
                    (g + la * wi.signum()).abs()
                } else {
                    (g.abs() - la).max(F::zero())
                };
                r = r.max(v);
            }
            r = r.max(gb[k].abs());
        }
        r
    }
}

fn quadratic_bound_ok<F: Scalar>(
    fy: F,
    f_new: F,
    gw: &Array2<F>,
    gb: &Array1<F>,
    dw: &Array2<F>,
    db: &Array1<F>,
    l: F,
) -> bool {
    let inner: F = gw.iter().zip(dw.iter()).map(|(&g, &d)| g * d).sum::<F>()
        + gb.iter().zip(db.iter()).map(|(&g, &d)| g * d).sum::<F>();
    let sq: F = dw.iter().map(|&d| d * d).sum::<F>() + db.iter().map(|&d| d * d).sum::<F>();
    let half = F::from(0.5).unwrap();
    f_new <= fy + inner + l * half * sq + F::from(1e-12).unwrap()
}

fn run_fista<F: Scalar>(
    problem: &Problem<F>,
    w0: Array2<F>,
    b0: Array1<F>,
    cfg: &SolverConfig<F>,
) -> Result<(Array2<F>, Array1<F>, FitReport<F>)> {
    let mut w = w0;
    let mut b = b0;
    let mut yw = w.clone();
    let mut yb = b.clone();
    let mut l = F::one();
    let mut tk = F::one();
    let mut objective = problem.objective(&w, &b);
    let mut trajectory = vec![objective];
    let mut kkt = problem.kkt_residual(&w, &b);
    let mut converged = kkt < cfg.tol;
    let mut iterations = 0usize;
    let two = F::from(2.0).unwrap();
    let four = F::from(4.0).unwrap();

    for it in 1..=cfg.max_iters {
        if converged {
            break;
        }
        iterations = it;
        // Proximal step from the extrapolated point with backtracking on L.
        let step_from =
            |pw: &Array2<F>, pb: &Array1<F>, l: &mut F| -> Result<(Array2<F>, Array1<F>)> {
                let (gw, gb) = problem.smooth_grad(pw, pb);
                let fy = problem.smooth_value(pw, pb);
                if !fy.is_finite() {
                    return Err(Error::Divergence {
                        step: it,
                        detail: "non-finite smooth objective".into(),
                    });
                }
                loop {
                    let (wn, bn) = problem.prox_step(pw, pb, &gw, &gb, F::one() / *l);
                    let dw = &wn - pw;
                    let db = &bn - pb;
                    let f_new = problem.smooth_value(&wn, &bn);
                    if f_new.is_finite() && quadratic_bound_ok(fy, f_new, &gw, &gb, &dw, &db, *l)
                    {
                        return Ok((wn, bn));
                    }
                    *l *= two;
                    if *l > F::from(1e30).unwrap() {
                        return Err(Error::Divergence {
                            step: it,
                            detail: "backtracking exhausted the step-size range".into(),
                        });
                    }
                }
            };
        let (mut wn, mut bn) = step_from(&yw, &yb, &mut l)?;
        let mut obj_new = problem.objective(&wn, &bn);
        if !obj_new.is_finite() {
            return Err(Error::Divergence {
                step: it,
                detail: "non-finite objective".into(),
            });
        }
        if obj_new > objective {
            // Momentum overshot: restart and take a plain proximal step from
            // the current point, which the backtracking makes a descent step.
            tk = F::one();
            let (w2, b2) = step_from(&w, &b, &mut l)?;
            wn = w2;
            bn = b2;
            obj_new = problem.objective(&wn, &bn);
            if obj_new > objective {
                // Only float noise left at this point.
                wn = w.clone();
                bn = b.clone();
                obj_new = objective;
            }
        }
        let t_next = (F::one() + (F::one() + four * tk * tk).sqrt()) / two;
        let momentum = (tk - F::one()) / t_next;
        yw = &wn + &((&wn - &w) * momentum);
        yb = &bn + &((&bn - &b) * momentum);
        w = wn;
        b = bn;
        tk = t_next;
        if cfg.restart_period > 0 && it % cfg.restart_period == 0 {
            tk = F::one();
            yw = w.clone();
            yb = b.clone();
        }
        objective = obj_new;
        trajectory.push(objective);
        kkt = problem.kkt_residual(&w, &b);
        converged = kkt < cfg.tol;
        // Let the step size recover after conservative backtracking.
        l = (l * F::from(0.95).unwrap()).max(F::from(1e-10).unwrap());
    }
    let report = FitReport {
        iterations,
        converged,
        kkt_residual: kkt,
        objective,
        trajectory,
        missing_classes: Vec::new(),
    };
    Ok((w, b, report))
}

struct Standardization<F> {
    mean: Array1<F>,
    std: Array1<F>,
}

/// Solver-space problem, optional fold parameters, and seen classes with no
/// batch rows.
type BuiltProblem<F> = (Problem<F>, Option<Standardization<F>>, Vec<i32>);

fn column_standardization<F: Scalar>(x: ArrayView2<'_, F>) -> Standardization<F> {
    let n = F::from(x.nrows()).unwrap();
    let mean = x.sum_axis(Axis(0)) / n;
    let mut std = Array1::<F>::zeros(x.ncols());
    for j in 0..x.ncols() {
        let mu = mean[j];
        let var: F = x.column(j).iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / n;
        let sd = var.sqrt();
        std[j] = if sd > F::from(1e-12).unwrap() {
            sd
        } else {
            F::one()
        };
    }
    Standardization { mean, std }
}

fn build_problem<F: Scalar>(
    batch: &TrainingBatch<F>,
    class_ids: &[i32],
    lambda: F,
    alpha: F,
    frozen: usize,
    cfg: &SolverConfig<F>,
) -> Result<BuiltProblem<F>> {
    if !(F::zero()..=F::one()).contains(&alpha) {
        return Err(Error::Validation(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if lambda < F::zero() {
        return Err(Error::Validation(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    let mut label_rows = Vec::with_capacity(batch.labels.len());
    for &c in &batch.labels {
        let row = class_ids
            .iter()
            .position(|&k| k == c)
            .ok_or(Error::UnseenClass { class_id: c })?;
        label_rows.push(row);
    }
    let mut counts = vec![0usize; class_ids.len()];
    for &r in &label_rows {
        counts[r] += 1;
    }
    let missing: Vec<i32> = class_ids
        .iter()
        .zip(&counts)
        .filter(|(_, &n)| n == 0)
        .map(|(&c, _)| c)
        .collect();
    let n = batch.labels.len();
    let sample_w = if cfg.balance {
        let present = counts.iter().filter(|&&c| c > 0).count();
        Array1::from_iter(label_rows.iter().map(|&r| {
            F::from(n).unwrap() / (F::from(present).unwrap() * F::from(counts[r]).unwrap())
        }))
    } else {
        Array1::from_elem(n, F::one())
    };
    let (x, stz) = if cfg.standardize {
        let stz = column_standardization(batch.concepts.view());
        let mut x = batch.concepts.clone();
        for j in 0..x.ncols() {
            let (mu, sd) = (stz.mean[j], stz.std[j]);
            x.column_mut(j).mapv_inplace(|v| (v - mu) / sd);
        }
        (x, Some(stz))
    } else {
        (batch.concepts.clone(), None)
    };
    Ok((
        Problem {
            x,
            label_rows,
            sample_w,
            lambda,
            alpha,
            frozen,
        },
        stz,
        missing,
    ))
}

/// Smallest lambda that drives every weight to zero: at (W = 0, b = class
/// log-priors) the optimality condition holds iff lambda * alpha bounds the
/// absolute smooth gradient entrywise.
pub fn lambda_max<F: Scalar>(batch: &TrainingBatch<F>, class_ids: &[i32], alpha: F, cfg: &SolverConfig<F>) -> Result<F> {
    if alpha <= F::zero() {
        return Err(Error::Validation(
            "lambda_max requires alpha > 0 (no L1 component otherwise)".into(),
        ));
    }
    let (problem, _, _) = build_problem(batch, class_ids, F::zero(), alpha, 0, cfg)?;
    let n = F::from(problem.n()).unwrap();
    let k = class_ids.len();
    // Weighted class priors.
    let mut pri = Array1::<F>::zeros(k);
    for (i, &r) in problem.label_rows.iter().enumerate() {
        pri[r] += problem.sample_w[i] / n;
    }
    // Gradient of the mean CE at W = 0 with softmax(b) equal to the priors:
    // G[k, j] = sum_i w_i (pri_k - 1{y_i = k}) x_ij / n.
    let mut resid = Array2::<F>::zeros((problem.n(), k));
    for (i, &r) in problem.label_rows.iter().enumerate() {
        for c in 0..k {
            let ind = if c == r { F::one() } else { F::zero() };
            resid[[i, c]] = problem.sample_w[i] * (pri[c] - ind) / n;
        }
    }
    let g = resid.t().dot(&problem.x);
    let gmax = g.iter().fold(F::zero(), |acc: F, &v| acc.max(v.abs()));
    Ok(gmax / alpha)
}

fn fit_impl<F: Scalar>(
    batch: &TrainingBatch<F>,
    init: &SparsePredictor<F>,
    lambda: F,
    alpha: F,
    frozen: usize,
    cfg: &SolverConfig<F>,
) -> Result<(SparsePredictor<F>, FitReport<F>)> {
    if init.concepts() != batch.concepts.ncols() {
        return Err(Error::Shape(format!(
            "batch has {} concepts, predictor expects {}",
            batch.concepts.ncols(),
            init.concepts()
        )));
    }
    let (problem, stz, missing) = build_problem(batch, &init.class_ids, lambda, alpha, frozen, cfg)?;
    // Fold the warm start into solver space.
    let (w0, b0) = match &stz {
        Some(s) => {
            let mut w = init.weights.clone();
            for j in 0..w.ncols() {
                let sd = s.std[j];
                w.column_mut(j).mapv_inplace(|v| v * sd);
            }
            let shift = init.weights.dot(&s.mean);
            (w, &init.bias + &shift)
        }
        None => (init.weights.clone(), init.bias.clone()),
    };
    let (w_s, b_s, mut report) = run_fista(&problem, w0, b0, cfg)?;
    report.missing_classes = missing;
    // Unfold back to raw concept scale; frozen rows are copied verbatim so
    // they stay bit-identical to the init.
    let (mut weights, mut bias) = match &stz {
        Some(s) => {
            let mut w = w_s.clone();
            for j in 0..w.ncols() {
                let sd = s.std[j];
                w.column_mut(j).mapv_inplace(|v| v / sd);
            }
            let shift = w_s.dot(&(&s.mean / &s.std));
            (w, &b_s - &shift)
        }
        None => (w_s, b_s),
    };
    for k in 0..frozen {
        weights.row_mut(k).assign(&init.weights.row(k));
        bias[k] = init.bias[k];
    }
    Ok((
        SparsePredictor {
            weights,
            bias,
            lambda,
            alpha,
            class_ids: init.class_ids.clone(),
        },
        report,
    ))
}

/// Fit the sparse layer on a mixed batch, warm-starting from `init`.
pub fn fit_sparse_predictor<F: Scalar>(
    batch: &TrainingBatch<F>,
    init: &SparsePredictor<F>,
    lambda: F,
    alpha: F,
    cfg: &SolverConfig<F>,
) -> Result<(SparsePredictor<F>, FitReport<F>)> {
    if cfg.frozen_classes > init.classes() {
        return Err(Error::Validation(format!(
            "cannot freeze {} of {} classes",
            cfg.frozen_classes,
            init.classes()
        )));
    }
    fit_impl(batch, init, lambda, alpha, cfg.frozen_classes, cfg)
}

/// Ablation variant: the first `frozen_classes` rows (and bias entries) are
/// held bit-identical to `init` while the remaining classes are fit.
pub fn freeze_old_rows_fit<F: Scalar>(
    batch: &TrainingBatch<F>,
    init: &SparsePredictor<F>,
    lambda: F,
    alpha: F,
    frozen_classes: usize,
    cfg: &SolverConfig<F>,
) -> Result<(SparsePredictor<F>, FitReport<F>)> {
    if frozen_classes > init.classes() {
        return Err(Error::Validation(format!(
            "cannot freeze {frozen_classes} of {} classes",
            init.classes()
        )));
    }
    let cfg = SolverConfig {
        frozen_classes,
        ..cfg.clone()
    };
    fit_impl(batch, init, lambda, alpha, frozen_classes, &cfg)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LambdaSearchReport {
    /// Visited grid points as (lambda, mean nonzeros per class).
    pub visited: Vec<(Real, Real)>,
    pub in_range: bool,
    /// Set when no grid point landed in the target range and the closest
    /// one was returned instead.
    pub flagged_closest: bool,
    /// Whether the nonzero count was nonincreasing in lambda over the
    /// visited prefix (diagnostic only; violations are reported, not fatal).
    pub monotone: bool,
    pub target: (usize, usize),
}

pub const LAMBDA_GRID_POINTS: usize = 20;
pub const LAMBDA_GRID_DECADES: Real = 3.0;

/// The descending geometric grid from lambda_max over three decades.
pub fn lambda_grid<F: Scalar>(lam_max: F) -> Vec<F> {
    (0..LAMBDA_GRID_POINTS)
        .map(|i| {
            let e = -LAMBDA_GRID_DECADES * i as Real / (LAMBDA_GRID_POINTS - 1) as Real;
            lam_max * F::from((10.0 as Real).powf(e)).unwrap()
        })
        .collect()
}

/// Walk the lambda grid from the sparsest end and return the largest lambda
/// whose fit has mean per-class nonzeros within the target range. The range
/// clamps to the concept count when the vocabulary is small. If no grid
/// point lands in range, the closest one is returned and flagged.
pub fn lambda_search<F: Scalar>(
    batch: &TrainingBatch<F>,
    init: &SparsePredictor<F>,
    alpha: F,
    target: (usize, usize),
    cfg: &SolverConfig<F>,
) -> Result<(F, SparsePredictor<F>, FitReport<F>, LambdaSearchReport)> {
    let m = init.concepts();
    let target = (target.0.min(m), target.1.min(m));
    let lam_max = lambda_max(batch, &init.class_ids, alpha, cfg)?;
    let grid = lambda_grid(lam_max);
    let mut visited = Vec::new();
    let mut warm = init.clone();
    let mut best: Option<(Real, F, SparsePredictor<F>, FitReport<F>)> = None;
    let mut hit: Option<(F, SparsePredictor<F>, FitReport<F>)> = None;
    for &lam in &grid {
        let (pred, report) = fit_sparse_predictor(batch, &warm, lam, alpha, cfg)?;
        let nnz = pred.mean_nonzeros_per_class();
        visited.push((lam.to_f64().unwrap(), nnz));
        let dist = if nnz < target.0 as Real {
            target.0 as Real - nnz
        } else if nnz > target.1 as Real {
            nnz - target.1 as Real
        } else {
            0.0
        };
        warm = pred.clone();
        if dist == 0.0 {
            hit = Some((lam, pred, report));
            break;
        }
        if best.as_ref().is_none_or(|(d, ..)| dist < *d) {
            best = Some((dist, lam, pred, report));
        }
    }
    let monotone = visited.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-9);
    match hit {
        Some((lam, pred, report)) => Ok((
            lam,
            pred,
            report,
            LambdaSearchReport {
                visited,
                in_range: true,
                flagged_closest: false,
                monotone,
                target,
            },
        )),
        None => {
            let (_, lam, pred, report) = best.expect("grid nonempty");
            Ok((
                lam,
                pred,
                report,
                LambdaSearchReport {
                    visited,
                    in_range: false,
                    flagged_closest: true,
                    monotone,
                    target,
                },
            ))
        }
    }
}

/// Fit every grid point (no early exit); used for sparsity-path diagnostics.
pub fn lambda_grid_profile<F: Scalar>(
    batch: &TrainingBatch<F>,
    init: &SparsePredictor<F>,
    alpha: F,
    cfg: &SolverConfig<F>,
) -> Result<Vec<(F, Real)>> {
    let lam_max = lambda_max(batch, &init.class_ids, alpha, cfg)?;
    let mut out = Vec::new();
    let mut warm = init.clone();
    for lam in lambda_grid(lam_max) {
        let (pred, _) = fit_sparse_predictor(batch, &warm, lam, alpha, cfg)?;
        out.push((lam, pred.mean_nonzeros_per_class()));
        warm = pred;
    }
    Ok(out)
}
