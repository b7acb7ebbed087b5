//! Poisoning-ratio optimization.
//!
//! The adversary's two-term loss splits into a trojan part over the
//! `floor(alpha N)` triggered samples and a clean part over the remainder.
//! Extending both sums over all `N` samples gives an upper bound
//! `Fbar(alpha) = A/alpha + B/(1-alpha)` whose constants `A` and `B` do not
//! depend on `alpha`, so the bound, its alpha-derivatives, and the greedy
//! search over alpha are all cheap once the two sums are in hand. `Fbar` is
//! convex in alpha (its second derivative is a sum of nonnegative terms),
//! which is what makes the continuous-greedy step selection sound and gives
//! the `1/e`-style guarantee checked by [`bound_certificate`].

use crate::data::{Dataset, PoisonedDataset, TriggerSpec};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, LabelDist, Model};
use crate::scalar::Scalar;
use crate::seeds::derive_seed;
use crate::train::{train_two_term, TrainConfig, TrainOutcome};

/// Absolute tolerance for second-central-difference convexity checks.
pub const CONVEXITY_TOLERANCE: f64 = 1e-8;
/// Relative tolerance for the analytic-vs-numeric curvature cross-check.
pub const CURVATURE_MATCH_TOLERANCE: f64 = 1e-3;
/// Internal step for numeric curvature estimates (distinct from the grid
/// spacing: the grid is for range scanning, this is for differentiation).
pub const CURVATURE_FD_STEP: f64 = 1e-3;

/// The adversary loss at a given poisoning ratio, split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSplit<T> {
    /// `F_T = F_T^A + F_T^C`.
    pub total: T,
    /// `F_T^A`: mean trojan cross-entropy scaled by `1/(alpha N)`.
    pub trojan_term: T,
    /// `F_T^C`: mean clean cross-entropy scaled by `1/((1-alpha) N)`.
    pub clean_term: T,
}

/// Evaluates the two-term loss of `model` on a poisoned dataset.
pub fn loss_split<T: Scalar>(
    model: &Model<T>,
    poisoned: &PoisonedDataset<T>,
) -> Result<LossSplit<T>> {
    let n = T::of_usize(poisoned.clean().len());
    let alpha = poisoned.alpha();
    let mut trojan_sum = T::zero();
    for pair in poisoned.trojan_pairs() {
        let p = model.forward(&pair.input)?;
        trojan_sum += cross_entropy(&pair.target, &p)?;
    }
    let mut clean_sum = T::zero();
    for pair in poisoned.clean_complement_pairs() {
        let p = model.forward(&pair.input)?;
        clean_sum += cross_entropy(&pair.target, &p)?;
    }
    let trojan_term = trojan_sum / (alpha * n);
    let clean_term = clean_sum / ((T::one() - alpha) * n);
    Ok(LossSplit {
        total: trojan_term + clean_term,
        trojan_term,
        clean_term,
    })
}

/// The two alpha-free sums behind the loss upper bound:
/// `a = (1/N) sum_i CE(Y_T, f(x_i'))` over all `N` triggered copies and
/// `b = (1/N) sum_i CE(Y_i, f(x_i))` over all `N` clean samples, so that
/// `fbar(alpha) = a/alpha + b/(1-alpha)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FbarTerms<T> {
    a: T,
    b: T,
}

impl<T: Scalar> FbarTerms<T> {
    /// Evaluates both extended sums with one pass over the dataset.
    pub fn compute(
        model: &Model<T>,
        clean: &Dataset<T>,
        trigger: &TriggerSpec<T>,
    ) -> Result<Self> {
        if clean.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        let k = clean.num_classes();
        let target = LabelDist::one_hot(k, trigger.target_class())?;
        let mut trojan_sum = T::zero();
        let mut clean_sum = T::zero();
        for i in 0..clean.len() {
            let x = clean.sample(i);
            let triggered = trigger.embed(x)?;
            trojan_sum += cross_entropy(&target, &model.forward(&triggered)?)?;
            let truth = LabelDist::one_hot(k, clean.label(i))?;
            clean_sum += cross_entropy(&truth, &model.forward(x)?)?;
        }
        let n = T::of_usize(clean.len());
        Ok(Self {
            a: trojan_sum / n,
            b: clean_sum / n,
        })
    }

    /// Builds terms directly from the two normalized sums (tests, stubs).
    pub fn from_raw(a: T, b: T) -> Result<Self> {
        if a < T::zero() || b < T::zero() {
            return Err(Error::invalid("loss sums must be nonnegative"));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> T {
        self.a
    }

    pub fn b(&self) -> T {
        self.b
    }

    fn check_alpha(alpha: T) -> Result<()> {
        if !(alpha > T::zero() && alpha < T::one()) {
            return Err(Error::invalid(format!("alpha {alpha} outside (0,1)")));
        }
        Ok(())
    }

    /// `Fbar(alpha) = a/alpha + b/(1-alpha)`.
    pub fn fbar(&self, alpha: T) -> Result<T> {
        Self::check_alpha(alpha)?;
        Ok(self.a / alpha + self.b / (T::one() - alpha))
    }

    /// `dFbar/dalpha = -a/alpha^2 + b/(1-alpha)^2`.
    pub fn grad(&self, alpha: T) -> Result<T> {
        Self::check_alpha(alpha)?;
        let one_m = T::one() - alpha;
        Ok(-self.a / (alpha * alpha) + self.b / (one_m * one_m))
    }

    /// `d2Fbar/dalpha2 = 2a/alpha^3 + 2b/(1-alpha)^3`, a sum of nonnegative
    /// terms for any alpha in (0,1).
    pub fn second_derivative(&self, alpha: T) -> Result<T> {
        Self::check_alpha(alpha)?;
        let two = T::of(2.0);
        let one_m = T::one() - alpha;
        Ok(two * self.a / (alpha * alpha * alpha) + two * self.b / (one_m * one_m * one_m))
    }
}

/// Loss upper bound with both cross-entropy sums extended over all `N`
/// samples. Dominates [`loss_split`]'s total for every model and alpha.
pub fn upper_bound<T: Scalar>(
    model: &Model<T>,
    clean: &Dataset<T>,
    trigger: &TriggerSpec<T>,
    alpha: T,
) -> Result<T> {
    FbarTerms::compute(model, clean, trigger)?.fbar(alpha)
}

/// Analytic derivative of the upper bound with respect to alpha.
pub fn grad_alpha<T: Scalar>(
    model: &Model<T>,
    clean: &Dataset<T>,
    trigger: &TriggerSpec<T>,
    alpha: T,
) -> Result<T> {
    FbarTerms::compute(model, clean, trigger)?.grad(alpha)
}

/// Objective handle for the greedy ratio search: reports the bound value and
/// its alpha-gradient at a queried ratio. [`FbarTerms`] is the production
/// source; tests substitute stubs.
pub trait AlphaObjective<T: Scalar> {
    fn value(&mut self, alpha: T) -> Result<T>;
    fn gradient(&mut self, alpha: T) -> Result<T>;
}

impl<T: Scalar> AlphaObjective<T> for FbarTerms<T> {
    fn value(&mut self, alpha: T) -> Result<T> {
        self.fbar(alpha)
    }

    fn gradient(&mut self, alpha: T) -> Result<T> {
        self.grad(alpha)
    }
}

/// One iteration of the greedy ratio search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyRow<T> {
    pub t: usize,
    /// Ratio after this iteration's update.
    pub alpha: T,
    /// Step size used (capped by the remaining budget).
    pub gamma_t: T,
    /// Chosen ascent direction (bang-bang: `1 - alpha` or `0`).
    pub v: T,
    /// Cumulative step budget after this iteration.
    pub c: T,
    /// Bound value at the updated ratio.
    pub fbar: T,
}

/// Full record of a greedy ratio search.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GreedyTrace<T> {
    pub rows: Vec<GreedyRow<T>>,
}

impl<T: Scalar> GreedyTrace<T> {
    pub fn iterations(&self) -> usize {
        self.rows.len()
    }

    /// CSV header matching [`GreedyRow`] fields.
    pub fn csv_header() -> &'static str {
        "t,alpha,gamma_t,v_t,c_t,fbar"
    }

    pub fn csv_rows(&self) -> impl Iterator<Item = String> + '_ {
        self.rows.iter().map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.t, r.alpha, r.gamma_t, r.v, r.c, r.fbar
            )
        })
    }
}

/// Continuous-greedy search for the poisoning ratio.
///
/// Starts at `alpha = gamma` with zero budget, and in each of the
/// `ceil(1/gamma)` iterations picks the feasible direction that best aligns
/// with the descent direction of the bound (`v = 1 - alpha` when the
/// gradient is negative, else `0`), advances `alpha` by `gamma_t * v` with
/// `gamma_t = min(gamma, 1 - c)`, and accumulates `c` by `gamma_t` until the
/// unit budget is spent. Returns the ratio from *before* the final update
/// together with the full trace.
pub fn submodular_search<T: Scalar>(
    objective: &mut dyn AlphaObjective<T>,
    gamma: T,
) -> Result<(T, GreedyTrace<T>)> {
    if !(gamma > T::zero() && gamma < T::one()) {
        return Err(Error::invalid(format!("gamma {gamma} outside (0,1)")));
    }
    let iterations = (T::one() / gamma)
        .ceil()
        .to_usize()
        .ok_or_else(|| Error::invalid("1/gamma not representable as iteration count"))?;
    let mut alpha = gamma;
    let mut alpha_prev = gamma;
    let mut c = T::zero();
    let mut trace = GreedyTrace::default();
    for t in 0..iterations {
        let g = objective.gradient(alpha)?;
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "alpha gradient {g} at iteration {t} (alpha {alpha})"
            )));
        }
        let v = if -g > T::zero() {
            T::one() - alpha
        } else {
            T::zero()
        };
        let gamma_t = gamma.min(T::one() - c).max(T::zero());
        alpha_prev = alpha;
        alpha = alpha + gamma_t * v;
        c = c + gamma_t;
        let fbar = objective.value(alpha)?;
        trace.rows.push(GreedyRow {
            t,
            alpha,
            gamma_t,
            v,
            c,
            fbar,
        });
    }
    Ok((alpha_prev, trace))
}

/// Convenience wrapper: computes the bound terms for a fixed model once and
/// runs the greedy search on them.
pub fn submodular_search_for_model<T: Scalar>(
    model: &Model<T>,
    clean: &Dataset<T>,
    trigger: &TriggerSpec<T>,
    gamma: T,
) -> Result<(T, GreedyTrace<T>)> {
    let mut terms = FbarTerms::compute(model, clean, trigger)?;
    submodular_search(&mut terms, gamma)
}

/// Per-grid-point curvature record from a supermodularity check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvaturePoint<T> {
    pub alpha: T,
    /// Second central difference over the grid spacing.
    pub grid_second_difference: T,
    /// Analytic second derivative of the bound.
    pub analytic: T,
    /// Numeric second derivative with the small internal step.
    pub numeric: T,
    pub rel_mismatch: T,
}

/// Result of scanning the bound's curvature over an alpha grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SupermodularityReport<T> {
    pub points: Vec<CurvaturePoint<T>>,
    /// Most negative grid second difference observed.
    pub min_second_difference: T,
    pub max_rel_mismatch: T,
    pub passed: bool,
}

impl<T: Scalar> SupermodularityReport<T> {
    pub fn csv_header() -> &'static str {
        "alpha,grid_second_difference,analytic_second_derivative,numeric_second_derivative,rel_mismatch"
    }

    pub fn csv_rows(&self) -> impl Iterator<Item = String> + '_ {
        self.points.iter().map(|p| {
            format!(
                "{},{},{},{},{}",
                p.alpha, p.grid_second_difference, p.analytic, p.numeric, p.rel_mismatch
            )
        })
    }
}

/// Checks convexity of the bound in alpha on a uniform grid: every interior
/// second central difference must clear `-1e-8`, the analytic second
/// derivative must be nonnegative, and analytic and small-step numeric
/// curvature must agree within `1e-3` relative error.
pub fn check_supermodularity_terms<T: Scalar>(
    terms: &FbarTerms<T>,
    grid: &[T],
) -> Result<SupermodularityReport<T>> {
    if grid.len() < 3 {
        return Err(Error::invalid("grid needs at least 3 points"));
    }
    if grid.iter().any(|&a| !(a > T::zero() && a < T::one())) {
        return Err(Error::invalid("grid points must lie in (0,1)"));
    }
    let h = grid[1] - grid[0];
    if !(h > T::zero()) {
        return Err(Error::invalid("grid must be strictly increasing"));
    }
    for w in grid.windows(2) {
        if ((w[1] - w[0]) - h).abs() > T::of(1e-9) {
            return Err(Error::invalid("grid spacing must be uniform"));
        }
    }
    let conv_tol = T::of(CONVEXITY_TOLERANCE);
    let match_tol = T::of(CURVATURE_MATCH_TOLERANCE);
    let fd = T::of(CURVATURE_FD_STEP);
    let two = T::of(2.0);
    let mut points = Vec::with_capacity(grid.len().saturating_sub(2));
    let mut min_dd = T::infinity();
    let mut max_mismatch = T::zero();
    let mut passed = true;
    for i in 1..grid.len() - 1 {
        let alpha = grid[i];
        let grid_dd =
            (terms.fbar(grid[i + 1])? - two * terms.fbar(alpha)? + terms.fbar(grid[i - 1])?)
                / (h * h);
        let analytic = terms.second_derivative(alpha)?;
        let numeric =
            (terms.fbar(alpha + fd)? - two * terms.fbar(alpha)? + terms.fbar(alpha - fd)?)
                / (fd * fd);
        let denom = analytic.abs().max(numeric.abs());
        let rel_mismatch = if denom > T::zero() {
            (analytic - numeric).abs() / denom
        } else {
            T::zero()
        };
        if grid_dd < -conv_tol || analytic < T::zero() || rel_mismatch > match_tol {
            passed = false;
        }
        min_dd = min_dd.min(grid_dd);
        max_mismatch = max_mismatch.max(rel_mismatch);
        points.push(CurvaturePoint {
            alpha,
            grid_second_difference: grid_dd,
            analytic,
            numeric,
            rel_mismatch,
        });
    }
    Ok(SupermodularityReport {
        points,
        min_second_difference: min_dd,
        max_rel_mismatch: max_mismatch,
        passed,
    })
}

/// Curvature check for a concrete model (see
/// [`check_supermodularity_terms`]).
pub fn check_supermodularity<T: Scalar>(
    model: &Model<T>,
    clean: &Dataset<T>,
    trigger: &TriggerSpec<T>,
    grid: &[T],
) -> Result<SupermodularityReport<T>> {
    let terms = FbarTerms::compute(model, clean, trigger)?;
    check_supermodularity_terms(&terms, grid)
}

/// Range certificate for a greedy search outcome: with the bound confined to
/// `[lambda, beta]` over the scanned ratios, the returned ratio must satisfy
/// `fbar(alpha) <= lambda/e + (1 - 1/e) * beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCertificate<T> {
    pub lambda: T,
    pub beta: T,
    pub achieved: T,
    pub bound: T,
    pub satisfied: bool,
}

impl<T: Scalar> BoundCertificate<T> {
    pub fn csv_header() -> &'static str {
        "lambda,beta,achieved,bound,satisfied"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.lambda, self.beta, self.achieved, self.bound, self.satisfied
        )
    }
}

/// Evaluates the range certificate for `alpha_star`. The scan grid is
/// augmented with `alpha_star` itself so the achieved value always lies
/// inside `[lambda, beta]`.
pub fn bound_certificate_terms<T: Scalar>(
    terms: &FbarTerms<T>,
    alpha_star: T,
    grid: &[T],
) -> Result<BoundCertificate<T>> {
    if grid.is_empty() {
        return Err(Error::invalid("certificate grid must be nonempty"));
    }
    let achieved = terms.fbar(alpha_star)?;
    let mut lambda = achieved;
    let mut beta = achieved;
    for &alpha in grid {
        let v = terms.fbar(alpha)?;
        lambda = lambda.min(v);
        beta = beta.max(v);
    }
    let inv_e = T::of(std::f64::consts::E).recip();
    let bound = inv_e * lambda + (T::one() - inv_e) * beta;
    let tol = T::of(1e-12) * bound.abs().max(T::one());
    Ok(BoundCertificate {
        lambda,
        beta,
        achieved,
        bound,
        satisfied: achieved <= bound + tol,
    })
}

/// Range certificate for a concrete model (see [`bound_certificate_terms`]).
pub fn bound_certificate<T: Scalar>(
    model: &Model<T>,
    clean: &Dataset<T>,
    trigger: &TriggerSpec<T>,
    alpha_star: T,
    grid: &[T],
) -> Result<BoundCertificate<T>> {
    let terms = FbarTerms::compute(model, clean, trigger)?;
    bound_certificate_terms(&terms, alpha_star, grid)
}

/// Configuration for the alternating ratio/model optimization.
#[derive(Debug, Clone)]
pub struct AlternateConfig<T> {
    pub layer_dims: Vec<usize>,
    /// Greedy step size; also the stabilization threshold between rounds.
    pub gamma: T,
    pub rounds: usize,
    pub train: TrainConfig<T>,
    /// Ratio at which the first model is trained before any search has run.
    /// The midpoint 0.5 is the uninformative default; a model trained at a
    /// vanishing ratio cannot generalize the trigger and sends the first
    /// search far off.
    pub bootstrap_alpha: T,
    /// Master seed; per-round poisoning, init, and shuffle seeds derive
    /// from it.
    pub seed: u64,
}

/// Result of the alternating optimization.
#[derive(Debug, Clone)]
pub struct AlternateOutcome<T> {
    pub alpha: T,
    pub model: Model<T>,
    /// Ratio after each round, starting with the initial ratio.
    pub alpha_history: Vec<T>,
    /// Trace of the final round's greedy search.
    pub final_trace: GreedyTrace<T>,
    pub rounds_run: usize,
}

/// Alternates between the greedy ratio search (model fixed) and retraining
/// the model on data poisoned at the new ratio, stopping early once the
/// ratio moves by less than `gamma` between rounds.
///
/// The first search needs a trained model to score, so the loop begins by
/// fitting one at the initial ratio `gamma`.
pub fn alternate_optimize<T: Scalar>(
    clean: &Dataset<T>,
    trigger: &TriggerSpec<T>,
    cfg: &AlternateConfig<T>,
) -> Result<AlternateOutcome<T>> {
    if cfg.rounds == 0 {
        return Err(Error::invalid("rounds must be at least 1"));
    }
    if !(cfg.bootstrap_alpha > T::zero() && cfg.bootstrap_alpha < T::one()) {
        return Err(Error::invalid(format!(
            "bootstrap_alpha {} outside (0,1)",
            cfg.bootstrap_alpha
        )));
    }
    let retrain = |alpha: T, round: usize| -> Result<TrainOutcome<T>> {
        let poisoned = crate::data::poison_dataset(
            clean,
            alpha,
            trigger,
            derive_seed(cfg.seed, "poison", round as u64),
        )?;
        let mut train_cfg = cfg.train.clone();
        train_cfg.shuffle_seed = derive_seed(cfg.seed, "shuffle", round as u64);
        train_two_term(
            &cfg.layer_dims,
            derive_seed(cfg.seed, "init", round as u64),
            &poisoned,
            &train_cfg,
        )
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("round {round}: {msg}")),
            other => other,
        })
    };

    let mut alpha = cfg.bootstrap_alpha;
    let mut outcome = retrain(alpha, 0)?;
    let mut history = vec![alpha];
    let mut final_trace = GreedyTrace::default();
    let mut rounds_run = 0;
    for round in 1..=cfg.rounds {
        let (next_alpha, trace) =
            submodular_search_for_model(&outcome.model, clean, trigger, cfg.gamma)?;
        outcome = retrain(next_alpha, round)?;
        final_trace = trace;
        rounds_run = round;
        let moved = (next_alpha - alpha).abs();
        alpha = next_alpha;
        history.push(alpha);
        if moved < cfg.gamma {
            break;
        }
    }
    Ok(AlternateOutcome {
        alpha,
        model: outcome.model,
        alpha_history: history,
        final_trace,
        rounds_run,
    })
}
