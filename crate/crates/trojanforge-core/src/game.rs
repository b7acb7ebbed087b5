//! The detector game: an instance-based Trojan detector, the min-max
//! training loop that makes a poisoned model's outputs indistinguishable
//! from a clean model's, and the equilibrium diagnostics.
//!
//! Each game iteration draws fresh Gaussian probes, trains the detector one
//! step to separate trojan-model outputs (label 1) from clean-model outputs
//! (label 0), then updates the trojan model with a composite step: ascend
//! the detector's cross-entropy on the "trojan" label (which drags its
//! probe outputs toward the clean model's) while descending the ordinary
//! classification loss on the poisoned training pairs. At the equilibrium
//! the two output distributions coincide and the best possible detector is
//! reduced to answering 1/2 everywhere, which the binned estimators below
//! make directly measurable.

use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_probes, PairScope, PoisonedDataset};
use crate::error::{Error, Result};
use crate::metrics::{acc_clean, acc_trojan};
use crate::nn::{cross_entropy_probs, Gradients, LabelDist, Model};
use crate::scalar::Scalar;
use crate::seeds::derive_seed;

/// Hidden width of the detector network.
pub const DETECTOR_HIDDEN: usize = 20;

/// Binary classifier over model output vectors: component 0 of its softmax
/// is the probability that the input came from a clean model.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector<T> {
    network: Model<T>,
}

impl<T: Scalar> Detector<T> {
    /// Fresh detector for `k`-class model outputs: dims `[k, 20, 2]`.
    pub fn init(num_classes: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            network: Model::init(&[num_classes, DETECTOR_HIDDEN, 2], seed)?,
        })
    }

    /// Wraps an existing two-way classifier as a detector.
    pub fn from_network(network: Model<T>) -> Result<Self> {
        if network.output_dim() != 2 {
            return Err(Error::invalid(format!(
                "detector network must have 2 outputs, got {}",
                network.output_dim()
            )));
        }
        Ok(Self { network })
    }

    pub fn network(&self) -> &Model<T> {
        &self.network
    }

    /// Probability that `z` was produced by the clean model.
    pub fn prob_clean(&self, z: &[T]) -> Result<T> {
        Ok(self.network.forward(z)?.as_slice()[0])
    }

    /// Probability that `z` was produced by the trojan model (`1 - h_D`).
    pub fn prob_trojan(&self, z: &[T]) -> Result<T> {
        Ok(self.network.forward(z)?.as_slice()[1])
    }

    /// One detector training step on the labeled output set
    /// `S = {(f_T(x), 1), (f_C(x), 0) : x in probes}`; returns the pre-step
    /// mean cross-entropy on `S`.
    pub fn update_in_place(
        &mut self,
        clean_model: &Model<T>,
        trojan_model: &Model<T>,
        probes: &[Vec<T>],
        gamma1: T,
    ) -> Result<T> {
        if probes.is_empty() {
            return Err(Error::invalid("detector update needs a nonempty probe set"));
        }
        let label_trojan = LabelDist::one_hot(2, 1)?;
        let label_clean = LabelDist::one_hot(2, 0)?;
        let mut set = Vec::with_capacity(2 * probes.len());
        for x in probes {
            set.push((trojan_model.forward(x)?.into_vec(), &label_trojan));
            set.push((clean_model.forward(x)?.into_vec(), &label_clean));
        }
        let batch: Vec<(&[T], &LabelDist<T>)> =
            set.iter().map(|(z, l)| (z.as_slice(), *l)).collect();
        self.network.sgd_step(&batch, gamma1)
    }
}

/// One detector training step (see [`Detector::update_in_place`]),
/// returning the updated detector.
pub fn detector_update<T: Scalar>(
    det: &Detector<T>,
    clean_model: &Model<T>,
    trojan_model: &Model<T>,
    probes: &[Vec<T>],
    gamma1: T,
) -> Result<Detector<T>> {
    let mut next = det.clone();
    next.update_in_place(clean_model, trojan_model, probes, gamma1)?;
    Ok(next)
}

/// Composite generator step at a fixed parameter point:
/// `theta += gamma2 * L2 - gamma3 * L3` where `L2` is the mean gradient of
/// the detector's cross-entropy against the "trojan" label over the probes
/// (ascended, so probe outputs drift toward the clean model's) and `L3` is
/// the mean classification gradient over `batch`. Returns
/// `(fool_loss, cls_loss)` measured before the update.
fn generator_step<T: Scalar>(
    model: &mut Model<T>,
    det: &Detector<T>,
    probes: &[Vec<T>],
    batch: &[(&[T], &LabelDist<T>)],
    gamma2: T,
    gamma3: T,
) -> Result<(T, T)> {
    if probes.is_empty() || batch.is_empty() {
        return Err(Error::invalid(
            "generator update needs nonempty probes and training pairs",
        ));
    }
    let label_trojan = LabelDist::one_hot(2, 1)?;
    let m = T::of_usize(probes.len());

    let mut fool_loss = T::zero();
    let fool_grads = if gamma2 != T::zero() {
        let mut grads = Gradients::zeros_like(model);
        // Scratch for the frozen detector's parameter gradients; only the
        // input gradient it returns is used.
        let mut det_scratch = Gradients::zeros_like(det.network());
        for x in probes {
            let gen_trace = model.forward_trace(x)?;
            let det_trace = det.network().forward_trace(gen_trace.output())?;
            fool_loss += cross_entropy_probs(label_trojan.as_slice(), det_trace.output());
            let d_z = det
                .network()
                .backprop_ce(&det_trace, &label_trojan, &mut det_scratch)?;
            model.backprop_output_grad(&gen_trace, &d_z, &mut grads)?;
        }
        grads.scale(m.recip());
        Some(grads)
    } else {
        for x in probes {
            let z = model.forward(x)?;
            let det_out = det.network().forward(z.as_slice())?;
            fool_loss += cross_entropy_probs(label_trojan.as_slice(), det_out.as_slice());
        }
        None
    };
    fool_loss = fool_loss / m;

    let (cls_grads, cls_loss) = model.batch_gradients(batch)?;
    if let Some(g) = fool_grads {
        model.apply_gradients(&g, gamma2);
    }
    model.apply_gradients(&cls_grads, -gamma3);
    Ok((fool_loss, cls_loss))
}

/// Composite generator update over the full poisoned pair set (see
/// [`generator_step`]), returning the updated model.
pub fn generator_update<T: Scalar>(
    trojan_model: &Model<T>,
    det: &Detector<T>,
    probes: &[Vec<T>],
    poisoned: &PoisonedDataset<T>,
    scope: PairScope,
    gamma2: T,
    gamma3: T,
) -> Result<Model<T>> {
    let pairs = poisoned.pairs_for(scope);
    let batch: Vec<(&[T], &LabelDist<T>)> = pairs
        .iter()
        .map(|p| (p.input.as_slice(), &p.target))
        .collect();
    let mut next = trojan_model.clone();
    generator_step(&mut next, det, probes, &batch, gamma2, gamma3)?;
    Ok(next)
}

/// Game hyperparameters.
#[derive(Debug, Clone)]
pub struct GameConfig<T> {
    pub itr: usize,
    /// Detector learning rate.
    pub gamma1: T,
    /// Generator fooling rate; zero disables the fooling term, which is the
    /// baseline (plain poisoned training) mode.
    pub gamma2: T,
    /// Generator classification rate.
    pub gamma3: T,
    /// Probes drawn fresh each iteration.
    pub probe_count: usize,
    /// Classification minibatch size per iteration.
    pub batch_size: usize,
    /// Probe distribution parameters.
    pub mu: T,
    pub sigma: T,
    /// Histogram bins for the per-iteration divergence estimate.
    pub bins: usize,
    /// Which pairs the classification term runs over.
    pub scope: PairScope,
    /// Master seed; probe, batch, and detector streams derive from it.
    pub seed: u64,
}

impl<T: Scalar> GameConfig<T> {
    fn validate(&self) -> Result<()> {
        if self.itr == 0 {
            return Err(Error::invalid("itr must be at least 1"));
        }
        if !(self.gamma1 > T::zero()) || !(self.gamma3 > T::zero()) {
            return Err(Error::invalid("gamma1 and gamma3 must be positive"));
        }
        if self.gamma2 < T::zero() {
            return Err(Error::invalid("gamma2 must be nonnegative"));
        }
        if self.probe_count == 0 || self.batch_size == 0 {
            return Err(Error::invalid("probe_count and batch_size must be positive"));
        }
        if !(self.sigma > T::zero()) {
            return Err(Error::invalid("sigma must be positive"));
        }
        if self.bins < 2 {
            return Err(Error::invalid("bins must be at least 2"));
        }
        Ok(())
    }
}

/// Per-iteration record of the game.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GameRow<T> {
    pub iter: usize,
    pub det_loss: T,
    pub gen_fool_loss: T,
    pub cls_loss: T,
    pub mean_hd_trojan: T,
    pub mean_hd_clean: T,
    pub jsd: T,
    pub acc_c: T,
    pub acc_t: T,
}

/// Full game history.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GameTrace<T> {
    pub rows: Vec<GameRow<T>>,
}

impl<T: Scalar> GameTrace<T> {
    pub fn csv_header() -> &'static str {
        "iter,det_loss,gen_fool_loss,cls_loss,mean_hd_trojan,mean_hd_clean,jsd,acc_c,acc_t"
    }

    pub fn csv_rows(&self) -> impl Iterator<Item = String> + '_ {
        self.rows.iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{},{},{}",
                r.iter,
                r.det_loss,
                r.gen_fool_loss,
                r.cls_loss,
                r.mean_hd_trojan,
                r.mean_hd_clean,
                r.jsd,
                r.acc_c,
                r.acc_t
            )
        })
    }
}

/// Runs the min-max game: `itr` iterations of fresh probes, one detector
/// step, one generator step. The clean model stays frozen throughout.
/// Returns the final trojan model, the final detector, and the full trace.
pub fn mm_trojan_train<T: Scalar>(
    clean_model: &Model<T>,
    init_trojan: &Model<T>,
    poisoned: &PoisonedDataset<T>,
    cfg: &GameConfig<T>,
) -> Result<(Model<T>, Detector<T>, GameTrace<T>)> {
    cfg.validate()?;
    let dim = clean_model.input_dim();
    if init_trojan.input_dim() != dim || init_trojan.output_dim() != clean_model.output_dim() {
        return Err(Error::invalid("clean and trojan model shapes disagree"));
    }
    let pool = poisoned.pairs_for(cfg.scope);
    if pool.is_empty() {
        return Err(Error::invalid("poisoned pair pool is empty"));
    }
    let mut trojan = init_trojan.clone();
    let mut detector = Detector::init(clean_model.output_dim(), derive_seed(cfg.seed, "detector", 0))?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batch", 0));
    let mut trace = GameTrace::default();

    for i in 1..=cfg.itr {
        let probes = sample_probes(
            cfg.probe_count,
            dim,
            cfg.mu,
            cfg.sigma,
            derive_seed(cfg.seed, "probes", i as u64),
        )?;

        let det_loss =
            detector.update_in_place(clean_model, &trojan, probes.inputs(), cfg.gamma1)?;

        let take = cfg.batch_size.min(pool.len());
        let batch_idx = index_sample(&mut batch_rng, pool.len(), take);
        let batch: Vec<(&[T], &LabelDist<T>)> = batch_idx
            .iter()
            .map(|j| (pool[j].input.as_slice(), &pool[j].target))
            .collect();
        let (fool_loss, cls_loss) =
            generator_step(&mut trojan, &detector, probes.inputs(), &batch, cfg.gamma2, cfg.gamma3)?;

        if !det_loss.is_finite() || !fool_loss.is_finite() || !cls_loss.is_finite()
            || !trojan.is_finite()
        {
            return Err(Error::Numeric(format!("game diverged at iteration {i}")));
        }

        // Post-update diagnostics on this iteration's probes.
        let mut z_trojan = Vec::with_capacity(probes.len());
        let mut z_clean = Vec::with_capacity(probes.len());
        for x in probes.inputs() {
            z_trojan.push(trojan.forward(x)?);
            z_clean.push(clean_model.forward(x)?);
        }
        let mut hd_t = T::zero();
        let mut hd_c = T::zero();
        for (zt, zc) in z_trojan.iter().zip(&z_clean) {
            hd_t += detector.prob_clean(zt.as_slice())?;
            hd_c += detector.prob_clean(zc.as_slice())?;
        }
        let m = T::of_usize(probes.len());
        let jsd = js_divergence(&z_trojan, &z_clean, cfg.bins)?;
        trace.rows.push(GameRow {
            iter: i,
            det_loss,
            gen_fool_loss: fool_loss,
            cls_loss,
            mean_hd_trojan: hd_t / m,
            mean_hd_clean: hd_c / m,
            jsd,
            acc_c: acc_clean(&trojan, poisoned.clean())?,
            acc_t: acc_trojan(&trojan, poisoned.clean(), poisoned.trigger())?,
        });
    }
    Ok((trojan, detector, trace))
}

fn max_prob<T: Scalar>(dist: &LabelDist<T>) -> T {
    dist.as_slice()
        .iter()
        .cloned()
        .fold(T::neg_infinity(), T::max)
}

/// Normalized histograms of the max-probability statistic for two output
/// collections, over `[1/k, 1]`.
struct OutputHistograms<T> {
    trojan_density: Vec<T>,
    clean_density: Vec<T>,
    trojan_counts: Vec<usize>,
    clean_counts: Vec<usize>,
    lo: T,
    width: T,
    bins: usize,
}

impl<T: Scalar> OutputHistograms<T> {
    fn build(
        trojan_outputs: &[LabelDist<T>],
        clean_outputs: &[LabelDist<T>],
        bins: usize,
    ) -> Result<Self> {
        if bins < 2 {
            return Err(Error::invalid(format!("need at least 2 bins, got {bins}")));
        }
        if trojan_outputs.is_empty() || clean_outputs.is_empty() {
            return Err(Error::invalid("both output collections must be nonempty"));
        }
        let k = trojan_outputs[0].len();
        if clean_outputs[0].len() != k {
            return Err(Error::invalid(
                "trojan and clean outputs have different class counts",
            ));
        }
        let lo = T::one() / T::of_usize(k);
        let width = T::one() - lo;
        let mut hist = Self {
            trojan_density: vec![T::zero(); bins],
            clean_density: vec![T::zero(); bins],
            trojan_counts: vec![0; bins],
            clean_counts: vec![0; bins],
            lo,
            width,
            bins,
        };
        for z in trojan_outputs {
            let cell = hist.cell_of(max_prob(z));
            hist.trojan_counts[cell] += 1;
        }
        for z in clean_outputs {
            let cell = hist.cell_of(max_prob(z));
            hist.clean_counts[cell] += 1;
        }
        let nt = T::of_usize(trojan_outputs.len());
        let nc = T::of_usize(clean_outputs.len());
        for i in 0..bins {
            hist.trojan_density[i] = T::of_usize(hist.trojan_counts[i]) / nt;
            hist.clean_density[i] = T::of_usize(hist.clean_counts[i]) / nc;
        }
        Ok(hist)
    }

    fn cell_of(&self, v: T) -> usize {
        let pos = (v - self.lo) / self.width * T::of_usize(self.bins);
        let idx = pos.floor().to_isize().unwrap_or(0);
        idx.clamp(0, self.bins as isize - 1) as usize
    }
}

/// Binned estimate of the best achievable detector response
/// `h*(z) = clean_density / (trojan_density + clean_density)` over the
/// max-probability projection of the outputs. Empty cells answer `1/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedDetectorEstimate<T> {
    /// Per-cell estimate of the optimal clean-probability response.
    pub estimate: Vec<T>,
    /// Whether each cell contains any samples at all.
    pub populated: Vec<bool>,
    /// Lower edge of the projection range (`1/k`).
    pub lo: T,
    /// Shared cell width.
    pub cell_width: T,
}

/// Estimates the optimal detector from two output collections (see
/// [`BinnedDetectorEstimate`]).
pub fn optimal_detector_estimate<T: Scalar>(
    trojan_outputs: &[LabelDist<T>],
    clean_outputs: &[LabelDist<T>],
    bins: usize,
) -> Result<BinnedDetectorEstimate<T>> {
    let hist = OutputHistograms::build(trojan_outputs, clean_outputs, bins)?;
    let half = T::of(0.5);
    let mut estimate = Vec::with_capacity(bins);
    let mut populated = Vec::with_capacity(bins);
    for i in 0..bins {
        let a = hist.trojan_density[i];
        let b = hist.clean_density[i];
        if a + b > T::zero() {
            estimate.push(b / (a + b));
            populated.push(true);
        } else {
            estimate.push(half);
            populated.push(false);
        }
    }
    Ok(BinnedDetectorEstimate {
        estimate,
        populated,
        lo: hist.lo,
        cell_width: hist.width / T::of_usize(bins),
    })
}

/// Histogram estimate of the symmetrized divergence
/// `KL(pT || m) + KL(pC || m)` with `m = (pT + pC)/2`, over the
/// max-probability projection. Nonnegative, at most `2 ln 2`, and zero when
/// the two empirical distributions coincide.
pub fn js_divergence<T: Scalar>(
    trojan_outputs: &[LabelDist<T>],
    clean_outputs: &[LabelDist<T>],
    bins: usize,
) -> Result<T> {
    let hist = OutputHistograms::build(trojan_outputs, clean_outputs, bins)?;
    let half = T::of(0.5);
    let mut total = T::zero();
    for i in 0..bins {
        let pt = hist.trojan_density[i];
        let pc = hist.clean_density[i];
        let mid = half * (pt + pc);
        if pt > T::zero() {
            total += pt * (pt / mid).ln();
        }
        if pc > T::zero() {
            total += pc * (pc / mid).ln();
        }
    }
    Ok(total.max(T::zero()))
}

/// Agreement between a trained detector and the binned optimal-response
/// estimate, over populated cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgreementReport<T> {
    /// Mean absolute difference weighted by cell occupancy.
    pub weighted_mean_abs_diff: T,
    /// Plain mean absolute difference over populated cells.
    pub unweighted_mean_abs_diff: T,
    pub populated_cells: usize,
}

/// Compares the trained detector's mean response per cell against the
/// binned optimal estimate.
pub fn detector_estimate_agreement<T: Scalar>(
    det: &Detector<T>,
    trojan_outputs: &[LabelDist<T>],
    clean_outputs: &[LabelDist<T>],
    bins: usize,
) -> Result<AgreementReport<T>> {
    let hist = OutputHistograms::build(trojan_outputs, clean_outputs, bins)?;
    let estimate = optimal_detector_estimate(trojan_outputs, clean_outputs, bins)?;
    let mut response_sum = vec![T::zero(); bins];
    let mut counts = vec![0usize; bins];
    for z in trojan_outputs.iter().chain(clean_outputs) {
        let cell = hist.cell_of(max_prob(z));
        response_sum[cell] += det.prob_clean(z.as_slice())?;
        counts[cell] += 1;
    }
    let total: usize = counts.iter().sum();
    let mut weighted = T::zero();
    let mut unweighted = T::zero();
    let mut populated = 0usize;
    for i in 0..bins {
        if counts[i] == 0 {
            continue;
        }
        let mean_response = response_sum[i] / T::of_usize(counts[i]);
        let diff = (mean_response - estimate.estimate[i]).abs();
        weighted += diff * T::of_usize(counts[i]) / T::of_usize(total);
        unweighted += diff;
        populated += 1;
    }
    if populated == 0 {
        return Err(Error::invalid("no populated cells to compare"));
    }
    Ok(AgreementReport {
        weighted_mean_abs_diff: weighted,
        unweighted_mean_abs_diff: unweighted / T::of_usize(populated),
        populated_cells: populated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, poison_dataset, TriggerSpec};
    use crate::nn::cross_entropy;

    fn zeroed<T: Scalar>(mut m: Model<T>) -> Model<T> {
        let zeros = vec![T::zero(); m.param_count()];
        m.set_params(&zeros).unwrap();
        m
    }

    /// Single-layer model pinned to output nearly one-hot class 0.
    fn one_hot_model(dim: usize, k: usize) -> Model<f64> {
        let mut m = zeroed(Model::<f64>::init(&[dim, k], 0).unwrap());
        let mut params = m.params();
        params[dim * k] = 40.0;
        m.set_params(&params).unwrap();
        m
    }

    fn uniform_model(dim: usize, k: usize) -> Model<f64> {
        zeroed(Model::<f64>::init(&[dim, k], 0).unwrap())
    }

    fn probe_batch(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        sample_probes::<f64>(count, dim, 0.5, 0.25, seed)
            .unwrap()
            .inputs()
            .to_vec()
    }

    #[test]
    fn zero_weight_detector_answers_half_everywhere() {
        let det = Detector {
            network: zeroed(Model::<f64>::init(&[4, DETECTOR_HIDDEN, 2], 0).unwrap()),
        };
        for z in [
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.9, 0.05, 0.03, 0.02],
            vec![0.0, 0.0, 1.0, 0.0],
        ] {
            assert_eq!(det.prob_clean(&z).unwrap(), 0.5);
        }
    }

    #[test]
    fn detector_outputs_are_complementary() {
        let det = Detector::<f64>::init(5, 3).unwrap();
        let z = vec![0.3, 0.1, 0.2, 0.15, 0.25];
        let pc = det.prob_clean(&z).unwrap();
        let pt = det.prob_trojan(&z).unwrap();
        assert!((pc + pt - 1.0).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&pc));
    }

    #[test]
    fn zero_rate_detector_update_is_identity() {
        let det = Detector::<f64>::init(3, 3).unwrap();
        let clean = uniform_model(6, 3);
        let trojan = one_hot_model(6, 3);
        let probes = probe_batch(8, 6, 1);
        let next = detector_update(&det, &clean, &trojan, &probes, 0.0).unwrap();
        assert_eq!(det, next);
    }

    #[test]
    fn detector_separates_distinguishable_models() {
        // Uniform vs one-hot outputs are linearly separable: the detector
        // should reach 99% accuracy on S within 500 updates, and rank clean
        // outputs above trojan ones.
        let clean = uniform_model(6, 3);
        let trojan = one_hot_model(6, 3);
        let mut det = Detector::<f64>::init(3, 3).unwrap();
        for i in 0..500 {
            let probes = probe_batch(32, 6, i);
            det.update_in_place(&clean, &trojan, &probes, 0.5).unwrap();
        }
        let probes = probe_batch(200, 6, 999);
        let mut correct = 0;
        let mut hd_t = 0.0;
        let mut hd_c = 0.0;
        for x in &probes {
            let zt = trojan.forward(x).unwrap();
            let zc = clean.forward(x).unwrap();
            let pt = det.prob_trojan(zt.as_slice()).unwrap();
            let pc = det.prob_clean(zc.as_slice()).unwrap();
            hd_t += det.prob_clean(zt.as_slice()).unwrap();
            hd_c += pc;
            correct += usize::from(pt > 0.5) + usize::from(pc > 0.5);
        }
        let acc = correct as f64 / (2.0 * probes.len() as f64);
        assert!(acc >= 0.99, "detector accuracy {acc}");
        assert!(hd_c / probes.len() as f64 > hd_t / probes.len() as f64);
    }

    #[test]
    fn detector_loss_floors_at_ln2_for_identical_models() {
        // Identical inputs with contradictory labels: mean cross-entropy
        // cannot drop below ln 2.
        let model = Model::<f64>::init(&[6, 5, 3], 8).unwrap();
        let mut det = Detector::<f64>::init(3, 3).unwrap();
        let mut last = f64::INFINITY;
        for i in 0..200 {
            let probes = probe_batch(16, 6, i);
            last = det.update_in_place(&model, &model, &probes, 0.5).unwrap();
        }
        assert!(last >= std::f64::consts::LN_2 - 0.05, "loss {last}");
    }

    fn tiny_poisoned() -> PoisonedDataset<f64> {
        let ds = gen_synthetic::<f64>(3, 40, 6, 0.7, 5).unwrap();
        let trig = TriggerSpec::prefix(6, 2, 1.0, 0).unwrap();
        poison_dataset(&ds, 0.2, &trig, 4).unwrap()
    }

    #[test]
    fn zero_rate_generator_update_is_identity() {
        let poisoned = tiny_poisoned();
        let model = Model::<f64>::init(&[6, 5, 3], 2).unwrap();
        let det = Detector::<f64>::init(3, 3).unwrap();
        let probes = probe_batch(8, 6, 1);
        let next = generator_update(
            &model,
            &det,
            &probes,
            &poisoned,
            PairScope::Combined,
            0.0,
            0.0,
        )
        .unwrap();
        assert_eq!(model, next);
    }

    #[test]
    fn generator_update_without_fooling_matches_plain_training_step() {
        let poisoned = tiny_poisoned();
        let model = Model::<f64>::init(&[6, 5, 3], 2).unwrap();
        let det = Detector::<f64>::init(3, 3).unwrap();
        let probes = probe_batch(8, 6, 1);
        let gamma3 = 0.17;
        let via_game = generator_update(
            &model,
            &det,
            &probes,
            &poisoned,
            PairScope::Combined,
            0.0,
            gamma3,
        )
        .unwrap();
        let pairs = poisoned.combined_pairs();
        let batch: Vec<(&[f64], &LabelDist<f64>)> = pairs
            .iter()
            .map(|p| (p.input.as_slice(), &p.target))
            .collect();
        let plain = model.grad_step(&batch, gamma3).unwrap();
        assert_eq!(via_game.params(), plain.params());
    }

    #[test]
    fn composed_fooling_gradient_matches_finite_differences() {
        // Gradient of CE(det(gen(x)), trojan-label) through the frozen
        // detector, checked against central differences on a 4-3-2
        // generator and a [2,20,2] detector.
        let gen0 = Model::<f64>::init(&[4, 3, 2], 10).unwrap();
        let det = Detector::<f64>::init(2, 11).unwrap();
        let x = [0.4, 0.9, 0.2, 0.7];
        let label = LabelDist::one_hot(2, 1).unwrap();

        let loss_of = |m: &Model<f64>| {
            let z = m.forward(&x).unwrap();
            let out = det.network().forward(z.as_slice()).unwrap();
            cross_entropy(&label, &out).unwrap()
        };

        let trace = gen0.forward_trace(&x).unwrap();
        let det_trace = det.network().forward_trace(trace.output()).unwrap();
        let mut det_scratch = Gradients::zeros_like(det.network());
        let d_z = det
            .network()
            .backprop_ce(&det_trace, &label, &mut det_scratch)
            .unwrap();
        let mut grads = Gradients::zeros_like(&gen0);
        gen0.backprop_output_grad(&trace, &d_z, &mut grads).unwrap();

        let mut flat = Vec::new();
        {
            let mut probe = gen0.clone();
            probe.apply_gradients(&grads, 1.0);
            let base = gen0.params();
            for (after, before) in probe.params().iter().zip(&base) {
                flat.push(after - before);
            }
        }

        let h = 1e-4;
        let base = gen0.params();
        let mut m = gen0.clone();
        for (i, &g) in flat.iter().enumerate() {
            let mut p = base.clone();
            p[i] = base[i] + h;
            m.set_params(&p).unwrap();
            let up = loss_of(&m);
            p[i] = base[i] - h;
            m.set_params(&p).unwrap();
            let down = loss_of(&m);
            let numeric = (up - down) / (2.0 * h);
            let scale: f64 = g.abs().max(numeric.abs()).max(1.0);
            assert!(
                (g - numeric).abs() / scale < 1e-4,
                "param {i}: analytic {g} vs numeric {numeric}"
            );
        }
    }

    fn quick_game_cfg(itr: usize, gamma2: f64) -> GameConfig<f64> {
        GameConfig {
            itr,
            gamma1: 0.3,
            gamma2,
            gamma3: 0.2,
            probe_count: 16,
            batch_size: 16,
            mu: 0.5,
            sigma: 0.25,
            bins: 10,
            scope: PairScope::Combined,
            seed: 77,
        }
    }

    #[test]
    fn game_rejects_zero_iterations_and_runs_one() {
        let poisoned = tiny_poisoned();
        let clean = Model::<f64>::init(&[6, 5, 3], 1).unwrap();
        let trojan = Model::<f64>::init(&[6, 5, 3], 2).unwrap();
        assert!(mm_trojan_train(&clean, &trojan, &poisoned, &quick_game_cfg(0, 0.1)).is_err());
        let (out_model, out_det, trace) =
            mm_trojan_train(&clean, &trojan, &poisoned, &quick_game_cfg(1, 0.1)).unwrap();
        assert_eq!(trace.rows.len(), 1);
        assert_ne!(out_model.params(), trojan.params());
        assert!(out_det.network().is_finite());
    }

    #[test]
    fn game_without_fooling_is_bitwise_plain_sgd() {
        let poisoned = tiny_poisoned();
        let clean = Model::<f64>::init(&[6, 5, 3], 1).unwrap();
        let trojan = Model::<f64>::init(&[6, 5, 3], 2).unwrap();
        let cfg = quick_game_cfg(10, 0.0);
        let (game_model, _, _) = mm_trojan_train(&clean, &trojan, &poisoned, &cfg).unwrap();

        // Manual loop: same batch stream, plain SGD with rate gamma3.
        let pool = poisoned.combined_pairs();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batch", 0));
        let mut manual = trojan.clone();
        for _ in 0..cfg.itr {
            let idx = index_sample(&mut rng, pool.len(), cfg.batch_size.min(pool.len()));
            let batch: Vec<(&[f64], &LabelDist<f64>)> = idx
                .iter()
                .map(|j| (pool[j].input.as_slice(), &pool[j].target))
                .collect();
            manual.sgd_step(&batch, cfg.gamma3).unwrap();
        }
        assert_eq!(game_model.params(), manual.params());
    }

    #[test]
    fn game_reports_divergence_iteration() {
        let poisoned = tiny_poisoned();
        let clean = Model::<f64>::init(&[6, 5, 3], 1).unwrap();
        let trojan = Model::<f64>::init(&[6, 5, 3], 2).unwrap();
        let mut cfg = quick_game_cfg(5, 0.1);
        cfg.gamma3 = 1e308;
        match mm_trojan_train(&clean, &trojan, &poisoned, &cfg) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("iteration"), "message: {msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    fn dists(rows: &[Vec<f64>]) -> Vec<LabelDist<f64>> {
        rows.iter()
            .map(|r| LabelDist::new(r.clone()).unwrap())
            .collect()
    }

    #[test]
    fn identical_collections_estimate_half_exactly() {
        let outputs = dists(&[
            vec![0.8, 0.1, 0.1],
            vec![0.5, 0.25, 0.25],
            vec![0.34, 0.33, 0.33],
            vec![0.98, 0.01, 0.01],
        ]);
        let est = optimal_detector_estimate(&outputs, &outputs, 8).unwrap();
        for (i, &populated) in est.populated.iter().enumerate() {
            if populated {
                assert_eq!(est.estimate[i], 0.5, "cell {i}");
            } else {
                assert_eq!(est.estimate[i], 0.5);
            }
        }
        assert!(est.populated.iter().any(|&p| p));
    }

    #[test]
    fn disjoint_supports_estimate_zero_or_one() {
        let trojan = dists(&[vec![0.96, 0.02, 0.02], vec![0.99, 0.005, 0.005]]);
        let clean = dists(&[vec![0.4, 0.3, 0.3], vec![0.36, 0.32, 0.32]]);
        let est = optimal_detector_estimate(&trojan, &clean, 10).unwrap();
        for (i, &populated) in est.populated.iter().enumerate() {
            if populated {
                assert!(
                    est.estimate[i] == 0.0 || est.estimate[i] == 1.0,
                    "cell {i}: {}",
                    est.estimate[i]
                );
            }
        }
    }

    #[test]
    fn estimators_reject_bad_bins_and_empty_lists() {
        let outputs = dists(&[vec![0.8, 0.1, 0.1]]);
        assert!(optimal_detector_estimate(&outputs, &outputs, 1).is_err());
        assert!(js_divergence(&outputs, &outputs, 1).is_err());
        assert!(js_divergence(&outputs, &[], 10).is_err());
    }

    #[test]
    fn divergence_is_zero_for_identical_collections() {
        let outputs = dists(&[
            vec![0.8, 0.1, 0.1],
            vec![0.5, 0.25, 0.25],
            vec![0.4, 0.35, 0.25],
        ]);
        assert_eq!(js_divergence(&outputs, &outputs, 10).unwrap(), 0.0);
    }

    #[test]
    fn divergence_reaches_two_ln_two_on_disjoint_supports() {
        let trojan = dists(&[vec![0.98, 0.01, 0.01]]);
        let clean = dists(&[vec![0.4, 0.3, 0.3]]);
        let jsd = js_divergence(&trojan, &clean, 10).unwrap();
        assert!((jsd - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn divergence_of_independent_draws_from_same_distribution_is_small() {
        // Two independent 10^4 draws from one model's probe-output
        // distribution, 20 bins: estimator noise stays below 0.01.
        let model = Model::<f64>::init(&[6, 5, 3], 4).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for x in probe_batch(10_000, 6, 100) {
            a.push(model.forward(&x).unwrap());
        }
        for x in probe_batch(10_000, 6, 200) {
            b.push(model.forward(&x).unwrap());
        }
        let jsd = js_divergence(&a, &b, 20).unwrap();
        assert!((0.0..0.01).contains(&jsd), "jsd {jsd}");
    }

    #[test]
    fn divergence_bounds_hold_for_random_collections() {
        for seed in 0..20u64 {
            let ma = Model::<f64>::init(&[6, 5, 3], seed).unwrap();
            let mb = Model::<f64>::init(&[6, 5, 3], seed + 100).unwrap();
            let mut a = Vec::new();
            let mut b = Vec::new();
            for x in probe_batch(50, 6, seed) {
                a.push(ma.forward(&x).unwrap());
                b.push(mb.forward(&x).unwrap());
            }
            let jsd = js_divergence(&a, &b, 12).unwrap();
            assert!(jsd >= 0.0);
            assert!(jsd <= 2.0 * std::f64::consts::LN_2 + 1e-12);
        }
    }

    #[test]
    fn agreement_report_runs_on_game_outputs() {
        let poisoned = tiny_poisoned();
        let clean = Model::<f64>::init(&[6, 5, 3], 1).unwrap();
        let trojan = Model::<f64>::init(&[6, 5, 3], 2).unwrap();
        let (model, det, _) =
            mm_trojan_train(&clean, &trojan, &poisoned, &quick_game_cfg(30, 0.2)).unwrap();
        let probes = probe_batch(400, 6, 5);
        let mut zt = Vec::new();
        let mut zc = Vec::new();
        for x in &probes {
            zt.push(model.forward(x).unwrap());
            zc.push(clean.forward(x).unwrap());
        }
        let report = detector_estimate_agreement(&det, &zt, &zc, 10).unwrap();
        assert!(report.populated_cells >= 1);
        assert!(report.weighted_mean_abs_diff >= 0.0);
        assert!(report.weighted_mean_abs_diff <= 1.0);
    }
}
