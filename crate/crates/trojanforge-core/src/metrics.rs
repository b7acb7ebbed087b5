//! Evaluation metrics: clean accuracy, trigger success rate, detector
//! evasion, and the detector confusion summary.

use crate::data::{sample_probes, Dataset, TriggerSpec};
use crate::error::{Error, Result};
use crate::game::Detector;
use crate::nn::Model;
use crate::scalar::Scalar;
use crate::seeds::derive_seed;

/// Which pipeline produced the model under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelTag {
    Clean,
    BaselineTrojan,
    MmTrojan,
}

impl std::fmt::Display for ModelTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelTag::Clean => "clean",
            ModelTag::BaselineTrojan => "baseline_trojan",
            ModelTag::MmTrojan => "mm_trojan",
        };
        f.write_str(s)
    }
}

/// One evaluation row.
///
/// For clean models `acc_t` holds the measured value of the triggered-input
/// metric; reporting conventions that pin it to zero are applied by the
/// harness, not here.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport<T> {
    pub model_tag: ModelTag,
    pub acc_c: T,
    pub acc_t: T,
    pub evasion: T,
    pub detector_mean_trojan_prob: T,
}

impl<T: Scalar> EvalReport<T> {
    pub fn csv_header() -> &'static str {
        "model_tag,acc_c,acc_t,evasion,mean_trojan_prob"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.model_tag, self.acc_c, self.acc_t, self.evasion, self.detector_mean_trojan_prob
        )
    }
}

/// Fraction of test samples whose predicted class matches the true label.
pub fn acc_clean<T: Scalar>(model: &Model<T>, test: &Dataset<T>) -> Result<T> {
    if test.is_empty() {
        return Err(Error::invalid("accuracy over an empty test set"));
    }
    let mut correct = 0usize;
    for i in 0..test.len() {
        if model.predict(test.sample(i))? == test.label(i) {
            correct += 1;
        }
    }
    Ok(T::of_usize(correct) / T::of_usize(test.len()))
}

/// Fraction of test samples that the model sends to the trigger's target
/// class once the trigger is embedded into every one of them.
pub fn acc_trojan<T: Scalar>(
    model: &Model<T>,
    test: &Dataset<T>,
    trigger: &TriggerSpec<T>,
) -> Result<T> {
    if test.is_empty() {
        return Err(Error::invalid("accuracy over an empty test set"));
    }
    let mut hits = 0usize;
    for i in 0..test.len() {
        let x = trigger.embed(test.sample(i))?;
        if model.predict(&x)? == trigger.target_class() {
            hits += 1;
        }
    }
    Ok(T::of_usize(hits) / T::of_usize(test.len()))
}

/// Mean trojan-probability the detector assigns to the model's outputs on
/// the given probes.
pub fn mean_trojan_probability<T: Scalar>(
    det: &Detector<T>,
    model: &Model<T>,
    probes: &[Vec<T>],
) -> Result<T> {
    if probes.is_empty() {
        return Err(Error::invalid("probe set is empty"));
    }
    let mut sum = T::zero();
    for x in probes {
        let z = model.forward(x)?;
        sum += det.prob_trojan(z.as_slice())?;
    }
    Ok(sum / T::of_usize(probes.len()))
}

/// Fraction of probe batches in which the model is *not* flagged. A batch
/// flags the model when its mean trojan-probability strictly exceeds 1/2.
pub fn evasion_rate<T: Scalar>(
    det: &Detector<T>,
    model: &Model<T>,
    probe_batches: usize,
    probes_per_batch: usize,
    mu: T,
    sigma: T,
    seed: u64,
) -> Result<T> {
    if probe_batches == 0 || probes_per_batch == 0 {
        return Err(Error::invalid(
            "evasion needs at least one batch of at least one probe",
        ));
    }
    let half = T::of(0.5);
    let mut evaded = 0usize;
    for b in 0..probe_batches {
        let probes = sample_probes(
            probes_per_batch,
            model.input_dim(),
            mu,
            sigma,
            derive_seed(seed, "evasion", b as u64),
        )?;
        let mean = mean_trojan_probability(det, model, probes.inputs())?;
        if !(mean > half) {
            evaded += 1;
        }
    }
    Ok(T::of_usize(evaded) / T::of_usize(probe_batches))
}

/// Mean detector verdict distribution per source model.
///
/// Rows are the true source (0 = clean model, 1 = trojan model); columns are
/// the detector's mean `[P(clean), P(trojan)]` over the probes. Each row
/// sums to one.
pub fn detector_confusion<T: Scalar>(
    det: &Detector<T>,
    clean_model: &Model<T>,
    trojan_model: &Model<T>,
    probes: &[Vec<T>],
) -> Result<[[T; 2]; 2]> {
    if probes.is_empty() {
        return Err(Error::invalid("probe set is empty"));
    }
    let mut table = [[T::zero(); 2]; 2];
    for x in probes {
        for (row, model) in [(0, clean_model), (1, trojan_model)] {
            let z = model.forward(x)?;
            let verdict = det.network().forward(z.as_slice())?;
            table[row][0] += verdict.as_slice()[0];
            table[row][1] += verdict.as_slice()[1];
        }
    }
    let n = T::of_usize(probes.len());
    for row in &mut table {
        row[0] = row[0] / n;
        row[1] = row[1] / n;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;

    fn zero_model(dim: usize, k: usize) -> Model<f64> {
        let mut m = Model::<f64>::init(&[dim, k], 0).unwrap();
        m.set_params(&vec![0.0; m.param_count()]).unwrap();
        m
    }

    /// Single-layer model whose bias pins argmax to `class`.
    fn constant_model(dim: usize, k: usize, class: usize) -> Model<f64> {
        let mut m = zero_model(dim, k);
        let mut params = m.params();
        params[dim * k + class] = 1.0;
        m.set_params(&params).unwrap();
        m
    }

    fn balanced_dataset(k: usize, per_class: usize) -> Dataset<f64> {
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for c in 0..k {
            for i in 0..per_class {
                samples.push(vec![(c * per_class + i) as f64 / (k * per_class) as f64; 4]);
                labels.push(c);
            }
        }
        Dataset::new(samples, labels, k, None).unwrap()
    }

    #[test]
    fn accuracy_is_one_when_labels_come_from_the_model() {
        let model = Model::<f64>::init(&[4, 5, 3], 6).unwrap();
        let base = gen_synthetic::<f64>(3, 30, 4, 0.6, 2).unwrap();
        let labels: Vec<usize> = (0..base.len())
            .map(|i| model.predict(base.sample(i)).unwrap())
            .collect();
        let relabeled =
            Dataset::new(base.samples().to_vec(), labels, 3, None).unwrap();
        assert_eq!(acc_clean(&model, &relabeled).unwrap(), 1.0);
    }

    #[test]
    fn uniform_model_scores_the_tie_break_class_frequency() {
        // Uniform outputs always argmax to class 0, so accuracy equals the
        // fraction of class-0 samples: 1/k on a balanced set.
        let ds = balanced_dataset(10, 5);
        let model = zero_model(4, 10);
        assert_eq!(acc_clean(&model, &ds).unwrap(), 0.1);
    }

    #[test]
    fn constant_target_model_has_perfect_trigger_rate() {
        let ds = balanced_dataset(5, 8);
        let trigger = TriggerSpec::prefix(4, 2, 1.0, 3).unwrap();
        let model = constant_model(4, 5, 3);
        assert_eq!(acc_trojan(&model, &ds, &trigger).unwrap(), 1.0);
        // And its clean accuracy is exactly the target class frequency.
        assert_eq!(acc_clean(&model, &ds).unwrap(), 0.2);
    }

    #[test]
    fn accuracy_rejects_empty_test_sets() {
        let model = zero_model(4, 3);
        let empty = Dataset::<f64>::new(vec![], vec![], 3, None).unwrap();
        assert!(acc_clean(&model, &empty).is_err());
        let trigger = TriggerSpec::prefix(4, 2, 1.0, 0).unwrap();
        assert!(acc_trojan(&model, &empty, &trigger).is_err());
    }

    #[test]
    fn indifferent_detector_never_flags() {
        // A zero-weight detector answers exactly 1/2, and flagging requires
        // a strict majority.
        let mut net = Detector::<f64>::init(3, 0).unwrap().network().clone();
        net.set_params(&vec![0.0; net.param_count()]).unwrap();
        let det = Detector::from_network(net).unwrap();
        let model = Model::<f64>::init(&[6, 5, 3], 2).unwrap();
        let evasion = evasion_rate(&det, &model, 20, 16, 0.5, 0.25, 9).unwrap();
        assert_eq!(evasion, 1.0);
    }

    #[test]
    fn evasion_is_deterministic_in_seed() {
        let det = Detector::<f64>::init(3, 1).unwrap();
        let model = Model::<f64>::init(&[6, 5, 3], 2).unwrap();
        let a = evasion_rate(&det, &model, 10, 8, 0.5, 0.25, 4).unwrap();
        let b = evasion_rate(&det, &model, 10, 8, 0.5, 0.25, 4).unwrap();
        assert_eq!(a, b);
        assert!(evasion_rate(&det, &model, 0, 8, 0.5, 0.25, 4).is_err());
    }

    #[test]
    fn confusion_rows_sum_to_one_and_collapse_for_identical_models() {
        let det = Detector::<f64>::init(3, 1).unwrap();
        let clean = Model::<f64>::init(&[6, 5, 3], 2).unwrap();
        let trojan = Model::<f64>::init(&[6, 5, 3], 3).unwrap();
        let probes = crate::data::sample_probes::<f64>(40, 6, 0.5, 0.25, 8)
            .unwrap()
            .inputs()
            .to_vec();
        let table = detector_confusion(&det, &clean, &trojan, &probes).unwrap();
        for row in table {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
        }
        let same = detector_confusion(&det, &clean, &clean, &probes).unwrap();
        assert_eq!(same[0], same[1]);
    }
}
