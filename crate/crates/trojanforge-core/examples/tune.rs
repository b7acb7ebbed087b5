//! Scratch harness for hyperparameter exploration on the digit fixture.

use std::path::Path;
use std::time::Instant;

use trojanforge_core::data::{load_idx, poison_dataset, sample_probes, PairScope, TriggerSpec};
use trojanforge_core::game::{detector_estimate_agreement, mm_trojan_train, GameConfig};
use trojanforge_core::metrics::{acc_clean, acc_trojan, evasion_rate};
use trojanforge_core::poison::{alternate_optimize, AlternateConfig, FbarTerms};
use trojanforge_core::train::{train_classifier, train_two_term, TrainConfig};

fn main() {
    let train = load_idx::<f64>(
        Path::new("data/train-images.idx"),
        Path::new("data/train-labels.idx"),
    )
    .unwrap();
    let test = load_idx::<f64>(
        Path::new("data/test-images.idx"),
        Path::new("data/test-labels.idx"),
    )
    .unwrap();
    let (mu, sigma) = train.feature_stats();
    let dims = [784usize, 64, 10];
    let trigger = TriggerSpec::square(28, 4, 0, 0, 1.0, 0).unwrap();

    // --- clean sweep ---
    for (lr, epochs) in [(0.2, 12), (0.2, 16), (0.15, 16)] {
        let cfg = TrainConfig {
            lr,
            epochs,
            batch_size: 32,
            shuffle_seed: 11,
        };
        let clean = train_classifier(&dims, 1, &train.pairs(), &cfg).unwrap();
        println!(
            "clean lr={lr} epochs={epochs}: acc_c={:.4}",
            acc_clean(&clean.model, &test).unwrap(),
        );
    }

    // --- two-term B/A sweep (the sweet spot is mid-training) ---
    for (epochs, lr) in [(8, 0.1), (10, 0.1), (12, 0.1), (16, 0.1), (10, 0.15), (12, 0.15)] {
        let poisoned = poison_dataset(&train, 0.05, &trigger, 5).unwrap();
        let cfg = TrainConfig {
            lr,
            epochs,
            batch_size: 64,
            shuffle_seed: 13,
        };
        let out = train_two_term(&dims, 2, &poisoned, &cfg).unwrap();
        let terms = FbarTerms::compute(&out.model, &train, &trigger).unwrap();
        let (a, b) = (terms.a(), terms.b());
        let implied = a.sqrt() / (a.sqrt() + b.sqrt());
        println!(
            "two-term e={epochs} lr={lr}: A={a:.6} B={b:.6} B/A={:.0} implied={implied:.4} acc_c={:.4} acc_t={:.4}",
            b / a,
            acc_clean(&out.model, &test).unwrap(),
            acc_trojan(&out.model, &test, &trigger).unwrap(),
        );
    }

    // --- alternate across seeds (robustness) ---
    for seed in [40, 41, 42] {
        let t = Instant::now();
        let alt_cfg = AlternateConfig {
            layer_dims: dims.to_vec(),
            gamma: 0.002,
            rounds: 3,
            train: TrainConfig {
                lr: 0.1,
                epochs: 10,
                batch_size: 64,
                shuffle_seed: 0,
            },
            bootstrap_alpha: 0.5,
            seed,
        };
        let alt = alternate_optimize(&train, &trigger, &alt_cfg).unwrap();
        println!(
            "alternate seed={seed}: alpha={:.4} history={:?} acc_c={:.4} acc_t={:.4} ({:?})",
            alt.alpha,
            alt.alpha_history
                .iter()
                .map(|a| format!("{a:.4}"))
                .collect::<Vec<_>>(),
            acc_clean(&alt.model, &test).unwrap(),
            acc_trojan(&alt.model, &test, &trigger).unwrap(),
            t.elapsed()
        );
    }

    // --- MM game: gamma1 lag sweep across seeds ---
    let alpha = 0.05;
    let poisoned = poison_dataset(&train, alpha, &trigger, 5).unwrap();
    let base_cfg = TrainConfig {
        lr: 0.2,
        epochs: 12,
        batch_size: 32,
        shuffle_seed: 17,
    };
    let clean = train_classifier(&dims, 1, &train.pairs(), &base_cfg).unwrap();
    let baseline = train_classifier(&dims, 3, &poisoned.combined_pairs(), &base_cfg).unwrap();
    println!(
        "ref clean acc_c={:.4}; baseline acc_c={:.4} acc_t={:.4}",
        acc_clean(&clean.model, &test).unwrap(),
        acc_clean(&baseline.model, &test).unwrap(),
        acc_trojan(&baseline.model, &test, &trigger).unwrap(),
    );
    for (gamma1, gamma2) in [(0.25, 1.0), (0.1, 1.0), (0.25, 2.0), (0.1, 0.5)] {
        for seed in [404, 405, 406] {
            let t = Instant::now();
            let game_cfg = GameConfig {
                itr: 300,
                gamma1,
                gamma2,
                gamma3: 0.1,
                probe_count: 128,
                batch_size: 128,
                mu,
                sigma,
                bins: 20,
                scope: PairScope::Combined,
                seed,
            };
            let (mm_model, mm_det, trace) =
                mm_trojan_train(&clean.model, &baseline.model, &poisoned, &game_cfg).unwrap();
            let first = trace.rows.first().unwrap();
            let last = trace.rows.last().unwrap();
            let probes = sample_probes::<f64>(2000, 784, mu, sigma, 9).unwrap();
            let mut tp = 0.0;
            let mut zt = Vec::new();
            let mut zc = Vec::new();
            for x in probes.inputs() {
                let z = mm_model.forward(x).unwrap();
                tp += mm_det.prob_trojan(z.as_slice()).unwrap();
                zt.push(z);
                zc.push(clean.model.forward(x).unwrap());
            }
            let agree = detector_estimate_agreement(&mm_det, &zt, &zc, 20).unwrap();
            println!(
                "game g1={gamma1} g2={gamma2} seed={seed}: pop_tp={:.4} hd_t={:.4} jsd {:.3}->{:.3} acc_c={:.4} acc_t={:.4} evasion={:.2} agree_w={:.4} agree_u={:.4} ({:?})",
                tp / 2000.0,
                last.mean_hd_trojan,
                first.jsd,
                last.jsd,
                acc_clean(&mm_model, &test).unwrap(),
                acc_trojan(&mm_model, &test, &trigger).unwrap(),
                evasion_rate(&mm_det, &mm_model, 20, 128, mu, sigma, 321).unwrap(),
                agree.weighted_mean_abs_diff,
                agree.unweighted_mean_abs_diff,
                t.elapsed()
            );
        }
    }
}
