mod common;

use common::*;
use loralens::ablation::{
    group_ablation_eval, kl_divergence, recovery, sweep_components, RecoveryRecord,
};
use loralens::lora::AblationMask;
use loralens::microlm::{synth_tasks_with, MatrixKind, SynthConfig, TransformerModel};
use loralens::Error;
use proptest::prelude::*;

#[test]
fn all_nine_cells() {
    for (name, b, l, x, want) in CELLS {
        let got = recovery(b, l, x).unwrap();
        assert!((got - want).abs() < 0.15, "{name}: {got} vs {want}");
    }
    assert!(matches!(
        recovery(0.3, 0.3, 0.5),
        Err(Error::UndefinedRecovery(_))
    ));
    assert_eq!(RecoveryRecord::new("t", "c", 0.3, 0.3, 0.5).recovery, None);
}

proptest! {
    #[test]
    fn recovery_is_affine_invariant(
        b in -5.0f64..5.0, gap in 0.1f64..5.0, x in -10.0f64..10.0,
        alpha in prop_oneof![-4.0f64..-0.25, 0.25f64..4.0], c in -10.0f64..10.0,
    ) {
        let l = b + gap;
        let r0 = recovery(b, l, x).unwrap();
        let r1 = recovery(alpha * b + c, alpha * l + c, alpha * x + c).unwrap();
        prop_assert!((r0 - r1).abs() < 1e-6 * r0.abs().max(1.0));
    }

    #[test]
    fn kl_matches_summation_oracle(seed in any::<u64>(), width in 2usize..80, spread in 0.1f32..8.0) {
        let mut r = rng(seed);
        let p: Vec<f32> = normal_vec(&mut r, width).iter().map(|v| v * spread).collect();
        let q: Vec<f32> = normal_vec(&mut r, width).iter().map(|v| v * spread).collect();
        let kl = kl_divergence(&p, &q).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!((kl - kl_oracle(&p, &q)).abs() < 1e-8);
        prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }
}

#[test]
fn analytic_kl_cases() {
    assert_eq!(
        kl_divergence(&[1.0, 2.0, -3.0], &[1.0, 2.0, -3.0]).unwrap(),
        0.0
    );
    assert!(
        (kl_divergence(&[20.0, 0.0], &[0.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-3
    );
    assert!(kl_divergence(&[f32::NAN, 0.0], &[0.0, 0.0]).is_err());
    assert!(kl_divergence(&[0.0, 0.0], &[0.0]).is_err());
}

fn eval_corpus(n: usize) -> loralens::microlm::Corpus {
    synth_tasks_with(
        &SynthConfig {
            n_sequences: n,
            ..SynthConfig::default()
        },
        77,
    )
    .1
}

#[test]
fn sweep_grid_shape_and_inert_component() {
    let cfg = tiny_config();
    let model = TransformerModel::new(cfg.clone()).unwrap();
    let mut adapters = random_adapters(&cfg, 3, 1.0);
    let inert = loralens::lora::AdapterSet::index_of(1, MatrixKind::V);
    adapters.components_mut()[inert].a.data_mut().fill(0.0);
    let sweep = sweep_components(&model, &adapters, &eval_corpus(12)).unwrap();
    assert_eq!(sweep.len(), 7 * cfg.n_layers + cfg.n_layers);
    assert_eq!(sweep.per_component.len(), 7 * cfg.n_layers);
    assert!(sweep
        .per_component
        .iter()
        .chain(&sweep.per_layer)
        .all(|e| e.kl >= 0.0));
    assert_eq!(sweep.kl(1, MatrixKind::V), Some(0.0));
    assert!(sweep.per_component.iter().filter(|e| e.kl > 0.0).count() >= 7 * cfg.n_layers - 1);
    assert_eq!(sweep.n_tokens, eval_corpus(12).n_tokens());
    // canonical order, one entry per component
    for (i, e) in sweep.per_component.iter().enumerate() {
        assert_eq!((e.layer, e.kind), (i / 7, Some(MatrixKind::ALL[i % 7])));
    }
    let means = sweep.per_kind_means();
    assert_eq!(means.len(), 7);
}

#[test]
fn group_scores_and_full_candidate() {
    let cfg = tiny_config();
    let model = TransformerModel::new(cfg.clone()).unwrap();
    let adapters = random_adapters(&cfg, 4, 2.0);
    let eval = eval_corpus(30);
    let (scores, records) = group_ablation_eval(&model, &adapters, "toy", &eval).unwrap();
    let base = loralens::microlm::evaluate_accuracy(&model, None, &eval).unwrap();
    assert_eq!(scores.base, base);
    let full = loralens::microlm::evaluate_accuracy(&model, Some(&adapters), &eval).unwrap();
    assert_eq!(scores.full, full);
    let attn = adapters
        .apply_mask(&AblationMask::all_attention(cfg.n_layers))
        .unwrap();
    assert_eq!(
        scores.attn_ablated,
        loralens::microlm::evaluate_accuracy(&model, Some(&attn), &eval).unwrap()
    );
    assert_eq!(records.len(), 3);
    if scores.full != scores.base {
        assert_eq!(records[0].recovery, Some(100.0));
    } else {
        assert!(records.iter().all(|r| r.recovery.is_none()));
    }
}
