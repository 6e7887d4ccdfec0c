//! Loss-stack oracles: hand-computed KL and cross-entropy values,
//! pseudo-label rules, composition arithmetic, decomposition identity and
//! generator laziness.

mod common;

use common::*;
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use xfer_core::adapters::{AdapterMeta, Family, LocalFeatureGrid, ModelAdapter};
use xfer_core::alignment::{
    alignment_loss, global_alignment_loss, local_alignment_loss, pseudo_labels, spatial_aware_loss,
    weighted_combine, AlignmentConfig, MetricRegistry,
};
use xfer_core::selfadv::SelfAdvConfig;
use xfer_core::Error;
use xfer_tensor::Tensor;

fn cfg_with(gamma: f64, omega: f64, kappa: f64) -> AlignmentConfig {
    AlignmentConfig {
        gamma,
        omega,
        kappa,
        ..AlignmentConfig::default()
    }
}

#[test]
fn kl_of_identical_logits_is_exactly_zero() {
    let logits = Array2::from_shape_fn((4, 7), |(i, j)| (i as f64 - j as f64) * 0.37);
    let v = global_alignment_loss(&logits, &logits, &AlignmentConfig::default()).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn two_class_kl_matches_hand_computation() {
    let witness = Array2::from_shape_vec((1, 2), vec![0.75f64.ln(), 0.25f64.ln()]).unwrap();
    let surrogate = Array2::from_shape_vec((1, 2), vec![0.5f64.ln(), 0.5f64.ln()]).unwrap();
    let v = global_alignment_loss(&surrogate, &witness, &AlignmentConfig::default()).unwrap();
    let hand = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
    assert!((v - hand).abs() < 1e-12, "{v} vs {hand}");
    assert!((v - 0.13081).abs() < 1e-5, "expected about 0.13081, got {v}");
}

#[test]
fn global_loss_is_nonnegative_for_random_inputs() {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let registry = MetricRegistry::builtin();
    for trial in 0..50 {
        let w = Array2::from_shape_fn((3, 5), |_| rng.random::<f64>() * 8.0 - 4.0);
        let s = Array2::from_shape_fn((3, 5), |_| rng.random::<f64>() * 8.0 - 4.0);
        for name in ["kl", "js", "tv", "nce"] {
            let m = registry.get(name).unwrap();
            let v = m.loss(&Tensor::constant(s.clone().into_dyn()), &w, 1.0).value_scalar();
            assert!(v >= -1e-12, "{name} trial {trial} negative: {v}");
        }
    }
}

#[test]
fn js_and_tv_self_divergence_vanish() {
    let logits = Array2::from_shape_fn((2, 4), |(i, j)| (i + j) as f64 * 0.3 - 0.4);
    let registry = MetricRegistry::builtin();
    for name in ["js", "tv"] {
        let m = registry.get(name).unwrap();
        let v = m.loss(&Tensor::constant(logits.clone().into_dyn()), &logits, 1.0).value_scalar();
        assert!(v.abs() < 1e-12, "{name} self-divergence {v}");
    }
}

#[test]
fn nce_prefers_aligned_logits() {
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let w = Array2::from_shape_fn((6, 5), |_| rng.random::<f64>() * 2.0 - 1.0);
    let mut shuffled = w.clone();
    // roll rows by one so positives are mismatched
    for i in 0..6 {
        for j in 0..5 {
            shuffled[[i, j]] = w[[(i + 1) % 6, j]];
        }
    }
    let m = MetricRegistry::builtin();
    let nce = m.get("nce").unwrap();
    let aligned = nce.loss(&Tensor::constant(w.clone().into_dyn()), &w, 1.0).value_scalar();
    let mismatched = nce.loss(&Tensor::constant(shuffled.into_dyn()), &w, 1.0).value_scalar();
    assert!(aligned >= 0.0);
    assert!(aligned < mismatched, "aligned {aligned} vs mismatched {mismatched}");
}

#[test]
fn class_space_mismatch_is_rejected() {
    let w = Array2::zeros((2, 5));
    let s = Array2::zeros((2, 4));
    match global_alignment_loss(&s, &w, &AlignmentConfig::default()) {
        Err(Error::ClassSpace(_)) => {}
        other => panic!("expected class-space error, got {:?}", other.map(|_| ())),
    }
}

fn grid_from(logits: Array4<f64>) -> LocalFeatureGrid {
    let grid = (logits.shape()[2], logits.shape()[3]);
    LocalFeatureGrid {
        logits,
        grid,
        source_model: "w".into(),
    }
}

#[test]
fn pseudo_label_rules() {
    // 1x1 grid, argmax picks class 1
    let g = grid_from(Array4::from_shape_vec((1, 3, 1, 1), vec![0.1, 2.0, -1.0]).unwrap());
    assert_eq!(pseudo_labels(&g).labels[[0, 0, 0]], 1);

    // two-way tie at classes 3 and 7 resolves to 3
    let mut logits = Array4::from_elem((1, 9, 1, 1), -1.0);
    logits[[0, 3, 0, 0]] = 2.5;
    logits[[0, 7, 0, 0]] = 2.5;
    assert_eq!(pseudo_labels(&grid_from(logits)).labels[[0, 0, 0]], 3);

    // positive rescaling never moves the argmax
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let base = Array4::from_shape_fn((2, 4, 3, 3), |_| rng.random::<f64>() * 4.0 - 2.0);
    let a = pseudo_labels(&grid_from(base.clone()));
    for c in [0.01, 1.0, 3.7, 1000.0] {
        let b = pseudo_labels(&grid_from(base.mapv(|v| v * c)));
        assert_eq!(a.labels, b.labels, "labels moved under scale {c}");
    }
}

#[test]
fn uniform_local_logits_give_ln_c() {
    let surrogate = grid_from(Array4::zeros((2, 4, 1, 1)));
    let pseudo = pseudo_labels(&grid_from(Array4::from_shape_fn((2, 4, 1, 1), |(_, c, _, _)| c as f64)));
    let v = local_alignment_loss(&surrogate, &pseudo).unwrap();
    assert!((v - 4.0f64.ln()).abs() < 1e-12, "{v} vs ln 4");
}

#[test]
fn saturated_margin_gives_near_zero_local_loss() {
    let mut logits = Array4::zeros((1, 4, 2, 2));
    // logit 50 on class 2 everywhere; pseudo-labels all 2
    for y in 0..2 {
        for x in 0..2 {
            logits[[0, 2, y, x]] = 50.0;
        }
    }
    let pseudo = pseudo_labels(&grid_from(logits.clone()));
    let v = local_alignment_loss(&grid_from(logits), &pseudo).unwrap();
    assert!(v.abs() < 1e-12, "{v}");
}

#[test]
fn local_loss_is_mean_of_hand_computed_positional_ce() {
    // 2x2 grid, 3 classes, batch 1; compare against scalar CE math
    let vals = [
        [1.0, -0.5, 0.3],
        [0.2, 0.9, -1.0],
        [-0.7, 0.1, 0.4],
        [2.0, 2.0, -3.0],
    ];
    let labels = [2usize, 0, 1, 0];
    let mut logits = Array4::zeros((1, 3, 2, 2));
    for (q, row) in vals.iter().enumerate() {
        let (y, x) = (q / 2, q % 2);
        for c in 0..3 {
            logits[[0, c, y, x]] = row[c];
        }
    }
    let mut pseudo_logits = Array4::from_elem((1, 3, 2, 2), -10.0);
    for (q, &l) in labels.iter().enumerate() {
        pseudo_logits[[0, l, q / 2, q % 2]] = 10.0;
    }
    let pseudo = pseudo_labels(&grid_from(pseudo_logits));

    let mut hand = 0.0;
    for (row, &label) in vals.iter().zip(&labels) {
        let lse = row.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        hand += lse - row[label];
    }
    hand /= 4.0;

    let v = local_alignment_loss(&grid_from(logits), &pseudo).unwrap();
    assert!((v - hand).abs() < 1e-12, "{v} vs hand {hand}");
}

#[test]
fn grid_mismatch_is_a_spatial_alignment_error() {
    let surrogate = grid_from(Array4::zeros((1, 3, 2, 2)));
    let pseudo = pseudo_labels(&grid_from(Array4::zeros((1, 3, 4, 4))));
    match local_alignment_loss(&surrogate, &pseudo) {
        Err(Error::SpatialAlignment(_)) => {}
        other => panic!("expected spatial-alignment error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn weighted_combination_arithmetic() {
    assert_eq!(weighted_combine(0.5, 1.0, 0.2), 0.7);
    assert!((weighted_combine(0.3, 2.0, 0.02) - 0.34).abs() < 1e-15);
    // kappa mixing from the diagnostics side: 1.0 + 0.02 * 0.5 = 1.01
    let d = xfer_core::alignment::LossDiagnostics {
        l_global: 1.0,
        l_local: 0.0,
        l_global_adv: 0.5,
        l_local_adv: 0.0,
        gamma: 0.2,
        omega: 0.02,
        kappa: 0.02,
        total: 0.0,
        adv_mean_linf: 0.0,
        adv_final_kl: 0.0,
    };
    assert!((d.recompose() - 1.01).abs() < 1e-15);
}

#[test]
fn gamma_zero_reduces_to_global_loss() {
    let s = tiny_cnn("s", 3, 1);
    let w = tiny_vit("w", 3, 2);
    w.freeze();
    let x = rand_batch(2, 1, 8, 6);
    let spatial = spatial_aware_loss(&x, s.as_ref(), w.as_ref(), &cfg_with(0.0, 0.02, 0.02)).unwrap();
    let global = global_alignment_loss(
        &s.global_logits(&x).unwrap(),
        &w.global_logits(&x).unwrap(),
        &AlignmentConfig::default(),
    )
    .unwrap();
    assert!((spatial - global).abs() < 1e-15, "{spatial} vs {global}");
}

#[test]
fn self_witness_spatial_loss_is_gamma_times_self_ce() {
    // same frozen weights: global KL vanishes, only the local self-CE remains
    let a = tiny_cnn("a", 3, 9);
    a.freeze();
    let x = rand_batch(2, 1, 8, 7);
    let cfg = cfg_with(0.2, 0.02, 0.02);
    let spatial = spatial_aware_loss(&x, a.as_ref(), a.as_ref(), &cfg).unwrap();
    let local = local_alignment_loss(
        &a.local_logits(&x, None).unwrap(),
        &pseudo_labels(&a.local_logits(&x, None).unwrap()),
    )
    .unwrap();
    assert!((spatial - 0.2 * local).abs() < 1e-12, "{spatial} vs {}", 0.2 * local);
}

#[test]
fn omega_zero_reduces_to_global_loss_on_adversarial_inputs() {
    let s = tiny_cnn("s", 3, 71);
    let w = tiny_vit("w", 3, 72);
    w.freeze();
    let x_adv = rand_batch(2, 1, 8, 73); // any in-range batch is a legal x_adv
    let cfg = cfg_with(0.2, 0.0, 0.02);
    let aa = xfer_core::alignment::adversarial_aware_loss(&x_adv, s.as_ref(), w.as_ref(), &cfg).unwrap();
    let global = global_alignment_loss(
        &s.global_logits(&x_adv).unwrap(),
        &w.global_logits(&x_adv).unwrap(),
        &AlignmentConfig::default(),
    )
    .unwrap();
    assert!((aa - global).abs() < 1e-15, "{aa} vs {global}");
}

#[test]
fn zero_step_adversarial_branch_equals_spatial_with_swapped_factor() {
    // x_adv = x, so the adversarial-aware loss with factor omega equals
    // the spatial-aware loss with gamma set to that same factor
    let s = tiny_cnn("s", 3, 81);
    let w = tiny_vit("w", 3, 82);
    w.freeze();
    let x = rand_batch(2, 1, 8, 83);
    let factor = 0.37;
    let aa = xfer_core::alignment::adversarial_aware_loss(&x, s.as_ref(), w.as_ref(), &cfg_with(0.0, factor, 0.0)).unwrap();
    let sa = spatial_aware_loss(&x, s.as_ref(), w.as_ref(), &cfg_with(factor, 0.0, 0.0)).unwrap();
    assert_eq!(aa, sa);
}

#[test]
fn stub_composition_matches_hand_value() {
    // derived two-class stub: global KL is the hand value, local CE is ln 2
    let witness_row = vec![0.75f64.ln(), 0.25f64.ln()];
    let surrogate_row = vec![0.5f64.ln(), 0.5f64.ln()];
    let s = StubAdapter::new("s", surrogate_row.clone(), Array4::zeros((1, 2, 1, 1)));
    let w = StubAdapter::new("w", witness_row, {
        let mut l = Array4::zeros((1, 2, 1, 1));
        l[[0, 0, 0, 0]] = 1.0;
        l
    });
    w.freeze();
    let x = Array4::zeros((1, 1, 2, 2));
    let gamma = 0.3;
    let got = spatial_aware_loss(&x, &s, &w, &cfg_with(gamma, 0.0, 0.0)).unwrap();
    let kl = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
    let hand = kl + gamma * 2.0f64.ln();
    assert!((got - hand).abs() < 1e-12, "{got} vs {hand}");
}

#[test]
fn decomposition_identity_over_randomized_configurations() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let s = tiny_cnn("s", 3, 21);
    let w = tiny_vit("w", 3, 22);
    w.freeze();
    for trial in 0..100 {
        let cfg = cfg_with(
            rng.random::<f64>() * 2.0,
            rng.random::<f64>() * 2.0,
            rng.random::<f64>() * 2.0,
        );
        let adv = SelfAdvConfig {
            epsilon: 0.05 + rng.random::<f64>() * 0.1,
            alpha: 0.02,
            steps: 1 + (trial % 2),
            ratio: 1.0,
        };
        let x = rand_batch(2, 1, 8, 100 + trial as u64);
        let (total, diag) = alignment_loss(&x, s.as_ref(), w.as_ref(), &cfg, &adv).unwrap();
        let recomposed = diag.recompose();
        let rel = (total - recomposed).abs() / total.abs().max(1e-12);
        assert!(rel <= 1e-6, "trial {trial}: total {total} vs recomposed {recomposed}");
        assert!(total >= -1e-12);
    }
}

#[test]
fn kappa_zero_skips_the_generator() {
    let counted = BoxedCounting::new(tiny_cnn("s", 3, 31));
    let w = tiny_vit("w", 3, 32);
    w.freeze();
    let x = rand_batch(2, 1, 8, 33);
    let cfg = cfg_with(0.2, 0.02, 0.0);
    let (_, diag) = alignment_loss(&x, &counted, w.as_ref(), &cfg, &SelfAdvConfig::default()).unwrap();
    // the generator would call global_logits_t once per step
    assert_eq!(counted.global_calls.get(), 0, "generator ran despite kappa = 0");
    assert_eq!(counted.both_calls.get(), 1);
    assert_eq!(diag.l_global_adv, 0.0);
    assert_eq!(diag.l_local_adv, 0.0);
}

#[test]
fn default_factors_are_recorded_in_diagnostics() {
    let s = tiny_cnn("s", 3, 41);
    let w = tiny_vit("w", 3, 42);
    w.freeze();
    let x = rand_batch(1, 1, 8, 43);
    let (_, diag) = alignment_loss(
        &x,
        s.as_ref(),
        w.as_ref(),
        &AlignmentConfig::default(),
        &SelfAdvConfig {
            steps: 1,
            ..SelfAdvConfig::default()
        },
    )
    .unwrap();
    assert_eq!(diag.gamma, 0.2);
    assert_eq!(diag.omega, 0.02);
    assert_eq!(diag.kappa, 0.02);
}

#[test]
fn witness_parameters_stay_opaque_through_the_full_loss() {
    let s = tiny_cnn("s", 3, 51);
    let w = tiny_vit("w", 3, 52);
    w.freeze();
    let x = rand_batch(2, 1, 8, 53);
    let (loss, _) = xfer_core::alignment::alignment_loss_t(
        &x,
        s.as_ref(),
        w.as_ref(),
        &AlignmentConfig::default(),
        &SelfAdvConfig {
            steps: 2,
            ..SelfAdvConfig::default()
        },
    )
    .unwrap();
    loss.backward();
    for (name, p) in w.named_params() {
        assert!(p.grad().is_none(), "witness param {name} got a gradient");
    }
    for (name, p) in s.named_params() {
        assert!(p.grad().is_some(), "surrogate param {name} missing gradient");
    }
}

#[test]
fn local_loss_bitwise_invariant_under_witness_logit_scaling() {
    let s = tiny_cnn("s", 3, 61);
    let w = tiny_vit("w", 3, 62);
    w.freeze();
    let x = rand_batch(2, 1, 8, 63);
    let s_local = s.local_logits(&x, None).unwrap();
    let w_local = w.local_logits(&x, Some(s.native_grid())).unwrap();
    let base = local_alignment_loss(&s_local, &pseudo_labels(&w_local)).unwrap();
    for c in [0.5, 2.0, 17.0] {
        let scaled = LocalFeatureGrid {
            logits: w_local.logits.mapv(|v| v * c),
            grid: w_local.grid,
            source_model: w_local.source_model.clone(),
        };
        let v = local_alignment_loss(&s_local, &pseudo_labels(&scaled)).unwrap();
        assert_eq!(v, base, "scale {c} changed the local loss");
    }
}

/// Fixed-logit adapter for composition arithmetic.
struct StubAdapter {
    meta: AdapterMeta,
    global: Vec<f64>,
    local: Array4<f64>,
}

impl StubAdapter {
    fn new(id: &str, global: Vec<f64>, local: Array4<f64>) -> Self {
        let classes = global.len();
        StubAdapter {
            meta: AdapterMeta::new(id, Family::Cnn, classes, (2, 2), 1, vec![0.5], vec![0.25]),
            global,
            local,
        }
    }
}

impl ModelAdapter for StubAdapter {
    fn meta(&self) -> &AdapterMeta {
        &self.meta
    }
    fn arch_name(&self) -> &str {
        "stub"
    }
    fn arch_params(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
    fn native_grid(&self) -> (usize, usize) {
        (self.local.shape()[2], self.local.shape()[3])
    }
    fn named_params(&self) -> Vec<(String, Tensor)> {
        Vec::new()
    }
    fn global_logits_t(&self, x: &Tensor) -> xfer_core::Result<Tensor> {
        let b = x.shape()[0];
        let mut out = Array2::zeros((b, self.global.len()));
        for i in 0..b {
            for (j, &v) in self.global.iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        Ok(Tensor::constant(out.into_dyn()))
    }
    fn local_logits_t(&self, x: &Tensor, grid: Option<(usize, usize)>) -> xfer_core::Result<Tensor> {
        let b = x.shape()[0];
        let sh = self.local.dim();
        let mut out = Array4::zeros((b, sh.1, sh.2, sh.3));
        for i in 0..b {
            out.index_axis_mut(ndarray::Axis(0), i).assign(&self.local.index_axis(ndarray::Axis(0), 0));
        }
        let t = Tensor::constant(out.into_dyn());
        Ok(match grid {
            Some((h, w)) if (h, w) != (sh.2, sh.3) => t.adaptive_avg_pool2d(h, w),
            _ => t,
        })
    }
    fn both_logits_t(&self, x: &Tensor, grid: Option<(usize, usize)>) -> xfer_core::Result<(Tensor, Tensor)> {
        Ok((self.global_logits_t(x)?, self.local_logits_t(x, grid)?))
    }
    fn backbone_features_t(&self, _x: &Tensor) -> xfer_core::Result<(Tensor, Tensor)> {
        Err(Error::UnsupportedArchitecture("stub".into()))
    }
}
