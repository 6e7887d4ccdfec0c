//! Evaluation oracles: hand-counted ASR on stubbed predictions, matrix
//! averaging with surrogate exclusion, exact CSV round-trips, cosine
//! properties and a closed-form single-channel class-activation map.

mod common;

use common::*;
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use xfer_core::adapters::{AdapterMeta, Family, ModelAdapter};
use xfer_core::eval::{
    asr, cosine, gradcam, mean_feature_cosine, transfer_matrix, AdvProvenance, AlignState, InputKind,
    SimilarityEntry, TransferReport,
};
use xfer_core::selfadv::{AdversarialBatch, GeneratorKind};
use xfer_core::Error;
use xfer_tensor::Tensor;

/// Adapter with one fixed prediction per sample index (logit 10 on the
/// chosen class).
struct PredictorStub {
    meta: AdapterMeta,
    preds: Vec<usize>,
}

impl PredictorStub {
    fn new(id: &str, classes: usize, preds: Vec<usize>) -> Self {
        PredictorStub {
            meta: AdapterMeta::new(id, Family::Cnn, classes, (2, 2), 1, vec![0.5], vec![0.25]),
            preds,
        }
    }
}

impl ModelAdapter for PredictorStub {
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
        (1, 1)
    }
    fn named_params(&self) -> Vec<(String, Tensor)> {
        Vec::new()
    }
    fn global_logits_t(&self, x: &Tensor) -> xfer_core::Result<Tensor> {
        let b = x.shape()[0];
        let mut out = Array2::<f64>::zeros((b, self.meta.num_classes));
        for i in 0..b {
            out[[i, self.preds[i % self.preds.len()]]] = 10.0;
        }
        Ok(Tensor::constant(out.into_dyn()))
    }
    fn local_logits_t(&self, x: &Tensor, _grid: Option<(usize, usize)>) -> xfer_core::Result<Tensor> {
        let b = x.shape()[0];
        let mut out = Array4::<f64>::zeros((b, self.meta.num_classes, 1, 1));
        for i in 0..b {
            out[[i, self.preds[i % self.preds.len()], 0, 0]] = 10.0;
        }
        Ok(Tensor::constant(out.into_dyn()))
    }
    fn both_logits_t(&self, x: &Tensor, grid: Option<(usize, usize)>) -> xfer_core::Result<(Tensor, Tensor)> {
        Ok((self.global_logits_t(x)?, self.local_logits_t(x, grid)?))
    }
    fn backbone_features_t(&self, _x: &Tensor) -> xfer_core::Result<(Tensor, Tensor)> {
        Err(Error::UnsupportedArchitecture("stub".into()))
    }
}

fn identity_batch(n: usize, labels: Vec<usize>) -> AdversarialBatch {
    let x = rand_batch(n, 1, 2, 7);
    AdversarialBatch::new(x.clone(), x, labels, 0.0, GeneratorKind::Attack).unwrap()
}

#[test]
fn unperturbed_batch_on_perfect_target_scores_zero() {
    let preds = vec![0usize, 1, 2, 0, 1];
    let target = PredictorStub::new("t", 3, preds.clone());
    let batch = identity_batch(5, preds); // labels equal predictions
    assert_eq!(asr(&batch, &target).unwrap(), 0.0);
}

#[test]
fn three_of_ten_misclassified_is_exactly_thirty_percent() {
    let preds = vec![0usize, 0, 0, 0, 0, 0, 0, 1, 1, 1];
    let target = PredictorStub::new("t", 3, preds);
    let labels = vec![0usize; 10]; // samples 7..10 predicted 1, label 0
    let batch = identity_batch(10, labels);
    assert_eq!(asr(&batch, &target).unwrap(), 30.0);
}

#[test]
fn zero_budget_asr_equals_clean_misclassification_rate() {
    let model = tiny_cnn("m", 3, 3);
    model.freeze();
    let x = rand_batch(8, 1, 8, 4);
    let labels = rand_labels(8, 3, 5);
    let preds = xfer_core::adapters::argmax_rows(&model.global_logits(&x).unwrap());
    let clean_miss = preds.iter().zip(&labels).filter(|(p, y)| p != y).count() as f64 / 8.0;
    let batch = AdversarialBatch::new(x.clone(), x, labels, 0.0, GeneratorKind::Attack).unwrap();
    assert!((asr(&batch, model.as_ref()).unwrap() - 100.0 * clean_miss).abs() < 1e-12);
}

#[test]
fn matrix_excludes_surrogate_column_and_averages_the_rest() {
    // hand-stubbed ASRs: target a fools 4 of 10 (40%), target b 6 of 10 (60%)
    let labels = vec![0usize; 10];
    let preds_a = vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
    let preds_b = vec![1, 1, 1, 1, 1, 1, 0, 0, 0, 0];
    let surrogate = PredictorStub::new("s", 3, vec![0; 10]);
    let a = PredictorStub::new("a", 3, preds_a);
    let b = PredictorStub::new("b", 3, preds_b);
    let batch = identity_batch(10, labels);
    let prov = AdvProvenance {
        surrogate_id: "s".into(),
        witness_id: Some("w".into()),
        attack_name: "mi".into(),
    };
    let report = transfer_matrix(&[(prov, &batch)], &[&surrogate, &a, &b], true).unwrap();
    assert_eq!(report.targets, vec!["s", "a", "b"]);
    let row = &report.rows[0];
    assert_eq!(row.cells, vec![0.0, 40.0, 60.0]);
    assert_eq!(row.avg_asr, Some(50.0));
}

#[test]
fn surrogate_only_target_yields_not_applicable() {
    let surrogate = PredictorStub::new("s", 3, vec![0; 4]);
    let batch = identity_batch(4, vec![0; 4]);
    let prov = AdvProvenance {
        surrogate_id: "s".into(),
        witness_id: None,
        attack_name: "mi".into(),
    };
    let report = transfer_matrix(&[(prov, &batch)], &[&surrogate], true).unwrap();
    assert_eq!(report.rows[0].avg_asr, None);
    let csv = report.to_csv().unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with(",NA"), "{csv}");
}

#[test]
fn missing_surrogate_column_is_a_report_error() {
    let a = PredictorStub::new("a", 3, vec![0; 4]);
    let batch = identity_batch(4, vec![0; 4]);
    let prov = AdvProvenance {
        surrogate_id: "s".into(),
        witness_id: None,
        attack_name: "mi".into(),
    };
    match transfer_matrix(&[(prov, &batch)], &[&a], true) {
        Err(Error::Report(_)) => {}
        other => panic!("expected report error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn csv_roundtrip_preserves_avg_to_1e9() {
    let labels = vec![0usize; 7];
    let surrogate = PredictorStub::new("s", 3, vec![0; 7]);
    let a = PredictorStub::new("a", 3, vec![1, 0, 1, 0, 1, 0, 1]);
    let b = PredictorStub::new("b", 3, vec![1, 1, 0, 0, 0, 0, 0]);
    let batch = identity_batch(7, labels);
    let prov = AdvProvenance {
        surrogate_id: "s".into(),
        witness_id: Some("w".into()),
        attack_name: "di-ti-mi".into(),
    };
    let report = transfer_matrix(&[(prov, &batch)], &[&surrogate, &a, &b], true).unwrap();
    let csv = report.to_csv().unwrap();
    let parsed = TransferReport::from_csv(&csv).unwrap();
    assert_eq!(parsed, report);
    let mem = report.rows[0].avg_asr.unwrap();
    let disk = parsed.rows[0].avg_asr.unwrap();
    assert!((mem - disk).abs() <= 1e-9);
    // the parsed average also recomputes from the parsed cells
    let kept: Vec<f64> = parsed.rows[0].cells[1..].to_vec();
    let recomputed = kept.iter().sum::<f64>() / kept.len() as f64;
    assert!((recomputed - disk).abs() <= 1e-9);
}

#[test]
fn cosine_properties() {
    assert!((cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap()).abs() < 1e-15);
    let a = [0.3, -1.2, 0.7];
    let b = [2.0, 0.1, -0.4];
    let ab = cosine(&a, &b).unwrap();
    let ba = cosine(&b, &a).unwrap();
    assert_eq!(ab, ba, "cosine is not symmetric");
    let scaled: Vec<f64> = a.iter().map(|v| v * 3.7).collect();
    assert!((cosine(&scaled, &b).unwrap() - ab).abs() < 1e-12, "not scale invariant");
    assert!(cosine(&[0.0, 0.0], &b).is_none());
}

#[test]
fn zero_feature_vectors_are_excluded_with_a_count() {
    // sample 0 yields an all-zero logit row on one side
    struct ZeroFirst {
        meta: AdapterMeta,
    }
    impl ModelAdapter for ZeroFirst {
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
            (1, 1)
        }
        fn named_params(&self) -> Vec<(String, Tensor)> {
            Vec::new()
        }
        fn global_logits_t(&self, x: &Tensor) -> xfer_core::Result<Tensor> {
            let b = x.shape()[0];
            let mut out = Array2::<f64>::zeros((b, 3));
            for i in 1..b {
                out[[i, i % 3]] = 2.0;
            }
            Ok(Tensor::constant(out.into_dyn()))
        }
        fn local_logits_t(&self, _x: &Tensor, _grid: Option<(usize, usize)>) -> xfer_core::Result<Tensor> {
            unimplemented!()
        }
        fn both_logits_t(&self, _x: &Tensor, _grid: Option<(usize, usize)>) -> xfer_core::Result<(Tensor, Tensor)> {
            unimplemented!()
        }
        fn backbone_features_t(&self, _x: &Tensor) -> xfer_core::Result<(Tensor, Tensor)> {
            Err(Error::UnsupportedArchitecture("stub".into()))
        }
    }
    let zeroing = ZeroFirst {
        meta: AdapterMeta::new("z", Family::Cnn, 3, (2, 2), 1, vec![0.5], vec![0.25]),
    };
    let other = PredictorStub::new("p", 3, vec![0, 1, 2, 0]);
    let x = rand_batch(4, 1, 2, 30);
    let (mean, n, excluded) = mean_feature_cosine(&zeroing, &other, &x).unwrap();
    assert_eq!(n, 3);
    assert_eq!(excluded, 1);
    assert!(mean.is_finite());
}

#[test]
fn self_pair_mean_cosine_is_one() {
    let m = tiny_cnn("m", 3, 9);
    m.freeze();
    let x = rand_batch(6, 1, 8, 10);
    let (mean, n, excluded) = mean_feature_cosine(m.as_ref(), m.as_ref(), &x).unwrap();
    assert!((mean - 1.0).abs() < 1e-6, "self cosine {mean}");
    assert_eq!(n, 6);
    assert_eq!(excluded, 0);
}

#[test]
fn similarity_report_csv_schema() {
    let report = xfer_core::eval::FeatureSimilarityReport {
        entries: vec![SimilarityEntry {
            surrogate: "s".into(),
            witness: "w".into(),
            kind: InputKind::Clean,
            state: AlignState::Unaligned,
            mean_cosine: 0.0533,
            n: 100,
            zero_excluded: 0,
        }],
    };
    let csv = report.to_csv().unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "surrogate,witness,kind,state,mean_cosine,n");
    assert_eq!(lines.next().unwrap(), "s,w,clean,unaligned,0.0533,100");
}

#[test]
fn gradcam_zero_head_gives_zero_map() {
    let model = tiny_cnn("m", 3, 11);
    let head = get_param(model.as_ref(), "head.weight");
    set_param(model.as_ref(), "head.weight", ndarray::ArrayD::zeros(head.raw_dim()));
    let x = rand_batch(1, 1, 8, 12);
    let img = x.index_axis(ndarray::Axis(0), 0).to_owned();
    let map = gradcam(model.as_ref(), &img, Some(1)).unwrap();
    assert_eq!(map.dim(), (8, 8));
    assert!(map.iter().all(|&v| v == 0.0));
}

#[test]
fn gradcam_matches_closed_form_on_single_channel_cnn() {
    // one conv stage with one channel: cam = minmax(relu(w_head/HW * A))
    let mut s = spec("m", "toy_cnn", Family::Cnn, 3, 8, 1, 13);
    s.arch_params = serde_json::json!({"channels": [1]});
    let model = xfer_core::adapters::ArchRegistry::builtin().build(&s).unwrap();
    let x = rand_batch(1, 1, 8, 14);
    let img = x.index_axis(ndarray::Axis(0), 0).to_owned();
    let class = 2usize;

    // hand forward: normalize, 3x3 conv pad 1, bias, relu, 2x2 avg pool
    let cw = get_param(model.as_ref(), "conv0.weight");
    let cb = get_param(model.as_ref(), "conv0.bias");
    let hw = get_param(model.as_ref(), "head.weight");
    let mean = 0.5;
    let std = 0.25;
    let mut conv = Array2::<f64>::zeros((8, 8));
    for y in 0..8i64 {
        for xx in 0..8i64 {
            let mut acc = cb[[0]];
            for ky in 0..3i64 {
                for kx in 0..3i64 {
                    let iy = y + ky - 1;
                    let ix = xx + kx - 1;
                    if iy < 0 || iy >= 8 || ix < 0 || ix >= 8 {
                        continue;
                    }
                    let v = (img[[0, iy as usize, ix as usize]] - mean) / std;
                    acc += v * cw[[0, 0, ky as usize, kx as usize]];
                }
            }
            conv[[y as usize, xx as usize]] = acc.max(0.0);
        }
    }
    let mut pooled = Array2::<f64>::zeros((4, 4));
    for y in 0..4 {
        for xx in 0..4 {
            pooled[[y, xx]] = (conv[[2 * y, 2 * xx]]
                + conv[[2 * y, 2 * xx + 1]]
                + conv[[2 * y + 1, 2 * xx]]
                + conv[[2 * y + 1, 2 * xx + 1]])
                / 4.0;
        }
    }
    // d logit_class / d A[0, y, x] = head_w[0, class] / 16
    let weight = hw[[0, class]] / 16.0;
    let mut cam = pooled.mapv(|v| (weight * v).max(0.0));
    let max = cam.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = cam.iter().cloned().fold(f64::INFINITY, f64::min);
    if max > min && max > 0.0 {
        cam.mapv_inplace(|v| (v - min) / (max - min));
    } else {
        cam.fill(0.0);
    }
    let mut hand = Array2::<f64>::zeros((8, 8));
    for y in 0..8 {
        for xx in 0..8 {
            hand[[y, xx]] = cam[[y / 2, xx / 2]];
        }
    }

    let got = gradcam(model.as_ref(), &img, Some(class)).unwrap();
    let diff = (&got - &hand).iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(diff < 1e-10, "closed-form mismatch: {diff}");
}

#[test]
fn gradcam_range_and_shape_contract_on_random_inputs() {
    let model = tiny_cnn("m", 3, 15);
    model.freeze();
    let mut rng = ChaCha12Rng::seed_from_u64(16);
    for _ in 0..100 {
        let img = Array3::from_shape_fn((1, 8, 8), |_| rng.random::<f64>());
        let map = gradcam(model.as_ref(), &img, None).unwrap();
        assert_eq!(map.dim(), (8, 8));
        assert!(map.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn heatmap_png_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tiny_cnn("m", 3, 17);
    let x = rand_batch(1, 1, 8, 18);
    let img = x.index_axis(ndarray::Axis(0), 0).to_owned();
    let map = gradcam(model.as_ref(), &img, None).unwrap();
    let path = tmp.path().join("cam.png");
    xfer_core::eval::gradcam::save_heatmap(&map, &path).unwrap();
    let loaded = image::open(&path).unwrap().to_luma8();
    assert_eq!(loaded.dimensions(), (8, 8));
}
