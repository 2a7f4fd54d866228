use manet::autograd::Graph;
use manet::data::{crop, raster, slide_windows, synth_generate, ClassTaxonomy, Patch};
use manet::model::Manet;
use manet::param::ParamStore;
use manet::tensor::Tensor;
use manet::train::{
    argmax_classes, checkpoint, evaluate, heatmap, loss_ce, metrics, predict_patch, sgd_step, training_tiles,
    ConfusionMatrix, SgdConfig, SgdState, Trainer,
};
use manet::{Component, Error, RunConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn single(w: f64, g: f64, trainable: bool) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    let id = s.register("w", Tensor::full([1], w), trainable, Component::Adapter).unwrap();
    s.get_mut(id).grad = Some(Tensor::full([1], g));
    s
}

#[test]
fn momentum_recurrence_over_two_steps() {
    let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.01 };
    let (w0, g) = (2.0, 0.5);
    let mut store = single(w0, g, true);
    let mut state = SgdState::new();
    sgd_step(&mut store, &mut state, &cfg).unwrap();
    sgd_step(&mut store, &mut state, &cfg).unwrap();
    let v1 = g + 0.01 * w0;
    let w1 = w0 - 0.1 * v1;
    let v2 = 0.9 * v1 + g + 0.01 * w1;
    let w2 = w1 - 0.1 * v2;
    assert!((store.by_name("w").unwrap().tensor.data()[0] - w2).abs() < 1e-15);
}

#[test]
fn frozen_parameters_are_skipped_and_missing_grads_fail() {
    let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.01 };
    let mut store = single(2.0, 0.5, false);
    sgd_step(&mut store, &mut SgdState::new(), &cfg).unwrap();
    assert_eq!(store.by_name("w").unwrap().tensor.data(), &[2.0]);
    let mut store = single(2.0, 0.5, true);
    store.zero_grad();
    store.iter_mut().for_each(|p| p.grad = None);
    assert!(matches!(sgd_step(&mut store, &mut SgdState::new(), &cfg), Err(Error::MissingGrad(_))));
}

proptest! {
    #[test]
    fn zero_learning_rate_is_a_no_op(w in -5.0f64..5.0, g in -5.0f64..5.0, m in 0.0f64..0.99, steps in 1usize..5) {
        let mut store = single(w, g, true);
        let mut state = SgdState::new();
        for _ in 0..steps {
            sgd_step(&mut store, &mut state, &SgdConfig { lr: 0.0, momentum: m, weight_decay: 0.1 }).unwrap();
        }
        prop_assert_eq!(store.by_name("w").unwrap().tensor.data()[0], w);
    }

    #[test]
    fn iou_follows_from_f1(seed: u64, n in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
        let mut cm = ConfusionMatrix::new(6);
        cm.accumulate(&pred, &truth).unwrap();
        let m = metrics(&cm, &ClassTaxonomy::default()).unwrap();
        for s in &m.per_class {
            if let (Some(f1), Some(iou)) = (s.f1, s.iou) {
                let f = f1 / 100.0;
                prop_assert!((iou / 100.0 - f / (2.0 - f)).abs() < 1e-9);
            }
            for v in [s.accuracy, s.f1, s.iou].into_iter().flatten() {
                prop_assert!((0.0..=100.0).contains(&v));
            }
        }
        for v in [m.oa, m.mf1, m.miou] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
    }
}

#[test]
fn cross_entropy_reference_values() {
    let mut g = Graph::<f64>::new();
    let zero = g.constant(Tensor::zeros([6, 2, 2]));
    let l = loss_ce(&mut g, zero, &[0, 3, 5, 1]).unwrap();
    assert!((g.value(l).data()[0] - 6f64.ln()).abs() < 1e-12);

    let confident = g.constant(Tensor::from_fn([2, 1, 2], |i| if i == 0 || i == 3 { 20.0 } else { -20.0 }));
    let l = loss_ce(&mut g, confident, &[0, 1]).unwrap();
    assert!(g.value(l).data()[0] < 1e-6);

    // Two classes, 2×2 pixels, checked against log-sum-exp by hand.
    let logits: [f64; 8] = [1.0, -0.5, 2.0, 0.0, 0.0, 0.5, -1.0, 3.0];
    let labels = [0, 1, 0, 1];
    let want = (0..4)
        .map(|p| {
            let (a, b) = (logits[p], logits[4 + p]);
            (a.exp() + b.exp()).ln() - if labels[p] == 0 { a } else { b }
        })
        .sum::<f64>()
        / 4.0;
    let x = g.constant(Tensor::new([2, 2, 2], logits.to_vec()).unwrap());
    let l = loss_ce(&mut g, x, &labels).unwrap();
    assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    assert!(loss_ce(&mut g, x, &[0, 1]).is_err());
}

#[test]
fn confusion_matrix_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let truth: Vec<usize> = (0..500).map(|_| rng.random_range(0..6)).collect();
    let pred: Vec<usize> = (0..500).map(|_| rng.random_range(0..6)).collect();
    let mut cm = ConfusionMatrix::new(6);
    cm.accumulate(&pred[..250], &truth[..250]).unwrap();
    let mut rest = ConfusionMatrix::new(6);
    rest.accumulate(&pred[250..], &truth[250..]).unwrap();
    cm.merge(&rest).unwrap();
    for t in 0..6 {
        for p in 0..6 {
            let n = (0..500).filter(|&i| truth[i] == t && pred[i] == p).count() as u64;
            assert_eq!(cm.get(t, p), n);
        }
    }
    let m = metrics(&cm, &ClassTaxonomy::default()).unwrap();
    let oa = 100.0 * (0..500).filter(|&i| truth[i] == pred[i]).count() as f64 / 500.0;
    assert!((m.oa - oa).abs() < 1e-12);
    assert!(cm.accumulate(&[7], &[0]).is_err());
    assert!(metrics(&ConfusionMatrix::new(6), &ClassTaxonomy::default()).is_err());
}

#[test]
fn absent_classes_leave_the_means() {
    // Only Building (0) and Tree (1) occur.
    let mut cm = ConfusionMatrix::new(6);
    cm.accumulate(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
    let m = metrics(&cm, &ClassTaxonomy::default()).unwrap();
    assert!(m.per_class[2..].iter().all(|s| s.iou.is_none()));
    let iou = [50.0, 200.0 / 3.0];
    assert!((m.miou - (iou[0] + iou[1]) / 2.0).abs() < 1e-9);
    assert_eq!(m.oa, 75.0);
}

fn patches(n: usize, seed: u64, size: usize) -> Vec<Patch<f32>> {
    synth_generate(n, seed, size).unwrap().into_iter().map(|r| Patch { sample: r.to_sample(), id: r.id }).collect()
}

fn toy() -> RunConfig {
    RunConfig::preset("toy").unwrap()
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = Manet::<f32>::new(&toy().model, 3).unwrap();
    let path = dir.path().join("a.manc");
    checkpoint::save(&model, &path).unwrap();
    let back: Manet<f32> = checkpoint::load(&path).unwrap();
    assert_eq!(checkpoint::to_bytes(&back), std::fs::read(&path).unwrap());
    let s = &patches(1, 1, 64)[0].sample;
    assert_eq!(model.predict_probs(&s.optical, &s.dsm).unwrap(), back.predict_probs(&s.optical, &s.dsm).unwrap());
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    assert!(checkpoint::from_bytes::<f32>(&bytes).is_err());
    assert!(checkpoint::from_bytes::<f32>(&bytes[..bytes.len() / 2]).is_err());
}

#[test]
fn training_keeps_frozen_weights_and_lowers_loss() {
    let cfg = toy();
    let data = patches(8, 2, 64);
    let tiles = training_tiles(&data, 64, 64).unwrap();
    assert_eq!(tiles.len(), 8);
    let mut t = Trainer::<f32>::new(&cfg).unwrap();
    let hash = t.frozen_hash().to_string();
    let losses: Vec<f64> = (1..=5).map(|e| t.epoch(e, &data, &tiles).unwrap()).collect();
    assert!(losses.iter().all(|l| l.is_finite()));
    assert_eq!(t.model.store.frozen_hash(), hash);
    assert!(losses[3] + losses[4] < 2.0 * losses[0], "{losses:?}");

    let mut again = Trainer::<f32>::new(&cfg).unwrap();
    assert_eq!(again.epoch(1, &data, &tiles).unwrap(), losses[0]);
}

#[test]
fn tampering_with_frozen_weights_is_detected() {
    let mut t = Trainer::<f32>::new(&toy()).unwrap();
    let p = t.model.store.iter_mut().find(|p| !p.trainable).unwrap();
    p.tensor.data_mut()[0] += 1.0;
    assert!(matches!(t.check_frozen(), Err(Error::Invariant(_))));
}

#[test]
fn non_overlapping_evaluation_equals_tiles() {
    let model = Manet::<f32>::new(&toy().model, 5).unwrap();
    let data = patches(2, 6, 128);
    let (cm, _) = evaluate(&model, &data, 64, &ClassTaxonomy::default()).unwrap();
    let mut want = ConfusionMatrix::new(6);
    for p in &data {
        for t in slide_windows(0, 128, 128, 64, 64).unwrap() {
            let s = crop(&p.sample, &t).unwrap();
            want.accumulate(&argmax_classes(&model.predict_probs(&s.optical, &s.dsm).unwrap()), &s.labels_usize())
                .unwrap();
        }
    }
    assert_eq!(cm, want);
    assert_eq!(cm.total(), 2 * 128 * 128);

    let coarse = predict_patch(&model, &data[0].sample, 64).unwrap();
    let fine = predict_patch(&model, &data[0].sample, 32).unwrap();
    assert!(coarse.max_abs_diff(&fine) > 1e-4);
    for probs in [&coarse, &fine] {
        for px in 0..128 * 128 {
            let s: f32 = (0..6).map(|k| probs.data()[k * 128 * 128 + px]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn heatmaps_cover_classes_and_branches() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = Manet::<f32>::new(&toy().model, 7).unwrap();
    let sample = &patches(1, 8, 96)[0].sample;
    let files = heatmap::export_heatmaps(&model, sample, dir.path()).unwrap();
    assert_eq!(files.len(), 8);
    assert!(files[0].ends_with("prob_0_Building.png"));
    let feat = raster::read_png(&dir.path().join("feature_dsm.png")).unwrap();
    assert_eq!((feat.width, feat.height, feat.channels), (64, 64, 1));
    assert_eq!((feat.data.iter().min(), feat.data.iter().max()), (Some(&0), Some(&255)));

    // A silenced classifier predicts the uniform distribution: mid-gray planes.
    for name in ["decoder.head.weight", "decoder.head.bias"] {
        let id = model.store.id(name).unwrap();
        let p = model.store.get_mut(id);
        p.tensor = Tensor::zeros(p.tensor.shape().to_vec());
    }
    heatmap::export_heatmaps(&model, sample, dir.path()).unwrap();
    let plane = raster::read_png(&dir.path().join("prob_3_Car.png")).unwrap();
    assert!(plane.data.iter().all(|&v| v == 128));
}
