use dcls_core::audio::{Frontend, FrontendConfig};
use dcls_core::datasets::{synth_clip, SynthConfig};
use dcls_core::model::{build_model, load_checkpoint, save_checkpoint, CheckpointMeta, ConvMethod, Mode, Model, ModelSpec};
use dcls_core::tensor::gradcheck::finite_diff_check;
use dcls_core::tensor::Tensor;
use dcls_core::train::{adamw_step, bce_multilabel, stack, OptimConfig, OptimState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;

/// Eight 1 s synthetic clips as a spectrogram batch with multi-hot targets.
fn frozen_batch(classes: usize) -> (Tensor<f32>, Tensor<f32>) {
    let cfg = SynthConfig { duration: 1.0, ..SynthConfig::new(8, classes, 21) };
    let frontend = Frontend::new(FrontendConfig::default()).unwrap();
    let mut items = Vec::new();
    let mut targets = Vec::new();
    for i in 0..8 {
        let (clip, labels) = synth_clip(&cfg, i);
        items.push(frontend.logmel(&clip).unwrap());
        targets.extend((0..classes).map(|k| if labels.contains(&k) { 1.0 } else { 0.0 }));
    }
    (stack(&items).unwrap(), Tensor::new([8, classes], targets).unwrap())
}

#[test]
fn ten_adamw_steps_reduce_loss_on_a_frozen_batch() {
    let (x, y) = frozen_batch(4);
    for method in [ConvMethod::DSC7, ConvMethod::dcls_gauss()] {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model: Model<f32> = build_model(&ModelSpec::mini(4).with_conv_method(method), &mut rng).unwrap();
            let mut state = OptimState::new(&model.params);
            let cfg = OptimConfig::default();
            let initial = bce_multilabel(&model.predict(&x).unwrap(), &y).unwrap().0;
            for _ in 0..10 {
                let (logits, cache) = model.forward(&x, Mode::Train, &mut rng).unwrap();
                let (_, grad) = bce_multilabel(&logits, &y).unwrap();
                let grads = model.backward(&cache, &grad).unwrap();
                adamw_step(&mut model.params, &grads, &mut state, 1e-3, &cfg).unwrap();
            }
            let last = bce_multilabel(&model.predict(&x).unwrap(), &y).unwrap().0;
            assert!(last < initial, "{method} seed {seed}: {initial} -> {last}");
        }
    }
}

/// Every parameter of a two-stage toy model through the loss, 64-bit.
/// The second stage sees a 2×2 map, where the channel layer norms curve
/// sharply enough that the default step's truncation error reaches 2e-3
/// on a few biases; a smaller step keeps both that and round-off well
/// below the tolerance.
#[test]
fn whole_model_gradient_matches_finite_differences() {
    for (method, seed) in [(ConvMethod::DSC7, 0u64), (ConvMethod::dcls_gauss(), 1), (ConvMethod::Dcls { size: 7, count: 4, version: dcls_core::dcls::DclsVersion::Bilinear }, 2)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = ModelSpec::convnext(&[1, 1], &[4, 8], 3).with_conv_method(method);
        spec.layer_scale_init = 0.5;
        let model: Model<f64> = build_model(&spec, &mut rng).unwrap();
        let x = Tensor::<f64>::from_fn([2, 1, 8, 64], |_| rng.gen_range(-1.0..1.0));
        let t = Tensor::<f64>::from_fn([2, 3], |_| rng.gen_range(0.0..1.0));
        let (logits, cache) = model.forward(&x, Mode::Eval, &mut rng).unwrap();
        let (_, g) = bce_multilabel(&logits, &t).unwrap();
        let grads = model.backward(&cache, &g).unwrap();
        for (pi, p) in model.params.iter().enumerate() {
            let loss = |v: &[f64]| {
                let mut m = model.clone();
                m.params[pi].value = Tensor::new(p.value.shape().to_vec(), v.to_vec()).unwrap();
                bce_multilabel(&m.predict(&x).unwrap(), &t).unwrap().0
            };
            let r = finite_diff_check(loss, p.value.data(), grads[pi].data(), STEP).unwrap();
            assert!(r.max_rel_err < 1e-3, "{method}: {} rel err {:e} an {:e} num {:e}", p.name, r.max_rel_err, grads[pi].data()[r.worst_index], r.numeric[r.worst_index]);
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (x, _) = frozen_batch(4);
    for method in [ConvMethod::DSC7, ConvMethod::dcls_gauss()] {
        let model: Model<f32> = build_model(&ModelSpec::mini(4).with_conv_method(method), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let path = dir.path().join(format!("{method}.ckpt"));
        save_checkpoint(&model, &CheckpointMeta { seed: 9 }, &path).unwrap();
        let (loaded, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.seed, 9);
        assert_eq!(loaded, model);
        assert_eq!(loaded.predict(&x).unwrap(), model.predict(&x).unwrap());
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
