//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use dcls_core::audio::{self, AudioClip, FrontendConfig};
use dcls_core::cli;
use dcls_core::datasets::{gen_synthetic, SynthConfig};
use dcls_core::dcls::{clamp_positions, construct_kernel, construct_kernel_vjp, DclsConfig, DclsVersion};
use dcls_core::gradcheck::{self, DEFAULT_SEEDS, TOLERANCE};
use dcls_core::metrics::average_precision;
use dcls_core::model::{
    build_model, count_params, depthwise_weight_count, surgery_replace_dsc_with_dcls, ConvMethod, Model, ModelSpec, ParamKind, SurgeryOptions,
};
use dcls_core::tensor::{dense_conv2d, depthwise_conv2d, Tensor};
use dcls_core::train::{self, SpectrogramDataset, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn gradient_exactness() -> Outcome {
    let start = Instant::now();
    let reports = match gradcheck::run_all(DEFAULT_SEEDS) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed();
    let parts: Vec<String> = reports.iter().map(|r| format!("{} {:.1e}", r.suite, r.max_rel_err)).collect();
    let ok = reports.iter().all(|r| r.passed() && r.seeds >= 10) && reports.len() == 8 && elapsed < Duration::from_secs(120);
    outcome(ok, format!("{} suites x {DEFAULT_SEEDS} seeds, max rel err < {TOLERANCE:e} [{}], {:.1} s (< 120 s)", reports.len(), parts.join(", "), elapsed.as_secs_f64()))
}

/// Interpolation mass of every (channel, element): the weight gradient of
/// `Σ K` is exactly the sum of that element's interpolation weights.
fn dcls_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut worst32 = 0.0f64;
    for draw in 0..1000 {
        let version = if draw % 2 == 0 { DclsVersion::Gauss } else { DclsVersion::Bilinear };
        let size = [7, 11, 23][draw % 3];
        let (c, m) = (rng.gen_range(1..5), rng.gen_range(1..30));
        let cfg = DclsConfig::new(c, m, size, version).unwrap();
        let bound = (size as f64 - 1.0) / 2.0;
        let w = Tensor::<f64>::from_fn([c, m], |_| rng.gen_range(-1.0..1.0));
        let mut p = Tensor::<f64>::from_fn([2, c, m], |_| rng.gen_range(-bound..bound));
        clamp_positions(&cfg, &mut p);
        let sig = (version == DclsVersion::Gauss).then(|| Tensor::<f64>::from_fn([2, c, m], |_| rng.gen_range(-4.0..4.0)));
        let ones = Tensor::<f64>::from_fn(cfg.kernel_shape(), |_| 1.0);
        let mass = construct_kernel_vjp(&ones, &cfg, &w, &p, sig.as_ref()).unwrap().weights;
        worst = mass.data().iter().fold(worst, |acc, &v| acc.max((v - 1.0).abs()));
        let ones32 = Tensor::<f32>::from_fn(cfg.kernel_shape(), |_| 1.0);
        let cast = |t: &Tensor<f64>| Tensor::<f32>::new(t.shape().to_vec(), t.data().iter().map(|&v| v as f32).collect()).unwrap();
        let mass32 = construct_kernel_vjp(&ones32, &cfg, &cast(&w), &cast(&p), sig.as_ref().map(cast).as_ref()).unwrap().weights;
        worst32 = mass32.data().iter().fold(worst32, |acc, &v| acc.max((v as f64 - 1.0).abs()));
    }
    outcome(worst < 1e-6 && worst32 < 1e-6, format!("1000 draws, max |mass - 1| = {worst:.1e} (f64), {worst32:.1e} (f32); tolerance 1e-6"))
}

/// Direct dilated depthwise cross-correlation with zero padding.
fn dilated_depthwise_oracle(x: &Tensor<f64>, w: &[f64], k: usize, d: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let half = ((k - 1) / 2) as isize * d as isize;
    let xs = x.data();
    Tensor::from_fn([n, c, h, wd], |idx| {
        let (b, rest) = (idx / (c * h * wd), idx % (c * h * wd));
        let (ch, rest) = (rest / (h * wd), rest % (h * wd));
        let (y, xx) = ((rest / wd) as isize, (rest % wd) as isize);
        let mut acc = 0.0;
        for a in 0..k {
            for bb in 0..k {
                let (yy, xq) = (y + a as isize * d as isize - half, xx + bb as isize * d as isize - half);
                if yy >= 0 && yy < h as isize && xq >= 0 && xq < wd as isize {
                    acc += w[ch * k * k + a * k + bb] * xs[((b * c + ch) * h + yy as usize) * wd + xq as usize];
                }
            }
        }
        acc
    })
}

fn lattice_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let cases = [(3, 1), (3, 2), (3, 3), (5, 2), (3, 5), (7, 1), (5, 3), (3, 4), (7, 2), (5, 1)];
    for &(k, d) in &cases {
        let s = (k - 1) * d + 1;
        let c = rng.gen_range(1..4);
        let m = k * k;
        let cfg = DclsConfig::new(c, m, s, DclsVersion::Bilinear).unwrap();
        let w: Vec<f64> = (0..c * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let half = (k as f64 - 1.0) / 2.0;
        let positions = Tensor::from_fn([2, c, m], |i| {
            let (axis, j) = (i / (c * m), i % m);
            let tap = if axis == 0 { j / k } else { j % k };
            (tap as f64 - half) * d as f64
        });
        let weights = Tensor::new([c, m], w.clone()).unwrap();
        let kernel = construct_kernel(&cfg, &weights, &positions, None).unwrap();
        let x = Tensor::<f64>::from_fn([2, c, rng.gen_range(8..16), rng.gen_range(8..16)], |_| rng.gen_range(-1.0..1.0));
        let got = depthwise_conv2d(&x, &kernel, &cfg.geometry()).unwrap();
        let want = dilated_depthwise_oracle(&x, &w, k, d);
        if got.shape() != want.shape() {
            return outcome(false, format!("shape {:?} vs {:?} for k={k} d={d}", got.shape(), want.shape()));
        }
        worst = got.data().iter().zip(want.data()).fold(worst, |acc, (a, b)| acc.max((a - b).abs()));
    }
    outcome(worst < 1e-6, format!("{} cases (K, dilation) up to S = 13, max |diff| = {worst:.1e}; tolerance 1e-6", cases.len()))
}

fn pipeline_shapes(dir: &Path) -> Outcome {
    let wav = dir.join("ten_seconds.wav");
    let clip = AudioClip::new((0..320_000).map(|i| (i as f32 * 0.05).sin() * 0.3).collect(), 32_000);
    audio::write_wav_i16(&wav, &clip).unwrap();
    let cfg = FrontendConfig::default();
    let loaded = audio::load_wav(&wav, cfg.sample_rate, false).unwrap();
    let mel = audio::logmel(&loaded, &cfg).unwrap();
    let model: Model<f32> = build_model(&ModelSpec::convnext_tiny_audio(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let x = Tensor::new([1, 1, mel.shape()[1], mel.shape()[2]], mel.data().to_vec()).unwrap();
    let stem = dense_conv2d(&x, &model.params[model.stem_conv.0].value, &model.spec.stem).unwrap();
    let predicted = model.stem_output(128, 1001).unwrap();
    let ok = mel.shape() == [1, 128, 1001] && stem.shape()[2..] == [64, 62] && predicted == (64, 62);
    outcome(ok, format!("spectrogram {:?}, stem output {:?} (predicted {predicted:?})", mel.shape(), &stem.shape()[1..]))
}

fn parameter_accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base: Model<f32> = build_model(&ModelSpec::convnext_tiny_audio(), &mut rng).unwrap();
    let (dcls, _) = surgery_replace_dsc_with_dcls(&base, &SurgeryOptions::default(), &mut rng).unwrap();
    let (nb, nd) = (count_params(&base).total, count_params(&dcls).total);
    let (wb, wd) = (depthwise_weight_count(&base), depthwise_weight_count(&dcls));
    let rel = (nb as f64 / 28.6e6 - 1.0).abs();
    let ok = rel <= 0.02 && nd <= nb && wb == 324_576 && wd == 321_984;
    outcome(ok, format!("baseline {nb} ({:+.2}% vs 28.6 M, within 2%), after surgery {nd} (<= baseline), depthwise ledger {wb} vs {wd}", (nb as f64 / 28.6e6 - 1.0) * 100.0))
}

fn surgery_sharing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base: Model<f32> = build_model(&ModelSpec::convnext_tiny_audio(), &mut rng).unwrap();
    let (dcls, report) = surgery_replace_dsc_with_dcls(&base, &SurgeryOptions::default(), &mut rng).unwrap();
    let ok = report.replaced.len() == 18 && report.groups_created == 4 && dcls.groups.len() == 4;
    outcome(ok, format!("{} layers replaced, {} shared (P, SIG) groups", report.replaced.len(), dcls.groups.len()))
}

fn positions(model: &Model<f32>) -> Vec<f32> {
    model.params.iter().filter(|p| p.kind == ParamKind::DclsPosition).flat_map(|p| p.value.data().to_vec()).collect()
}

fn toy_training(dir: &Path) -> Outcome {
    let clip_seconds = 1.0;
    let load = |name: &str, clips: usize, seed: u64| {
        let cfg = SynthConfig { duration: clip_seconds, ..SynthConfig::new(clips, 8, seed) };
        let manifest = gen_synthetic(&dir.join(name), &cfg).unwrap();
        SpectrogramDataset::load(manifest, FrontendConfig::default(), clip_seconds, false, false).unwrap()
    };
    let train_set = load("toy_train", 2048, 1);
    let eval_set = load("toy_eval", 512, 2);
    let cfg = TrainConfig::toy();
    let mut ok = cfg.epochs <= 30;
    let mut lines = Vec::new();
    for method in [ConvMethod::DSC7, ConvMethod::dcls_gauss()] {
        for seed in 0..3u64 {
            let start = Instant::now();
            let model: Model<f32> = build_model(&ModelSpec::mini(8).with_conv_method(method), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let before = positions(&model);
            let out = match train::train_loop(model, &train_set, Some(&eval_set), &cfg, seed, |_| {}) {
                Ok(o) => o,
                Err(e) => return outcome(false, format!("{method} seed {seed}: {e}")),
            };
            let elapsed = start.elapsed();
            let map = out.history.last().map(|r| r.map).unwrap_or(0.0);
            let mut line = format!("{method} seed {seed}: mAP {map:.4} in {:.0} s", elapsed.as_secs_f64());
            ok &= map >= 0.90 && elapsed < Duration::from_secs(30 * 60);
            if !before.is_empty() {
                let after = positions(&out.model);
                let moved = after.iter().zip(&before).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / before.len() as f64;
                let extent = after.iter().fold(0.0f32, |m, v| m.max(v.abs()));
                ok &= moved > 0.1 && extent <= 11.0;
                line.push_str(&format!(", mean |dP| {moved:.3}, max |P| {extent:.2}"));
            }
            lines.push(line);
        }
    }
    outcome(ok, format!("{} epochs, 2048 train / 512 eval clips; {}", cfg.epochs, lines.join("; ")))
}

/// Precision at each positive's rank, with ranks enumerated directly
/// (higher score first; equal scores put the larger index first).
fn brute_force_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let rank = |i: usize| 1 + (0..scores.len()).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j > i)).count();
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    pos.iter().map(|&i| pos.iter().filter(|&&j| rank(j) <= rank(i)).count() as f64 / rank(i) as f64).sum::<f64>() / pos.len() as f64
}

fn map_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (items, classes) = (rng.gen_range(5..60), rng.gen_range(1..8));
        for _ in 0..classes {
            let scores: Vec<f64> = (0..items).map(|_| (rng.gen_range(0..20) as f64) / 19.0).collect();
            let labels: Vec<bool> = (0..items).map(|_| rng.gen_bool(0.3)).collect();
            if !labels.contains(&true) {
                continue;
            }
            worst = worst.max((average_precision(&scores, &labels).unwrap() - brute_force_ap(&scores, &labels)).abs());
        }
    }
    // Precisions 1/1 and 2/3 at the two positive ranks. 5/6 itself is not
    // representable; the mean of the two precisions is one ulp below the
    // nearest double to it.
    let example = average_precision(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap();
    let hand = (1.0 + 2.0 / 3.0) / 2.0;
    let ok = worst < 1e-9 && example == hand && (example - 5.0 / 6.0).abs() <= f64::EPSILON;
    outcome(ok, format!("100 matrices, max |AP - brute force| = {worst:.1e}; [0.9,0.8,0.1]/[1,0,1] -> {example} (== (1 + 2/3)/2)"))
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let mut buf = Vec::new();
    cli::run(std::iter::once("dcls").chain(args.iter().copied()), &mut buf).map_err(|e| e.to_string())?;
    Ok(String::from_utf8_lossy(&buf).into_owned())
}

fn throughput_ordering(dir: &Path) -> Outcome {
    let p = |n: &str| dir.join(n).to_str().unwrap().to_string();
    let result = (|| {
        run_cli(&["init", "--preset", "convnext-t", "--out", &p("bench_base.ckpt")])?;
        run_cli(&["surgery", "--in", &p("bench_base.ckpt"), "--out", &p("bench_dcls.ckpt")])?;
        run_cli(&["bench", "--baseline", &p("bench_base.ckpt"), "--dcls", &p("bench_dcls.ckpt"), "--batch-size", "1"])
    })();
    let text = match result {
        Ok(t) => t,
        Err(e) => return outcome(false, e),
    };
    let rate = |key: &str| text.lines().find_map(|l| l.strip_prefix(key)).and_then(|l| l.split_whitespace().next()).and_then(|v| v.parse::<f64>().ok());
    match (rate("baseline "), rate("dcls ")) {
        (Some(b), Some(d)) => outcome(d < b, format!("ConvNeXt-T, batch 1, 5 warmup + 20 timed: baseline {b:.2} samples/s, DCLS {d:.2} samples/s, ratio {:.3}", d / b)),
        _ => outcome(false, format!("unparsable bench output: {text}")),
    }
}

fn train_determinism(dir: &Path) -> Outcome {
    let p = |n: &str| dir.join(n).to_str().unwrap().to_string();
    if let Err(e) = run_cli(&["--seed", "4", "gen-data", "--out", &p("det_data"), "--clips", "256", "--classes", "8", "--duration", "1"]) {
        return outcome(false, e);
    }
    let mut histories = Vec::new();
    for run in ["det_a", "det_b"] {
        let r = run_cli(&[
            "--seed", "5", "--threads", "1", "train", "--train", &p("det_data/manifest.csv"), "--out-dir", &p(run), "--recipe", "toy",
            "--conv", "dcls", "--epochs", "2", "--warmup-epochs", "1", "--mixup-alpha", "0.8", "--drop-path", "0.1",
        ]);
        if let Err(e) = r {
            return outcome(false, e);
        }
        histories.push(std::fs::read(dir.join(run).join("history.csv")).unwrap());
    }
    let ok = histories[0] == histories[1] && !histories[0].is_empty();
    outcome(ok, format!("two `train --seed 5 --threads 1` runs (DCLS, mixup, drop path): history CSVs {}", if ok { "bitwise identical" } else { "differ" }))
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient exactness", Box::new(gradient_exactness)),
        ("DCLS normalization", Box::new(dcls_normalization)),
        ("lattice equivalence", Box::new(lattice_equivalence)),
        ("pipeline shapes", Box::new(|| pipeline_shapes(dir.path()))),
        ("parameter accounting", Box::new(parameter_accounting)),
        ("surgery sharing", Box::new(surgery_sharing)),
        ("toy training", Box::new(|| toy_training(dir.path()))),
        ("mAP oracle", Box::new(map_oracle)),
        ("throughput ordering", Box::new(|| throughput_ordering(dir.path()))),
        ("determinism", Box::new(|| train_determinism(dir.path()))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let start = Instant::now();
        let o = check();
        if !o.passed {
            failed += 1;
        }
        println!("{} {name}: {} ({:.1} s)", if o.passed { "PASS" } else { "FAIL" }, o.detail, start.elapsed().as_secs_f64());
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
