use std::f64::consts::PI;

use dcls_core::audio::{resample_linear, stft_power, AudioClip, FrontendConfig, Frontend};
use dcls_core::datasets::{synth_clip, Signature, SynthConfig};
use proptest::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Frequency of the largest FFT magnitude bin of `samples` (DC excluded),
/// using a Hann window over the whole buffer.
fn fft_peak_hz(samples: &[f32], sample_rate: u32) -> f64 {
    let n = samples.len();
    let mut buf: Vec<Complex<f64>> = samples
        .iter()
        .enumerate()
        .map(|(i, &s)| Complex::new(s as f64 * (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()), 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (bin, _) = buf[1..n / 2].iter().enumerate().fold((0, 0.0), |(bi, bm), (i, z)| if z.norm() > bm { (i + 1, z.norm()) } else { (bi, bm) });
    bin as f64 * sample_rate as f64 / n as f64
}

fn sine(freq: f64, rate: u32, seconds: f64) -> AudioClip {
    let len = (rate as f64 * seconds) as usize;
    AudioClip::new((0..len).map(|i| (2.0 * PI * freq * i as f64 / rate as f64).sin() as f32 * 0.5).collect(), rate)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn resampled_1khz_tone_keeps_its_peak(rate in prop::sample::select(vec![8_000u32, 11_025, 16_000, 22_050, 44_100, 48_000, 96_000])) {
        let input = sine(1000.0, rate, 0.5);
        let out = resample_linear(&input, 32_000);
        prop_assert_eq!(out.sample_rate, 32_000);
        prop_assert_eq!(out.samples.len(), (input.samples.len() as f64 * 32_000.0 / rate as f64).round() as usize);
        let peak = fft_peak_hz(&out.samples, 32_000);
        // One bin is 2 Hz at this length.
        prop_assert!((peak - 1000.0).abs() <= 2.0, "peak {} Hz from {} Hz", peak, rate);
    }

    #[test]
    fn stft_frame_count_law(len in 320usize..40_000, hop in prop::sample::select(vec![160usize, 320, 500])) {
        let cfg = FrontendConfig { hop, ..FrontendConfig::default() };
        let samples: Vec<f32> = (0..len).map(|i| ((i * 7919) % 101) as f32 / 101.0 - 0.5).collect();
        let power = stft_power(&samples, &cfg).unwrap();
        let frames = 1 + len / hop;
        prop_assert_eq!(cfg.frames(len), frames);
        prop_assert_eq!(power.len(), frames * (cfg.n_fft / 2 + 1));
        let mel = Frontend::new(cfg).unwrap().logmel(&AudioClip::new(samples, 32_000)).unwrap();
        prop_assert_eq!(mel.shape(), &[1, 128, frames][..]);
    }
}

#[test]
fn ten_second_clip_gives_128_by_1001() {
    let mel = Frontend::new(FrontendConfig::default()).unwrap().logmel(&sine(440.0, 32_000, 10.0)).unwrap();
    assert_eq!(mel.shape(), &[1, 128, 1001]);
}

#[test]
fn single_class_clips_peak_at_their_signature() {
    let cfg = SynthConfig { mix: (1, 1), snr_db: (30.0, 31.0), duration: 1.0, ..SynthConfig::new(64, 16, 5) };
    let mut seen = [false; 16];
    for i in 0..64 {
        let (clip, labels) = synth_clip(&cfg, i);
        assert_eq!(labels.len(), 1);
        let k = labels[0];
        seen[k] = true;
        let peak = fft_peak_hz(&clip.samples, clip.sample_rate);
        match Signature::for_class(k) {
            Signature::Tone { freq } => assert!((peak - freq).abs() <= 2.0, "class {k}: peak {peak} vs {freq}"),
            Signature::Chirp { f0, f1 } => assert!(peak >= f0 * 0.97 && peak <= f1 * 1.03, "class {k}: peak {peak} outside [{f0}, {f1}]"),
        }
    }
    assert!(seen.iter().filter(|&&s| s).count() >= 12);
}

#[test]
fn label_frequencies_are_uniform() {
    // 1–3 distinct labels per clip, uniformly many, so each of 8 classes
    // appears in 2/8 of the clips on average.
    let clips = 4000;
    let cfg = SynthConfig { duration: 0.05, ..SynthConfig::new(clips, 8, 11) };
    let mut counts = [0usize; 8];
    let mut sizes = [0usize; 4];
    for i in 0..clips {
        let (_, labels) = synth_clip(&cfg, i);
        sizes[labels.len()] += 1;
        for k in labels {
            counts[k] += 1;
        }
    }
    let expected = clips as f64 * 2.0 / 8.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of chi-squared with 7 degrees of freedom.
    assert!(chi2 < 24.32, "chi2 {chi2}, counts {counts:?}");
    let size_chi2: f64 = sizes[1..].iter().map(|&c| (c as f64 - clips as f64 / 3.0).powi(2) / (clips as f64 / 3.0)).sum();
    // 99.9th percentile with 2 degrees of freedom.
    assert!(size_chi2 < 13.82, "sizes {sizes:?}");
}
