//! Waveform and spectrogram augmentations. Each draws from the caller's
//! RNG only, so a per-clip RNG stream makes them reproducible.

use rand::Rng;

use super::{interpolate, AudioClip};
use crate::tensor::Tensor;

/// Circular shift: output[i] = input[(i − shift) mod N].
pub fn roll(clip: &AudioClip, shift: i64) -> AudioClip {
    let n = clip.samples.len();
    let mut samples = clip.samples.clone();
    if n > 0 {
        let k = shift.rem_euclid(n as i64) as usize;
        samples.rotate_right(k);
    }
    AudioClip { samples, sample_rate: clip.sample_rate }
}

/// Circular shift by an integer drawn uniformly from [−N, N].
pub fn augment_random_roll<R: Rng + ?Sized>(clip: &AudioClip, rng: &mut R) -> AudioClip {
    let n = clip.samples.len() as i64;
    roll(clip, rng.gen_range(-n..=n))
}

/// Plays the clip `rate` times faster: length `round(len/rate)`.
pub fn speed_change(clip: &AudioClip, rate: f64) -> AudioClip {
    let new_len = (clip.samples.len() as f64 / rate).round() as usize;
    AudioClip { samples: interpolate(&clip.samples, new_len, rate), sample_rate: clip.sample_rate }
}

/// With probability `p`, a speed change at a rate drawn from U(lo, hi).
pub fn augment_speed<R: Rng + ?Sized>(clip: &AudioClip, p: f64, rates: (f64, f64), rng: &mut R) -> AudioClip {
    if rng.gen::<f64>() >= p {
        return clip.clone();
    }
    let rate = rng.gen_range(rates.0..rates.1);
    speed_change(clip, rate)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErasingConfig {
    pub p: f64,
    /// Erased area as a fraction of the spectrogram.
    pub scale: (f64, f64),
    /// Height/width ratio, sampled log-uniformly.
    pub ratio: (f64, f64),
    pub value: f32,
    pub attempts: usize,
}

impl Default for ErasingConfig {
    fn default() -> Self {
        Self { p: 0.25, scale: (0.02, 0.33), ratio: (0.3, 3.3), value: 0.0, attempts: 10 }
    }
}

/// Rectangle (row, col, height, width) chosen by the erasing sampler, or
/// `None` when the gate fails or no fitting rectangle was drawn.
pub fn erase_region<R: Rng + ?Sized>(height: usize, width: usize, cfg: &ErasingConfig, rng: &mut R) -> Option<(usize, usize, usize, usize)> {
    if rng.gen::<f64>() >= cfg.p {
        return None;
    }
    let area = (height * width) as f64;
    let (lr0, lr1) = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
    for _ in 0..cfg.attempts {
        let target = area * rng.gen_range(cfg.scale.0..cfg.scale.1);
        let aspect = rng.gen_range(lr0..lr1).exp();
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        if h > 0 && w > 0 && h < height && w < width {
            let i = rng.gen_range(0..=height - h);
            let j = rng.gen_range(0..=width - w);
            return Some((i, j, h, w));
        }
    }
    None
}

/// Random erasing on a normalized 1×F×T spectrogram.
pub fn augment_erase<R: Rng + ?Sized>(spec: &Tensor<f32>, cfg: &ErasingConfig, rng: &mut R) -> Tensor<f32> {
    let shape = spec.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut out = spec.clone();
    if let Some((i, j, eh, ew)) = erase_region(h, w, cfg, rng) {
        let plane = h * w;
        for p in out.data_mut().chunks_mut(plane) {
            for r in i..i + eh {
                p[r * w + j..r * w + j + ew].fill(cfg.value);
            }
        }
    }
    out
}
