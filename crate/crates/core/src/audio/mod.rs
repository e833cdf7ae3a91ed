//! WAV ingestion and the log-mel frontend.
//!
//! Pipeline: `load_wav` → `pad_or_truncate` → `logmel`
//! (Hann STFT, centered with reflect padding → |X|² → mel → dB → normalize).
//! Waveform and spectrogram augmentations live in [`augment`].

pub mod augment;

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::tensor::Tensor;

pub use augment::{augment_erase, augment_random_roll, augment_speed, roll, ErasingConfig};

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: malformed WAV: {detail}")]
    Malformed { path: String, detail: String },
    #[error("{path}: unsupported codec ({detail}); expected 16-bit PCM or 32-bit float")]
    Unsupported { path: String, detail: String },
    #[error("sample-rate mismatch: {path} is {got} Hz, expected {expected} Hz (use --resample)")]
    SampleRate { path: String, got: u32, expected: u32 },
    #[error("clip of {len} samples is shorter than one hop ({hop})")]
    TooShort { len: usize, hop: usize },
    #[error("invalid frontend config: {0}")]
    Config(String),
}

pub type Result<T, E = AudioError> = std::result::Result<T, E>;

/// Mono clip with samples nominally in [−1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MelScale {
    /// `2595·log10(1 + f/700)`
    Htk,
    /// Linear below 1 kHz, logarithmic above.
    Slaney,
}

impl MelScale {
    pub fn hz_to_mel(self, f: f64) -> f64 {
        match self {
            MelScale::Htk => 2595.0 * (1.0 + f / 700.0).log10(),
            MelScale::Slaney => {
                let (f_sp, min_log_hz) = (200.0 / 3.0, 1000.0);
                let min_log_mel = min_log_hz / f_sp;
                let logstep = 6.4f64.ln() / 27.0;
                if f >= min_log_hz {
                    min_log_mel + (f / min_log_hz).ln() / logstep
                } else {
                    f / f_sp
                }
            }
        }
    }

    pub fn mel_to_hz(self, m: f64) -> f64 {
        match self {
            MelScale::Htk => 700.0 * (10f64.powf(m / 2595.0) - 1.0),
            MelScale::Slaney => {
                let (f_sp, min_log_hz) = (200.0 / 3.0, 1000.0);
                let min_log_mel = min_log_hz / f_sp;
                let logstep = 6.4f64.ln() / 27.0;
                if m >= min_log_mel {
                    min_log_hz * (logstep * (m - min_log_mel)).exp()
                } else {
                    m * f_sp
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrontendConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub power: f64,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub f_min: f64,
    pub f_max: f64,
    pub amin: f64,
    pub norm_mean: f64,
    pub norm_std: f64,
    pub mel_scale: MelScale,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 320,
            power: 2.0,
            n_mels: 128,
            sample_rate: 32_000,
            f_min: 50.0,
            f_max: 14_000.0,
            amin: 1e-10,
            norm_mean: -18.2696,
            norm_std: 30.5735,
            mel_scale: MelScale::Htk,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(AudioError::Config(m));
        if self.n_fft < 2 || self.hop == 0 || self.hop > self.n_fft {
            return err(format!("need 0 < hop ≤ n_fft, got hop {} n_fft {}", self.hop, self.n_fft));
        }
        if self.n_mels == 0 || self.sample_rate == 0 {
            return err("n_mels and sample_rate must be positive".into());
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return err(format!("need 0 ≤ f_min < f_max ≤ sr/2, got {}..{}", self.f_min, self.f_max));
        }
        if !(self.amin > 0.0 && self.norm_std > 0.0 && self.power > 0.0) {
            return err("amin, norm_std and power must be positive".into());
        }
        Ok(())
    }

    /// Frames produced by the centered STFT.
    pub fn frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    pub fn normalize(&self, db: f64) -> f64 {
        (db - self.norm_mean) / self.norm_std
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        x * self.norm_std + self.norm_mean
    }
}

fn wav_err(path: &Path, e: hound::Error) -> AudioError {
    let path = path.display().to_string();
    match e {
        // The file itself was opened already, so read failures mean a short
        // or inconsistent body.
        hound::Error::IoError(source) => AudioError::Malformed { path, detail: source.to_string() },
        hound::Error::Unsupported => AudioError::Unsupported { path, detail: "unsupported WAV feature".into() },
        other => AudioError::Malformed { path, detail: other.to_string() },
    }
}

/// Reads a WAV file at its native rate, averaging channels.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let file = std::fs::File::open(path).map_err(|source| AudioError::Io { path: path.display().to_string(), source })?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file)).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(AudioError::Unsupported {
                path: path.display().to_string(),
                detail: format!("{bits}-bit {fmt:?}"),
            })
        }
    };
    let samples = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok(AudioClip { samples, sample_rate: spec.sample_rate })
}

/// Reads a WAV file and brings it to `target_rate`. A rate mismatch is an
/// error unless `resample` is set.
pub fn load_wav(path: &Path, target_rate: u32, resample: bool) -> Result<AudioClip> {
    let clip = read_wav(path)?;
    if clip.sample_rate == target_rate {
        Ok(clip)
    } else if resample {
        Ok(resample_linear(&clip, target_rate))
    } else {
        Err(AudioError::SampleRate { path: path.display().to_string(), got: clip.sample_rate, expected: target_rate })
    }
}

/// Writes a mono 16-bit PCM file (`round(x·32768)`, saturated).
pub fn write_wav_i16(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io = |e: hound::Error| match e {
        hound::Error::IoError(source) => AudioError::Io { path: path.display().to_string(), source },
        other => AudioError::Malformed { path: path.display().to_string(), detail: other.to_string() },
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(io)?;
    for &s in &clip.samples {
        w.write_sample(quantize_i16(s)).map_err(io)?;
    }
    w.finalize().map_err(io)
}

pub fn quantize_i16(x: f32) -> i16 {
    (x as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Linear interpolation from `samples` onto `new_len` points spaced
/// `step` source samples apart.
pub(crate) fn interpolate(samples: &[f32], new_len: usize, step: f64) -> Vec<f32> {
    if samples.is_empty() {
        return vec![0.0; new_len];
    }
    let last = samples.len() - 1;
    (0..new_len)
        .map(|i| {
            let pos = i as f64 * step;
            let i0 = (pos.floor() as usize).min(last);
            let frac = (pos - i0 as f64).clamp(0.0, 1.0);
            let i1 = (i0 + 1).min(last);
            (samples[i0] as f64 * (1.0 - frac) + samples[i1] as f64 * frac) as f32
        })
        .collect()
}

/// Output length `round(len·target/source)`.
pub fn resample_linear(clip: &AudioClip, target_rate: u32) -> AudioClip {
    assert!(target_rate > 0, "target rate must be positive");
    if target_rate == clip.sample_rate {
        return clip.clone();
    }
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let new_len = (clip.samples.len() as f64 / ratio).round() as usize;
    AudioClip { samples: interpolate(&clip.samples, new_len, ratio), sample_rate: target_rate }
}

/// Truncation keeps the head; padding appends zeros.
pub fn pad_or_truncate(clip: &AudioClip, target_len: usize) -> AudioClip {
    let mut samples = clip.samples.clone();
    samples.resize(target_len, 0.0);
    AudioClip { samples, sample_rate: clip.sample_rate }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Reflect index into `0..n` (edge samples are not repeated).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Centered power STFT, frames × (n_fft/2 + 1), row-major.
pub fn stft_power(samples: &[f32], cfg: &FrontendConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if samples.len() < cfg.hop {
        return Err(AudioError::TooShort { len: samples.len(), hop: cfg.hop });
    }
    let n_fft = cfg.n_fft;
    let bins = n_fft / 2 + 1;
    let frames = cfg.frames(samples.len());
    let window = hann_window(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let half = (n_fft / 2) as isize;
    let mut out = vec![0.0; frames * bins];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..frames {
        let start = (t * cfg.hop) as isize - half;
        for (k, b) in buf.iter_mut().enumerate() {
            let idx = reflect(start + k as isize, samples.len());
            *b = Complex::new(samples[idx] as f64 * window[k], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (o, z) in out[t * bins..(t + 1) * bins].iter_mut().zip(&buf) {
            let mag2 = z.norm_sqr();
            *o = if cfg.power == 2.0 { mag2 } else { mag2.sqrt().powf(cfg.power) };
        }
    }
    Ok(out)
}

/// Triangular filters, n_mels × (n_fft/2 + 1), row-major. Each triangle
/// has apex 1 at its center frequency (no area normalization); rows are
/// sampled at the FFT bin frequencies.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let bins = cfg.n_fft / 2 + 1;
    let scale = cfg.mel_scale;
    let (m_lo, m_hi) = (scale.hz_to_mel(cfg.f_min), scale.hz_to_mel(cfg.f_max));
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| scale.mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut fb = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (lo, c, hi) = (points[m], points[m + 1], points[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let up = (f - lo) / (c - lo);
            let down = (hi - f) / (hi - c);
            fb[m * bins + k] = up.min(down).max(0.0);
        }
    }
    Ok(fb)
}

/// Center frequencies (Hz) of the mel filters.
pub fn mel_centers(cfg: &FrontendConfig) -> Vec<f64> {
    let scale = cfg.mel_scale;
    let (m_lo, m_hi) = (scale.hz_to_mel(cfg.f_min), scale.hz_to_mel(cfg.f_max));
    (1..=cfg.n_mels)
        .map(|i| scale.mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Precomputed filterbank for repeated spectrogram extraction.
#[derive(Clone, Debug)]
pub struct Frontend {
    pub cfg: FrontendConfig,
    filters: Vec<f64>,
}

impl Frontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        Ok(Self { filters: mel_filterbank(&cfg)?, cfg })
    }

    /// Mel power (before dB), n_mels × frames.
    pub fn mel_power(&self, samples: &[f32]) -> Result<Vec<f64>> {
        let power = stft_power(samples, &self.cfg)?;
        let bins = self.cfg.n_fft / 2 + 1;
        let frames = power.len() / bins;
        let mut mel = vec![0.0; self.cfg.n_mels * frames];
        for (m, row) in self.filters.chunks(bins).enumerate() {
            let nz: Vec<(usize, f64)> = row.iter().copied().enumerate().filter(|&(_, w)| w > 0.0).collect();
            for t in 0..frames {
                let frame = &power[t * bins..(t + 1) * bins];
                mel[m * frames + t] = nz.iter().map(|&(k, w)| w * frame[k]).sum();
            }
        }
        Ok(mel)
    }

    /// Normalized log-mel spectrogram, 1 × n_mels × frames.
    pub fn logmel(&self, clip: &AudioClip) -> Result<Tensor<f32>> {
        if clip.sample_rate != self.cfg.sample_rate {
            return Err(AudioError::SampleRate {
                path: "<clip>".into(),
                got: clip.sample_rate,
                expected: self.cfg.sample_rate,
            });
        }
        let mel = self.mel_power(&clip.samples)?;
        let frames = mel.len() / self.cfg.n_mels;
        let data = mel.iter().map(|&p| self.cfg.normalize(power_to_db(p, self.cfg.amin)) as f32).collect();
        Ok(Tensor::new([1, self.cfg.n_mels, frames], data).expect("consistent shape"))
    }
}

/// `10·log10(max(p, amin))`, reference 1, no top-dB clipping.
pub fn power_to_db(p: f64, amin: f64) -> f64 {
    10.0 * p.max(amin).log10()
}

pub fn logmel(clip: &AudioClip, cfg: &FrontendConfig) -> Result<Tensor<f32>> {
    Frontend::new(*cfg)?.logmel(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, sr: u32, len: usize) -> AudioClip {
        AudioClip::new((0..len).map(|i| (2.0 * PI * freq * i as f64 / sr as f64).sin() as f32).collect(), sr)
    }

    #[test]
    fn ten_seconds_gives_1001_frames() {
        let cfg = FrontendConfig::default();
        let clip = AudioClip::new(vec![0.0; 320_000], 32_000);
        let s = logmel(&clip, &cfg).unwrap();
        assert_eq!(s.shape(), &[1, 128, 1001]);
        let expect = (-100.0 + 18.2696) / 30.5735;
        assert!(s.data().iter().all(|&v| (v as f64 - expect).abs() < 1e-6));
        assert!((expect + 2.6732).abs() < 1e-4);
    }

    #[test]
    fn db_of_100_is_20() {
        assert_eq!(power_to_db(100.0, 1e-10), 20.0);
        assert_eq!(power_to_db(0.0, 1e-10), -100.0);
    }

    #[test]
    fn mel_of_1000_hz() {
        let m = MelScale::Htk.hz_to_mel(1000.0);
        assert!((m - 999.99).abs() < 0.01, "{m}");
        for s in [MelScale::Htk, MelScale::Slaney] {
            for f in [0.0, 50.0, 999.0, 1000.0, 7000.0] {
                assert!((s.mel_to_hz(s.hz_to_mel(f)) - f).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn filterbank_rows_are_triangles() {
        let cfg = FrontendConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        let bins = cfg.n_fft / 2 + 1;
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        for row in fb.chunks(bins) {
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            assert!(row.iter().any(|&w| w > 0.0));
            let peak = row.iter().cloned().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
            assert!(row[..peak].windows(2).all(|w| w[0] <= w[1]));
            assert!(row[peak..].windows(2).all(|w| w[0] >= w[1]));
            for (k, &w) in row.iter().enumerate() {
                if w > 0.0 {
                    let f = k as f64 * bin_hz;
                    assert!(f > cfg.f_min && f < cfg.f_max);
                }
            }
        }
        assert!(mel_centers(&cfg).windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sine_energy_concentrates() {
        let cfg = FrontendConfig::default();
        let clip = sine(1000.0, 32_000, 32_000);
        let p = stft_power(&clip.samples, &cfg).unwrap();
        let bins = cfg.n_fft / 2 + 1;
        let center = (1000.0 * cfg.n_fft as f64 / 32_000.0).round() as usize;
        for frame in p.chunks(bins).skip(2).take(90) {
            let total: f64 = frame.iter().sum();
            let near: f64 = frame[center - 1..=center + 1].iter().sum();
            assert!(near / total >= 0.9, "{}", near / total);
        }
    }

    #[test]
    fn stft_matches_direct_dft() {
        let cfg = FrontendConfig { n_fft: 16, hop: 4, n_mels: 2, sample_rate: 16, f_min: 0.0, f_max: 8.0, ..Default::default() };
        let x: Vec<f32> = (0..23).map(|i| ((i * 7 % 11) as f32 - 5.0) / 5.0).collect();
        let p = stft_power(&x, &cfg).unwrap();
        let w = hann_window(16);
        let frames = cfg.frames(x.len());
        assert_eq!(p.len(), frames * 9);
        for t in 0..frames {
            for k in 0..9 {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..16 {
                    let i = (t * 4 + n) as isize - 8;
                    // explicit reflection for the oracle
                    let j = if i < 0 { -i } else if i >= 23 { 2 * 22 - i } else { i } as usize;
                    let ang = -2.0 * PI * (k * n) as f64 / 16.0;
                    re += x[j] as f64 * w[n] * ang.cos();
                    im += x[j] as f64 * w[n] * ang.sin();
                }
                assert!((p[t * 9 + k] - (re * re + im * im)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pad_and_truncate() {
        let clip = AudioClip::new(vec![0.5; 5], 1);
        let p = pad_or_truncate(&clip, 10);
        assert_eq!(&p.samples[..5], &[0.5; 5]);
        assert_eq!(&p.samples[5..], &[0.0; 5]);
        let long = AudioClip::new((0..12).map(|i| i as f32).collect(), 1);
        assert_eq!(pad_or_truncate(&long, 10).samples, (0..10).map(|i| i as f32).collect::<Vec<_>>());
        assert_eq!(pad_or_truncate(&p, 10), p);
    }

    #[test]
    fn resample_identity_and_constant() {
        let clip = sine(3.0, 100, 57);
        assert_eq!(resample_linear(&clip, 100), clip);
        let c = AudioClip::new(vec![0.25; 1000], 32_000);
        let r = resample_linear(&c, 16_000);
        assert_eq!(r.samples.len(), 500);
        assert!(r.samples.iter().all(|&v| v == 0.25));
        assert_eq!(resample_linear(&c, 44_100).samples.len(), 1378);
    }

    #[test]
    fn too_short_clip_rejected() {
        let cfg = FrontendConfig::default();
        assert!(matches!(stft_power(&[0.0; 100], &cfg), Err(AudioError::TooShort { .. })));
    }

    #[test]
    fn normalization_inverts() {
        let cfg = FrontendConfig::default();
        for x in [-100.0, -18.0, 0.0, 37.5] {
            assert!((cfg.denormalize(cfg.normalize(x)) - x).abs() < 1e-6);
        }
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let clip = AudioClip::new(vec![0.5, -0.25, 0.0, 0.999, -1.0], 32_000);
        write_wav_i16(&path, &clip).unwrap();
        let back = load_wav(&path, 32_000, false).unwrap();
        for (a, b) in clip.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
        assert_eq!(back.samples[0], 0.5);
        let err = load_wav(&path, 16_000, false).unwrap_err();
        assert!(err.to_string().contains("sample-rate mismatch"));
        assert_eq!(load_wav(&path, 16_000, true).unwrap().samples.len(), 3);
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 32_000, bits_per_sample: 32, sample_format: hound::SampleFormat::Float };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for v in [0.2f32, 0.4, -0.5, 0.5] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.samples.len(), 2);
        assert!((clip.samples[0] - 0.3).abs() < 1e-7);
        assert_eq!(clip.samples[1], 0.0);
    }

    #[test]
    fn unsupported_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.wav");
        let spec = hound::WavSpec { channels: 1, sample_rate: 32_000, bits_per_sample: 8, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(AudioError::Unsupported { .. })));
        let bad = dir.path().join("bad.wav");
        std::fs::write(&bad, b"RIFF0000WAVEjunk").unwrap();
        assert!(matches!(read_wav(&bad), Err(AudioError::Malformed { .. })));
        assert!(matches!(read_wav(&dir.path().join("none.wav")), Err(AudioError::Io { .. })));
    }
}
