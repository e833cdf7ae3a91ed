//! Dataset manifests and the synthetic tagging dataset.
//!
//! A manifest is a CSV file with header `path,labels`; labels are
//! semicolon-separated indices into a vocabulary file holding one class
//! name per line. Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::audio::{self, AudioClip, AudioError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{detail} at row {row}")]
    Row { row: usize, detail: String },
    #[error("manifest header must be 'path,labels', got '{0}'")]
    Header(String),
    #[error("label vocabulary is empty")]
    EmptyVocabulary,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub path: String,
    /// Sorted, unique.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<Entry>,
    pub vocabulary: Vec<String>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &Entry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Multi-hot target row.
    pub fn target(&self, entry: &Entry) -> Vec<f32> {
        let mut t = vec![0.0; self.num_classes()];
        for &l in &entry.labels {
            t[l] = 1.0;
        }
        t
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            let row = i + 1;
            if !seen.insert(e.path.as_str()) {
                return Err(DatasetError::Row { row, detail: format!("duplicate path '{}'", e.path) });
            }
            if let Some(&l) = e.labels.iter().find(|&&l| l >= self.num_classes()) {
                return Err(DatasetError::Row { row, detail: format!("label index {l} out of range") });
            }
        }
        Ok(())
    }

    pub fn parse(csv_text: &str, vocabulary: Vec<String>, base_dir: PathBuf) -> Result<Self, DatasetError> {
        if vocabulary.is_empty() {
            return Err(DatasetError::EmptyVocabulary);
        }
        let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(csv_text.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if header != ["path", "labels"] {
            return Err(DatasetError::Header(header.join(",")));
        }
        let mut manifest = Manifest { entries: Vec::new(), vocabulary, base_dir };
        let mut seen = HashSet::new();
        for (i, record) in reader.records().enumerate() {
            let row = i + 1;
            let record = record.map_err(|e| DatasetError::Row { row, detail: format!("malformed row ({e})") })?;
            if record.len() != 2 {
                return Err(DatasetError::Row { row, detail: format!("malformed row: expected 2 fields, got {}", record.len()) });
            }
            let path = record[0].trim().to_string();
            if path.is_empty() {
                return Err(DatasetError::Row { row, detail: "malformed row: empty path".into() });
            }
            if !seen.insert(path.clone()) {
                return Err(DatasetError::Row { row, detail: format!("duplicate path '{path}'") });
            }
            let mut labels = Vec::new();
            for item in record[1].split(';').map(str::trim).filter(|s| !s.is_empty()) {
                let l: usize = item
                    .parse()
                    .map_err(|_| DatasetError::Row { row, detail: format!("malformed row: bad label '{item}'") })?;
                if l >= manifest.num_classes() {
                    return Err(DatasetError::Row { row, detail: "label index out of range".into() });
                }
                labels.push(l);
            }
            labels.sort_unstable();
            labels.dedup();
            manifest.entries.push(Entry { path, labels });
        }
        Ok(manifest)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,labels\n");
        for e in &self.entries {
            let labels: Vec<String> = e.labels.iter().map(usize::to_string).collect();
            let path = if e.path.contains([',', '"', '\n']) { format!("\"{}\"", e.path.replace('"', "\"\"")) } else { e.path.clone() };
            out.push_str(&format!("{path},{}\n", labels.join(";")));
        }
        out
    }

    /// Writes the manifest CSV and the vocabulary file.
    pub fn save(&self, csv_path: &Path, labels_path: &Path) -> Result<(), DatasetError> {
        fs::write(csv_path, self.to_csv()).map_err(io_err(csv_path))?;
        let mut vocab = self.vocabulary.join("\n");
        vocab.push('\n');
        fs::write(labels_path, vocab).map_err(io_err(labels_path))
    }

    pub fn load_clip(&self, entry: &Entry, sample_rate: u32, resample: bool) -> Result<AudioClip, DatasetError> {
        Ok(audio::load_wav(&self.resolve(entry), sample_rate, resample)?)
    }
}

pub fn load_vocabulary(path: &Path) -> Result<Vec<String>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let vocab: Vec<String> = text.lines().map(|l| l.trim_end().to_string()).filter(|l| !l.is_empty()).collect();
    if vocab.is_empty() {
        return Err(DatasetError::EmptyVocabulary);
    }
    Ok(vocab)
}

pub fn load_manifest(csv_path: &Path, labels_path: &Path) -> Result<Manifest, DatasetError> {
    let vocabulary = load_vocabulary(labels_path)?;
    let text = fs::read_to_string(csv_path).map_err(io_err(csv_path))?;
    let base = csv_path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::parse(&text, vocabulary, base)
}

pub const MAX_SYNTH_CLASSES: usize = 16;

/// Per-class signal of the synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Signature {
    /// Sine at `freq`.
    Tone { freq: f64 },
    /// Exponential sweep from `f0` to `f1` over the clip.
    Chirp { f0: f64, f1: f64 },
}

impl Signature {
    /// Classes 0..=12 are tones at 200·2^(k/2) Hz (up to 12.8 kHz); higher
    /// classes are sweeps in disjoint octave bands.
    pub fn for_class(k: usize) -> Self {
        if k <= 12 {
            Signature::Tone { freq: 200.0 * 2f64.powf(k as f64 / 2.0) }
        } else {
            let lo = 250.0 * 2f64.powi(2 * (k as i32 - 13));
            Signature::Chirp { f0: lo, f1: 2.0 * lo }
        }
    }

    /// Frequency carrying most of the energy (the sweep's mid point for chirps).
    pub fn dominant_freq(&self) -> f64 {
        match *self {
            Signature::Tone { freq } => freq,
            Signature::Chirp { f0, f1 } => (f0 * f1).sqrt(),
        }
    }

    pub fn name(&self, k: usize) -> String {
        match *self {
            Signature::Tone { freq } => format!("class_{k:02}_tone_{freq:.0}hz"),
            Signature::Chirp { f0, f1 } => format!("class_{k:02}_chirp_{f0:.0}_{f1:.0}hz"),
        }
    }

    fn render(&self, out: &mut [f64], sample_rate: u32, amp: f64, phase: f64) {
        let sr = sample_rate as f64;
        let dur = out.len() as f64 / sr;
        for (i, o) in out.iter_mut().enumerate() {
            let t = i as f64 / sr;
            *o += amp * match *self {
                Signature::Tone { freq } => (2.0 * PI * freq * t + phase).sin(),
                Signature::Chirp { f0, f1 } => {
                    let k = (f1 / f0).ln() / dur;
                    (2.0 * PI * f0 * ((k * t).exp() - 1.0) / k + phase).sin()
                }
            };
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_clips: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub duration: f64,
    pub sample_rate: u32,
    /// Inclusive range for the number of classes mixed into one clip.
    pub mix: (usize, usize),
    pub snr_db: (f64, f64),
    /// Peak amplitude after scaling.
    pub peak: f64,
}

/// Default clip peak (about −46 dBFS). At this level the noise floor sits
/// below the frontend's normalization mean, so the background of a
/// normalized spectrogram is not a large constant offset; at full scale
/// the stem's layer norm maps almost every position to the same vector
/// and the toy models fail to learn.
pub const DEFAULT_SYNTH_PEAK: f64 = 0.005;

impl SynthConfig {
    pub fn new(n_clips: usize, n_classes: usize, seed: u64) -> Self {
        Self { n_clips, n_classes, seed, duration: 10.0, sample_rate: 32_000, mix: (1, 3), snr_db: (5.0, 20.0), peak: DEFAULT_SYNTH_PEAK }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n_classes == 0 || self.n_classes > MAX_SYNTH_CLASSES {
            return Err(DatasetError::Invalid(format!("n_classes must be in 1..={MAX_SYNTH_CLASSES}, got {}", self.n_classes)));
        }
        if self.mix.0 == 0 || self.mix.0 > self.mix.1 {
            return Err(DatasetError::Invalid(format!("invalid mix range {:?}", self.mix)));
        }
        if !(self.duration > 0.0) || self.sample_rate == 0 || !(self.peak > 0.0 && self.peak <= 1.0) {
            return Err(DatasetError::Invalid("duration and sample rate must be positive and peak in (0, 1]".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let top = (0..self.n_classes).map(|k| match Signature::for_class(k) {
            Signature::Tone { freq } => freq,
            Signature::Chirp { f1, .. } => f1,
        });
        if top.fold(0.0, f64::max) >= nyquist {
            return Err(DatasetError::Invalid(format!("class signatures exceed the {nyquist} Hz Nyquist limit")));
        }
        Ok(())
    }
}

/// RNG stream for one clip, independent of generation order.
pub fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Renders clip `index`: 1–3 distinct classes at random amplitude and
/// phase plus white noise at an SNR drawn from `cfg.snr_db`, scaled to
/// `cfg.peak`. Returns the pre-quantization clip and its sorted labels.
pub fn synth_clip(cfg: &SynthConfig, index: usize) -> (AudioClip, Vec<usize>) {
    let mut rng = clip_rng(cfg.seed, index);
    let len = (cfg.duration * cfg.sample_rate as f64).round() as usize;
    let max_mix = cfg.mix.1.min(cfg.n_classes);
    let count = rng.gen_range(cfg.mix.0.min(max_mix)..=max_mix);
    let labels = {
        let mut l = rand::seq::index::sample(&mut rng, cfg.n_classes, count).into_vec();
        l.sort_unstable();
        l
    };
    let mut signal = vec![0.0f64; len];
    for &k in &labels {
        let amp = rng.gen_range(0.5..1.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        Signature::for_class(k).render(&mut signal, cfg.sample_rate, amp, phase);
    }
    let power = signal.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64;
    let snr = rng.gen_range(cfg.snr_db.0..cfg.snr_db.1);
    let noise_std = (power / 10f64.powf(snr / 10.0)).sqrt();
    for s in signal.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *s += noise_std * n;
    }
    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { cfg.peak / peak } else { 0.0 };
    let samples = signal.iter().map(|v| (v * gain) as f32).collect();
    (AudioClip::new(samples, cfg.sample_rate), labels)
}

pub fn synth_vocabulary(n_classes: usize) -> Vec<String> {
    (0..n_classes).map(|k| Signature::for_class(k).name(k)).collect()
}

/// Writes `clips/NNNNN.wav`, `manifest.csv` and `labels.txt` under
/// `out_dir`. Output is bitwise identical for a given config.
pub fn gen_synthetic(out_dir: &Path, cfg: &SynthConfig) -> Result<Manifest, DatasetError> {
    cfg.validate()?;
    let clips = out_dir.join("clips");
    fs::create_dir_all(&clips).map_err(io_err(&clips))?;
    let entries = (0..cfg.n_clips)
        .into_par_iter()
        .map(|i| {
            let (clip, labels) = synth_clip(cfg, i);
            let rel = format!("clips/{i:05}.wav");
            audio::write_wav_i16(&out_dir.join(&rel), &clip)?;
            Ok(Entry { path: rel, labels })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let manifest = Manifest { entries, vocabulary: synth_vocabulary(cfg.n_classes), base_dir: out_dir.to_path_buf() };
    manifest.save(&out_dir.join("manifest.csv"), &out_dir.join("labels.txt"))?;
    Ok(manifest)
}
