//! Dataset ingestion and log-mel filterbank features.
//!
//! Handles Fluent Speech Commands style CSV manifests, maps
//! `(action, object, location)` slot triples to dense intent ids, and turns
//! 16 kHz waveforms into `[n_mels × n_frames]` log filterbank energies. Feature
//! matrices are cached on disk, one blob per utterance.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CilError, Result};
use crate::scenario::{Sample, SplitSamples};

const REQUIRED_COLUMNS: [&str; 5] = ["path", "action", "object", "location", "transcription"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub audio_path: String,
    pub action: String,
    pub object: String,
    pub location: String,
    pub transcription: String,
}

impl ManifestRow {
    pub fn intent(&self) -> (String, String, String) {
        (
            self.action.clone(),
            self.object.clone(),
            self.location.clone(),
        )
    }
}

/// Reads a manifest with a header row. Every required column must exist and
/// every row must carry a non-empty path and slot triple.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| CilError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = reader.headers()?.clone();
    let mut columns = [0usize; 5];
    for (slot, name) in columns.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CilError::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("missing required column `{name}`"),
            })?;
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let mut fields: [String; 5] = Default::default();
        for ((field, &col), name) in fields.iter_mut().zip(&columns).zip(REQUIRED_COLUMNS) {
            let value = record.get(col).map(str::trim).unwrap_or("");
            if value.is_empty() && name != "transcription" {
                return Err(CilError::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("row is missing `{name}`"),
                });
            }
            *field = value.to_string();
        }
        let [audio_path, action, object, location, transcription] = fields;
        rows.push(ManifestRow {
            audio_path,
            action,
            object,
            location,
            transcription,
        });
    }
    Ok(rows)
}

/// Frozen map from intent triples to dense ids in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRegistry {
    ids: BTreeMap<(String, String, String), usize>,
}

impl LabelRegistry {
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a ManifestRow>) -> Self {
        let triples: BTreeSet<_> = rows.into_iter().map(ManifestRow::intent).collect();
        let ids = triples
            .into_iter()
            .enumerate()
            .map(|(id, triple)| (triple, id))
            .collect();
        LabelRegistry { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.ids
            .keys()
            .map(|(a, o, l)| format!("{a}_{o}_{l}"))
            .collect()
    }
}

pub fn intent_label(row: &ManifestRow, registry: &LabelRegistry) -> Result<usize> {
    registry.ids.get(&row.intent()).copied().ok_or_else(|| {
        CilError::Data(format!(
            "intent ({}, {}, {}) is not in the label registry",
            row.action, row.object, row.location
        ))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 40,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn n_fft(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    pub fn validate(&self) -> Result<()> {
        let (win, hop) = (self.window_samples(), self.hop_samples());
        if hop == 0 || win <= hop {
            return Err(CilError::Config(format!(
                "need window > hop > 0, got window={win} hop={hop} samples"
            )));
        }
        if self.n_mels == 0 || !(self.log_floor > 0.0) {
            return Err(CilError::Config(
                "n_mels and log_floor must be positive".into(),
            ));
        }
        Ok(())
    }

    fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))[..16].to_string()
    }
}

/// Frames produced for `n_samples` of audio; 0 when shorter than one window.
pub fn n_frames(n_samples: usize, cfg: &FrontendConfig) -> usize {
    match n_samples.checked_sub(cfg.window_samples()) {
        Some(rest) => 1 + rest / cfg.hop_samples(),
        None => 0,
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over the `n_fft / 2 + 1` power-spectrum bins,
/// spanning 0 Hz to Nyquist. Row `m` is filter `m`.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Array2<f64> {
    let n_bins = cfg.n_fft() / 2 + 1;
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft() as f64;
    Array2::from_shape_fn((cfg.n_mels, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let rise = (f - lo) / (mid - lo);
        let fall = (hi - f) / (hi - mid);
        rise.min(fall).max(0.0)
    })
}

/// Log-mel filterbank energies, `[n_mels × n_frames]`.
///
/// Frames are Hamming-windowed and zero-padded to the next power of two;
/// energies below `log_floor` are clamped before the natural log.
pub fn logmel(waveform: &[f64], cfg: &FrontendConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let win = cfg.window_samples();
    if waveform.len() < win {
        return Err(CilError::Data(format!(
            "waveform of {} samples is shorter than one {win}-sample window",
            waveform.len()
        )));
    }
    let hop = cfg.hop_samples();
    let n_fft = cfg.n_fft();
    let frames = n_frames(waveform.len(), cfg);
    let filters = mel_filterbank(cfg);
    let window: Vec<f64> = (0..win)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (win - 1) as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(n_fft);

    let mut out = Array2::zeros((cfg.n_mels, frames));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    for f in 0..frames {
        let chunk = &waveform[f * hop..f * hop + win];
        for (slot, (x, w)) in buf.iter_mut().zip(chunk.iter().zip(&window)) {
            *slot = Complex::new(x * w, 0.0);
        }
        buf[win..].fill(Complex::new(0.0, 0.0));
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let energy: f64 = filters.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            out[[m, f]] = energy.max(cfg.log_floor).ln();
        }
    }
    Ok(out)
}

/// Reads a mono WAV file at the configured sample rate as samples in [-1, 1].
pub fn read_wav(path: impl AsRef<Path>, cfg: &FrontendConfig) -> Result<Vec<f64>> {
    let mut reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.sample_rate != cfg.sample_rate || spec.channels != 1 {
        return Err(CilError::Data(format!(
            "{}: expected mono {} Hz, found {} channel(s) at {} Hz",
            path.as_ref().display(),
            cfg.sample_rate,
            spec.channels,
            spec.sample_rate
        )));
    }
    let samples = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<Vec<_>, _>>()?
        }
    };
    Ok(samples)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes a feature matrix as `{n_mels: u32, n_frames: u32}` followed by
/// the row-major little-endian f32 payload.
pub fn encode_feature_blob(features: &Array2<f32>) -> Vec<u8> {
    let (rows, cols) = features.dim();
    let mut out = Vec::with_capacity(8 + 4 * rows * cols);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in features.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_feature_blob(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < 8 {
        return Err(CilError::Data("feature blob shorter than its header".into()));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload = &bytes[8..];
    if payload.len() != 4 * rows * cols {
        return Err(CilError::Data(format!(
            "feature blob holds {} payload bytes, header says {rows}x{cols}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| CilError::Shape(e.to_string()))
}

/// On-disk feature cache keyed by (audio content hash, frontend config hash).
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| CilError::io(&dir, e))?;
        Ok(FeatureCache { dir })
    }

    pub fn key(audio_bytes: &[u8], cfg: &FrontendConfig) -> String {
        format!("{}-{}", hex(&Sha256::digest(audio_bytes)), cfg.digest())
    }

    fn blob_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.feat"))
    }

    pub fn get(&self, key: &str) -> Result<Option<Array2<f32>>> {
        let path = self.blob_path(key);
        match fs::read(&path) {
            Ok(bytes) => decode_feature_blob(&bytes).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(CilError::io(path, e)),
        }
    }

    /// Writes through a temporary file and a rename, so concurrent writers of
    /// the same key never leave a torn blob behind.
    pub fn put(&self, key: &str, features: &Array2<f32>) -> Result<()> {
        let path = self.blob_path(key);
        let tmp = self
            .dir
            .join(format!("{key}.{}.tmp", std::process::id()));
        let mut file = fs::File::create(&tmp).map_err(|e| CilError::io(&tmp, e))?;
        file.write_all(&encode_feature_blob(features))
            .map_err(|e| CilError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| CilError::io(&path, e))
    }

    pub fn features_for(&self, wav: impl AsRef<Path>, cfg: &FrontendConfig) -> Result<Array2<f32>> {
        let wav = wav.as_ref();
        let bytes = fs::read(wav).map_err(|e| CilError::io(wav, e))?;
        let key = Self::key(&bytes, cfg);
        if let Some(hit) = self.get(&key)? {
            return Ok(hit);
        }
        let features = logmel(&read_wav(wav, cfg)?, cfg)?.mapv(|v| v as f32);
        self.put(&key, &features)?;
        Ok(features)
    }
}

/// Loads an FSC-layout dataset: `data/{train,valid,test}_data.csv` under
/// `root`, with audio paths relative to `root`.
pub fn load_fsc(
    root: impl AsRef<Path>,
    cfg: &FrontendConfig,
    cache: &FeatureCache,
) -> Result<(SplitSamples, LabelRegistry)> {
    let root = root.as_ref();
    let data = root.join("data");
    let train = load_manifest(data.join("train_data.csv"))?;
    let valid = load_manifest(data.join("valid_data.csv"))?;
    let test = load_manifest(data.join("test_data.csv"))?;
    let registry = LabelRegistry::from_rows(train.iter().chain(&valid).chain(&test));

    let to_samples = |rows: &[ManifestRow]| -> Result<Vec<Sample>> {
        rows.iter()
            .map(|row| {
                let features = cache.features_for(root.join(&row.audio_path), cfg)?;
                Ok(Sample::new(
                    row.audio_path.clone(),
                    features,
                    intent_label(row, &registry)?,
                ))
            })
            .collect()
    };
    let split = SplitSamples {
        train: to_samples(&train)?,
        val: to_samples(&valid)?,
        test: to_samples(&test)?,
    };
    Ok((split, registry))
}
