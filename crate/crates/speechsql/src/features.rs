//! Acoustic frontend: log-mel energy extraction from waveforms, length
//! normalization, and a deterministic pseudo-speech synthesizer that maps
//! token sequences to feature blocks so experiments need no TTS system.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Analysis window length in samples (~46 ms at 16 kHz).
pub const FRAME_LEN: usize = 1024;
/// Hop between successive windows in samples.
pub const FRAME_HOP: usize = 512;
/// Number of mel bands per frame.
pub const N_MELS: usize = 96;
/// Log floor added to band energies before taking the log.
pub const LOG_EPS: f64 = 1e-10;

const FEATURE_MAGIC: &[u8; 5] = b"SQLF1";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("waveform shorter than one analysis window ({got} < {min} samples)")]
    InputTooShort { got: usize, min: usize },
    #[error("empty token sequence")]
    EmptyInput,
    #[error("bad feature file: {0}")]
    BadFeatureFile(String),
    #[error("bad wav file: {0}")]
    BadWav(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A mono PCM recording with samples in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0);
        Self {
            samples,
            sample_rate,
        }
    }

    /// Read a 16-bit mono PCM WAV file.
    pub fn read_wav(path: &Path) -> Result<Self, FeatureError> {
        let reader =
            hound::WavReader::open(path).map_err(|e| FeatureError::BadWav(e.to_string()))?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 {
            return Err(FeatureError::BadWav(format!(
                "expected 16-bit mono PCM, got {} ch / {} bits",
                spec.channels, spec.bits_per_sample
            )));
        }
        let samples: Result<Vec<i16>, _> = reader.into_samples().collect();
        let samples = samples.map_err(|e| FeatureError::BadWav(e.to_string()))?;
        Ok(Self {
            samples: samples.iter().map(|&s| s as f64 / 32768.0).collect(),
            sample_rate: spec.sample_rate,
        })
    }

    /// Write a 16-bit mono PCM WAV file (values clamped to `[-1, 1]`).
    pub fn write_wav(&self, path: &Path) -> Result<(), FeatureError> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer =
            hound::WavWriter::create(path, spec).map_err(|e| FeatureError::BadWav(e.to_string()))?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer
                .write_sample(v)
                .map_err(|e| FeatureError::BadWav(e.to_string()))?;
        }
        writer
            .finalize()
            .map_err(|e| FeatureError::BadWav(e.to_string()))?;
        Ok(())
    }
}

/// A `(frames, 96)` matrix of log-scaled mel-band energies.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechFeatures {
    pub data: Array2<f64>,
}

impl SpeechFeatures {
    pub fn new(data: Array2<f64>) -> Self {
        assert_eq!(data.ncols(), N_MELS, "features must have {N_MELS} columns");
        assert!(data.nrows() >= 1);
        Self { data }
    }

    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    /// Serialize as magic "SQLF1", u32 rows, u32 cols, then row-major f32 LE.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), FeatureError> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&(self.data.nrows() as u32).to_le_bytes())?;
        w.write_all(&(self.data.ncols() as u32).to_le_bytes())?;
        for &v in self.data.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, FeatureError> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(FeatureError::BadFeatureFile("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rows = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let cols = u32::from_le_bytes(b4) as usize;
        if cols != N_MELS {
            return Err(FeatureError::BadFeatureFile(format!(
                "expected {N_MELS} columns, file has {cols}"
            )));
        }
        if rows == 0 {
            return Err(FeatureError::BadFeatureFile("zero rows".into()));
        }
        let mut data = Array2::<f64>::zeros((rows, cols));
        for i in 0..rows {
            for j in 0..cols {
                r.read_exact(&mut b4)?;
                let v = f32::from_le_bytes(b4) as f64;
                if !v.is_finite() {
                    return Err(FeatureError::BadFeatureFile("non-finite entry".into()));
                }
                data[[i, j]] = v;
            }
        }
        Ok(Self { data })
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

/// Configuration for the deterministic token-to-feature synthesizer.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PseudoTtsConfig {
    pub frames_per_token: usize,
    pub seed: u64,
    pub amplitude_range: (f64, f64),
}

impl Default for PseudoTtsConfig {
    fn default() -> Self {
        Self {
            frames_per_token: 4,
            seed: 0,
            amplitude_range: (-4.0, 4.0),
        }
    }
}

/// Number of frames produced by a waveform of `n` samples (needs `n >= 1024`).
pub fn frame_count(n_samples: usize) -> usize {
    (n_samples - FRAME_LEN) / FRAME_HOP + 1
}

/// HTK mel scale.
fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over FFT bins: `(N_MELS, FRAME_LEN/2 + 1)`.
fn mel_filterbank(sample_rate: u32) -> Array2<f64> {
    let n_bins = FRAME_LEN / 2 + 1;
    let f_max = sample_rate as f64 / 2.0;
    let m_max = hz_to_mel(f_max);
    // Band edges: N_MELS + 2 points equally spaced on the mel axis from 0 Hz.
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(m_max * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / FRAME_LEN as f64;
    let mut fb = Array2::<f64>::zeros((N_MELS, n_bins));
    for m in 0..N_MELS {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            };
            if w > 0.0 {
                fb[[m, b]] = w;
            }
        }
    }
    fb
}

fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Extract `(frames, 96)` log mel-band energies: 1024-sample Hamming windows
/// with hop 512, power spectrum, triangular mel filters over 0..sr/2,
/// then `ln(energy + 1e-10)`. Optional per-utterance mean centering.
pub fn extract_logmel(w: &Waveform, mean_center: bool) -> Result<SpeechFeatures, FeatureError> {
    let n = w.samples.len();
    if n < FRAME_LEN {
        return Err(FeatureError::InputTooShort {
            got: n,
            min: FRAME_LEN,
        });
    }
    let n_frames = frame_count(n);
    let window = hamming(FRAME_LEN);
    let fb = mel_filterbank(w.sample_rate);
    let n_bins = FRAME_LEN / 2 + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(FRAME_LEN);
    let mut out = Array2::<f64>::zeros((n_frames, N_MELS));
    let mut buf = vec![Complex::new(0.0, 0.0); FRAME_LEN];
    for t in 0..n_frames {
        let start = t * FRAME_HOP;
        for i in 0..FRAME_LEN {
            buf[i] = Complex::new(w.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        for m in 0..N_MELS {
            let mut e = 0.0;
            for b in 0..n_bins {
                e += fb[[m, b]] * power[b];
            }
            out[[t, m]] = (e + LOG_EPS).ln();
        }
    }
    if mean_center {
        let mu = out.mean().unwrap();
        out -= mu;
    }
    Ok(SpeechFeatures::new(out))
}

/// Pad with zero rows or select rows uniformly so the output has exactly
/// `target_len` frames. `target_len == current` is the identity.
pub fn pad_or_resample(f: &SpeechFeatures, target_len: usize) -> SpeechFeatures {
    assert!(target_len >= 1);
    let l = f.n_frames();
    if l == target_len {
        return f.clone();
    }
    let mut out = Array2::<f64>::zeros((target_len, N_MELS));
    if l < target_len {
        out.slice_mut(ndarray::s![..l, ..]).assign(&f.data);
    } else {
        for i in 0..target_len {
            let src = if target_len == 1 {
                0
            } else {
                ((i * (l - 1)) as f64 / (target_len - 1) as f64).round() as usize
            };
            out.row_mut(i).assign(&f.data.row(src));
        }
    }
    SpeechFeatures::new(out)
}

/// Stable 64-bit FNV-1a hash; the process-independent token fingerprint.
pub fn token_hash(token: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Synthesize pseudo-speech features: each token becomes a fixed block of
/// `frames_per_token` rows that depends only on `(hash(token), seed)`, so
/// concatenation over tokens is exact and collisions are negligible.
///
/// A token's rows all carry the same formant-like pattern: most bands sit at
/// the low end of `amplitude_range` while a token-specific set of 6..=12
/// bands is excited towards the high end, which keeps tokens separable after
/// convolution and mel pooling.
pub fn synth_pseudo_speech(
    tokens: &[String],
    cfg: &PseudoTtsConfig,
) -> Result<SpeechFeatures, FeatureError> {
    if tokens.is_empty() {
        return Err(FeatureError::EmptyInput);
    }
    assert!(cfg.frames_per_token >= 1);
    let (lo, hi) = cfg.amplitude_range;
    assert!(hi > lo);
    let rows = tokens.len() * cfg.frames_per_token;
    let mut out = Array2::<f64>::zeros((rows, N_MELS));
    for (k, tok) in tokens.iter().enumerate() {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&token_hash(tok).to_le_bytes());
        seed[8..16].copy_from_slice(&cfg.seed.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut pattern = vec![0.0; N_MELS];
        let span = hi - lo;
        for p in pattern.iter_mut() {
            *p = lo + rng.gen_range(0.0..0.15) * span;
        }
        let n_bands = rng.gen_range(6..=12);
        for _ in 0..n_bands {
            let band = rng.gen_range(0..N_MELS);
            pattern[band] = lo + rng.gen_range(0.7..1.0) * span;
        }
        for r in 0..cfg.frames_per_token {
            for m in 0..N_MELS {
                out[[k * cfg.frames_per_token + r, m]] = pattern[m];
            }
        }
    }
    Ok(SpeechFeatures::new(out))
}
