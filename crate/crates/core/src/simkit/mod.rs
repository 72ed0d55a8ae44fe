//! Synthetic multi-channel data generation and audio/manifest I/O.
//!
//! Sources are spatialized with an anechoic far-field model (fractional
//! delays only, no room impulse responses) so the speech covariance stays
//! rank-1 and beamforming oracles are sharp. Every simulated mixture
//! satisfies mixture = clean + noise sample-for-sample.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::MultiChannelWaveform;
use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Microphone positions in meters on the horizontal plane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayGeometry {
    /// (x, y) per microphone; the first entry is the reference channel.
    pub positions: Vec<(f64, f64)>,
    pub speed_of_sound: f64,
}

impl Default for ArrayGeometry {
    /// 5 mics on a 0.25 m horizontal line at 0.05 m spacing.
    fn default() -> Self {
        ArrayGeometry {
            positions: (0..5).map(|i| (i as f64 * 0.05, 0.0)).collect(),
            speed_of_sound: SPEED_OF_SOUND,
        }
    }
}

impl ArrayGeometry {
    pub fn channels(&self) -> usize {
        self.positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::InvalidConfig("geometry has no microphones".into()));
        }
        if self.speed_of_sound <= 0.0 {
            return Err(Error::InvalidConfig("speed of sound must be > 0".into()));
        }
        for i in 0..self.positions.len() {
            for j in i + 1..self.positions.len() {
                let (a, b) = (self.positions[i], self.positions[j]);
                if a == b {
                    return Err(Error::InvalidConfig(format!(
                        "duplicate microphone positions {i} and {j}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Propagation delay of each channel relative to the reference, in
    /// seconds, for a far-field source at the given azimuth (degrees,
    /// 0 = +x axis).
    pub fn delays(&self, azimuth_deg: f64) -> Vec<f64> {
        let az = azimuth_deg.to_radians();
        let (ux, uy) = (az.cos(), az.sin());
        let (rx, ry) = self.positions[0];
        self.positions
            .iter()
            .map(|&(x, y)| (ux * (x - rx) + uy * (y - ry)) / self.speed_of_sound)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// fractional delay

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let mut k = 1.0;
    loop {
        let r = x / (2.0 * k);
        term *= r * r;
        sum += term;
        if term < 1e-16 * sum {
            return sum;
        }
        k += 1.0;
    }
}

const DELAY_TAPS: usize = 32;
const DELAY_CENTER: f64 = 16.0;
const KAISER_BETA: f64 = 8.6;

/// Delays a signal by `delay_samples` (may be fractional and negative,
/// |delay| < 12) with a 32-tap Kaiser-windowed sinc filter. Output has the
/// same length; the filter's bulk delay is compensated.
pub fn fractional_delay(x: &Array1<f64>, delay_samples: f64) -> Array1<f64> {
    assert!(
        delay_samples.abs() < DELAY_CENTER - 4.0,
        "delay {delay_samples} outside the filter design range"
    );
    let d = DELAY_CENTER + delay_samples;
    let denom = bessel_i0(KAISER_BETA);
    let mut h = [0.0f64; DELAY_TAPS];
    let mut dc = 0.0;
    for (k, tap) in h.iter_mut().enumerate() {
        let t = k as f64 - d;
        if t.abs() >= DELAY_CENTER {
            continue;
        }
        let sinc = if t == 0.0 { 1.0 } else { (PI * t).sin() / (PI * t) };
        let w = bessel_i0(KAISER_BETA * (1.0 - (t / DELAY_CENTER).powi(2)).sqrt()) / denom;
        *tap = sinc * w;
        dc += *tap;
    }
    for tap in h.iter_mut() {
        *tap /= dc;
    }
    let n = x.len();
    let mut y = Array1::<f64>::zeros(n);
    let center = DELAY_CENTER as isize;
    for out in 0..n as isize {
        let mut acc = 0.0;
        for (k, tap) in h.iter().enumerate() {
            let idx = out - k as isize + center;
            if idx >= 0 && (idx as usize) < n {
                acc += tap * x[idx as usize];
            }
        }
        y[out as usize] = acc;
    }
    y
}

/// Far-field anechoic spatialization: channel i is the source delayed by
/// its geometric propagation delay; the reference channel delay is zero.
pub fn spatialize(
    source: &Array1<f64>,
    geometry: &ArrayGeometry,
    azimuth_deg: f64,
    sample_rate: u32,
) -> Result<MultiChannelWaveform> {
    geometry.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyInput);
    }
    let delays = geometry.delays(azimuth_deg);
    let c = geometry.channels();
    let mut samples = Array2::<f64>::zeros((c, source.len()));
    for (i, tau) in delays.iter().enumerate() {
        let d = tau * sample_rate as f64;
        // snap numerically-zero delays (e.g. exact broadside) to the identity
        let row = if d.abs() < 1e-9 {
            source.clone()
        } else {
            fractional_delay(source, d)
        };
        samples.row_mut(i).assign(&row);
    }
    MultiChannelWaveform::new(samples, sample_rate)
}

// ---------------------------------------------------------------------------
// noise

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
    RecordedFile(PathBuf),
    Diffuse,
    /// No noise: the mixture equals the spatialized source exactly.
    None,
}

fn white_noise(len: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    // Box-Muller pairs
    let mut out = Array1::<f64>::zeros(len);
    let mut i = 0;
    while i < len {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        out[i] = r * (2.0 * PI * u2).cos();
        if i + 1 < len {
            out[i + 1] = r * (2.0 * PI * u2).sin();
        }
        i += 2;
    }
    out
}

fn pink_noise(len: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    // three-pole 1/f approximation driven by white noise
    let w = white_noise(len, rng);
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let mut out = Array1::<f64>::zeros(len);
    for i in 0..len {
        b0 = 0.99765 * b0 + w[i] * 0.0990460;
        b1 = 0.96300 * b1 + w[i] * 0.2965164;
        b2 = 0.57000 * b2 + w[i] * 1.0526913;
        out[i] = (b0 + b1 + b2 + w[i] * 0.1848) * 0.2;
    }
    out
}

fn generate_noise(
    kind: &NoiseKind,
    len: usize,
    geometry: &ArrayGeometry,
    sample_rate: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let c = geometry.channels();
    match kind {
        NoiseKind::None => Ok(Array2::zeros((c, len))),
        NoiseKind::Diffuse => {
            // spatially incoherent ambient field with a 1/f spectrum
            let mut out = Array2::<f64>::zeros((c, len));
            for i in 0..c {
                out.row_mut(i).assign(&pink_noise(len, rng));
            }
            Ok(out)
        }
        NoiseKind::White | NoiseKind::Pink | NoiseKind::RecordedFile(_) => {
            let mono = match kind {
                NoiseKind::White => white_noise(len, rng),
                NoiseKind::Pink => pink_noise(len, rng),
                NoiseKind::RecordedFile(path) => {
                    let wav = read_wav(path)?;
                    let src = wav.channel(0);
                    Array1::from_shape_fn(len, |i| src[i % src.len()])
                }
                _ => unreachable!(),
            };
            let azimuth = rng.gen_range(0.0..360.0);
            Ok(spatialize(&mono, geometry, azimuth, sample_rate)?.samples)
        }
    }
}

// ---------------------------------------------------------------------------
// mixing

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub source: PathBuf,
    pub noise: NoiseKind,
    /// Target SNR in dB at the reference channel (ignored for NoiseKind::None).
    pub snr_db: f64,
    pub azimuth_deg: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct MixtureOutput {
    pub mixture: MultiChannelWaveform,
    pub clean: MultiChannelWaveform,
    pub noise: MultiChannelWaveform,
    pub snr_db: f64,
}

fn mix_from_parts(
    source: &Array1<f64>,
    spec: &MixtureSpec,
    geometry: &ArrayGeometry,
    sample_rate: u32,
) -> Result<MixtureOutput> {
    if source.iter().all(|v| *v == 0.0) {
        return Err(Error::SilentSource);
    }
    let clean = spatialize(source, geometry, spec.azimuth_deg, sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noise = generate_noise(&spec.noise, source.len(), geometry, sample_rate, &mut rng)?;
    let snr_db = if spec.noise == NoiseKind::None {
        f64::INFINITY
    } else {
        if !spec.snr_db.is_finite() {
            return Err(Error::InvalidConfig("target SNR must be finite".into()));
        }
        let clean_e: f64 = clean.channel(0).iter().map(|v| v * v).sum();
        let noise_e: f64 = noise.row(0).iter().map(|v| v * v).sum();
        if noise_e == 0.0 {
            return Err(Error::InvalidConfig("generated noise is silent".into()));
        }
        let gain = (clean_e / (noise_e * 10f64.powf(spec.snr_db / 10.0))).sqrt();
        noise.mapv_inplace(|v| v * gain);
        spec.snr_db
    };
    let mixture = MultiChannelWaveform::new(&clean.samples + &noise, sample_rate)?;
    let noise = MultiChannelWaveform::new(mixture.samples.clone() - &clean.samples, sample_rate)?;
    Ok(MixtureOutput {
        mixture,
        clean,
        noise,
        snr_db,
    })
}

/// Builds one multi-channel mixture: spatialized source plus noise scaled
/// so the reference-channel SNR hits the target; mixture = clean + noise
/// holds exactly per channel.
pub fn make_mixture(spec: &MixtureSpec, geometry: &ArrayGeometry) -> Result<MixtureOutput> {
    let wav = read_wav(&spec.source)?;
    let source = wav.channel(0);
    mix_from_parts(&source, spec, geometry, wav.sample_rate)
}

// ---------------------------------------------------------------------------
// wav i/o

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

fn wav_err(offset: u64, reason: &str) -> Error {
    Error::MalformedWav {
        offset,
        reason: reason.into(),
    }
}

/// Reads a RIFF/WAVE file (PCM16 or IEEE float32). PCM16 samples are scaled
/// to [-1, 1) by dividing by 32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<MultiChannelWaveform> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return Err(wav_err(0, "missing RIFF tag"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(wav_err(8, "missing WAVE tag"));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // tag, channels, rate, bits
    let mut data: Option<(usize, usize)> = None; // offset, declared length
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if body + 16 > bytes.len() {
                    return Err(wav_err(pos as u64, "fmt chunk truncated"));
                }
                let tag = u16::from_le_bytes(bytes[body..body + 2].try_into().unwrap());
                let channels = u16::from_le_bytes(bytes[body + 2..body + 4].try_into().unwrap());
                let rate = u32::from_le_bytes(bytes[body + 4..body + 8].try_into().unwrap());
                let bits = u16::from_le_bytes(bytes[body + 14..body + 16].try_into().unwrap());
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => {
                data = Some((body, size));
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    let (tag, channels, rate, bits) = fmt.ok_or_else(|| wav_err(12, "no fmt chunk"))?;
    let (data_off, data_len) = data.ok_or_else(|| wav_err(12, "no data chunk"))?;
    if channels == 0 {
        return Err(wav_err(data_off as u64, "zero channels"));
    }
    let encoding = match (tag, bits) {
        (1, 16) => WavEncoding::Pcm16,
        (3, 32) => WavEncoding::Float32,
        _ => return Err(Error::UnsupportedWavEncoding(tag)),
    };
    if data_off + data_len > bytes.len() {
        return Err(Error::TruncatedWav);
    }
    let bytes_per = match encoding {
        WavEncoding::Pcm16 => 2,
        WavEncoding::Float32 => 4,
    };
    let frame = bytes_per * channels as usize;
    if data_len % frame != 0 {
        return Err(Error::TruncatedWav);
    }
    let frames = data_len / frame;
    let mut samples = Array2::<f64>::zeros((channels as usize, frames));
    let body = &bytes[data_off..data_off + data_len];
    for t in 0..frames {
        for c in 0..channels as usize {
            let at = (t * channels as usize + c) * bytes_per;
            samples[(c, t)] = match encoding {
                WavEncoding::Pcm16 => {
                    i16::from_le_bytes(body[at..at + 2].try_into().unwrap()) as f64 / 32768.0
                }
                WavEncoding::Float32 => {
                    f32::from_le_bytes(body[at..at + 4].try_into().unwrap()) as f64
                }
            };
        }
    }
    MultiChannelWaveform::new(samples, rate)
}

/// Writes a RIFF/WAVE file. PCM16 uses a saturating clamp to [-1, 1).
pub fn write_wav(
    path: impl AsRef<Path>,
    wave: &MultiChannelWaveform,
    encoding: WavEncoding,
) -> Result<()> {
    let path = path.as_ref();
    let (c, t) = (wave.channels(), wave.len());
    let (tag, bits): (u16, u16) = match encoding {
        WavEncoding::Pcm16 => (1, 16),
        WavEncoding::Float32 => (3, 32),
    };
    let bytes_per = bits as usize / 8;
    let data_len = c * t * bytes_per;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(c as u16).to_le_bytes());
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    let byte_rate = wave.sample_rate as usize * c * bytes_per;
    out.extend_from_slice(&(byte_rate as u32).to_le_bytes());
    out.extend_from_slice(&((c * bytes_per) as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for frame in 0..t {
        for ch in 0..c {
            let v = wave.samples[(ch, frame)];
            match encoding {
                WavEncoding::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                WavEncoding::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// synthetic sources

/// Deterministic speech-like test signal: voiced harmonic segments with a
/// gliding pitch and syllabic amplitude envelope, interleaved with short
/// noise bursts and pauses. Band-limited below ~4 kHz.
pub fn synth_speech(seconds: f64, sample_rate: u32, seed: u64) -> Array1<f64> {
    let fs = sample_rate as f64;
    let n = (seconds * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array1::<f64>::zeros(n);
    let f0_base = rng.gen_range(90.0..200.0);
    let glide = rng.gen_range(-30.0..30.0);
    let syllable_hz = rng.gen_range(2.5..4.5);
    let env_phase = rng.gen_range(0.0..2.0 * PI);
    let harmonics = 16usize;
    let amps: Vec<f64> = (1..=harmonics)
        .map(|k| rng.gen_range(0.5..1.0) / k as f64)
        .collect();
    let mut phase = vec![0.0f64; harmonics];
    let burst_gain = 0.15;
    for i in 0..n {
        let t = i as f64 / fs;
        let f0 = f0_base + glide * t;
        let env = (0.5 - 0.5 * (2.0 * PI * syllable_hz * t + env_phase).cos()).powi(2);
        let mut v = 0.0;
        for k in 0..harmonics {
            let f = f0 * (k + 1) as f64;
            if f > 3800.0 {
                break;
            }
            phase[k] += 2.0 * PI * f / fs;
            v += amps[k] * phase[k].sin();
        }
        // unvoiced fricative-like bursts in the envelope troughs
        let noise = rng.gen_range(-1.0..1.0) * burst_gain * (1.0 - env);
        out[i] = 0.3 * (env * v + noise);
    }
    out
}

/// Writes `count` synthetic source utterances into `dir` as mono float32
/// WAVs; returns the paths in generation order.
pub fn generate_sources(
    dir: impl AsRef<Path>,
    count: usize,
    seconds: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let wav = MultiChannelWaveform::from_mono(
            synth_speech(seconds, sample_rate, seed.wrapping_add(i as u64)).to_vec(),
            sample_rate,
        )?;
        let path = dir.join(format!("src_{i:04}.wav"));
        write_wav(&path, &wav, WavEncoding::Float32)?;
        paths.push(path);
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Simu,
    Real,
    Clean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utt_id: String,
    pub condition: Condition,
    pub split: String,
    /// Multi-channel mixture for simu/real; the source audio for clean.
    pub mixture: PathBuf,
    /// Per-channel clean-speech references (simu only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clean: Vec<PathBuf>,
    /// Per-channel noise references (simu only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise: Vec<PathBuf>,
    /// Transcript-surrogate target for the backend loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    /// Mixing SNR at the reference channel (simu only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == name).collect()
    }
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for record in &manifest.records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(line).map_err(|e| Error::MalformedManifest {
                line: i + 1,
                reason: e.to_string(),
            })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest);
    }
    Ok(DatasetManifest { records })
}

// ---------------------------------------------------------------------------
// dataset building

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSourcesSpec {
    pub count: usize,
    pub seconds: f64,
}

fn default_sample_rate() -> u32 {
    16000
}

fn default_snr_range() -> (f64, f64) {
    (0.0, 5.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub source_dir: PathBuf,
    pub out_dir: PathBuf,
    pub train: usize,
    pub dev: usize,
    pub eval: usize,
    /// Extra eval records generated from the same eval sources with the
    /// mismatched recipe but full references, for degradation measurements.
    #[serde(default)]
    pub eval_mismatched: usize,
    /// Of the train records, how many use the mismatched "real" recipe
    /// (no references) and how many are clean-condition records.
    #[serde(default)]
    pub train_real: usize,
    #[serde(default)]
    pub train_clean: usize,
    #[serde(default = "default_snr_range")]
    pub snr_db: (f64, f64),
    pub seed: u64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    #[serde(default)]
    pub geometry: Option<ArrayGeometry>,
    /// If set and the source directory is missing or empty, synthetic
    /// sources are generated first.
    #[serde(default)]
    pub synth_sources: Option<SynthSourcesSpec>,
}

/// Per-channel gain (dB) and delay (samples) perturbations emulating
/// real-recording channel mismatch.
fn channel_perturbations(c: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    (0..c)
        .map(|i| {
            if i == 0 {
                (1.0, 0.0) // reference channel untouched
            } else {
                let gain = 10f64.powf(rng.gen_range(-1.0..1.0) / 20.0);
                (gain, rng.gen_range(-0.5..0.5))
            }
        })
        .collect()
}

fn perturb(wave: &mut MultiChannelWaveform, perts: &[(f64, f64)]) {
    for (i, &(gain, delay)) in perts.iter().enumerate() {
        let row = wave.channel(i);
        let shifted = if delay == 0.0 {
            row
        } else {
            fractional_delay(&row, delay)
        };
        wave.samples.row_mut(i).assign(&(shifted * gain));
    }
}

struct UttPlan<'a> {
    utt_id: String,
    split: &'a str,
    condition: Condition,
    mismatched: bool,
    source: &'a Path,
}

/// Generates mixtures and a JSON-lines manifest on disk. Splits use
/// disjoint sources; each utterance draws all randomness from its own
/// generator seeded by global seed + index. The "real" recipe uses a
/// mismatched noise kind plus small per-channel gain/delay perturbations.
pub fn build_dataset(config: &DatasetConfig) -> Result<DatasetManifest> {
    let geometry = config.geometry.clone().unwrap_or_default();
    geometry.validate()?;
    if let Some(synth) = &config.synth_sources {
        let empty = !config.source_dir.is_dir()
            || fs::read_dir(&config.source_dir)
                .map_err(|e| Error::io(&config.source_dir, e))?
                .next()
                .is_none();
        if empty {
            generate_sources(
                &config.source_dir,
                synth.count,
                synth.seconds,
                config.sample_rate,
                config.seed,
            )?;
        }
    }
    let mut sources: Vec<PathBuf> = fs::read_dir(&config.source_dir)
        .map_err(|e| Error::io(&config.source_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    sources.sort();
    let need = config.train + config.dev + config.eval;
    if sources.len() < need {
        return Err(Error::InsufficientSources {
            need,
            found: sources.len(),
        });
    }
    if config.train_real + config.train_clean > config.train {
        return Err(Error::InvalidConfig(
            "train_real + train_clean exceeds train count".into(),
        ));
    }
    if config.eval_mismatched > config.eval {
        return Err(Error::InvalidConfig(
            "eval_mismatched exceeds eval count".into(),
        ));
    }

    let mut order: Vec<usize> = (0..sources.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0517);
    for i in (1..order.len()).rev() {
        order.swap(i, shuffle_rng.gen_range(0..=i));
    }

    let mut plans: Vec<UttPlan> = Vec::new();
    let mut cursor = 0usize;
    for i in 0..config.train {
        let condition = if i < config.train_real {
            Condition::Real
        } else if i < config.train_real + config.train_clean {
            Condition::Clean
        } else {
            Condition::Simu
        };
        plans.push(UttPlan {
            utt_id: format!("train_{i:04}"),
            split: "train",
            condition,
            mismatched: condition == Condition::Real,
            source: &sources[order[cursor]],
        });
        cursor += 1;
    }
    for i in 0..config.dev {
        plans.push(UttPlan {
            utt_id: format!("dev_{i:04}"),
            split: "dev",
            condition: Condition::Simu,
            mismatched: false,
            source: &sources[order[cursor]],
        });
        cursor += 1;
    }
    let eval_start = cursor;
    for i in 0..config.eval {
        plans.push(UttPlan {
            utt_id: format!("eval_{i:04}"),
            split: "eval",
            condition: Condition::Simu,
            mismatched: false,
            source: &sources[order[cursor]],
        });
        cursor += 1;
    }
    for i in 0..config.eval_mismatched {
        plans.push(UttPlan {
            utt_id: format!("eval_mm_{i:04}"),
            split: "eval_mismatched",
            condition: Condition::Simu,
            mismatched: true,
            source: &sources[order[eval_start + i]],
        });
    }

    let audio_dir = config.out_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;

    let mut records = Vec::with_capacity(plans.len());
    for (idx, plan) in plans.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(idx as u64));
        let record = match plan.condition {
            Condition::Clean => {
                let source_path = audio_dir.join(format!("{}_source.wav", plan.utt_id));
                let wav = read_wav(plan.source)?;
                write_wav(&source_path, &wav, WavEncoding::Float32)?;
                ManifestRecord {
                    utt_id: plan.utt_id.clone(),
                    condition: Condition::Clean,
                    split: plan.split.to_string(),
                    mixture: source_path.clone(),
                    clean: Vec::new(),
                    noise: Vec::new(),
                    target: Some(source_path),
                    snr_db: None,
                }
            }
            _ => {
                let wav = read_wav(plan.source)?;
                let source = wav.channel(0);
                let noise_kind = if plan.mismatched {
                    if rng.gen_bool(0.5) {
                        NoiseKind::Pink
                    } else {
                        NoiseKind::Diffuse
                    }
                } else {
                    NoiseKind::White
                };
                let spec = MixtureSpec {
                    source: plan.source.to_path_buf(),
                    noise: noise_kind,
                    snr_db: rng.gen_range(config.snr_db.0..=config.snr_db.1),
                    azimuth_deg: rng.gen_range(0.0..360.0),
                    seed: rng.gen(),
                };
                let mut out = mix_from_parts(&source, &spec, &geometry, wav.sample_rate)?;
                if plan.mismatched {
                    let perts = channel_perturbations(geometry.channels(), &mut rng);
                    perturb(&mut out.clean, &perts);
                    perturb(&mut out.noise, &perts);
                    out.mixture = MultiChannelWaveform::new(
                        &out.clean.samples + &out.noise.samples,
                        out.mixture.sample_rate,
                    )?;
                }
                let mix_path = audio_dir.join(format!("{}_mix.wav", plan.utt_id));
                write_wav(&mix_path, &out.mixture, WavEncoding::Float32)?;
                let target_path = audio_dir.join(format!("{}_target.wav", plan.utt_id));
                write_wav(
                    &target_path,
                    &MultiChannelWaveform::from_mono(source.to_vec(), wav.sample_rate)?,
                    WavEncoding::Float32,
                )?;
                let (mut clean_paths, mut noise_paths) = (Vec::new(), Vec::new());
                let mut snr = None;
                if plan.condition == Condition::Simu {
                    for c in 0..geometry.channels() {
                        let cp = audio_dir.join(format!("{}_clean_ch{}.wav", plan.utt_id, c + 1));
                        let np = audio_dir.join(format!("{}_noise_ch{}.wav", plan.utt_id, c + 1));
                        write_wav(
                            &cp,
                            &MultiChannelWaveform::from_mono(
                                out.clean.channel(c).to_vec(),
                                out.clean.sample_rate,
                            )?,
                            WavEncoding::Float32,
                        )?;
                        write_wav(
                            &np,
                            &MultiChannelWaveform::from_mono(
                                out.noise.channel(c).to_vec(),
                                out.noise.sample_rate,
                            )?,
                            WavEncoding::Float32,
                        )?;
                        clean_paths.push(cp);
                        noise_paths.push(np);
                    }
                    snr = Some(out.snr_db);
                }
                ManifestRecord {
                    utt_id: plan.utt_id.clone(),
                    condition: plan.condition,
                    split: plan.split.to_string(),
                    mixture: mix_path,
                    clean: clean_paths,
                    noise: noise_paths,
                    target: Some(target_path),
                    snr_db: snr,
                }
            }
        };
        records.push(record);
    }
    let manifest = DatasetManifest { records };
    write_manifest(config.out_dir.join("manifest.jsonl"), &manifest)?;
    Ok(manifest)
}

/// Loads a record's mixture and, when present, assembles the per-channel
/// clean/noise references into multi-channel waveforms.
pub struct LoadedExample {
    pub record: ManifestRecord,
    pub mixture: MultiChannelWaveform,
    pub clean: Option<MultiChannelWaveform>,
    pub noise: Option<MultiChannelWaveform>,
    pub target: Option<MultiChannelWaveform>,
}

pub fn load_example(record: &ManifestRecord) -> Result<LoadedExample> {
    let mixture = read_wav(&record.mixture)?;
    let stack = |paths: &[PathBuf]| -> Result<Option<MultiChannelWaveform>> {
        if paths.is_empty() {
            return Ok(None);
        }
        let mut rows = Vec::with_capacity(paths.len());
        for p in paths {
            rows.push(read_wav(p)?);
        }
        let t = rows[0].len();
        let mut samples = Array2::<f64>::zeros((rows.len(), t));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != t {
                return Err(Error::ShapeMismatch(format!(
                    "reference channel lengths differ: {} vs {}",
                    row.len(),
                    t
                )));
            }
            samples.row_mut(i).assign(&row.channel(0));
        }
        Ok(Some(MultiChannelWaveform::new(samples, rows[0].sample_rate)?))
    };
    let clean = stack(&record.clean)?;
    let noise = stack(&record.noise)?;
    let target = match &record.target {
        Some(p) => Some(read_wav(p)?),
        None => None,
    };
    Ok(LoadedExample {
        record: record.clone(),
        mixture,
        clean,
        noise,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn broadside_delays_are_zero() {
        let geom = ArrayGeometry::default();
        // mics on the x axis: azimuth 90 degrees is broadside
        let src = synth_speech(0.2, 16000, 1);
        let out = spatialize(&src, &geom, 90.0, 16000).unwrap();
        for c in 0..geom.channels() {
            let ch = out.channel(c);
            let diff = ch
                .iter()
                .zip(src.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(diff == 0.0, "channel {c} differs by {diff}");
        }
    }

    #[test]
    fn endfire_delay_matches_cross_correlation() {
        let geom = ArrayGeometry {
            positions: vec![(0.0, 0.0), (0.1, 0.0)],
            speed_of_sound: 343.0,
        };
        // smoothed broadband noise: wide correlation peak, low interpolation bias
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let white = white_noise(8000, &mut rng);
        let mut src = Array1::<f64>::zeros(8000);
        let mut acc = 0.0;
        for i in 0..8000 {
            acc = 0.75 * acc + 0.25 * white[i];
            src[i] = acc;
        }
        let mut back = 0.0;
        for i in (0..8000).rev() {
            back = 0.75 * back + 0.25 * src[i];
            src[i] = back;
        }
        let out = spatialize(&src, &geom, 0.0, 16000).unwrap();
        let expected = 0.1 / 343.0 * 16000.0; // ~4.66 samples
        let (a, b) = (out.channel(0), out.channel(1));
        let n = a.len();
        let xcorr = |lag: isize| -> f64 {
            let mut acc = 0.0;
            for i in 0..n as isize {
                let j = i - lag;
                if j >= 0 && (j as usize) < n {
                    acc += b[i as usize] * a[j as usize];
                }
            }
            acc
        };
        let mut best = 0isize;
        let mut best_v = f64::MIN;
        for lag in -10..=10isize {
            let v = xcorr(lag);
            if v > best_v {
                best_v = v;
                best = lag;
            }
        }
        // parabolic interpolation around the integer peak
        let (ym, y0, yp) = (xcorr(best - 1), xcorr(best), xcorr(best + 1));
        let frac = 0.5 * (ym - yp) / (ym - 2.0 * y0 + yp);
        let measured = best as f64 + frac;
        assert!(
            (measured - expected).abs() < 0.05,
            "measured {measured}, expected {expected}"
        );
    }

    #[test]
    fn spatialize_preserves_energy() {
        let geom = ArrayGeometry::default();
        let src = synth_speech(0.5, 16000, 3);
        let out = spatialize(&src, &geom, 30.0, 16000).unwrap();
        let src_e: f64 = src.iter().map(|v| v * v).sum();
        for c in 0..geom.channels() {
            let ch = out.channel(c);
            let e: f64 = ch.iter().map(|v| v * v).sum();
            let db = 10.0 * (e / src_e).log10();
            assert!(db.abs() < 0.1, "channel {c}: {db} dB");
        }
    }

    fn temp_source(dir: &Path, seed: u64) -> PathBuf {
        let src = synth_speech(0.4, 16000, seed);
        let path = dir.join(format!("s{seed}.wav"));
        write_wav(
            &path,
            &MultiChannelWaveform::from_mono(src.to_vec(), 16000).unwrap(),
            WavEncoding::Float32,
        )
        .unwrap();
        path
    }

    #[test]
    fn mixture_snr_and_additivity() {
        let dir = tempdir().unwrap();
        let source = temp_source(dir.path(), 4);
        let spec = MixtureSpec {
            source,
            noise: NoiseKind::White,
            snr_db: 0.0,
            azimuth_deg: 45.0,
            seed: 7,
        };
        let out = make_mixture(&spec, &ArrayGeometry::default()).unwrap();
        let ce: f64 = out.clean.channel(0).iter().map(|v| v * v).sum();
        let ne: f64 = out.noise.channel(0).iter().map(|v| v * v).sum();
        let snr = 10.0 * (ce / ne).log10();
        assert!(snr.abs() < 0.01, "reference SNR {snr} dB");
        let residual = (&out.mixture.samples - &out.clean.samples - &out.noise.samples)
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        assert_eq!(residual, 0.0);
    }

    #[test]
    fn mixture_no_noise_is_bit_exact() {
        let dir = tempdir().unwrap();
        let source = temp_source(dir.path(), 5);
        let spec = MixtureSpec {
            source,
            noise: NoiseKind::None,
            snr_db: f64::INFINITY,
            azimuth_deg: 10.0,
            seed: 1,
        };
        let out = make_mixture(&spec, &ArrayGeometry::default()).unwrap();
        assert_eq!(out.mixture.samples, out.clean.samples);
        assert!(out.snr_db.is_infinite());
    }

    #[test]
    fn mixture_deterministic() {
        let dir = tempdir().unwrap();
        let source = temp_source(dir.path(), 6);
        let spec = MixtureSpec {
            source,
            noise: NoiseKind::Pink,
            snr_db: 3.0,
            azimuth_deg: 200.0,
            seed: 42,
        };
        let a = make_mixture(&spec, &ArrayGeometry::default()).unwrap();
        let b = make_mixture(&spec, &ArrayGeometry::default()).unwrap();
        assert_eq!(a.mixture.samples, b.mixture.samples);
    }

    #[test]
    fn silent_source_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("silent.wav");
        write_wav(
            &path,
            &MultiChannelWaveform::from_mono(vec![0.0; 1000], 16000).unwrap(),
            WavEncoding::Float32,
        )
        .unwrap();
        let spec = MixtureSpec {
            source: path,
            noise: NoiseKind::White,
            snr_db: 0.0,
            azimuth_deg: 0.0,
            seed: 0,
        };
        assert!(matches!(
            make_mixture(&spec, &ArrayGeometry::default()),
            Err(Error::SilentSource)
        ));
    }

    #[test]
    fn wav_float32_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples = Array2::from_shape_fn((3, 500), |_| {
            // representable in f32 so the round trip is bit-exact
            rng.gen_range(-1.0f32..1.0) as f64
        });
        let wave = MultiChannelWaveform::new(samples, 16000).unwrap();
        write_wav(&path, &wave, WavEncoding::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16000);
        assert_eq!(back.samples, wave.samples);
    }

    #[test]
    fn pcm16_scaling_rule() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("pcm.wav");
        let wave =
            MultiChannelWaveform::from_mono(vec![-1.0, -0.5, 0.0, 0.5, 32767.0 / 32768.0], 16000)
                .unwrap();
        write_wav(&path, &wave, WavEncoding::Pcm16).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.samples[(0, 0)], -1.0); // sample -32768
        assert_eq!(back.samples[(0, 1)], -0.5);
        assert_eq!(back.samples[(0, 2)], 0.0);
        assert_eq!(back.samples[(0, 4)], 32767.0 / 32768.0);
    }

    #[test]
    fn wav_error_cases() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        fs::write(&path, b"JUNKJUNKJUNKJUNK").unwrap();
        match read_wav(&path) {
            Err(Error::MalformedWav { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }

        // valid file truncated mid-data
        let good = dir.path().join("good.wav");
        let wave =
            MultiChannelWaveform::from_mono(vec![0.1; 100], 16000).unwrap();
        write_wav(&good, &wave, WavEncoding::Float32).unwrap();
        let bytes = fs::read(&good).unwrap();
        let cut = dir.path().join("cut.wav");
        fs::write(&cut, &bytes[..bytes.len() - 37]).unwrap();
        match read_wav(&cut) {
            Err(Error::TruncatedWav) => {}
            other => panic!("{other:?}"),
        }

        // unsupported format tag (mu-law = 7)
        let mut ulaw = bytes.clone();
        ulaw[20] = 7;
        ulaw[21] = 0;
        let up = dir.path().join("ulaw.wav");
        fs::write(&up, &ulaw).unwrap();
        match read_wav(&up) {
            Err(Error::UnsupportedWavEncoding(7)) => {}
            other => panic!("{other:?}"),
        }
    }

    fn tiny_config(dir: &Path) -> DatasetConfig {
        DatasetConfig {
            source_dir: dir.join("sources"),
            out_dir: dir.join("data"),
            train: 10,
            dev: 4,
            eval: 4,
            eval_mismatched: 2,
            train_real: 2,
            train_clean: 2,
            snr_db: (0.0, 5.0),
            seed: 11,
            sample_rate: 16000,
            geometry: None,
            synth_sources: Some(SynthSourcesSpec {
                count: 18,
                seconds: 0.3,
            }),
        }
    }

    #[test]
    fn dataset_builds_disjoint_splits() {
        let dir = tempdir().unwrap();
        let manifest = build_dataset(&tiny_config(dir.path())).unwrap();
        assert_eq!(manifest.split("train").len(), 10);
        assert_eq!(manifest.split("dev").len(), 4);
        assert_eq!(manifest.split("eval").len(), 4);
        assert_eq!(manifest.split("eval_mismatched").len(), 2);
        for r in &manifest.records {
            match r.condition {
                Condition::Simu => {
                    assert_eq!(r.clean.len(), 5);
                    assert_eq!(r.noise.len(), 5);
                    assert!(r.snr_db.is_some());
                    // exact additivity
                    let ex = load_example(r).unwrap();
                    let residual = (&ex.mixture.samples
                        - &ex.clean.unwrap().samples
                        - &ex.noise.unwrap().samples)
                        .iter()
                        .map(|v| v.abs())
                        .fold(0.0f64, f64::max);
                    // files are float32; additivity held in f64 before write
                    assert!(residual < 1e-7, "residual {residual}");
                }
                Condition::Real => {
                    assert!(r.clean.is_empty() && r.noise.is_empty());
                    assert!(r.snr_db.is_none());
                }
                Condition::Clean => {
                    assert!(r.clean.is_empty() && r.noise.is_empty());
                }
            }
        }
        // round-trip through the JSON-lines file
        let back = read_manifest(dir.path().join("data/manifest.jsonl")).unwrap();
        assert_eq!(back.records.len(), manifest.records.len());
    }

    #[test]
    fn dataset_deterministic() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let ma = build_dataset(&tiny_config(dir_a.path())).unwrap();
        let mb = build_dataset(&tiny_config(dir_b.path())).unwrap();
        for (a, b) in ma.records.iter().zip(mb.records.iter()) {
            assert_eq!(a.utt_id, b.utt_id);
            assert_eq!(a.snr_db, b.snr_db);
            let wa = read_wav(&a.mixture).unwrap();
            let wb = read_wav(&b.mixture).unwrap();
            assert_eq!(wa.samples, wb.samples);
        }
    }

    #[test]
    fn dataset_insufficient_sources() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.synth_sources = Some(SynthSourcesSpec {
            count: 5,
            seconds: 0.2,
        });
        match build_dataset(&cfg) {
            Err(Error::InsufficientSources { need: 18, found: 5 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn recorded_snr_matches_files() {
        let dir = tempdir().unwrap();
        let manifest = build_dataset(&tiny_config(dir.path())).unwrap();
        for r in manifest.records.iter().filter(|r| r.snr_db.is_some()) {
            let ex = load_example(r).unwrap();
            let clean = ex.clean.unwrap();
            let noise = ex.noise.unwrap();
            let ce: f64 = clean.channel(0).iter().map(|v| v * v).sum();
            let ne: f64 = noise.channel(0).iter().map(|v| v * v).sum();
            let snr = 10.0 * (ce / ne).log10();
            assert!(
                (snr - r.snr_db.unwrap()).abs() < 0.01,
                "{}: {snr} vs {:?}",
                r.utt_id,
                r.snr_db
            );
        }
    }

    #[test]
    fn malformed_manifest_line_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            "{\"utt_id\":\"a\",\"condition\":\"clean\",\"split\":\"train\",\"mixture\":\"x.wav\"}\nnot json\n",
        )
        .unwrap();
        match read_manifest(&path) {
            Err(Error::MalformedManifest { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        fs::write(&path, "").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::EmptyManifest)));
    }
}
