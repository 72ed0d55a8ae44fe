//! Windowed STFT analysis/synthesis and the waveform/spectrogram containers.
//!
//! The bridge between the time-domain enhancer and the frequency-domain
//! beamformer. One-sided spectra (F = fft_size/2 + 1) with Hermitian
//! completion on synthesis; weighted overlap-add with synthesis window equal
//! to the analysis window, normalized by the summed squared window.

use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WindowKind {
    Hann,
    SqrtHann,
}

/// STFT analysis/synthesis parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub center_pad: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_size: 512,
            hop: 128,
            window: WindowKind::Hann,
            center_pad: true,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 {
            return Err(Error::InvalidConfig("fft_size must be >= 2".into()));
        }
        if self.hop == 0 || self.fft_size % self.hop != 0 || self.hop > self.fft_size / 2 {
            return Err(Error::InvalidConfig(
                "hop must divide fft_size and be <= fft_size/2".into(),
            ));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Periodic window of length fft_size.
    pub fn window_samples(&self) -> Array1<f64> {
        let n = self.fft_size as f64;
        Array1::from_iter((0..self.fft_size).map(|i| {
            let hann = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos();
            match self.window {
                WindowKind::Hann => hann,
                WindowKind::SqrtHann => hann.sqrt(),
            }
        }))
    }
}

/// C x T real sample matrix with sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelWaveform {
    pub samples: Array2<f64>,
    pub sample_rate: u32,
}

impl MultiChannelWaveform {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if samples.ncols() == 0 || samples.nrows() == 0 {
            return Err(Error::EmptyInput);
        }
        if !samples.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(MultiChannelWaveform {
            samples,
            sample_rate,
        })
    }

    pub fn from_mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let n = samples.len();
        Self::new(
            Array2::from_shape_vec((1, n), samples).expect("mono shape"),
            sample_rate,
        )
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, c: usize) -> Array1<f64> {
        self.samples.row(c).to_owned()
    }
}

/// C x T x F complex spectrogram with the config that produced it.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    /// Indexed [channel, frame, bin].
    pub data: Array3<Complex64>,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.data.shape()[2]
    }

    /// Extracts one channel as a 1 x T x F spectrogram.
    pub fn channel(&self, c: usize) -> ComplexSpectrogram {
        let view = self.data.slice(ndarray::s![c..c + 1, .., ..]);
        ComplexSpectrogram {
            data: view.to_owned(),
            config: self.config,
        }
    }
}

fn frame_count(padded_len: usize, cfg: &StftConfig) -> usize {
    if padded_len <= cfg.fft_size {
        1
    } else {
        (padded_len - cfg.fft_size).div_ceil(cfg.hop) + 1
    }
}

/// Windowed short-time Fourier transform, one frame per hop.
pub fn stft(wave: &MultiChannelWaveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if wave.len() == 0 {
        return Err(Error::EmptyInput);
    }
    if !wave.samples.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }

    let pad = if cfg.center_pad { cfg.fft_size / 2 } else { 0 };
    let padded_len = wave.len() + 2 * pad;
    let n_frames = frame_count(padded_len, cfg);
    let n_bins = cfg.num_bins();
    let window = cfg.window_samples();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let mut out = Array3::<Complex64>::zeros((wave.channels(), n_frames, n_bins));

    let mut buf = vec![Complex64::default(); cfg.fft_size];
    for c in 0..wave.channels() {
        let row = wave.samples.row(c);
        for t in 0..n_frames {
            let start = t * cfg.hop;
            for k in 0..cfg.fft_size {
                // index into the virtual padded signal; zeros outside
                let idx = (start + k) as isize - pad as isize;
                let s = if idx >= 0 && (idx as usize) < wave.len() {
                    row[idx as usize]
                } else {
                    0.0
                };
                buf[k] = Complex64::new(s * window[k], 0.0);
            }
            fft.process(&mut buf);
            for f in 0..n_bins {
                out[(c, t, f)] = buf[f];
            }
        }
    }

    Ok(ComplexSpectrogram {
        data: out,
        config: *cfg,
    })
}

/// Inverse STFT by weighted overlap-add, truncated or zero-padded to
/// `target_length` samples.
pub fn istft(
    spec: &ComplexSpectrogram,
    cfg: &StftConfig,
    target_length: usize,
    sample_rate: u32,
) -> Result<MultiChannelWaveform> {
    cfg.validate()?;
    if spec.bins() != cfg.num_bins() {
        return Err(Error::ConfigMismatch(format!(
            "spectrogram has {} bins, config implies {}",
            spec.bins(),
            cfg.num_bins()
        )));
    }

    let n_frames = spec.frames();
    let channels = spec.channels();
    let window = cfg.window_samples();
    let pad = if cfg.center_pad { cfg.fft_size / 2 } else { 0 };
    let full_len = (n_frames - 1) * cfg.hop + cfg.fft_size;

    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(cfg.fft_size);
    let scale = 1.0 / cfg.fft_size as f64;

    let mut out = Array2::<f64>::zeros((channels, target_length));
    let mut buf = vec![Complex64::default(); cfg.fft_size];
    let mut acc = vec![0.0f64; full_len];
    let mut norm = vec![0.0f64; full_len];

    for c in 0..channels {
        acc.iter_mut().for_each(|v| *v = 0.0);
        norm.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..n_frames {
            // Hermitian completion of the one-sided spectrum
            for f in 0..spec.bins() {
                buf[f] = spec.data[(c, t, f)];
            }
            for f in spec.bins()..cfg.fft_size {
                buf[f] = spec.data[(c, t, cfg.fft_size - f)].conj();
            }
            ifft.process(&mut buf);
            let start = t * cfg.hop;
            for k in 0..cfg.fft_size {
                let v = buf[k].re * scale;
                acc[start + k] += v * window[k];
                norm[start + k] += window[k] * window[k];
            }
        }
        for n in 0..target_length {
            let idx = n + pad;
            if idx < full_len && norm[idx] > 1e-12 {
                out[(c, n)] = acc[idx] / norm[idx];
            }
        }
    }

    MultiChannelWaveform::new(out, sample_rate)
}
