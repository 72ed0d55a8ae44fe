//! MVDR beamforming driven by the time-domain enhancer: covariance
//! estimation from enhanced signals or time-frequency masks, the per-bin
//! MVDR filter solve with trace normalization, and beamformed synthesis.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::diffnet::ParamSet;
use crate::dsp::{istft, stft, ComplexSpectrogram, MultiChannelWaveform, StftConfig};
use crate::error::{Error, Result};
use crate::tasnet::{enhance_multichannel, TasNetArch};

/// Covariance integration strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Covariances directly from the enhanced signals and their residuals.
    SigMvdr,
    /// Phase-sensitive mask on the reference channel, complementary noise mask.
    MaskPsm,
    /// Frequency-averaged power mask broadcast over all bins of a frame.
    Mask1d,
}

/// Per-frequency speech and noise covariance matrices, Hermitian by
/// construction (symmetrized).
#[derive(Debug, Clone)]
pub struct CovariancePair {
    pub phi_x: Vec<Array2<Complex64>>,
    pub phi_n: Vec<Array2<Complex64>>,
}

impl CovariancePair {
    pub fn bins(&self) -> usize {
        self.phi_x.len()
    }

    pub fn channels(&self) -> usize {
        self.phi_x.first().map_or(0, |m| m.nrows())
    }
}

/// Per-frequency MVDR filter vectors and the reference channel they target.
#[derive(Debug, Clone)]
pub struct BeamformerWeights {
    pub h: Vec<Array1<Complex64>>,
    /// 1-based reference channel q (the one-hot selector).
    pub reference: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Psm,
    Power,
    OneDBroadcast,
}

/// Real-valued mask in [0, 1], indexed [frame, bin]. A one-d-broadcast mask
/// stores a single column of per-frame scalars.
#[derive(Debug, Clone)]
pub struct TimeFrequencyMask {
    pub values: Array2<f64>,
    pub kind: MaskKind,
}

impl TimeFrequencyMask {
    fn value_at(&self, t: usize, f: usize) -> f64 {
        match self.kind {
            MaskKind::OneDBroadcast => self.values[(t, 0)],
            _ => self.values[(t, f)],
        }
    }

    /// Complementary mask 1 - M, clipped to [0, 1].
    pub fn complement(&self) -> TimeFrequencyMask {
        TimeFrequencyMask {
            values: self.values.mapv(|v| (1.0 - v).clamp(0.0, 1.0)),
            kind: self.kind,
        }
    }
}

fn symmetrize(m: &mut Array2<Complex64>) {
    let c = m.nrows();
    for i in 0..c {
        for j in i..c {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)].conj());
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
        m[(i, i)] = Complex64::new(m[(i, i)].re, 0.0);
    }
}

fn hermitian_asymmetry(m: &Array2<Complex64>) -> f64 {
    let c = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..c {
        for j in 0..c {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

fn check_shapes(a: &ComplexSpectrogram, b: &ComplexSpectrogram) -> Result<()> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.data.shape(),
            b.data.shape()
        )));
    }
    Ok(())
}

/// Signal-based covariances: speech from the enhanced spectrum, noise from
/// the residual Y - X_hat, both time-averaged outer products per bin.
pub fn covariance_from_signals(
    xhat: &ComplexSpectrogram,
    y: &ComplexSpectrogram,
) -> Result<CovariancePair> {
    check_shapes(xhat, y)?;
    let (c, t, f_bins) = (xhat.channels(), xhat.frames(), xhat.bins());
    if t == 0 {
        return Err(Error::EmptyInput);
    }
    let mut phi_x = vec![Array2::<Complex64>::zeros((c, c)); f_bins];
    let mut phi_n = vec![Array2::<Complex64>::zeros((c, c)); f_bins];
    let inv_t = 1.0 / t as f64;
    for f in 0..f_bins {
        let (px, pn) = (&mut phi_x[f], &mut phi_n[f]);
        for frame in 0..t {
            for i in 0..c {
                let xi = xhat.data[(i, frame, f)];
                let ni = y.data[(i, frame, f)] - xi;
                for j in 0..c {
                    let xj = xhat.data[(j, frame, f)];
                    let nj = y.data[(j, frame, f)] - xj;
                    px[(i, j)] += xi * xj.conj() * inv_t;
                    pn[(i, j)] += ni * nj.conj() * inv_t;
                }
            }
        }
        symmetrize(px);
        symmetrize(pn);
    }
    Ok(CovariancePair { phi_x, phi_n })
}

/// Mask-weighted covariance of the noisy input:
/// Phi_f = (1/T) sum_t M_{t,f} Y_{t,f} Y_{t,f}^H.
pub fn covariance_from_mask(
    mask: &TimeFrequencyMask,
    y: &ComplexSpectrogram,
) -> Result<Vec<Array2<Complex64>>> {
    let (c, t, f_bins) = (y.channels(), y.frames(), y.bins());
    let mask_ok = match mask.kind {
        MaskKind::OneDBroadcast => mask.values.dim() == (t, 1),
        _ => mask.values.dim() == (t, f_bins),
    };
    if !mask_ok {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs spectrogram ({t}, {f_bins})",
            mask.values.dim()
        )));
    }
    let mut out = vec![Array2::<Complex64>::zeros((c, c)); f_bins];
    let inv_t = 1.0 / t as f64;
    for f in 0..f_bins {
        let phi = &mut out[f];
        for frame in 0..t {
            let m = mask.value_at(frame, f) * inv_t;
            if m == 0.0 {
                continue;
            }
            for i in 0..c {
                let yi = y.data[(i, frame, f)];
                for j in 0..c {
                    phi[(i, j)] += yi * y.data[(j, frame, f)].conj() * m;
                }
            }
        }
        symmetrize(phi);
    }
    Ok(out)
}

const MAG_FLOOR: f64 = 1e-12;

/// Phase-sensitive mask between a single-channel enhanced spectrum and the
/// single-channel noisy spectrum: clip(|X|/|Y| cos(angle(X) - angle(Y)), 0, 1).
pub fn psm_mask(
    xhat_ref: &ComplexSpectrogram,
    y_ref: &ComplexSpectrogram,
) -> Result<TimeFrequencyMask> {
    check_shapes(xhat_ref, y_ref)?;
    if xhat_ref.channels() != 1 {
        return Err(Error::ShapeMismatch(
            "psm expects single-channel spectra".into(),
        ));
    }
    let (t, f_bins) = (xhat_ref.frames(), xhat_ref.bins());
    let mut values = Array2::<f64>::zeros((t, f_bins));
    for frame in 0..t {
        for f in 0..f_bins {
            let x = xhat_ref.data[(0, frame, f)];
            let y = y_ref.data[(0, frame, f)];
            let ym = y.norm();
            if ym < MAG_FLOOR {
                continue;
            }
            // |X|/|Y| cos(phase difference) == Re(X * conj(Y)) / |Y|^2
            values[(frame, f)] = ((x * y.conj()).re / (ym * ym)).clamp(0.0, 1.0);
        }
    }
    Ok(TimeFrequencyMask {
        values,
        kind: MaskKind::Psm,
    })
}

/// Magnitude-ratio power mask |X| / (|X| + |N|) from the reference-channel
/// speech and noise estimates.
pub fn power_mask(
    xhat_ref: &ComplexSpectrogram,
    nhat_ref: &ComplexSpectrogram,
) -> Result<TimeFrequencyMask> {
    check_shapes(xhat_ref, nhat_ref)?;
    let (t, f_bins) = (xhat_ref.frames(), xhat_ref.bins());
    let mut values = Array2::<f64>::zeros((t, f_bins));
    for frame in 0..t {
        for f in 0..f_bins {
            let xm = xhat_ref.data[(0, frame, f)].norm();
            let nm = nhat_ref.data[(0, frame, f)].norm();
            if xm + nm >= MAG_FLOOR {
                values[(frame, f)] = (xm / (xm + nm)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(TimeFrequencyMask {
        values,
        kind: MaskKind::Power,
    })
}

/// Per-frame scalars obtained by averaging a mask over frequency.
pub fn one_d_mask(mask: &TimeFrequencyMask) -> Array1<f64> {
    let f_bins = mask.values.ncols() as f64;
    mask.values.sum_axis(ndarray::Axis(1)) / f_bins
}

/// Wraps per-frame scalars as a broadcastable mask.
pub fn broadcast_mask(per_frame: &Array1<f64>) -> TimeFrequencyMask {
    let t = per_frame.len();
    TimeFrequencyMask {
        values: per_frame.to_owned().into_shape_with_order((t, 1)).expect("column"),
        kind: MaskKind::OneDBroadcast,
    }
}

/// Solves A X = B by Gaussian elimination with partial pivoting.
/// Returns None if A is singular to working precision.
fn solve(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Option<Array2<Complex64>> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let mut pivot = col;
        let mut best = m[(col, col)].norm();
        for row in col + 1..n {
            let v = m[(row, col)].norm();
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                m.swap((col, k), (pivot, k));
                x.swap((col, k), (pivot, k));
            }
        }
        let inv = Complex64::new(1.0, 0.0) / m[(col, col)];
        for row in col + 1..n {
            let factor = m[(row, col)] * inv;
            if factor.norm() == 0.0 {
                continue;
            }
            for k in col..n {
                let v = m[(col, k)];
                m[(row, k)] -= factor * v;
            }
            for k in 0..n {
                let v = x[(col, k)];
                x[(row, k)] -= factor * v;
            }
        }
    }
    for col in (0..n).rev() {
        let inv = Complex64::new(1.0, 0.0) / m[(col, col)];
        for k in 0..n {
            let mut acc = x[(col, k)];
            for j in col + 1..n {
                acc -= m[(col, j)] * x[(j, k)];
            }
            x[(col, k)] = acc * inv;
        }
    }
    Some(x)
}

fn trace(m: &Array2<Complex64>) -> Complex64 {
    (0..m.nrows()).map(|i| m[(i, i)]).sum()
}

pub const DEFAULT_LOADING: f64 = 1e-5;
const HERMITIAN_TOL: f64 = 1e-8;

/// Per-bin MVDR filter with trace normalization:
/// h_f = (Phi_N,f^-1 Phi_X,f / Trace(Phi_N,f^-1 Phi_X,f)) u.
///
/// Diagonal loading scales with tr(Phi_N)/C; when the noise covariance is
/// numerically zero the loading scale falls back to tr(Phi_X)/C so the
/// solve stays defined. A vanishing trace degrades to the pass-through
/// filter u.
pub fn mvdr_filter(cov: &CovariancePair, q: usize, loading: f64) -> Result<BeamformerWeights> {
    let c = cov.channels();
    if q < 1 || q > c {
        return Err(Error::ChannelIndexOutOfRange(q, c));
    }
    if loading < 0.0 {
        return Err(Error::InvalidConfig("loading must be >= 0".into()));
    }
    let mut h = Vec::with_capacity(cov.bins());
    for f in 0..cov.bins() {
        let (px, pn) = (&cov.phi_x[f], &cov.phi_n[f]);
        for (m, name) in [(px, "phi_x"), (pn, "phi_n")] {
            let asym = hermitian_asymmetry(m);
            if asym > HERMITIAN_TOL {
                let _ = name;
                return Err(Error::NonHermitian { bin: f, asym });
            }
        }
        let mut a = pn.clone();
        if loading > 0.0 {
            let mut scale = trace(pn).re / c as f64;
            if scale < 1e-30 {
                scale = trace(px).re / c as f64;
            }
            let load = loading * scale;
            for i in 0..c {
                a[(i, i)] += Complex64::new(load, 0.0);
            }
        }
        let w = match solve(&a, px) {
            Some(w) => w,
            None => {
                if loading == 0.0 {
                    return Err(Error::SingularNoiseCovariance(f));
                }
                // fully degenerate bin: pass the reference channel through
                let mut u = Array1::<Complex64>::zeros(c);
                u[q - 1] = Complex64::new(1.0, 0.0);
                h.push(u);
                continue;
            }
        };
        let tr = trace(&w);
        let mut hf = Array1::<Complex64>::zeros(c);
        if tr.norm() < 1e-12 {
            hf[q - 1] = Complex64::new(1.0, 0.0);
        } else {
            for i in 0..c {
                hf[i] = w[(i, q - 1)] / tr;
            }
        }
        if !hf.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        h.push(hf);
    }
    Ok(BeamformerWeights { h, reference: q })
}

/// Applies per-bin filters: X_BF[t, f] = h_f^H Y[:, t, f].
pub fn apply_beamformer(
    weights: &BeamformerWeights,
    y: &ComplexSpectrogram,
) -> Result<ComplexSpectrogram> {
    let (c, t, f_bins) = (y.channels(), y.frames(), y.bins());
    if weights.h.len() != f_bins || weights.h.first().map_or(0, |h| h.len()) != c {
        return Err(Error::ShapeMismatch(format!(
            "weights for {} bins x {} channels vs spectrogram {f_bins} x {c}",
            weights.h.len(),
            weights.h.first().map_or(0, |h| h.len()),
        )));
    }
    let mut out = ndarray::Array3::<Complex64>::zeros((1, t, f_bins));
    for f in 0..f_bins {
        let hf = &weights.h[f];
        for frame in 0..t {
            let mut acc = Complex64::default();
            for i in 0..c {
                acc += hf[i].conj() * y.data[(i, frame, f)];
            }
            out[(0, frame, f)] = acc;
        }
    }
    Ok(ComplexSpectrogram {
        data: out,
        config: y.config,
    })
}

/// Beamforms the noisy input from precomputed multi-channel speech/noise
/// estimates (the back half of the pipeline; also the oracle entry point
/// when true references are substituted for the estimates).
pub fn beamform_from_estimates(
    speech_est: &MultiChannelWaveform,
    noise_est: &MultiChannelWaveform,
    y: &MultiChannelWaveform,
    strategy: Strategy,
    q: usize,
    stft_cfg: &StftConfig,
    loading: f64,
) -> Result<MultiChannelWaveform> {
    let y_spec = stft(y, stft_cfg)?;
    let x_spec = stft(speech_est, stft_cfg)?;
    let cov = match strategy {
        Strategy::SigMvdr => covariance_from_signals(&x_spec, &y_spec)?,
        Strategy::MaskPsm => {
            let mask = psm_mask(&x_spec.channel(0), &y_spec.channel(0))?;
            let phi_x = covariance_from_mask(&mask, &y_spec)?;
            let phi_n = covariance_from_mask(&mask.complement(), &y_spec)?;
            CovariancePair { phi_x, phi_n }
        }
        Strategy::Mask1d => {
            let n_spec = stft(noise_est, stft_cfg)?;
            let pm = power_mask(&x_spec.channel(0), &n_spec.channel(0))?;
            let mask = broadcast_mask(&one_d_mask(&pm));
            let phi_x = covariance_from_mask(&mask, &y_spec)?;
            let phi_n = covariance_from_mask(&mask.complement(), &y_spec)?;
            CovariancePair { phi_x, phi_n }
        }
    };
    let weights = mvdr_filter(&cov, q, loading)?;
    let bf_spec = apply_beamformer(&weights, &y_spec)?;
    istft(&bf_spec, stft_cfg, y.len(), y.sample_rate)
}

/// Full Beam-TasNet pipeline: multi-channel enhancement by the rotated
/// time-domain model, covariance estimation per strategy, MVDR solve,
/// beamforming, and synthesis back to a single-channel waveform.
#[allow(clippy::too_many_arguments)]
pub fn beam_tasnet_enhance(
    params: &ParamSet,
    arch: &TasNetArch,
    y: &MultiChannelWaveform,
    strategy: Strategy,
    q: usize,
    stft_cfg: &StftConfig,
    loading: f64,
) -> Result<MultiChannelWaveform> {
    let enhanced = enhance_multichannel(params, arch, y)?;
    beamform_from_estimates(
        &enhanced.speech,
        &enhanced.noise,
        y,
        strategy,
        q,
        stft_cfg,
        loading,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec_from(data: Array3<Complex64>) -> ComplexSpectrogram {
        ComplexSpectrogram {
            data,
            config: StftConfig::default(),
        }
    }

    fn random_spec(c: usize, t: usize, f: usize, seed: u64) -> ComplexSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        spec_from(Array3::from_shape_fn((c, t, f), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        }))
    }

    #[test]
    fn covariance_single_frame_outer_product() {
        let mut data = Array3::<Complex64>::zeros((2, 1, 1));
        data[(0, 0, 0)] = Complex64::new(1.0, 0.0);
        data[(1, 0, 0)] = Complex64::new(0.0, 1.0);
        let x = spec_from(data.clone());
        let y = spec_from(data);
        let cov = covariance_from_signals(&x, &y).unwrap();
        let px = &cov.phi_x[0];
        assert_eq!(px[(0, 0)], Complex64::new(1.0, 0.0));
        assert_eq!(px[(0, 1)], Complex64::new(0.0, -1.0));
        assert_eq!(px[(1, 0)], Complex64::new(0.0, 1.0));
        assert_eq!(px[(1, 1)], Complex64::new(1.0, 0.0));
        // Y == X_hat: noise covariance vanishes
        assert!(cov.phi_n[0].iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn covariance_hermitian_psd_random() {
        let x = random_spec(3, 40, 5, 1);
        let y = random_spec(3, 40, 5, 2);
        let cov = covariance_from_signals(&x, &y).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for phi in cov.phi_x.iter().chain(cov.phi_n.iter()) {
            assert!(hermitian_asymmetry(phi) < 1e-12);
            // PSD: quadratic form never meaningfully negative
            for _ in 0..50 {
                let z: Vec<Complex64> = (0..3)
                    .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .collect();
                let mut q = Complex64::default();
                for i in 0..3 {
                    for j in 0..3 {
                        q += z[i].conj() * phi[(i, j)] * z[j];
                    }
                }
                assert!(q.re >= -1e-10);
            }
        }
    }

    #[test]
    fn mask_covariance_linearity() {
        let y = random_spec(2, 20, 4, 4);
        let ones = TimeFrequencyMask {
            values: Array2::from_elem((20, 4), 1.0),
            kind: MaskKind::Power,
        };
        let half = TimeFrequencyMask {
            values: Array2::from_elem((20, 4), 0.5),
            kind: MaskKind::Power,
        };
        let zeros = TimeFrequencyMask {
            values: Array2::zeros((20, 4)),
            kind: MaskKind::Power,
        };
        let c1 = covariance_from_mask(&ones, &y).unwrap();
        let c0 = covariance_from_mask(&zeros, &y).unwrap();
        let ch = covariance_from_mask(&half, &y).unwrap();
        // all-ones mask equals the plain speech covariance of Y
        let sig = covariance_from_signals(&y, &y).unwrap();
        for f in 0..4 {
            assert!(c0[f].iter().all(|v| v.norm() == 0.0));
            for i in 0..2 {
                for j in 0..2 {
                    assert!((c1[f][(i, j)] - sig.phi_x[f][(i, j)]).norm() < 1e-12);
                    assert!((ch[f][(i, j)] - 0.5 * c1[f][(i, j)]).norm() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn one_d_broadcast_of_ones_equals_2d_ones() {
        let y = random_spec(2, 15, 6, 5);
        let ones2d = TimeFrequencyMask {
            values: Array2::from_elem((15, 6), 1.0),
            kind: MaskKind::Power,
        };
        let ones1d = broadcast_mask(&Array1::from_elem(15, 1.0));
        let a = covariance_from_mask(&ones2d, &y).unwrap();
        let b = covariance_from_mask(&ones1d, &y).unwrap();
        for f in 0..6 {
            assert_eq!(a[f], b[f]);
        }
    }

    #[test]
    fn psm_examples() {
        let y = random_spec(1, 10, 8, 6);
        // X == Y -> mask 1 wherever |Y| is above the floor
        let m = psm_mask(&y, &y).unwrap();
        assert!(m.values.iter().all(|v| (*v - 1.0).abs() < 1e-12));
        // X == 0 -> mask 0
        let zero = spec_from(Array3::zeros((1, 10, 8)));
        let m0 = psm_mask(&zero, &y).unwrap();
        assert!(m0.values.iter().all(|v| *v == 0.0));
        // X == -Y: cos term is -1, clipped to 0
        let neg = spec_from(y.data.mapv(|v| -v));
        let mneg = psm_mask(&neg, &y).unwrap();
        assert!(mneg.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_d_mask_examples() {
        let constant = TimeFrequencyMask {
            values: Array2::from_elem((5, 7), 0.5),
            kind: MaskKind::Power,
        };
        assert!(one_d_mask(&constant).iter().all(|v| (*v - 0.5).abs() < 1e-15));

        let mut values = Array2::zeros((3, 4));
        values.row_mut(1).fill(1.0);
        let spike = TimeFrequencyMask {
            values,
            kind: MaskKind::Power,
        };
        assert_eq!(one_d_mask(&spike), arr1(&[0.0, 1.0, 0.0]));

        // random mask matches the brute-force mean over frequency
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values = Array2::from_shape_fn((6, 9), |_| rng.gen_range(0.0..1.0));
        let m = TimeFrequencyMask {
            values: values.clone(),
            kind: MaskKind::Power,
        };
        let got = one_d_mask(&m);
        for t in 0..6 {
            let mean: f64 = (0..9).map(|f| values[(t, f)]).sum::<f64>() / 9.0;
            assert!((got[t] - mean).abs() < 1e-12);
        }
    }

    fn cov_of(phi_x: Vec<Array2<Complex64>>, phi_n: Vec<Array2<Complex64>>) -> CovariancePair {
        CovariancePair { phi_x, phi_n }
    }

    #[test]
    fn mvdr_scalar_channel_is_unity() {
        let px = Array2::from_elem((1, 1), Complex64::new(3.7, 0.0));
        let pn = Array2::from_elem((1, 1), Complex64::new(0.4, 0.0));
        let cov = cov_of(vec![px], vec![pn]);
        let w = mvdr_filter(&cov, 1, 0.0).unwrap();
        assert!((w.h[0][0] - Complex64::new(1.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn mvdr_hand_example_c2() {
        let pn = Array2::from_diag_elem(2, Complex64::new(1.0, 0.0));
        let px = Array2::from_elem((2, 2), Complex64::new(1.0, 0.0));
        let cov = cov_of(vec![px], vec![pn]);
        let w = mvdr_filter(&cov, 1, 0.0).unwrap();
        assert!((w.h[0][0] - Complex64::new(0.5, 0.0)).norm() < 1e-14);
        assert!((w.h[0][1] - Complex64::new(0.5, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn mvdr_distortionless_rank1() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for c in 2..=6usize {
            for _ in 0..20 {
                let d: Array1<Complex64> = Array1::from_shape_fn(c, |_| {
                    Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                });
                let mut px = Array2::<Complex64>::zeros((c, c));
                for i in 0..c {
                    for j in 0..c {
                        px[(i, j)] = d[i] * d[j].conj();
                    }
                }
                // random Hermitian PD noise covariance: B B^H + I
                let b = Array2::from_shape_fn((c, c), |_| {
                    Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                });
                let mut pn = Array2::<Complex64>::zeros((c, c));
                for i in 0..c {
                    for j in 0..c {
                        let mut acc = Complex64::default();
                        for k in 0..c {
                            acc += b[(i, k)] * b[(j, k)].conj();
                        }
                        pn[(i, j)] = acc;
                    }
                    pn[(i, i)] += Complex64::new(1.0, 0.0);
                }
                symmetrize(&mut pn);
                let q = rng.gen_range(1..=c);
                let cov = cov_of(vec![px], vec![pn]);
                let w = mvdr_filter(&cov, q, 0.0).unwrap();
                let mut response = Complex64::default();
                for i in 0..c {
                    response += w.h[0][i].conj() * d[i];
                }
                assert!(
                    (response - d[q - 1]).norm() < 1e-10,
                    "C={c} q={q}: {response} vs {}",
                    d[q - 1]
                );
            }
        }
    }

    #[test]
    fn mvdr_rejects_non_hermitian() {
        let mut px = Array2::<Complex64>::zeros((2, 2));
        px[(0, 1)] = Complex64::new(1.0, 0.0);
        px[(1, 0)] = Complex64::new(0.0, 0.5); // not the conjugate
        let pn = Array2::from_diag_elem(2, Complex64::new(1.0, 0.0));
        let cov = cov_of(vec![px], vec![pn]);
        assert!(matches!(
            mvdr_filter(&cov, 1, 0.0),
            Err(Error::NonHermitian { .. })
        ));
    }

    #[test]
    fn mvdr_singular_noise_without_loading() {
        let px = Array2::from_diag_elem(2, Complex64::new(1.0, 0.0));
        let pn = Array2::<Complex64>::zeros((2, 2));
        let cov = cov_of(vec![px.clone()], vec![pn.clone()]);
        assert!(matches!(
            mvdr_filter(&cov, 1, 0.0),
            Err(Error::SingularNoiseCovariance(0))
        ));
        // with loading the solve is defined
        assert!(mvdr_filter(&cov_of(vec![px], vec![pn]), 1, 1e-5).is_ok());
    }

    #[test]
    fn apply_beamformer_one_hot_selects_channel() {
        let y = random_spec(3, 12, 4, 9);
        let mut h = Vec::new();
        for _ in 0..4 {
            let mut hf = Array1::<Complex64>::zeros(3);
            hf[1] = Complex64::new(1.0, 0.0);
            h.push(hf);
        }
        let out = apply_beamformer(&BeamformerWeights { h, reference: 2 }, &y).unwrap();
        for t in 0..12 {
            for f in 0..4 {
                assert_eq!(out.data[(0, t, f)], y.data[(1, t, f)]);
            }
        }
    }

    #[test]
    fn apply_beamformer_linear_in_input() {
        let y1 = random_spec(2, 8, 3, 10);
        let y2 = random_spec(2, 8, 3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h: Vec<Array1<Complex64>> = (0..3)
            .map(|_| {
                Array1::from_shape_fn(2, |_| {
                    Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                })
            })
            .collect();
        let w = BeamformerWeights { h, reference: 1 };
        let a = Complex64::new(0.3, -0.8);
        let combo = spec_from(
            y1.data.clone() + y2.data.mapv(|v| v * a),
        );
        let out_combo = apply_beamformer(&w, &combo).unwrap();
        let out1 = apply_beamformer(&w, &y1).unwrap();
        let out2 = apply_beamformer(&w, &y2).unwrap();
        let max_err = out_combo
            .data
            .iter()
            .zip(out1.data.iter().zip(out2.data.iter()))
            .map(|(c, (p, q))| (c - (p + q * a)).norm())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-12);
    }

    #[test]
    fn apply_beamformer_zero_input() {
        let y = spec_from(Array3::zeros((2, 5, 3)));
        let h = vec![Array1::from_elem(2, Complex64::new(0.5, 0.5)); 3];
        let out = apply_beamformer(&BeamformerWeights { h, reference: 1 }, &y).unwrap();
        assert!(out.data.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn degenerate_no_enhancement_passes_through() {
        // X_hat == Y: noise covariance is zero; with loading the output
        // strongly correlates with the noisy reference channel
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let samples =
            Array2::from_shape_fn((2, 8000), |_| rng.gen_range(-0.5..0.5));
        let y = MultiChannelWaveform::new(samples, 16000).unwrap();
        let zeros = MultiChannelWaveform {
            samples: Array2::zeros((2, 8000)),
            sample_rate: 16000,
        };
        let cfg = StftConfig::default();
        let out =
            beamform_from_estimates(&y, &zeros, &y, Strategy::SigMvdr, 1, &cfg, 1e-5).unwrap();
        let r = y.channel(0);
        let e = out.channel(0);
        let dot: f64 = r.iter().zip(e.iter()).map(|(a, b)| a * b).sum();
        let corr = dot / (r.dot(&r).sqrt() * e.dot(&e).sqrt());
        assert!(corr > 0.95, "correlation {corr}");
    }
}
