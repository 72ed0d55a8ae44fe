//! The multi-channel Conv-TasNet enhancer: multi-channel encoder, mask
//! separator, decoder, channel-rotation training/inference, and the
//! time-domain SNR enhancement loss.
//!
//! The channel-aware variant enhances the first channel of a rotated input;
//! running all C rotations and collecting the outputs yields a multi-channel
//! enhanced signal with the original geometry.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{DiffTensor, Graph, ParamSet};
use crate::dsp::MultiChannelWaveform;
use crate::error::{Error, Result};

/// Architecture hyperparameters of the enhancer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TasNetArch {
    /// Input channels C.
    pub in_channels: usize,
    /// Encoder filters N.
    pub enc_filters: usize,
    /// Encoder kernel size in samples.
    pub kernel: usize,
    /// Encoder stride in samples.
    pub stride: usize,
    /// Stacks of dilated blocks R.
    pub stacks: usize,
    /// Blocks per stack X; dilation doubles per block (1, 2, 4, ...).
    pub blocks_per_stack: usize,
    /// Bottleneck channels B.
    pub bottleneck: usize,
    /// Hidden channels H inside each block.
    pub hidden: usize,
    /// Output heads (speech, noise).
    pub num_outputs: usize,
}

impl Default for TasNetArch {
    /// Full-size configuration: 5 input channels, 256 encoder filters,
    /// kernel 20 / stride 10, 4 stacks of 8 blocks, 256 bottleneck and
    /// 512 hidden channels.
    fn default() -> Self {
        TasNetArch {
            in_channels: 5,
            enc_filters: 256,
            kernel: 20,
            stride: 10,
            stacks: 4,
            blocks_per_stack: 8,
            bottleneck: 256,
            hidden: 512,
            num_outputs: 2,
        }
    }
}

impl TasNetArch {
    /// Desk-scale configuration used for CPU training runs.
    pub fn small() -> Self {
        TasNetArch {
            in_channels: 5,
            enc_filters: 64,
            kernel: 20,
            stride: 10,
            stacks: 1,
            blocks_per_stack: 4,
            bottleneck: 64,
            hidden: 128,
            num_outputs: 2,
        }
    }

    /// Miniature configuration for gradient checking.
    pub fn miniature() -> Self {
        TasNetArch {
            in_channels: 2,
            enc_filters: 8,
            kernel: 4,
            stride: 2,
            stacks: 1,
            blocks_per_stack: 1,
            bottleneck: 8,
            hidden: 8,
            num_outputs: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.enc_filters == 0
            || self.kernel == 0
            || self.stride == 0
            || self.stacks == 0
            || self.blocks_per_stack == 0
            || self.bottleneck == 0
            || self.hidden == 0
        {
            return Err(Error::InvalidConfig("zero-sized architecture field".into()));
        }
        if self.kernel % self.stride != 0 {
            return Err(Error::InvalidConfig(
                "encoder stride must divide kernel".into(),
            ));
        }
        if self.num_outputs != 2 {
            return Err(Error::InvalidConfig(
                "exactly two output heads (speech, noise) are supported".into(),
            ));
        }
        Ok(())
    }
}

/// Single-channel speech and noise estimates, length-matched to the input.
#[derive(Debug, Clone)]
pub struct EnhOutput {
    pub speech: Array1<f64>,
    pub noise: Array1<f64>,
    pub sample_rate: u32,
}

const DW_KERNEL: usize = 3;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

/// Initializes a fresh parameter set for `arch`, deterministic in `seed`.
pub fn init_params(arch: &TasNetArch, seed: u64) -> Result<ParamSet> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let (c, n, b, h) = (arch.in_channels, arch.enc_filters, arch.bottleneck, arch.hidden);

    let enc_bound = 1.0 / ((c * arch.kernel) as f64).sqrt();
    p.insert("enc.w", uniform(&mut rng, &[n, c, arch.kernel], enc_bound));

    p.insert("sep.norm.gain", ArrayD::from_elem(IxDyn(&[n]), 1.0));
    p.insert("sep.norm.bias", ArrayD::zeros(IxDyn(&[n])));
    p.insert("sep.in.w", uniform(&mut rng, &[b, n, 1], 1.0 / (n as f64).sqrt()));

    for r in 0..arch.stacks {
        for x in 0..arch.blocks_per_stack {
            let pre = format!("sep.block.{r}.{x}");
            p.insert(&format!("{pre}.conv1.w"), uniform(&mut rng, &[h, b, 1], 1.0 / (b as f64).sqrt()));
            p.insert(&format!("{pre}.prelu1.alpha"), ArrayD::from_elem(IxDyn(&[h]), 0.25));
            p.insert(&format!("{pre}.norm1.gain"), ArrayD::from_elem(IxDyn(&[h]), 1.0));
            p.insert(&format!("{pre}.norm1.bias"), ArrayD::zeros(IxDyn(&[h])));
            p.insert(&format!("{pre}.dconv.w"), uniform(&mut rng, &[h, DW_KERNEL], 1.0 / (DW_KERNEL as f64).sqrt()));
            p.insert(&format!("{pre}.prelu2.alpha"), ArrayD::from_elem(IxDyn(&[h]), 0.25));
            p.insert(&format!("{pre}.norm2.gain"), ArrayD::from_elem(IxDyn(&[h]), 1.0));
            p.insert(&format!("{pre}.norm2.bias"), ArrayD::zeros(IxDyn(&[h])));
            p.insert(&format!("{pre}.res.w"), uniform(&mut rng, &[b, h, 1], 1.0 / (h as f64).sqrt()));
            p.insert(&format!("{pre}.skip.w"), uniform(&mut rng, &[b, h, 1], 1.0 / (h as f64).sqrt()));
        }
    }

    p.insert("sep.out.prelu.alpha", ArrayD::from_elem(IxDyn(&[b]), 0.25));
    p.insert("sep.mask_x.w", uniform(&mut rng, &[n, b, 1], 1.0 / (b as f64).sqrt()));
    p.insert("sep.mask_n.w", uniform(&mut rng, &[n, b, 1], 1.0 / (b as f64).sqrt()));
    p.insert("dec.w", uniform(&mut rng, &[n, 1, arch.kernel], 1.0 / (n as f64).sqrt()));
    Ok(p)
}

/// Cyclic anti-clockwise channel rotation placing original channel `c`
/// (1-based) first: [y_c, y_{c+1}, ..., y_C, y_1, ..., y_{c-1}].
pub fn rotate_channels(y: &MultiChannelWaveform, c: usize) -> Result<MultiChannelWaveform> {
    let channels = y.channels();
    if c < 1 || c > channels {
        return Err(Error::ChannelIndexOutOfRange(c, channels));
    }
    let mut out = Array2::<f64>::zeros((channels, y.len()));
    for i in 0..channels {
        let src = (c - 1 + i) % channels;
        out.row_mut(i).assign(&y.samples.row(src));
    }
    MultiChannelWaveform::new(out, y.sample_rate)
}

/// Runs the enhancer on a rotated input, building (or extending) the given
/// graph. When `trainable` is true, parameters enter the graph as named
/// differentiable leaves; otherwise as constants.
///
/// Returns (speech, noise) tensors of shape [1, T].
pub fn forward_graph(
    g: &mut Graph,
    params: &ParamSet,
    arch: &TasNetArch,
    y_rot: &Array2<f64>,
    trainable: bool,
) -> Result<(DiffTensor, DiffTensor)> {
    arch.validate()?;
    if y_rot.nrows() != arch.in_channels {
        return Err(Error::ChannelMismatch {
            expected: arch.in_channels,
            got: y_rot.nrows(),
        });
    }
    let t = y_rot.ncols();
    if t < arch.kernel {
        return Err(Error::InputTooShort {
            got: t,
            need: arch.kernel,
        });
    }

    // symmetric zero padding so encoder frames tile the input exactly
    let rem = (t - arch.kernel) % arch.stride;
    let pad = (arch.stride - rem) % arch.stride;
    let pad_left = pad / 2;
    let t_pad = t + pad;
    let mut padded = Array2::<f64>::zeros((arch.in_channels, t_pad));
    padded
        .slice_mut(ndarray::s![.., pad_left..pad_left + t])
        .assign(y_rot);

    let par = |g: &mut Graph, name: &str| -> Result<DiffTensor> {
        if trainable {
            g.param(params, name)
        } else {
            g.constant(
                params
                    .get(name)
                    .ok_or_else(|| Error::ShapeMismatch(format!("unknown parameter '{name}'")))?
                    .clone(),
            )
        }
    };

    let input = g.constant(padded.into_dyn())?;
    let enc_w = par(g, "enc.w")?;
    let enc = g.conv1d(input, enc_w, arch.stride, 1, 0)?;

    let norm_g = par(g, "sep.norm.gain")?;
    let norm_b = par(g, "sep.norm.bias")?;
    let feat = g.global_layer_norm(enc, norm_g, norm_b, 1e-8)?;
    let in_w = par(g, "sep.in.w")?;
    let mut cur = g.conv1d(feat, in_w, 1, 1, 0)?;

    let mut skip_sum: Option<DiffTensor> = None;
    for r in 0..arch.stacks {
        for x in 0..arch.blocks_per_stack {
            let pre = format!("sep.block.{r}.{x}");
            let dilation = 1usize << x;
            let w1 = par(g, &format!("{pre}.conv1.w"))?;
            let a1 = par(g, &format!("{pre}.prelu1.alpha"))?;
            let n1g = par(g, &format!("{pre}.norm1.gain"))?;
            let n1b = par(g, &format!("{pre}.norm1.bias"))?;
            let dw = par(g, &format!("{pre}.dconv.w"))?;
            let a2 = par(g, &format!("{pre}.prelu2.alpha"))?;
            let n2g = par(g, &format!("{pre}.norm2.gain"))?;
            let n2b = par(g, &format!("{pre}.norm2.bias"))?;
            let rw = par(g, &format!("{pre}.res.w"))?;
            let sw = par(g, &format!("{pre}.skip.w"))?;

            let h = g.conv1d(cur, w1, 1, 1, 0)?;
            let h = g.prelu(h, a1)?;
            let h = g.global_layer_norm(h, n1g, n1b, 1e-8)?;
            let h = g.depthwise_conv1d(h, dw, dilation, dilation * (DW_KERNEL - 1) / 2)?;
            let h = g.prelu(h, a2)?;
            let h = g.global_layer_norm(h, n2g, n2b, 1e-8)?;
            let res = g.conv1d(h, rw, 1, 1, 0)?;
            let skip = g.conv1d(h, sw, 1, 1, 0)?;
            cur = g.add(cur, res)?;
            skip_sum = Some(match skip_sum {
                Some(s) => g.add(s, skip)?,
                None => skip,
            });
        }
    }

    let out_alpha = par(g, "sep.out.prelu.alpha")?;
    let out = g.prelu(skip_sum.expect("at least one block"), out_alpha)?;
    let mx_w = par(g, "sep.mask_x.w")?;
    let mn_w = par(g, "sep.mask_n.w")?;
    let mx = g.conv1d(out, mx_w, 1, 1, 0)?;
    let mx = g.relu(mx)?;
    let mn = g.conv1d(out, mn_w, 1, 1, 0)?;
    let mn = g.relu(mn)?;

    let dec_w = par(g, "dec.w")?;
    let sx = g.mul(mx, enc)?;
    let sn = g.mul(mn, enc)?;
    let xhat = g.conv_transpose1d(sx, dec_w, arch.stride)?;
    let nhat = g.conv_transpose1d(sn, dec_w, arch.stride)?;
    let xhat = g.slice_last(xhat, pad_left, t)?;
    let nhat = g.slice_last(nhat, pad_left, t)?;
    Ok((xhat, nhat))
}

/// Inference-only forward pass on an already rotated input.
pub fn forward(
    params: &ParamSet,
    arch: &TasNetArch,
    y_rot: &MultiChannelWaveform,
) -> Result<EnhOutput> {
    let mut g = Graph::new();
    let (xhat, nhat) = forward_graph(&mut g, params, arch, &y_rot.samples, false)?;
    let speech = g.value(xhat).iter().copied().collect::<Array1<f64>>();
    let noise = g.value(nhat).iter().copied().collect::<Array1<f64>>();
    Ok(EnhOutput {
        speech,
        noise,
        sample_rate: y_rot.sample_rate,
    })
}

/// Enhanced multi-channel estimates.
#[derive(Debug, Clone)]
pub struct MultiChannelEnhanced {
    /// Speech estimates, channel c from the rotation placing c first.
    pub speech: MultiChannelWaveform,
    /// Noise estimates, same convention.
    pub noise: MultiChannelWaveform,
}

/// Runs all C rotations to form the multi-channel enhanced signal: channel c
/// of the output is the speech estimate of the forward pass on the input
/// rotated so that original channel c comes first.
pub fn enhance_multichannel(
    params: &ParamSet,
    arch: &TasNetArch,
    y: &MultiChannelWaveform,
) -> Result<MultiChannelEnhanced> {
    let channels = y.channels();
    if channels != arch.in_channels {
        return Err(Error::ChannelMismatch {
            expected: arch.in_channels,
            got: channels,
        });
    }
    let mut speech = Array2::<f64>::zeros((channels, y.len()));
    let mut noise = Array2::<f64>::zeros((channels, y.len()));
    for c in 1..=channels {
        let rotated = rotate_channels(y, c)?;
        let out = forward(params, arch, &rotated)?;
        speech.row_mut(c - 1).assign(&out.speech);
        noise.row_mut(c - 1).assign(&out.noise);
    }
    Ok(MultiChannelEnhanced {
        speech: MultiChannelWaveform::new(speech, y.sample_rate)?,
        noise: MultiChannelWaveform::new(noise, y.sample_rate)?,
    })
}

/// SNR convention: power-ratio in dB (10 log10) or the doubled form printed
/// as 20 log10 over the same squared-norm ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SnrMode {
    Power10,
    Scaled20,
}

impl SnrMode {
    fn factor(&self) -> f64 {
        match self {
            SnrMode::Power10 => 10.0,
            SnrMode::Scaled20 => 20.0,
        }
    }
}

pub const DEFAULT_SNR_CAP_DB: f64 = 60.0;

/// Time-domain SNR in dB between a reference and an estimate, clamped to
/// +/- `cap`.
pub fn snr_db(ref_sig: &Array1<f64>, est: &Array1<f64>, mode: SnrMode, cap: f64) -> Result<f64> {
    if ref_sig.len() != est.len() {
        return Err(Error::ShapeMismatch(format!(
            "snr: {} vs {} samples",
            ref_sig.len(),
            est.len()
        )));
    }
    let num: f64 = ref_sig.iter().map(|v| v * v).sum();
    if num == 0.0 {
        return Err(Error::SilentReference);
    }
    let den: f64 = ref_sig
        .iter()
        .zip(est.iter())
        .map(|(r, e)| (r - e) * (r - e))
        .sum();
    if den == 0.0 {
        return Ok(cap);
    }
    let val = mode.factor() * (num / den).log10();
    Ok(val.clamp(-cap, cap))
}

/// Differentiable -SNR(ref, est) term with a soft denominator floor
/// (1e-8 x reference energy) keeping gradients finite; the value is
/// replaced by the cap once it saturates.
pub fn neg_snr_term(
    g: &mut Graph,
    ref_sig: &Array1<f64>,
    est: DiffTensor,
    mode: SnrMode,
    cap: f64,
) -> Result<DiffTensor> {
    let t = ref_sig.len();
    if g.value(est).len() != t {
        return Err(Error::ShapeMismatch(format!(
            "snr loss: {} vs {} samples",
            t,
            g.value(est).len()
        )));
    }
    let num: f64 = ref_sig.iter().map(|v| v * v).sum();
    if num == 0.0 {
        return Err(Error::SilentReference);
    }
    let shape: Vec<usize> = g.shape(est).to_vec();
    let ref_arr = ArrayD::from_shape_vec(IxDyn(&shape), ref_sig.to_vec())
        .expect("reference reshapes to estimate shape");
    let ref_t = g.constant(ref_arr)?;
    let diff = g.sub(est, ref_t)?;
    let sq = g.square(diff)?;
    let den = g.sum(sq)?;
    let den = g.add_scalar(den, 1e-8 * num)?;
    let k = mode.factor() / std::f64::consts::LN_10;
    let ln_den = g.log(den)?;
    let snr = g.scale(ln_den, -k)?;
    let snr = g.add_scalar(snr, k * num.ln())?;
    let v = g.scalar(snr);
    if v > cap {
        let capped = g.constant(ArrayD::from_elem(IxDyn(&[]), cap))?;
        return g.scale(capped, -1.0);
    }
    if v < -cap {
        let capped = g.constant(ArrayD::from_elem(IxDyn(&[]), -cap))?;
        return g.scale(capped, -1.0);
    }
    g.scale(snr, -1.0)
}

/// Enhancement loss: -SNR(x, xhat) - SNR(n, nhat), differentiable end to end.
pub fn enh_loss(
    g: &mut Graph,
    x_ref: &Array1<f64>,
    xhat: DiffTensor,
    n_ref: &Array1<f64>,
    nhat: DiffTensor,
    mode: SnrMode,
    cap: f64,
) -> Result<DiffTensor> {
    let lx = neg_snr_term(g, x_ref, xhat, mode, cap)?;
    let ln = neg_snr_term(g, n_ref, nhat, mode, cap)?;
    g.add(lx, ln)
}

/// One multi-channel training utterance with aligned per-channel references.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub utt_id: String,
    pub mixture: MultiChannelWaveform,
    /// Per-channel clean speech references (simu condition only).
    pub clean: Option<MultiChannelWaveform>,
    /// Per-channel noise references (simu condition only).
    pub noise: Option<MultiChannelWaveform>,
}

/// One channel-rotated training item: the rotated input and the reference
/// speech/noise of its new first channel.
#[derive(Debug, Clone)]
pub struct RotatedExample {
    pub utt_id: String,
    pub rotation: usize,
    pub input: MultiChannelWaveform,
    pub speech_ref: Array1<f64>,
    pub noise_ref: Array1<f64>,
}

/// Expands each C-channel example into C rotated copies; the references of
/// copy c are the original channel-c clean speech and noise.
pub fn make_rotation_training_set(batch: &[TrainExample]) -> Result<Vec<RotatedExample>> {
    let mut out = Vec::new();
    for ex in batch {
        let channels = ex.mixture.channels();
        let (clean, noise) = match (&ex.clean, &ex.noise) {
            (Some(c), Some(n)) if c.channels() == channels && n.channels() == channels => (c, n),
            _ => return Err(Error::MissingReferences(ex.utt_id.clone())),
        };
        for c in 1..=channels {
            out.push(RotatedExample {
                utt_id: ex.utt_id.clone(),
                rotation: c,
                input: rotate_channels(&ex.mixture, c)?,
                speech_ref: clean.channel(c - 1),
                noise_ref: noise.channel(c - 1),
            });
        }
    }
    Ok(out)
}
