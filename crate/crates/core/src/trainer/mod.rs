//! Optimization loop: Adam, truncated-backprop chunked joint training with
//! per-condition loss routing, the fixed log-mel backend surrogate, and
//! checkpointing.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::diffnet::{DiffTensor, Graph, ParamSet};
use crate::error::{Error, Result};
use crate::simkit::{load_example, Condition, DatasetManifest};
use crate::tasnet::{
    enh_loss, forward_graph, make_rotation_training_set, SnrMode, TasNetArch, TrainExample,
    DEFAULT_SNR_CAP_DB,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    EnhOnly,
    Joint,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_chunk_seconds() -> f64 {
    3.0
}
fn default_batch() -> usize {
    2
}
fn default_clip() -> f64 {
    5.0
}
fn default_weight() -> f64 {
    1.0
}
fn default_interval() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps_adam: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub max_steps: usize,
    #[serde(default = "default_chunk_seconds")]
    pub chunk_seconds: f64,
    pub seed: u64,
    /// Weight on the backend loss in joint mode (the enhancement and
    /// backend terms are summed unweighted by default).
    #[serde(default = "default_weight")]
    pub backend_weight: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_interval")]
    pub checkpoint_interval: usize,
    /// Stop once the training-batch loss drops below this value, if set.
    #[serde(default)]
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps_adam: default_eps(),
            batch_size: default_batch(),
            max_steps: 1000,
            chunk_seconds: default_chunk_seconds(),
            seed: 0,
            backend_weight: default_weight(),
            grad_clip: default_clip(),
            checkpoint_interval: default_interval(),
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_seconds <= 0.0 {
            return Err(Error::InvalidConfig("chunk_seconds must be > 0".into()));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and max_steps must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// chunk selection

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub start: usize,
    pub length: usize,
    pub total: usize,
}

impl ChunkPlan {
    pub fn covers_all(&self) -> bool {
        self.start == 0 && self.length == self.total
    }
}

/// Uniform random chunk of up to `k_seconds`; the start is aligned down to
/// `align` samples so the attached/detached boundary falls between encoder
/// frames.
pub fn select_chunk(
    total: usize,
    k_seconds: f64,
    fs: u32,
    align: usize,
    rng: &mut ChaCha8Rng,
) -> ChunkPlan {
    assert!(total >= 1);
    let length = ((k_seconds * fs as f64).round() as usize).min(total).max(1);
    let mut start = if length == total {
        0
    } else {
        rng.gen_range(0..=total - length)
    };
    if align > 1 {
        start -= start % align;
    }
    ChunkPlan {
        start,
        length,
        total,
    }
}

// ---------------------------------------------------------------------------
// truncated backprop through time

pub struct TbpttOutput {
    /// Full-length spliced speech estimate, [1, total].
    pub speech_full: DiffTensor,
    /// Full-length spliced noise estimate, [1, total].
    pub noise_full: DiffTensor,
    /// Gradient-bearing chunk estimates, [1, length].
    pub speech_chunk: DiffTensor,
    pub noise_chunk: DiffTensor,
    pub plan: ChunkPlan,
}

/// Runs the enhancer so that only the chunk carries the backward graph:
/// the full utterance gets a detached forward pass (a separate, discarded
/// graph), the chunk gets a graph-bearing pass, and the full-length output
/// is the detached signal with the chunk spliced in.
pub fn tbptt_forward(
    g: &mut Graph,
    params: &ParamSet,
    arch: &TasNetArch,
    y_rot: &Array2<f64>,
    plan: &ChunkPlan,
) -> Result<TbpttOutput> {
    if plan.total != y_rot.ncols() || plan.start + plan.length > plan.total {
        return Err(Error::InvalidConfig(format!(
            "chunk plan {plan:?} does not fit input of {} samples",
            y_rot.ncols()
        )));
    }
    if plan.covers_all() {
        let (x, n) = forward_graph(g, params, arch, y_rot, true)?;
        return Ok(TbpttOutput {
            speech_full: x,
            noise_full: n,
            speech_chunk: x,
            noise_chunk: n,
            plan: *plan,
        });
    }

    // detached full-length pass in a throwaway graph
    let mut scratch = Graph::new();
    let (dx, dn) = forward_graph(&mut scratch, params, arch, y_rot, false)?;
    let detached_x = scratch.value(dx).to_owned();
    let detached_n = scratch.value(dn).to_owned();
    drop(scratch);

    let chunk_in = y_rot
        .slice(ndarray::s![.., plan.start..plan.start + plan.length])
        .to_owned();
    let (cx, cn) = forward_graph(g, params, arch, &chunk_in, true)?;

    let splice = |g: &mut Graph, full: &ArrayD<f64>, chunk: DiffTensor| -> Result<DiffTensor> {
        let mut parts = Vec::new();
        if plan.start > 0 {
            let pre = full
                .slice_axis(Axis(1), ndarray::Slice::from(0..plan.start))
                .to_owned();
            parts.push(g.constant(pre)?);
        }
        parts.push(chunk);
        let end = plan.start + plan.length;
        if end < plan.total {
            let post = full
                .slice_axis(Axis(1), ndarray::Slice::from(end..plan.total))
                .to_owned();
            parts.push(g.constant(post)?);
        }
        g.concat_last(&parts)
    };
    let speech_full = splice(g, &detached_x, cx)?;
    let noise_full = splice(g, &detached_n, cn)?;
    Ok(TbpttOutput {
        speech_full,
        noise_full,
        speech_chunk: cx,
        noise_chunk: cn,
        plan: *plan,
    })
}

// ---------------------------------------------------------------------------
// backend surrogate

/// Fixed (non-learned) backend loss: mean squared log-mel distance between
/// the enhanced waveform and the clean source's features. Differentiable
/// through the tape via framing and constant DFT/mel matrices.
pub struct MelBackend {
    pub fft_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    window: Array1<f64>,
    cos_mat: Array2<f64>,
    sin_mat: Array2<f64>,
    mel: Array2<f64>,
}

const LOG_FLOOR: f64 = 1e-8;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl MelBackend {
    pub fn new(sample_rate: u32) -> Self {
        Self::with_sizes(sample_rate, 512, 128, 80)
    }

    pub fn with_sizes(sample_rate: u32, fft_size: usize, hop: usize, n_mels: usize) -> Self {
        let window = Array1::from_shape_fn(fft_size, |i| {
            0.5 - 0.5 * (2.0 * PI * i as f64 / fft_size as f64).cos()
        });
        let bins = fft_size / 2 + 1;
        let cos_mat = Array2::from_shape_fn((fft_size, bins), |(k, f)| {
            (2.0 * PI * k as f64 * f as f64 / fft_size as f64).cos()
        });
        let sin_mat = Array2::from_shape_fn((fft_size, bins), |(k, f)| {
            -(2.0 * PI * k as f64 * f as f64 / fft_size as f64).sin()
        });
        // triangular mel filters over [0, fs/2]
        let nyquist = sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let centers: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut mel = Array2::<f64>::zeros((bins, n_mels));
        for m in 0..n_mels {
            let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
            for f in 0..bins {
                let hz = f as f64 * nyquist / (bins - 1) as f64;
                let w = if hz <= lo || hz >= hi {
                    0.0
                } else if hz <= mid {
                    (hz - lo) / (mid - lo)
                } else {
                    (hi - hz) / (hi - mid)
                };
                mel[(f, m)] = w;
            }
        }
        MelBackend {
            fft_size,
            hop,
            n_mels,
            sample_rate,
            window,
            cos_mat,
            sin_mat,
            mel,
        }
    }

    fn frame_count(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            (len - self.fft_size) / self.hop + 1
        }
    }

    /// Plain (non-graph) log-mel features, used for targets.
    pub fn features(&self, x: &Array1<f64>) -> Result<Array2<f64>> {
        let frames = self.frame_count(x.len());
        if frames == 0 {
            return Err(Error::InputTooShort {
                got: x.len(),
                need: self.fft_size,
            });
        }
        let bins = self.fft_size / 2 + 1;
        let mut out = Array2::<f64>::zeros((frames, self.n_mels));
        let mut windowed = Array2::<f64>::zeros((frames, self.fft_size));
        for t in 0..frames {
            for k in 0..self.fft_size {
                windowed[(t, k)] = x[t * self.hop + k] * self.window[k];
            }
        }
        let re = windowed.dot(&self.cos_mat);
        let im = windowed.dot(&self.sin_mat);
        let mut power = Array2::<f64>::zeros((frames, bins));
        for t in 0..frames {
            for f in 0..bins {
                power[(t, f)] = re[(t, f)] * re[(t, f)] + im[(t, f)] * im[(t, f)];
            }
        }
        let melp = power.dot(&self.mel);
        for t in 0..frames {
            for m in 0..self.n_mels {
                out[(t, m)] = (melp[(t, m)] + LOG_FLOOR).ln();
            }
        }
        Ok(out)
    }

    /// Differentiable loss node: mean squared difference between the log-mel
    /// features of `signal` (any shape, flattened) and `target` features.
    pub fn loss(
        &self,
        g: &mut Graph,
        signal: DiffTensor,
        target: &Array2<f64>,
    ) -> Result<DiffTensor> {
        let len = g.value(signal).len();
        let frames = self.frame_count(len).min(target.nrows());
        if frames == 0 {
            return Err(Error::InputTooShort {
                got: len,
                need: self.fft_size,
            });
        }
        let flat = g.reshape(signal, &[len])?;
        let framed = g.frame(flat, self.hop, &self.window)?;
        let framed = if g.shape(framed)[0] > frames {
            // drop trailing frames the target does not cover
            let w = self.fft_size;
            let flat_frames = g.reshape(framed, &[g.shape(framed)[0] * w])?;
            let cut = g.slice_last(flat_frames, 0, frames * w)?;
            g.reshape(cut, &[frames, w])?
        } else {
            framed
        };
        let cos_t = g.constant(self.cos_mat.clone().into_dyn())?;
        let sin_t = g.constant(self.sin_mat.clone().into_dyn())?;
        let re = g.matmul(framed, cos_t)?;
        let im = g.matmul(framed, sin_t)?;
        let re2 = g.square(re)?;
        let im2 = g.square(im)?;
        let power = g.add(re2, im2)?;
        let mel_t = g.constant(self.mel.clone().into_dyn())?;
        let melp = g.matmul(power, mel_t)?;
        let melp = g.add_scalar(melp, LOG_FLOOR)?;
        let logmel = g.log(melp)?;
        let target_cut = target.slice(ndarray::s![..frames, ..]).to_owned();
        let target_t = g.constant(target_cut.into_dyn())?;
        let diff = g.sub(logmel, target_t)?;
        let sq = g.square(diff)?;
        g.mean(sq)
    }
}

// ---------------------------------------------------------------------------
// loss routing

/// Combines loss components per training condition: simulated data sums
/// both terms, the real-recording surrogate uses the backend loss only,
/// and clean-condition items bypass the frontend entirely.
pub fn joint_loss(
    g: &mut Graph,
    condition: Condition,
    enhancement: Option<DiffTensor>,
    backend: Option<DiffTensor>,
    backend_weight: f64,
) -> Result<DiffTensor> {
    match condition {
        Condition::Simu => {
            let e = enhancement.ok_or_else(|| Error::MissingReferences("simu item".into()))?;
            match backend {
                Some(b) => {
                    let wb = g.scale(b, backend_weight)?;
                    g.add(e, wb)
                }
                None => Ok(e),
            }
        }
        Condition::Real | Condition::Clean => {
            let b = backend.ok_or_else(|| {
                Error::InvalidConfig("backend loss required for real/clean items".into())
            })?;
            g.scale(b, backend_weight)
        }
    }
}

// ---------------------------------------------------------------------------
// adam

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
    pub step: usize,
}

/// Clips gradients to a global L2 norm; returns the pre-clip norm.
pub fn clip_gradients(grads: &mut BTreeMap<String, ArrayD<f64>>, max_norm: f64) -> f64 {
    let norm: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// One bias-corrected Adam update. Parameters without gradients are left
/// untouched; any non-finite gradient aborts the step before mutation.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, ArrayD<f64>>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        if params.get(name).map(|p| p.shape()) != Some(g.shape()) {
            return Err(Error::ShapeMismatch(format!(
                "gradient for '{name}' does not match parameter shape"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
        ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        });
        ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        });
        let p = params.get_mut(name).expect("checked above");
        ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
            let mhat = m / bc1;
            let vhat = v / bc2;
            *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps_adam);
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub conditions: BTreeMap<String, usize>,
    pub l_enh: f64,
    pub l_backend: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub loss_log: Vec<LossRecord>,
    pub final_checkpoint: PathBuf,
    pub steps_run: usize,
}

fn condition_name(c: Condition) -> &'static str {
    match c {
        Condition::Simu => "simu",
        Condition::Real => "real",
        Condition::Clean => "clean",
    }
}

fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Trains the enhancer on a manifest split. `EnhOnly` draws channel-rotated
/// items from simulated records and minimizes the two-term SNR loss;
/// `Joint` adds the chunked truncated-backprop pass and routes the backend
/// loss per condition. Deterministic given the seed; the last good
/// checkpoint survives a divergence abort.
pub fn train(
    manifest: &DatasetManifest,
    split: &str,
    mut params: ParamSet,
    arch: &TasNetArch,
    cfg: &TrainConfig,
    mode: TrainMode,
    out_dir: impl AsRef<Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let records: Vec<_> = manifest
        .split(split)
        .into_iter()
        .filter(|r| match mode {
            TrainMode::EnhOnly => r.condition == Condition::Simu,
            TrainMode::Joint => true,
        })
        .cloned()
        .collect();
    if records.is_empty() {
        return Err(Error::EmptyManifest);
    }

    // preload audio; training sets for this toolkit are small by design
    let mut items = Vec::new();
    for r in &records {
        let ex = load_example(r)?;
        items.push((r.clone(), ex));
    }
    // expand simulated items into all channel rotations once
    let mut rotated_pool = Vec::new();
    for (r, ex) in &items {
        if r.condition == Condition::Simu {
            let base = TrainExample {
                utt_id: r.utt_id.clone(),
                mixture: ex.mixture.clone(),
                clean: ex.clean.clone(),
                noise: ex.noise.clone(),
            };
            for rot in make_rotation_training_set(std::slice::from_ref(&base))? {
                rotated_pool.push((r.clone(), rot));
            }
        }
    }
    if mode == TrainMode::EnhOnly && rotated_pool.is_empty() {
        return Err(Error::MissingReferences(
            "no simulated records with references in split".into(),
        ));
    }

    let backend = MelBackend::new(items[0].1.mixture.sample_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::default();
    let mut loss_log = Vec::new();
    let final_path = out_dir.join("final.ckpt");
    let mut last_good: Option<PathBuf> = None;
    let mut steps_run = 0usize;

    for step in 1..=cfg.max_steps {
        let mut grads_acc: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
        let mut l_enh_sum = 0.0;
        let mut l_backend_sum = 0.0;
        let mut total_sum = 0.0;
        let mut condition_counts: BTreeMap<String, usize> = BTreeMap::new();

        for _ in 0..cfg.batch_size {
            let mut g = Graph::new();
            let (total, le, lb, cond) = match mode {
                TrainMode::EnhOnly => {
                    let (_, rot) = &rotated_pool[rng.gen_range(0..rotated_pool.len())];
                    let (xhat, nhat) =
                        forward_graph(&mut g, &params, arch, &rot.input.samples, true)?;
                    let loss = enh_loss(
                        &mut g,
                        &rot.speech_ref,
                        xhat,
                        &rot.noise_ref,
                        nhat,
                        SnrMode::Power10,
                        DEFAULT_SNR_CAP_DB,
                    )?;
                    (loss, g.scalar(loss), 0.0, Condition::Simu)
                }
                TrainMode::Joint => {
                    let (record, ex) = &items[rng.gen_range(0..items.len())];
                    match record.condition {
                        Condition::Clean => {
                            // frontend bypassed: backend loss on the source itself
                            let source = ex.mixture.channel(0);
                            let target = backend.features(&source)?;
                            let sig = g.constant(
                                source
                                    .into_shape_with_order(ndarray::IxDyn(&[ex.mixture.len()]))
                                    .expect("1-d"),
                            )?;
                            let lb = backend.loss(&mut g, sig, &target)?;
                            let loss =
                                joint_loss(&mut g, Condition::Clean, None, Some(lb), cfg.backend_weight)?;
                            (loss, 0.0, g.scalar(lb), Condition::Clean)
                        }
                        cond => {
                            let fs = ex.mixture.sample_rate;
                            let plan = select_chunk(
                                ex.mixture.len(),
                                cfg.chunk_seconds,
                                fs,
                                arch.stride,
                                &mut rng,
                            );
                            let out =
                                tbptt_forward(&mut g, &params, arch, &ex.mixture.samples, &plan)?;
                            let le_t = if cond == Condition::Simu {
                                let clean = ex.clean.as_ref().ok_or_else(|| {
                                    Error::MissingReferences(record.utt_id.clone())
                                })?;
                                let noise = ex.noise.as_ref().ok_or_else(|| {
                                    Error::MissingReferences(record.utt_id.clone())
                                })?;
                                let sl = ndarray::s![plan.start..plan.start + plan.length];
                                let xr = clean.channel(0).slice(sl).to_owned();
                                let nr = noise.channel(0).slice(sl).to_owned();
                                Some(enh_loss(
                                    &mut g,
                                    &xr,
                                    out.speech_chunk,
                                    &nr,
                                    out.noise_chunk,
                                    SnrMode::Power10,
                                    DEFAULT_SNR_CAP_DB,
                                )?)
                            } else {
                                None
                            };
                            let target_sig = ex
                                .target
                                .as_ref()
                                .ok_or_else(|| Error::MissingReferences(record.utt_id.clone()))?
                                .channel(0);
                            let target = backend.features(&target_sig)?;
                            let lb_t = backend.loss(&mut g, out.speech_full, &target)?;
                            let loss =
                                joint_loss(&mut g, cond, le_t, Some(lb_t), cfg.backend_weight)?;
                            (
                                loss,
                                le_t.map(|t| g.scalar(t)).unwrap_or(0.0),
                                g.scalar(lb_t),
                                cond,
                            )
                        }
                    }
                }
            };
            let total_v = g.scalar(total);
            if !total_v.is_finite() {
                if let Some(p) = &last_good {
                    let _ = std::fs::copy(p, &final_path);
                }
                write_loss_log(&out_dir.join("loss_log.jsonl"), &loss_log)?;
                return Err(Error::Diverged {
                    step,
                    reason: format!("loss {total_v}"),
                });
            }
            l_enh_sum += le;
            l_backend_sum += lb;
            total_sum += total_v;
            *condition_counts
                .entry(condition_name(cond).to_string())
                .or_insert(0) += 1;

            let grads = g.backward(total)?;
            for (name, grad) in g.named_gradients(&grads) {
                grads_acc
                    .entry(name)
                    .and_modify(|a| *a += &grad)
                    .or_insert(grad);
            }
        }

        let scale = 1.0 / cfg.batch_size as f64;
        for grad in grads_acc.values_mut() {
            grad.mapv_inplace(|v| v * scale);
        }
        let grad_norm = clip_gradients(&mut grads_acc, cfg.grad_clip);
        adam_step(&mut params, &grads_acc, &mut adam, cfg)?;
        steps_run = step;

        loss_log.push(LossRecord {
            step,
            conditions: condition_counts,
            l_enh: l_enh_sum * scale,
            l_backend: l_backend_sum * scale,
            total: total_sum * scale,
            grad_norm,
        });

        if step % cfg.checkpoint_interval == 0 || step == cfg.max_steps {
            let path = out_dir.join(format!("step_{step:06}.ckpt"));
            save_checkpoint(
                &path,
                &params,
                &serde_json::json!({"arch": arch, "step": step, "mode": mode}),
            )?;
            last_good = Some(path);
        }
        if let Some(target) = cfg.target_loss {
            if loss_log.last().map(|r| r.total) <= Some(target) {
                break;
            }
        }
    }

    save_checkpoint(
        &final_path,
        &params,
        &serde_json::json!({"arch": arch, "step": steps_run, "mode": mode}),
    )?;
    write_loss_log(&out_dir.join("loss_log.jsonl"), &loss_log)?;
    Ok(TrainOutcome {
        params,
        loss_log,
        final_checkpoint: final_path,
        steps_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::check::finite_diff_grad;
    use crate::tasnet::init_params;
    use ndarray::IxDyn;

    #[test]
    fn chunk_selection_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // short utterance: whole thing retained
        let p = select_chunk(5000, 3.0, 16000, 10, &mut rng);
        assert_eq!(p, ChunkPlan { start: 0, length: 5000, total: 5000 });
        // 5 s at 16 kHz with K = 3 s
        for _ in 0..50 {
            let p = select_chunk(80000, 3.0, 16000, 10, &mut rng);
            assert_eq!(p.length, 48000);
            assert!(p.start <= 32000);
            assert_eq!(p.start % 10, 0);
        }
        // determinism
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(
            select_chunk(80000, 3.0, 16000, 10, &mut a),
            select_chunk(80000, 3.0, 16000, 10, &mut b)
        );
    }

    #[test]
    fn adam_hand_example_and_edge_cases() {
        let cfg = TrainConfig::default();
        let mut params = ParamSet::new();
        params.insert("p", ArrayD::zeros(IxDyn(&[1])));
        let mut state = AdamState::default();

        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), ArrayD::from_elem(IxDyn(&[1]), 1.0));
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        let p = params.get("p").unwrap()[0];
        // bias-corrected m_hat = v_hat = 1 -> step of lr/(1 + eps)
        assert!((p + 1e-3).abs() < 1e-9, "{p}");

        // zero gradients leave parameters unchanged
        let mut params2 = ParamSet::new();
        params2.insert("p", ArrayD::from_elem(IxDyn(&[3]), 0.5));
        let mut st2 = AdamState::default();
        let mut zg = BTreeMap::new();
        zg.insert("p".to_string(), ArrayD::zeros(IxDyn(&[3])));
        adam_step(&mut params2, &zg, &mut st2, &cfg).unwrap();
        assert!(params2.get("p").unwrap().iter().all(|v| *v == 0.5));

        // lr = 0 leaves parameters unchanged
        let mut cfg0 = TrainConfig::default();
        cfg0.lr = 0.0;
        adam_step(&mut params2, &grads, &mut st2, &cfg0).unwrap_err(); // shape mismatch
        let mut g3 = BTreeMap::new();
        g3.insert("p".to_string(), ArrayD::from_elem(IxDyn(&[3]), 1.0));
        adam_step(&mut params2, &g3, &mut st2, &cfg0).unwrap();
        assert!(params2.get("p").unwrap().iter().all(|v| *v == 0.5));

        // non-finite gradient aborts before mutation
        let mut gn = BTreeMap::new();
        gn.insert("p".to_string(), ArrayD::from_elem(IxDyn(&[1]), f64::NAN));
        let before = params.get("p").unwrap().clone();
        match adam_step(&mut params, &gn, &mut state, &cfg) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "p"),
            other => panic!("{other:?}"),
        }
        assert_eq!(params.get("p").unwrap(), &before);
    }

    #[test]
    fn adam_order_independent() {
        // parameter-wise independence: updating two tensors in one call
        // matches updating them via two states
        let cfg = TrainConfig::default();
        let mut joint = ParamSet::new();
        joint.insert("a", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        joint.insert("b", ArrayD::from_elem(IxDyn(&[2]), -1.0));
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), ArrayD::from_elem(IxDyn(&[2]), 0.3));
        grads.insert("b".to_string(), ArrayD::from_elem(IxDyn(&[2]), -0.7));
        let mut st = AdamState::default();
        adam_step(&mut joint, &grads, &mut st, &cfg).unwrap();

        for name in ["a", "b"] {
            let mut single = ParamSet::new();
            single.insert(name, ArrayD::from_elem(IxDyn(&[2]), if name == "a" { 1.0 } else { -1.0 }));
            let mut g1 = BTreeMap::new();
            g1.insert(name.to_string(), grads[name].clone());
            let mut st1 = AdamState::default();
            adam_step(&mut single, &g1, &mut st1, &cfg).unwrap();
            assert_eq!(single.get(name).unwrap(), joint.get(name).unwrap());
        }
    }

    #[test]
    fn clip_rescales_large_gradients() {
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), ArrayD::from_elem(IxDyn(&[4]), 10.0));
        let norm = clip_gradients(&mut grads, 5.0);
        assert!((norm - 20.0).abs() < 1e-12);
        let new_norm: f64 = grads["p"].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((new_norm - 5.0).abs() < 1e-12);
    }

    #[test]
    fn mel_backend_gradient_matches_finite_differences() {
        let backend = MelBackend::with_sizes(16000, 64, 16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sig: Vec<f64> = (0..200).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let target_sig = Array1::from_shape_fn(200, |i| (i as f64 * 0.05).sin() * 0.3);
        let target = backend.features(&target_sig).unwrap();

        let inputs = vec![ArrayD::from_shape_vec(IxDyn(&[200]), sig).unwrap()];
        let mut g = Graph::new();
        let x = g.leaf(inputs[0].clone(), true).unwrap();
        let loss = backend.loss(&mut g, x, &target).unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().clone();

        let numeric = finite_diff_grad(&inputs, 0, 1e-6, |vals| {
            let mut g = Graph::new();
            let x = g.leaf(vals[0].clone(), false).unwrap();
            let loss = backend.loss(&mut g, x, &target).unwrap();
            g.scalar(loss)
        });
        let mut worst = 0.0f64;
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn mel_backend_zero_for_identical_signal() {
        let backend = MelBackend::with_sizes(16000, 64, 16, 8);
        let sig = Array1::from_shape_fn(300, |i| (i as f64 * 0.02).sin());
        let target = backend.features(&sig).unwrap();
        let mut g = Graph::new();
        let x = g.constant(sig.into_dyn()).unwrap();
        let loss = backend.loss(&mut g, x, &target).unwrap();
        assert!(g.scalar(loss) < 1e-20);
    }

    fn mini_setup() -> (ParamSet, TasNetArch, Array2<f64>) {
        let arch = TasNetArch::miniature();
        let params = init_params(&arch, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = Array2::from_shape_fn((arch.in_channels, 240), |_| rng.gen_range(-0.5..0.5));
        (params, arch, y)
    }

    #[test]
    fn tbptt_full_chunk_equals_plain_backprop() {
        let (params, arch, y) = mini_setup();
        let xr = Array1::from_shape_fn(240, |i| (i as f64 * 0.1).sin() * 0.2);
        let nr = Array1::from_shape_fn(240, |i| (i as f64 * 0.07).cos() * 0.2);
        let plan = ChunkPlan { start: 0, length: 240, total: 240 };

        let run = |tbptt: bool| -> BTreeMap<String, ArrayD<f64>> {
            let mut g = Graph::new();
            let (xhat, nhat) = if tbptt {
                let out = tbptt_forward(&mut g, &params, &arch, &y, &plan).unwrap();
                (out.speech_full, out.noise_full)
            } else {
                forward_graph(&mut g, &params, &arch, &y, true).unwrap()
            };
            let loss = enh_loss(&mut g, &xr, xhat, &nr, nhat, SnrMode::Power10, 60.0).unwrap();
            let grads = g.backward(loss).unwrap();
            g.named_gradients(&grads)
        };
        let a = run(true);
        let b = run(false);
        assert_eq!(a.len(), b.len());
        for (name, ga) in &a {
            let gb = &b[name];
            let diff = ga
                .iter()
                .zip(gb.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(diff < 1e-10, "{name}: {diff}");
        }
    }

    #[test]
    fn tbptt_out_of_chunk_loss_has_zero_frontend_gradient() {
        let (params, arch, y) = mini_setup();
        let plan = ChunkPlan { start: 80, length: 80, total: 240 };
        let mut g = Graph::new();
        let out = tbptt_forward(&mut g, &params, &arch, &y, &plan).unwrap();
        // loss touching only samples strictly outside the chunk
        let pre = g.slice_last(out.speech_full, 0, 80).unwrap();
        let post = g.slice_last(out.speech_full, 160, 80).unwrap();
        let both = g.concat_last(&[pre, post]).unwrap();
        let sq = g.square(both).unwrap();
        let loss = g.mean(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        let named = g.named_gradients(&grads);
        for (name, grad) in named {
            let max = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert_eq!(max, 0.0, "{name} received gradient");
        }
    }

    #[test]
    fn tbptt_graph_size_tracks_chunk_not_total() {
        let (params, arch, _) = mini_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut nodes_for = |total: usize| -> usize {
            let y = Array2::from_shape_fn((arch.in_channels, total), |_| rng.gen_range(-0.5..0.5));
            let plan = ChunkPlan { start: 40, length: 80, total };
            let mut g = Graph::new();
            tbptt_forward(&mut g, &params, &arch, &y, &plan).unwrap();
            g.node_count()
        };
        let small = nodes_for(240);
        let large = nodes_for(960);
        assert_eq!(small, large, "node count grew with utterance length");
    }

    #[test]
    fn train_smoke_deterministic_and_logs() {
        use crate::simkit::{build_dataset, ArrayGeometry, DatasetConfig, SynthSourcesSpec};
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(&DatasetConfig {
            source_dir: dir.path().join("src"),
            out_dir: dir.path().join("data"),
            train: 3,
            dev: 0,
            eval: 0,
            eval_mismatched: 0,
            train_real: 1,
            train_clean: 1,
            snr_db: (0.0, 5.0),
            seed: 3,
            sample_rate: 16000,
            geometry: Some(ArrayGeometry {
                positions: vec![(0.0, 0.0), (0.05, 0.0)],
                speed_of_sound: 343.0,
            }),
            synth_sources: Some(SynthSourcesSpec { count: 3, seconds: 0.12 }),
        })
        .unwrap();
        let arch = TasNetArch::miniature();
        let cfg = TrainConfig {
            max_steps: 3,
            batch_size: 1,
            chunk_seconds: 0.05,
            seed: 4,
            checkpoint_interval: 2,
            ..TrainConfig::default()
        };
        let run = |out: &Path, mode: TrainMode| {
            let params = init_params(&arch, 1).unwrap();
            train(&manifest, "train", params, &arch, &cfg, mode, out).unwrap()
        };
        let a = run(&dir.path().join("a"), TrainMode::Joint);
        let b = run(&dir.path().join("b"), TrainMode::Joint);
        assert_eq!(a.loss_log.len(), 3);
        for (ra, rb) in a.loss_log.iter().zip(b.loss_log.iter()) {
            assert_eq!(ra.total, rb.total);
            assert_eq!(ra.conditions, rb.conditions);
        }
        assert!(a.final_checkpoint.is_file());
        assert!(dir.path().join("a/step_000002.ckpt").is_file());
        assert!(dir.path().join("a/loss_log.jsonl").is_file());

        let c = run(&dir.path().join("c"), TrainMode::EnhOnly);
        assert_eq!(c.loss_log.len(), 3);
        assert!(c.loss_log.iter().all(|r| r.l_backend == 0.0));
    }

    #[test]
    fn joint_loss_routing() {
        let mut g = Graph::new();
        let e = g.constant(ArrayD::from_elem(IxDyn(&[]), 2.0)).unwrap();
        let b = g.constant(ArrayD::from_elem(IxDyn(&[]), 1.0)).unwrap();
        let simu = joint_loss(&mut g, Condition::Simu, Some(e), Some(b), 1.0).unwrap();
        assert_eq!(g.scalar(simu), 3.0);
        let real = joint_loss(&mut g, Condition::Real, None, Some(b), 1.0).unwrap();
        assert_eq!(g.scalar(real), 1.0); // backend value passes through
        assert!(matches!(
            joint_loss(&mut g, Condition::Simu, None, Some(b), 1.0),
            Err(Error::MissingReferences(_))
        ));
    }
}
