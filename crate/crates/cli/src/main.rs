//! Operator entry point: dataset synthesis, training, enhancement,
//! evaluation, and spectrogram rendering.
//!
//! Exit codes: 0 success, 1 runtime failure (message on stderr), 2 usage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use beamtas_core::beamform::{beam_tasnet_enhance, Strategy, DEFAULT_LOADING};
use beamtas_core::checkpoint::load_checkpoint;
use beamtas_core::dsp::{stft, MultiChannelWaveform, StftConfig};
use beamtas_core::metrics::evaluate_set;
use beamtas_core::simkit::{
    build_dataset, read_manifest, read_wav, write_wav, DatasetConfig, WavEncoding,
};
use beamtas_core::tasnet::{forward, init_params, rotate_channels, TasNetArch};
use beamtas_core::trainer::{train, TrainConfig, TrainMode};
use beamtas_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "beamtas",
    about = "Multi-channel time-domain speech enhancement with MVDR beamforming"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliStrategy {
    #[value(name = "tasnet")]
    Tasnet,
    #[value(name = "sig_mvdr")]
    SigMvdr,
    #[value(name = "mask_psm")]
    MaskPsm,
    #[value(name = "mask_1d")]
    Mask1d,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliMode {
    #[value(name = "enh_only")]
    EnhOnly,
    Joint,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliArch {
    Default,
    Small,
    Miniature,
}

impl CliArch {
    fn arch(self) -> TasNetArch {
        match self {
            CliArch::Default => TasNetArch::default(),
            CliArch::Small => TasNetArch::small(),
            CliArch::Miniature => TasNetArch::miniature(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic multi-channel dataset from a JSON config.
    Simulate {
        /// Dataset config file (see README for the schema).
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the enhancer on a manifest split.
    Train {
        /// Training config file (JSON); module defaults fill missing fields.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, value_enum, default_value = "enh_only")]
        mode: CliMode,
        /// Output directory for checkpoints and the loss log.
        #[arg(long)]
        out: PathBuf,
        /// Warm-start checkpoint; its stored architecture wins.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "small")]
        arch: CliArch,
        /// Seed for fresh parameter initialization (ignored with --init).
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
    },
    /// Enhance a multi-channel WAV with a trained model.
    Enhance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        strategy: CliStrategy,
        /// 1-based reference channel q.
        #[arg(long, default_value_t = 1)]
        ref_channel: usize,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 512)]
        fft_size: usize,
        #[arg(long, default_value_t = 128)]
        hop: usize,
        /// MVDR diagonal loading factor.
        #[arg(long, default_value_t = DEFAULT_LOADING)]
        loading: f64,
    },
    /// Score enhanced files against manifest references.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of enhanced `<utt_id>.wav` files.
        #[arg(long)]
        enhanced: PathBuf,
        /// Summary JSON path; per-utterance lines go next to it as .jsonl.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        hop: usize,
    },
    /// Render a log-magnitude spectrogram PNG.
    Spectrogram {
        #[arg(long)]
        input: PathBuf,
        /// 1-based channel.
        #[arg(long, default_value_t = 1)]
        channel: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        fft_size: usize,
        #[arg(long, default_value_t = 128)]
        hop: usize,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_model(path: &Path) -> Result<(beamtas_core::diffnet::ParamSet, TasNetArch)> {
    let (params, meta) = load_checkpoint(path)?;
    let arch: TasNetArch = serde_json::from_value(meta["arch"].clone())
        .map_err(|_| Error::CheckpointFormat("missing architecture metadata".into()))?;
    Ok((params, arch))
}

fn cmd_simulate(config: &Path) -> Result<()> {
    let cfg: DatasetConfig = read_json(config)?;
    let manifest = build_dataset(&cfg)?;
    println!(
        "wrote {} records to {}",
        manifest.records.len(),
        cfg.out_dir.join("manifest.jsonl").display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: &Path,
    manifest_path: &Path,
    split: &str,
    mode: CliMode,
    out: &Path,
    init: Option<&Path>,
    arch: CliArch,
    init_seed: u64,
) -> Result<()> {
    let cfg: TrainConfig = read_json(config)?;
    let manifest = read_manifest(manifest_path)?;
    let (params, arch) = match init {
        Some(path) => load_model(path)?,
        None => {
            let arch = arch.arch();
            (init_params(&arch, init_seed)?, arch)
        }
    };
    let mode = match mode {
        CliMode::EnhOnly => TrainMode::EnhOnly,
        CliMode::Joint => TrainMode::Joint,
    };
    let outcome = train(&manifest, split, params, &arch, &cfg, mode, out)?;
    println!(
        "trained {} steps; final checkpoint {}",
        outcome.steps_run,
        outcome.final_checkpoint.display()
    );
    if let Some(last) = outcome.loss_log.last() {
        println!("final loss {:.4}", last.total);
    }
    Ok(())
}

fn cmd_enhance(
    model: &Path,
    input: &Path,
    strategy: CliStrategy,
    ref_channel: usize,
    output: &Path,
    fft_size: usize,
    hop: usize,
    loading: f64,
) -> Result<()> {
    let (params, arch) = load_model(model)?;
    let wave = read_wav(input)?;
    if wave.channels() != arch.in_channels {
        return Err(Error::ChannelMismatch {
            expected: arch.in_channels,
            got: wave.channels(),
        });
    }
    let cfg = StftConfig {
        fft_size,
        hop,
        ..StftConfig::default()
    };
    cfg.validate()?;
    let enhanced = match strategy {
        CliStrategy::Tasnet => {
            let rotated = rotate_channels(&wave, ref_channel)?;
            let out = forward(&params, &arch, &rotated)?;
            MultiChannelWaveform::from_mono(out.speech.to_vec(), wave.sample_rate)?
        }
        _ => {
            let s = match strategy {
                CliStrategy::SigMvdr => Strategy::SigMvdr,
                CliStrategy::MaskPsm => Strategy::MaskPsm,
                CliStrategy::Mask1d => Strategy::Mask1d,
                CliStrategy::Tasnet => unreachable!(),
            };
            beam_tasnet_enhance(&params, &arch, &wave, s, ref_channel, &cfg, loading)?
        }
    };
    write_wav(output, &enhanced, WavEncoding::Float32)?;
    println!("wrote {}", output.display());
    Ok(())
}

fn cmd_evaluate(manifest_path: &Path, enhanced: &Path, out: &Path, hop: usize) -> Result<()> {
    let manifest = read_manifest(manifest_path)?;
    let report = evaluate_set(&manifest, enhanced, hop)?;
    let jsonl = out.with_extension("jsonl");
    report.write(&jsonl, out)?;
    print!("{}", report.render_table());
    Ok(())
}

fn cmd_spectrogram(
    input: &Path,
    channel: usize,
    out: &Path,
    fft_size: usize,
    hop: usize,
) -> Result<()> {
    let wave = read_wav(input)?;
    if channel < 1 || channel > wave.channels() {
        return Err(Error::ChannelIndexOutOfRange(channel, wave.channels()));
    }
    let cfg = StftConfig {
        fft_size,
        hop,
        ..StftConfig::default()
    };
    cfg.validate()?;
    let mono = MultiChannelWaveform::from_mono(wave.channel(channel - 1).to_vec(), wave.sample_rate)?;
    let spec = stft(&mono, &cfg)?;
    let (frames, bins) = (spec.frames(), spec.bins());
    let mut db = vec![vec![0.0f64; bins]; frames];
    let mut peak = 0.0f64;
    for t in 0..frames {
        for f in 0..bins {
            let m = spec.data[(0, t, f)].norm();
            db[t][f] = m;
            peak = peak.max(m);
        }
    }
    // dB relative to peak, clipped to [-80, 0]; silent input maps to the floor
    let floor = -80.0;
    let mut img = image::GrayImage::new(frames as u32, bins as u32);
    for t in 0..frames {
        for f in 0..bins {
            let v = if peak > 0.0 && db[t][f] > 0.0 {
                (20.0 * (db[t][f] / peak).log10()).clamp(floor, 0.0)
            } else {
                floor
            };
            let level = ((v - floor) / -floor * 255.0).round() as u8;
            // bottom-to-top low-to-high frequency
            img.put_pixel(t as u32, (bins - 1 - f) as u32, image::Luma([level]));
        }
    }
    img.save(out)
        .map_err(|e| Error::InvalidConfig(format!("png encode failed: {e}")))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config } => cmd_simulate(&config),
        Command::Train {
            config,
            manifest,
            split,
            mode,
            out,
            init,
            arch,
            init_seed,
        } => cmd_train(
            &config,
            &manifest,
            &split,
            mode,
            &out,
            init.as_deref(),
            arch,
            init_seed,
        ),
        Command::Enhance {
            model,
            input,
            strategy,
            ref_channel,
            output,
            fft_size,
            hop,
            loading,
        } => cmd_enhance(
            &model, &input, strategy, ref_channel, &output, fft_size, hop, loading,
        ),
        Command::Evaluate {
            manifest,
            enhanced,
            out,
            hop,
        } => cmd_evaluate(&manifest, &enhanced, &out, hop),
        Command::Spectrogram {
            input,
            channel,
            out,
            fft_size,
            hop,
        } => cmd_spectrogram(&input, channel, &out, fft_size, hop),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
