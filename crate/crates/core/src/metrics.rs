//! Signal-level evaluation: SNR, SI-SDR, and SDR against clean references.
//!
//! Plain SNR and scale-invariant SDR stand in for full BSS-Eval SDR; the
//! report header records this substitution.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simkit::{read_wav, Condition, DatasetManifest};
use crate::tasnet::{snr_db, SnrMode, DEFAULT_SNR_CAP_DB};

pub const METRIC_CAP_DB: f64 = DEFAULT_SNR_CAP_DB;

fn check_lengths(ref_sig: &Array1<f64>, est: &Array1<f64>) -> Result<()> {
    if ref_sig.is_empty() {
        return Err(Error::EmptyInput);
    }
    if ref_sig.len() != est.len() {
        return Err(Error::ShapeMismatch(format!(
            "reference length {} vs estimate length {}",
            ref_sig.len(),
            est.len()
        )));
    }
    Ok(())
}

/// Scale-invariant SDR: project the estimate onto the reference and report
/// 10 log10 of target-to-residual energy, capped at +-60 dB.
pub fn si_sdr(ref_sig: &Array1<f64>, est: &Array1<f64>) -> Result<f64> {
    check_lengths(ref_sig, est)?;
    let ref_energy = ref_sig.dot(ref_sig);
    if ref_energy == 0.0 {
        return Err(Error::SilentReference);
    }
    let alpha = est.dot(ref_sig) / ref_energy;
    let target = ref_sig.mapv(|v| v * alpha);
    let residual = est - &target;
    let te = target.dot(&target);
    let re = residual.dot(&residual);
    if re == 0.0 {
        return Ok(METRIC_CAP_DB);
    }
    Ok((10.0 * (te / re).log10()).clamp(-METRIC_CAP_DB, METRIC_CAP_DB))
}

/// SDR: with allow_scale it equals SI-SDR, otherwise plain SNR of the
/// unscaled estimate.
pub fn sdr(ref_sig: &Array1<f64>, est: &Array1<f64>, allow_scale: bool) -> Result<f64> {
    check_lengths(ref_sig, est)?;
    if allow_scale {
        si_sdr(ref_sig, est)
    } else {
        snr_db(ref_sig, est, SnrMode::Power10, METRIC_CAP_DB)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub utt_id: String,
    pub snr_db: f64,
    pub si_sdr_db: f64,
    pub sdr_db: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Notes the SDR substitution for readers of the raw report.
    pub header: String,
    pub utterances: Vec<UtteranceMetrics>,
    /// Aggregates over finite per-utterance values, keyed by metric name.
    pub aggregates: BTreeMap<String, MetricAggregate>,
    pub evaluated: usize,
    pub skipped: usize,
    pub skip_reasons: Vec<(String, String)>,
}

fn aggregate(values: impl Iterator<Item = f64>) -> MetricAggregate {
    let mut finite: Vec<f64> = values.filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return MetricAggregate::default();
    }
    finite.sort_by(|a, b| a.total_cmp(b));
    let n = finite.len();
    let median = if n % 2 == 1 {
        finite[n / 2]
    } else {
        0.5 * (finite[n / 2 - 1] + finite[n / 2])
    };
    MetricAggregate {
        mean: finite.iter().sum::<f64>() / n as f64,
        median,
    }
}

/// Scores enhanced single-channel files (`<utt_id>.wav` under
/// `enhanced_dir`) against each record's reference-channel clean speech.
/// Records without references or with missing/ill-matched files are skipped
/// with a reason. Length mismatches up to `hop` samples are resolved by
/// truncating both signals.
pub fn evaluate_set(
    manifest: &DatasetManifest,
    enhanced_dir: impl AsRef<Path>,
    hop: usize,
) -> Result<MetricReport> {
    if manifest.records.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let enhanced_dir = enhanced_dir.as_ref();
    let mut records: Vec<_> = manifest.records.iter().collect();
    records.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));

    let mut utterances = Vec::new();
    let mut skip_reasons = Vec::new();
    for record in records {
        let skip = |reason: String, skips: &mut Vec<(String, String)>| {
            skips.push((record.utt_id.clone(), reason));
        };
        if record.condition != Condition::Simu || record.clean.is_empty() {
            skip("no clean reference".into(), &mut skip_reasons);
            continue;
        }
        let enh_path = enhanced_dir.join(format!("{}.wav", record.utt_id));
        if !enh_path.is_file() {
            skip(format!("missing enhanced file {}", enh_path.display()), &mut skip_reasons);
            continue;
        }
        let reference = match read_wav(&record.clean[0]) {
            Ok(w) => w,
            Err(e) => {
                skip(format!("reference unreadable: {e}"), &mut skip_reasons);
                continue;
            }
        };
        let enhanced = match read_wav(&enh_path) {
            Ok(w) => w,
            Err(e) => {
                skip(format!("enhanced unreadable: {e}"), &mut skip_reasons);
                continue;
            }
        };
        if reference.sample_rate != enhanced.sample_rate {
            skip(
                format!(
                    "sample rate mismatch: {} vs {}",
                    reference.sample_rate, enhanced.sample_rate
                ),
                &mut skip_reasons,
            );
            continue;
        }
        let (rl, el) = (reference.len(), enhanced.len());
        if rl.abs_diff(el) > hop {
            skip(
                format!("length mismatch beyond one hop: {rl} vs {el}"),
                &mut skip_reasons,
            );
            continue;
        }
        let n = rl.min(el);
        let r = reference.channel(0).slice(ndarray::s![..n]).to_owned();
        let e = enhanced.channel(0).slice(ndarray::s![..n]).to_owned();
        let snr = snr_db(&r, &e, SnrMode::Power10, METRIC_CAP_DB)?;
        utterances.push(UtteranceMetrics {
            utt_id: record.utt_id.clone(),
            snr_db: snr,
            si_sdr_db: si_sdr(&r, &e)?,
            sdr_db: snr,
        });
    }

    let mut aggregates = BTreeMap::new();
    aggregates.insert(
        "snr_db".to_string(),
        aggregate(utterances.iter().map(|u| u.snr_db)),
    );
    aggregates.insert(
        "si_sdr_db".to_string(),
        aggregate(utterances.iter().map(|u| u.si_sdr_db)),
    );
    aggregates.insert(
        "sdr_db".to_string(),
        aggregate(utterances.iter().map(|u| u.sdr_db)),
    );
    Ok(MetricReport {
        header: "SDR reported as plain SNR (allow_scale=false); SI-SDR replaces BSS-Eval SDR"
            .to_string(),
        evaluated: utterances.len(),
        skipped: skip_reasons.len(),
        utterances,
        aggregates,
        skip_reasons,
    })
}

impl MetricReport {
    /// Writes one JSON record per utterance plus a summary JSON object.
    pub fn write(&self, jsonl_path: impl AsRef<Path>, summary_path: impl AsRef<Path>) -> Result<()> {
        let jsonl_path = jsonl_path.as_ref();
        let mut lines = String::new();
        for u in &self.utterances {
            lines.push_str(&serde_json::to_string(u)?);
            lines.push('\n');
        }
        std::fs::write(jsonl_path, lines).map_err(|e| Error::io(jsonl_path, e))?;
        let summary_path = summary_path.as_ref();
        let summary = serde_json::json!({
            "header": self.header,
            "evaluated": self.evaluated,
            "skipped": self.skipped,
            "skip_reasons": self.skip_reasons,
            "aggregates": self.aggregates,
        });
        std::fs::write(summary_path, serde_json::to_string_pretty(&summary)?)
            .map_err(|e| Error::io(summary_path, e))
    }

    /// Aligned text table for console output.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# {}\n", self.header));
        out.push_str(&format!(
            "{:<20} {:>10} {:>12} {:>10}\n",
            "utt_id", "snr_db", "si_sdr_db", "sdr_db"
        ));
        for u in &self.utterances {
            out.push_str(&format!(
                "{:<20} {:>10.2} {:>12.2} {:>10.2}\n",
                u.utt_id, u.snr_db, u.si_sdr_db, u.sdr_db
            ));
        }
        for (name, agg) in &self.aggregates {
            out.push_str(&format!(
                "{:<20} mean {:>8.2}  median {:>8.2}\n",
                name, agg.mean, agg.median
            ));
        }
        if self.skipped > 0 {
            out.push_str(&format!("skipped: {}\n", self.skipped));
            for (id, reason) in &self.skip_reasons {
                out.push_str(&format!("  {id}: {reason}\n"));
            }
        }
        out
    }
}
