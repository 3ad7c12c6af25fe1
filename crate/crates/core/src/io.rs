//! Persistence: versioned JSON documents, CSV tables and atomic writes.
//!
//! Every JSON file is an envelope `{format, version, payload}`. Loading
//! checks both tags before touching the payload. Floats go through
//! `serde_json`'s shortest round-trip formatting, so `f64` values survive a
//! save/load cycle bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{AbsorptionReport, Readout, SplitResult};
use crate::error::{Error, Result};
use crate::probes::{EvalReport, KSparsePoint, ProbeModel};
use crate::sae::SaeModel;
use crate::synthgen::{ActivationBatch, FeatureDictionary, FiringSpec};
use crate::theory::TheoryReport;
use crate::trainer::TrainTrace;

pub const FORMAT_VERSION: u32 = 1;

/// A type with its own JSON format tag.
pub trait Persist: Serialize + DeserializeOwned {
    const FORMAT: &'static str;
}

macro_rules! persist {
    ($($ty:ty => $tag:literal),* $(,)?) => {
        $(impl Persist for $ty { const FORMAT: &'static str = $tag; })*
    };
}

persist! {
    FeatureDictionary => "feature_dictionary",
    FiringSpec => "firing_spec",
    ActivationBatch => "activation_batch",
    SaeModel => "sae_model",
    TrainTrace => "train_trace",
    ProbeModel => "probe_model",
    Readout => "readout",
    EvalReport => "eval_report",
    AbsorptionReport => "absorption_report",
    TheoryReport => "theory_report",
    Vec<SplitResult> => "split_results",
    Vec<KSparsePoint> => "k_sparse_curve",
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    format: &'a str,
    version: u32,
    payload: &'a T,
}

#[derive(Deserialize)]
struct EnvelopeIn {
    format: String,
    version: u32,
    payload: serde_json::Value,
}

pub fn to_json<T: Persist>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&EnvelopeOut {
        format: T::FORMAT,
        version: FORMAT_VERSION,
        payload: value,
    })?;
    s.push('\n');
    Ok(s)
}

/// Parse an envelope; `origin` names the source in error messages.
pub fn from_json<T: Persist>(text: &str, origin: &Path) -> Result<T> {
    let format_err = |detail: String| Error::Format {
        path: origin.to_path_buf(),
        detail,
    };
    let env: EnvelopeIn = serde_json::from_str(text).map_err(|e| format_err(format!("not a versioned document: {e}")))?;
    if env.format != T::FORMAT {
        return Err(format_err(format!("expected format `{}`, found `{}`", T::FORMAT, env.format)));
    }
    if env.version != FORMAT_VERSION {
        return Err(format_err(format!("expected version {FORMAT_VERSION}, found {}", env.version)));
    }
    serde_json::from_value(env.payload).map_err(|e| format_err(format!("corrupt payload: {e}")))
}

pub fn save_json<T: Persist>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json(value)?.as_bytes())
}

pub fn load_json<T: Persist>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text, path)
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp: PathBuf = path.to_path_buf();
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// CSV text from a header and rows of already-formatted cells.
pub fn csv_string<I, R>(header: &[&str], rows: I) -> Result<String>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn trace_csv(trace: &TrainTrace) -> Result<String> {
    csv_string(
        &["step", "samples_seen", "recon_mse", "l1", "l0", "ev", "total"],
        trace.checkpoints.iter().map(|c| {
            let r = &c.report;
            vec![
                c.step.to_string(),
                c.samples_seen.to_string(),
                fmt_f64(r.recon_mse),
                fmt_f64(r.sparsity_l1),
                fmt_f64(r.l0_mean),
                fmt_f64(r.explained_variance),
                fmt_f64(r.total),
            ]
        }),
    )
}

/// `(class, k, f1)` rows from a full k-sparse curve.
pub fn k_curve_csv(curve: &[KSparsePoint]) -> Result<String> {
    let rows = curve.iter().flat_map(|p| {
        p.per_class_f1
            .iter()
            .enumerate()
            .map(move |(c, &f1)| vec![c.to_string(), p.k.to_string(), fmt_f64(f1)])
    });
    csv_string(&["class", "k", "f1"], rows)
}

/// `(class, k, f1)` rows from the scanned part of each split curve.
pub fn split_curve_csv(splits: &[SplitResult]) -> Result<String> {
    let rows = splits.iter().flat_map(|s| {
        s.f1_curve
            .iter()
            .enumerate()
            .map(move |(i, &f1)| vec![s.class.to_string(), (i + 1).to_string(), fmt_f64(f1)])
    });
    csv_string(&["class", "k", "f1"], rows)
}

pub fn verdict_csv(report: &AbsorptionReport) -> Result<String> {
    let rows = report.classes.iter().flat_map(|c| {
        c.verdicts.iter().map(move |v| {
            vec![
                c.class.to_string(),
                v.sample_id.to_string(),
                v.top_latent.map(|l| l.to_string()).unwrap_or_default(),
                fmt_opt(v.effect),
                fmt_opt(v.runner_up_effect),
                fmt_opt(v.probe_cosine),
                fmt_opt(v.projection_fraction),
                v.absorbed.to_string(),
            ]
        })
    });
    csv_string(
        &["class", "sample_id", "top_latent", "effect", "runner_up_effect", "cosine", "projection_fraction", "verdict"],
        rows,
    )
}

/// Long-form matrix: one `(row, col, value)` line per entry.
pub fn matrix_csv(m: &Array2<f64>, row_name: &str, col_name: &str) -> Result<String> {
    let rows = m
        .indexed_iter()
        .map(|((i, j), &v)| vec![i.to_string(), j.to_string(), fmt_f64(v)]);
    csv_string(&[row_name, col_name, "value"], rows)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::make_dictionary;
    use ndarray::array;

    #[test]
    fn envelope_round_trip_is_bit_exact() {
        let dict = make_dictionary(7, 3, 11).unwrap();
        let text = to_json(&dict).unwrap();
        let back: FeatureDictionary = from_json(&text, Path::new("mem")).unwrap();
        assert_eq!(back, dict);
        for (a, b) in back.directions.iter().zip(dict.directions.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn wrong_tag_or_version_is_rejected() {
        let dict = make_dictionary(4, 2, 0).unwrap();
        let text = to_json(&dict).unwrap();
        assert!(matches!(from_json::<SaeModel>(&text, Path::new("x")), Err(Error::Format { .. })));
        let bumped = text.replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(matches!(from_json::<FeatureDictionary>(&bumped, Path::new("x")), Err(Error::Format { .. })));
        assert!(matches!(from_json::<FeatureDictionary>("{]", Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, f64::MIN_POSITIVE, 123456789.123456789] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn matrix_csv_is_long_form() {
        let csv = matrix_csv(&array![[1.0, 0.5]], "latent", "feature").unwrap();
        assert_eq!(csv, "latent,feature,value\n0,0,1.0\n0,1,0.5\n");
    }

    #[test]
    fn atomic_write_creates_parents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/c.txt");
        write_text(&path, "hi").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "hi");
        assert!(load_json::<SaeModel>(&dir.path().join("missing.json")).is_err());
    }
}
