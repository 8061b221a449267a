//! Result emission: per-round line records, summary tables, and their exact
//! recomputation. Every file is a pure function of (config, seed), so reruns
//! are byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::resolved_toml;
use crate::engine::{ExperimentConfig, RoundRecord};
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.resolved";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Headline metrics recomputed from the record stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub final_ma: f64,
    pub final_asr: f64,
    /// Mean over rounds where the defense reported a selection.
    pub mean_tpr: Option<f64>,
    pub mean_fpr: Option<f64>,
    /// Optional clean-run reference accuracy supplied by the caller.
    pub clean_ma: Option<f64>,
}

/// A finished experiment on disk or in memory.
#[derive(Debug, Clone)]
pub struct ResultBundle {
    pub config: ExperimentConfig,
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
}

/// Fixed 2-decimal percent formatting, round-half-even; `None` prints `NA`.
pub fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.2}", (x * 100.0).round_ties_even() / 100.0),
        None => "NA".to_string(),
    }
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Recompute the summary from the record stream.
pub fn summarize(records: &[RoundRecord], clean_ma: Option<f64>) -> Result<Summary> {
    let last = records
        .last()
        .ok_or_else(|| Error::InvalidData("no records to summarize".into()))?;
    Ok(Summary {
        final_ma: last.ma,
        final_asr: last.asr,
        mean_tpr: mean_opt(records.iter().map(|r| r.tpr)),
        mean_fpr: mean_opt(records.iter().map(|r| r.fpr)),
        clean_ma,
    })
}

pub const SUMMARY_HEADER: &str = "final_ma,final_asr,mean_tpr,mean_fpr,clean_ma";

pub fn summary_row(s: &Summary) -> String {
    format!(
        "{},{},{},{},{}",
        fmt_pct(Some(s.final_ma)),
        fmt_pct(Some(s.final_asr)),
        fmt_pct(s.mean_tpr),
        fmt_pct(s.mean_fpr),
        fmt_pct(s.clean_ma),
    )
}

/// Serialize records to line-delimited JSON, one self-describing record per
/// line (wall time is excluded by the record's own serialization rules).
pub fn rounds_jsonl(records: &[RoundRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::InvalidData(format!("record serialization failed: {e}")))?;
        writeln!(out, "{line}").expect("string write cannot fail");
    }
    Ok(out)
}

fn parse_rounds(text: &str, path: &Path) -> Result<Vec<RoundRecord>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::InvalidData(format!(
                "{}:{}: bad record: {e}",
                path.display(),
                i + 1
            )))
        })
        .collect()
}

/// Write `config.resolved`, `rounds.jsonl`, and `summary.csv` into `dir`
/// (created if absent).
pub fn write_bundle(dir: &Path, bundle: &ResultBundle) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, content: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))
    };
    write(CONFIG_FILE, resolved_toml(&bundle.config)?)?;
    write(ROUNDS_FILE, rounds_jsonl(&bundle.records)?)?;
    write(
        SUMMARY_FILE,
        format!("{SUMMARY_HEADER}\n{}\n", summary_row(&bundle.summary)),
    )?;
    Ok(())
}

fn parse_summary(text: &str, path: &Path) -> Result<Summary> {
    let bad = |msg: &str| Error::InvalidData(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty summary"))?;
    if header != SUMMARY_HEADER {
        return Err(bad("unexpected summary header"));
    }
    let row = lines.next().ok_or_else(|| bad("missing summary row"))?;
    let fields: Vec<&str> = row.split(',').collect();
    if fields.len() != 5 {
        return Err(bad("wrong summary column count"));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s == "NA" {
            Ok(None)
        } else {
            s.parse::<f64>()
                .map(Some)
                .map_err(|e| bad(&format!("bad number `{s}`: {e}")))
        }
    };
    Ok(Summary {
        final_ma: num(fields[0])?.ok_or_else(|| bad("final_ma is NA"))?,
        final_asr: num(fields[1])?.ok_or_else(|| bad("final_asr is NA"))?,
        mean_tpr: num(fields[2])?,
        mean_fpr: num(fields[3])?,
        clean_ma: num(fields[4])?,
    })
}

/// Read a bundle back from disk.
pub fn load_bundle(dir: &Path) -> Result<ResultBundle> {
    let read = |name: &str| -> Result<(String, PathBuf)> {
        let path = dir.join(name);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok((text, path))
    };
    let (cfg_text, _) = read(CONFIG_FILE)?;
    let config = crate::config::parse_config(&cfg_text)?;
    let (rounds_text, rounds_path) = read(ROUNDS_FILE)?;
    let records = parse_rounds(&rounds_text, &rounds_path)?;
    let (summary_text, summary_path) = read(SUMMARY_FILE)?;
    let summary = parse_summary(&summary_text, &summary_path)?;
    Ok(ResultBundle { config, records, summary })
}

/// Check that the stored summary equals a recomputation from the records,
/// to the last printed digit.
pub fn verify_bundle(bundle: &ResultBundle) -> Result<()> {
    if bundle.records.len() != bundle.config.rounds {
        return Err(Error::InvalidData(format!(
            "bundle holds {} records but config says {} rounds",
            bundle.records.len(),
            bundle.config.rounds
        )));
    }
    let recomputed = summarize(&bundle.records, bundle.summary.clean_ma)?;
    if summary_row(&recomputed) != summary_row(&bundle.summary) {
        return Err(Error::InvalidData(format!(
            "summary mismatch: stored `{}` vs recomputed `{}`",
            summary_row(&bundle.summary),
            summary_row(&recomputed)
        )));
    }
    Ok(())
}
