//! Command-line front end: run single experiments, sweep config axes,
//! compare finished result bundles, and materialize synthetic datasets.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedsim::config::config_with_overrides;
use fedsim::data::{export_csv, gen_synthetic_id, gen_synthetic_ood};
use fedsim::engine::{run_experiment, ExperimentConfig};
use fedsim::error::{Error, Result};
use fedsim::output::{
    fmt_pct, load_bundle, summarize, summary_row, verify_bundle, write_bundle, ResultBundle,
    SUMMARY_HEADER,
};

/// Environment variable that prefixes every relative output path.
const OUT_ROOT_ENV: &str = "FEDSIM_OUT_ROOT";

#[derive(Parser)]
#[command(name = "fedsim", about = "Federated-learning backdoor attack/defense simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its result bundle.
    Run {
        /// TOML config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the result bundle.
        #[arg(long, default_value = "out/run")]
        out: PathBuf,
        /// Dotted-key overrides, e.g. --set soda.lambda_d=10
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Clean-run reference accuracy echoed into the summary.
        #[arg(long)]
        clean_ma: Option<f64>,
    },
    /// Run a grid of experiments over one or more config axes.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out/sweep")]
        out: PathBuf,
        /// Axis spec, e.g. --axis poison_ratio=0.1,0.3,0.5,0.7 (repeatable).
        #[arg(long = "axis", value_name = "KEY=V1,V2,...")]
        axes: Vec<String>,
    },
    /// Compare finished result bundles and emit plot data.
    Report {
        /// Result bundle directories.
        dirs: Vec<PathBuf>,
        /// Directory for the comparison table and plot CSVs.
        #[arg(long, default_value = "out/report")]
        out: PathBuf,
    },
    /// Generate a synthetic dataset CSV.
    GenData {
        #[arg(value_enum)]
        kind: DataKind,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        /// Samples per class (id datasets).
        #[arg(long)]
        per_class: Option<usize>,
        /// Total sample count (ood datasets).
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        spread: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Id,
    Ood,
}

/// Relative output paths are rooted at `$FEDSIM_OUT_ROOT` when set.
fn rooted(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn load_base(config: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        None => String::new(),
    };
    config_with_overrides(&text, overrides)
}

fn run_to_bundle(cfg: ExperimentConfig, clean_ma: Option<f64>) -> Result<ResultBundle> {
    let out = run_experiment(&cfg)?;
    let summary = summarize(&out.records, clean_ma)?;
    Ok(ResultBundle { config: cfg, records: out.records, summary })
}

fn cmd_run(
    config: Option<&Path>,
    out: &Path,
    overrides: &[String],
    clean_ma: Option<f64>,
) -> Result<()> {
    let cfg = load_base(config, overrides)?;
    let dir = rooted(out);
    let bundle = run_to_bundle(cfg, clean_ma)?;
    write_bundle(&dir, &bundle)?;
    println!(
        "wrote {} ({} rounds, final MA {}, final ASR {})",
        dir.display(),
        bundle.records.len(),
        fmt_pct(Some(bundle.summary.final_ma)),
        fmt_pct(Some(bundle.summary.final_asr)),
    );
    Ok(())
}

struct Axis {
    key: String,
    values: Vec<String>,
}

fn parse_axes(axes: &[String]) -> Result<Vec<Axis>> {
    if axes.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one --axis".into()));
    }
    axes.iter()
        .map(|spec| {
            let (key, vals) = spec.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("axis `{spec}` is not of the form key=v1,v2"))
            })?;
            let values: Vec<String> =
                vals.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                return Err(Error::InvalidConfig(format!("axis `{key}` has no values")));
            }
            Ok(Axis { key: key.trim().to_string(), values })
        })
        .collect()
}

fn grid_points(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for point in &points {
            for v in &axis.values {
                let mut p = point.clone();
                p.push((axis.key.clone(), v.clone()));
                next.push(p);
            }
        }
        points = next;
    }
    points
}

fn cmd_sweep(config: Option<&Path>, out: &Path, axes: &[String]) -> Result<()> {
    let base_text = match config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        None => String::new(),
    };
    let axes = parse_axes(axes)?;
    // Validate axis values eagerly so bad grids fail before any run starts.
    for axis in &axes {
        for v in &axis.values {
            let probe = format!("{}={}", axis.key, v);
            config_with_overrides(&base_text, std::slice::from_ref(&probe))?;
        }
    }
    let dir = rooted(out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut csv = String::new();
    let axis_cols: Vec<String> = axes.iter().map(|a| a.key.clone()).collect();
    csv.push_str("dir,");
    csv.push_str(&axis_cols.join(","));
    csv.push(',');
    csv.push_str(SUMMARY_HEADER);
    csv.push('\n');

    for (i, point) in grid_points(&axes).iter().enumerate() {
        let overrides: Vec<String> =
            point.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let cfg = config_with_overrides(&base_text, &overrides)?;
        let name = format!("point_{i:03}");
        let bundle = run_to_bundle(cfg, None)?;
        write_bundle(&dir.join(&name), &bundle)?;
        let values: Vec<String> = point.iter().map(|(_, v)| v.clone()).collect();
        csv.push_str(&format!("{name},{},{}\n", values.join(","), summary_row(&bundle.summary)));
        println!(
            "{name}: {} -> final ASR {}",
            overrides.join(" "),
            fmt_pct(Some(bundle.summary.final_asr))
        );
    }
    let sweep_path = dir.join("sweep.csv");
    std::fs::write(&sweep_path, csv).map_err(|e| Error::io(&sweep_path, e))?;
    println!("wrote {}", sweep_path.display());
    Ok(())
}

fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<()> {
    if dirs.is_empty() {
        return Err(Error::InvalidConfig("report needs at least one bundle directory".into()));
    }
    let out = rooted(out);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut table = String::from("bundle,attack,defense,");
    table.push_str(SUMMARY_HEADER);
    table.push('\n');
    for dir in dirs {
        let dir = rooted(dir);
        let bundle = load_bundle(&dir)?;
        verify_bundle(&bundle)
            .map_err(|e| Error::InvalidData(format!("bundle {}: {e}", dir.display())))?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let attack = toml_variant(&bundle.config.attack)?;
        let defense = toml_variant(&bundle.config.defense)?;
        table.push_str(&format!(
            "{name},{attack},{defense},{}\n",
            summary_row(&bundle.summary)
        ));
        // Per-round trend data in (round, asr, fpr) columns.
        let mut plot = String::from("round,asr,fpr\n");
        for r in &bundle.records {
            plot.push_str(&format!("{},{},{}\n", r.round, fmt_pct(Some(r.asr)), fmt_pct(r.fpr)));
        }
        let plot_path = out.join(format!("plot_{name}.csv"));
        std::fs::write(&plot_path, plot).map_err(|e| Error::io(&plot_path, e))?;
    }
    print!("{table}");
    let table_path = out.join("report.csv");
    std::fs::write(&table_path, table).map_err(|e| Error::io(&table_path, e))?;
    println!("wrote {}", table_path.display());
    Ok(())
}

/// The snake_case name of a unit enum variant, via its serde serialization.
fn toml_variant<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .ok_or_else(|| Error::InvalidData("expected a unit enum variant".into()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    kind: DataKind,
    classes: usize,
    dim: usize,
    per_class: Option<usize>,
    count: Option<usize>,
    spread: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let dataset = match kind {
        DataKind::Id => {
            let per_class = per_class
                .ok_or_else(|| Error::InvalidConfig("id data needs --per-class".into()))?;
            gen_synthetic_id(classes, dim, per_class, spread, seed)?
        }
        DataKind::Ood => {
            let count =
                count.ok_or_else(|| Error::InvalidConfig("ood data needs --count".into()))?;
            gen_synthetic_ood(classes, dim, count, seed)?
        }
    };
    let path = rooted(out);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    export_csv(&dataset, &path)?;
    println!("wrote {} ({} samples, dim {})", path.display(), dataset.len(), dataset.dim());
    Ok(())
}

/// Exit 1 for configuration/validation problems, 2 for runtime failures.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::CsvParse { .. } => 1,
        Error::Io { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, out, overrides, clean_ma } => {
            cmd_run(config.as_deref(), out, overrides, *clean_ma)
        }
        Command::Sweep { config, out, axes } => cmd_sweep(config.as_deref(), out, axes),
        Command::Report { dirs, out } => cmd_report(dirs, out),
        Command::GenData { kind, classes, dim, per_class, count, spread, seed, out } => {
            cmd_gen_data(*kind, *classes, *dim, *per_class, *count, *spread, *seed, out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
