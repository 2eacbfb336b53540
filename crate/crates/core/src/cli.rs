//! Command-line front end. [`run`] is the whole program minus process setup,
//! so tests can drive it in-process.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint;
use crate::data::{self, Dataset, Pair, Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::experiments::{self, ResultRow};
use crate::gradstages::{self, Stage};
use crate::retrieval::{self, RetrievalReport};
use crate::train::{self, RunConfig, LOG_FORMAT_VERSION};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "rmarn", version, about = "Text / point-cloud retrieval toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic paired archive (RMFT files + manifest).
    GenData(GenDataArgs),
    /// Featurize captions and ASCII XYZ/PLY clouds listed in a JSON file.
    Featurize(FeaturizeArgs),
    /// Train a model; writes metrics.jsonl, best.rmck, final.rmck.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable stage.
    Gradcheck(GradcheckArgs),
    /// Train and test the five ablation variants.
    Ablate(TrainArgs),
    /// Train and test over the values of one hyperparameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 32)]
    text_width: usize,
    #[arg(long, default_value_t = 32)]
    point_width: usize,
    #[arg(long, default_value_t = 8)]
    latent_dim: usize,
    /// Token count range of texts, `lo:hi`.
    #[arg(long, default_value = "8:16")]
    text_len: String,
    /// Token count range of point clouds, `lo:hi`.
    #[arg(long, default_value = "32:64")]
    point_len: String,
}

#[derive(Debug, Args)]
struct FeaturizeArgs {
    /// JSON array of `{"id", "caption", "cloud", "split"?}`; cloud paths are
    /// relative to the file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    text_width: usize,
    #[arg(long, default_value_t = 32)]
    point_width: usize,
    /// Points sampled per cloud.
    #[arg(long, default_value_t = 64)]
    points: usize,
}

#[derive(Debug, Args, Clone)]
struct RunArgs {
    /// JSON file with (partial) run settings, applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting point: large, fast or small.
    #[arg(long, default_value = "large")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    no_gps: bool,
    #[arg(long)]
    no_rls: bool,
    #[arg(long)]
    no_afr: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Extra seeds for `ablate`, comma separated (the run seed is used when
    /// absent).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: double one analytic gradient of the named stage.
    #[arg(long, hide = true)]
    inject_bug: Option<String>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// `name=v1,v2,...`, e.g. `nhead=8,16,32,64` or `rank=64,128,256,512`.
    #[arg(long)]
    sweep: String,
}

/// Recursively overlays `patch` onto `base`.
fn merge_json(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            let patch: serde_json::Value = serde_json::from_str(&read_to_string(path)?)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let mut base = serde_json::to_value(&cfg)?;
            merge_json(&mut base, patch);
            cfg = serde_json::from_value(base)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.optimizer.lr = lr;
        }
        cfg.model.branches.gps &= !self.no_gps;
        cfg.model.branches.rls &= !self.no_rls;
        cfg.model.branches.afr &= !self.no_afr;
        Ok(cfg)
    }
}

struct Splits {
    train: Vec<Pair>,
    val: Vec<Pair>,
    test: Vec<Pair>,
}

/// Opens the dataset named in `cfg`, fixes the feature widths from it and
/// validates everything before any output is written.
fn prepare(cfg: &mut RunConfig, need_test: bool) -> Result<Splits> {
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Argument("--data is required".into()))?;
    if cfg.out.is_none() {
        return Err(Error::Argument("--out is required".into()));
    }
    let ds = Dataset::open(&data)?;
    let (wt, wp) = ds.widths()?;
    cfg.model.text_width = wt;
    cfg.model.point_width = wp;
    cfg.validate()?;
    let splits = Splits {
        train: ds.load(Split::Train)?,
        val: ds.load(Split::Val)?,
        test: ds.load(Split::Test)?,
    };
    if splits.train.len() < 2 {
        return Err(Error::Manifest(format!(
            "training split has {} pairs; at least 2 are needed",
            splits.train.len()
        )));
    }
    if splits.val.is_empty() {
        return Err(Error::Manifest("validation split is empty".into()));
    }
    if need_test && splits.test.is_empty() {
        return Err(Error::Manifest("test split is empty".into()));
    }
    Ok(splits)
}

fn parse_range(flag: &str, s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Argument(format!("--{flag} expects lo:hi, got `{s}`"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn cmd_gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = SyntheticConfig {
        pairs: a.pairs,
        text_len: parse_range("text-len", &a.text_len)?,
        point_len: parse_range("point-len", &a.point_len)?,
        text_width: a.text_width,
        point_width: a.point_width,
        latent_dim: a.latent_dim,
        noise: a.noise,
        seed: a.seed,
    };
    cfg.validate()?;
    let m = data::generate_synthetic(&cfg, &a.out)?;
    writeln!(
        out,
        "wrote {} pairs to {} (train {}, val {}, test {})",
        m.entries.len(),
        a.out.display(),
        m.count(Split::Train),
        m.count(Split::Val),
        m.count(Split::Test)
    )
    .ok();
    Ok(())
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPair {
    id: String,
    caption: String,
    cloud: PathBuf,
    #[serde(default)]
    split: Option<Split>,
}

fn cmd_featurize(a: &FeaturizeArgs, out: &mut dyn Write) -> Result<()> {
    let list: Vec<RawPair> = serde_json::from_str(&read_to_string(&a.data)?)
        .map_err(|e| Error::Manifest(format!("{}: {e}", a.data.display())))?;
    if list.is_empty() {
        return Err(Error::Manifest(format!("{} lists no pairs", a.data.display())));
    }
    let base = a.data.parent().unwrap_or(Path::new("."));
    let n = list.len();
    let mut rows = Vec::with_capacity(n);
    for (i, raw) in list.into_iter().enumerate() {
        let mut text = data::featurize_text(&raw.caption, a.text_width, a.seed)
            .map_err(|e| Error::Manifest(format!("pair `{}`: {e}", raw.id)))?;
        text.id = raw.id.clone();
        let cloud = data::read_point_cloud(&base.join(&raw.cloud))?;
        let mut point = data::featurize_pointcloud(&cloud, a.point_width, a.points, a.seed)?;
        point.id = raw.id.clone();
        let split = raw.split.unwrap_or_else(|| data::split_of(i, n));
        rows.push((
            Pair {
                id: raw.id,
                text,
                point,
            },
            split,
            Some(raw.caption),
        ));
    }
    let source = serde_json::json!({ "generator": "featurize", "seed": a.seed,
        "text_width": a.text_width, "point_width": a.point_width, "points": a.points });
    let m = data::write_dataset(&a.out, &rows, source)?;
    writeln!(out, "featurized {} pairs into {}", m.entries.len(), a.out.display()).ok();
    Ok(())
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    let splits = prepare(&mut cfg, false)?;
    let dir = cfg.out.clone().unwrap();
    let r = train::train_to_dir(&cfg, &splits.train, &splits.val, &dir)?;
    let last = r.records.last().unwrap();
    writeln!(
        out,
        "seed {} config {} epochs {} best epoch {} final eval loss {:.4} val mean rsum {}",
        cfg.seed,
        cfg.config_hash(),
        cfg.epochs,
        r.best_epoch,
        last.eval_loss,
        last.val_mean_rsum.map_or("-".into(), |v| format!("{v:.1}"))
    )
    .ok();
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    format_version: u32,
    seed: Option<u64>,
    config_hash: Option<String>,
    checkpoint: String,
    split: String,
    pairs: usize,
    reports: &'a [RetrievalReport],
}

pub fn format_reports(reports: &[RetrievalReport]) -> String {
    let mut s = format!("{:<12} {:>7} {:>7} {:>7} {:>7}\n", "direction", "R@1", "R@5", "R@10", "Rsum");
    for r in reports {
        let at = |k| r.at(k).map_or("-".to_string(), |v| format!("{v:.1}"));
        s.push_str(&format!(
            "{:<12} {:>7} {:>7} {:>7} {:>7.1}\n",
            r.direction.to_string(),
            at(1),
            at(5),
            at(10),
            r.rsum
        ));
    }
    s
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let split: Split = a.split.parse()?;
    let (model, meta) = checkpoint::load(&a.checkpoint)?;
    let ds = Dataset::open(&a.data)?;
    let pairs = ds.load(split)?;
    if pairs.is_empty() {
        return Err(Error::Manifest(format!("split `{split}` is empty")));
    }
    let (wt, wp) = (pairs[0].text.width(), pairs[0].point.width());
    if (wt, wp) != (model.config.text_width, model.config.point_width) {
        return Err(Error::Config(format!(
            "checkpoint expects feature widths {}/{}, data has {wt}/{wp}",
            model.config.text_width, model.config.point_width
        )));
    }
    if pairs.len() < retrieval::DEFAULT_KS[0] + 1 {
        log::warn!("split `{split}` has a single pair; recall is trivially 100");
    }
    let reports = train::evaluate_pairs(&model, &pairs)?;
    let doc = EvalOutput {
        format_version: LOG_FORMAT_VERSION,
        seed: meta.get("seed").and_then(|v| v.as_u64()),
        config_hash: meta
            .get("config_hash")
            .and_then(|v| v.as_str())
            .map(String::from),
        checkpoint: a.checkpoint.display().to_string(),
        split: split.to_string(),
        pairs: pairs.len(),
        reports: &reports,
    };
    let json = serde_json::to_string(&doc)?;
    write!(out, "{}", format_reports(&reports)).ok();
    writeln!(out, "{json}").ok();
    if let Some(path) = &a.out {
        fs::write(path, json + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

/// Returns whether every stage passed.
fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<bool> {
    let inject = match &a.inject_bug {
        None => None,
        Some(name) => Some(Stage::parse(name).ok_or_else(|| {
            Error::Argument(format!(
                "unknown stage `{name}` (one of: {})",
                Stage::ALL.map(Stage::name).join(", ")
            ))
        })?),
    };
    let results = gradstages::check_all(a.seed, inject)?;
    let mut ok = true;
    for r in &results {
        let status = if r.passed() { "pass" } else { "FAIL" };
        ok &= r.passed();
        writeln!(
            out,
            "{:<24} max rel err {:.3e} ({} coords) {status}",
            r.stage.name(),
            r.report.max_rel_error,
            r.report.coords_checked
        )
        .ok();
    }
    if !ok {
        let failed: Vec<&str> = results
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.stage.name())
            .collect();
        writeln!(out, "failed stages: {}", failed.join(", ")).ok();
    }
    Ok(ok)
}

fn write_rows(dir: &Path, file: &str, rows: &[ResultRow]) -> Result<()> {
    let path = dir.join(file);
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn cmd_ablate(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    let splits = prepare(&mut cfg, true)?;
    let dir = cfg.out.clone().unwrap();
    let seeds = if a.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        a.seeds.clone()
    };
    let mut all = Vec::new();
    for seed in seeds {
        let c = RunConfig {
            seed,
            ..cfg.clone()
        };
        let sub = dir.join(format!("seed{seed}"));
        let rows = experiments::ablate(&c, &splits.train, &splits.val, &splits.test, Some(&sub))?;
        writeln!(out, "seed {seed} config {}", c.config_hash()).ok();
        write!(out, "{}", experiments::format_table(&rows)).ok();
        all.extend(rows);
    }
    write_rows(&dir, "ablation.jsonl", &all)
}

fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    let splits = prepare(&mut cfg, true)?;
    let dir = cfg.out.clone().unwrap();
    let rows = experiments::sweep(&cfg, &a.sweep, &splits.train, &splits.val, &splits.test, Some(&dir))?;
    writeln!(out, "seed {}", cfg.seed).ok();
    write!(out, "{}", experiments::format_table(&rows)).ok();
    write_rows(&dir, "sweep.jsonl", &rows)
}

/// Caps the global thread pool from `RMARN_THREADS` (first call wins).
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("RMARN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Argument(format!("RMARN_THREADS must be a positive integer, got `{v}`")))?;
    // a second configuration attempt in the same process is harmless
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric_error() {
        EXIT_NUMERIC
    } else if err.is_data_error() {
        EXIT_DATA
    } else {
        EXIT_USAGE
    }
}

/// Runs the command line `args` (including the program name), writing
/// results to `out` and diagnostics to stderr. Returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            if code == EXIT_OK {
                write!(out, "{e}").ok();
            } else {
                eprint!("{e}");
            }
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a, out),
        Command::Featurize(a) => cmd_featurize(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Gradcheck(a) => match cmd_gradcheck(a, out) {
            Ok(true) => Ok(()),
            Ok(false) => return EXIT_NUMERIC,
            Err(e) => Err(e),
        },
        Command::Ablate(a) => cmd_ablate(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_overlays_nested_fields() {
        let mut base = serde_json::json!({"a": 1, "m": {"x": 1, "y": 2}});
        merge_json(&mut base, serde_json::json!({"m": {"y": 5}, "b": true}));
        assert_eq!(base, serde_json::json!({"a": 1, "b": true, "m": {"x": 1, "y": 5}}));
    }

    #[test]
    fn ranges_parse() {
        assert_eq!(parse_range("r", "3:9").unwrap(), (3, 9));
        assert!(parse_range("r", "3-9").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        let mut sink = Vec::new();
        assert_eq!(run(["rmarn", "gen-data"], &mut sink), EXIT_USAGE);
        assert_eq!(run(["rmarn", "bogus"], &mut sink), EXIT_USAGE);
        assert_eq!(run(["rmarn", "--help"], &mut sink), EXIT_OK);
    }

    #[test]
    fn error_classes_map_to_codes() {
        assert_eq!(exit_code(&Error::NonFinite("x".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Manifest("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
    }
}
