//! Ablation tables and single-parameter sweeps built on [`crate::train`].

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Pair;
use crate::error::{Error, Result};
use crate::model::Branches;
use crate::retrieval;
use crate::train::{self, evaluate_pairs, RunConfig, SplitMetrics};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoGps,
    NoRls,
    NoAfr,
    NoAfrRls,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoGps,
        Variant::NoRls,
        Variant::NoAfr,
        Variant::NoAfrRls,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGps => "w/o GPS",
            Variant::NoRls => "w/o RLS",
            Variant::NoAfr => "w/o AFR",
            Variant::NoAfrRls => "w/o AFR+RLS",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGps => "no_gps",
            Variant::NoRls => "no_rls",
            Variant::NoAfr => "no_afr",
            Variant::NoAfrRls => "no_afr_rls",
        }
    }

    /// Switches `base` off as this variant requires.
    pub fn apply(self, base: Branches) -> Branches {
        let mut b = base;
        match self {
            Variant::Full => {}
            Variant::NoGps => b.gps = false,
            Variant::NoRls => b.rls = false,
            Variant::NoAfr => b.afr = false,
            Variant::NoAfrRls => {
                b.afr = false;
                b.rls = false;
            }
        }
        b
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Test-split result of one trained configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    pub best_epoch: usize,
    pub text_to_point: SplitMetrics,
    pub point_to_text: SplitMetrics,
    pub mean_rsum: f64,
}

/// Train on `train_pairs` (model selection on `val_pairs`), evaluate the
/// best checkpoint on `test_pairs`. With `out`, the run's files go there.
pub fn train_and_test(
    label: &str,
    cfg: &RunConfig,
    train_pairs: &[Pair],
    val_pairs: &[Pair],
    test_pairs: &[Pair],
    out: Option<&Path>,
) -> Result<ResultRow> {
    let result = match out {
        Some(dir) => train::train_to_dir(cfg, train_pairs, val_pairs, dir)?,
        None => train::train(cfg, train_pairs, val_pairs, &mut |_, _, _| Ok(()))?,
    };
    let reports = evaluate_pairs(&result.best_model, test_pairs)?;
    Ok(ResultRow {
        label: label.to_string(),
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        best_epoch: result.best_epoch,
        text_to_point: SplitMetrics::from(&reports[0]),
        point_to_text: SplitMetrics::from(&reports[1]),
        mean_rsum: retrieval::mean_rsum(&reports),
    })
}

/// The five-row ablation table for one seed, variants run in order.
pub fn ablate(
    cfg: &RunConfig,
    train_pairs: &[Pair],
    val_pairs: &[Pair],
    test_pairs: &[Pair],
    out: Option<&Path>,
) -> Result<Vec<ResultRow>> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.model.branches = v.apply(cfg.model.branches);
            let dir = out.map(|o| o.join(v.slug()));
            train_and_test(v.label(), &c, train_pairs, val_pairs, test_pairs, dir.as_deref())
        })
        .collect()
}

/// Parses `name=v1,v2,...`.
pub fn parse_sweep(text: &str) -> Result<(String, Vec<String>)> {
    let (name, values) = text
        .split_once('=')
        .ok_or_else(|| Error::Argument(format!("sweep `{text}` is not of the form name=v1,v2")))?;
    let values: Vec<String> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect();
    if values.is_empty() {
        return Err(Error::Argument(format!("sweep `{text}` lists no values")));
    }
    Ok((name.trim().to_string(), values))
}

fn parse_num<T: std::str::FromStr>(name: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Argument(format!("sweep value `{v}` for `{name}` is not a number")))
}

/// Sets one named hyperparameter.
pub fn set_param(cfg: &mut RunConfig, name: &str, value: &str) -> Result<()> {
    match name {
        "nhead" => cfg.model.afr.nhead = parse_num(name, value)?,
        "rank" => cfg.model.rls.rank = parse_num(name, value)?,
        "manifolds" => cfg.model.rls.manifolds = parse_num(name, value)?,
        "d_model" => {
            let d = parse_num(name, value)?;
            cfg.model.afr.d_model = d;
            cfg.model.afr.ffn_width = d;
        }
        "layers" => cfg.model.afr.layers = parse_num(name, value)?,
        "epochs" => cfg.epochs = parse_num(name, value)?,
        "batch_size" => cfg.batch_size = parse_num(name, value)?,
        "lr" => cfg.optimizer.lr = parse_num(name, value)?,
        "dropout" => cfg.model.afr.dropout = parse_num(name, value)?,
        other => {
            return Err(Error::Argument(format!(
                "cannot sweep `{other}` (supported: nhead, rank, manifolds, d_model, layers, \
                 epochs, batch_size, lr, dropout)"
            )))
        }
    }
    Ok(())
}

/// One row per value of the swept parameter.
pub fn sweep(
    cfg: &RunConfig,
    text: &str,
    train_pairs: &[Pair],
    val_pairs: &[Pair],
    test_pairs: &[Pair],
    out: Option<&Path>,
) -> Result<Vec<ResultRow>> {
    let (name, values) = parse_sweep(text)?;
    // validate every point before training any of them
    let configs: Vec<RunConfig> = values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            set_param(&mut c, &name, v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    configs
        .iter()
        .zip(&values)
        .map(|(c, v)| {
            let label = format!("{name}={v}");
            let dir = out.map(|o| o.join(format!("{name}_{v}")));
            train_and_test(&label, c, train_pairs, val_pairs, test_pairs, dir.as_deref())
        })
        .collect()
}

/// Fixed-width text table of result rows.
pub fn format_table(rows: &[ResultRow]) -> String {
    let mut s = format!(
        "{:<14} {:>6} {:>6} {:>6} {:>7} | {:>6} {:>6} {:>6} {:>7}\n",
        "variant", "t2p@1", "t2p@5", "t2p@10", "rsum", "p2t@1", "p2t@5", "p2t@10", "rsum"
    );
    for r in rows {
        let (a, b) = (&r.text_to_point, &r.point_to_text);
        s.push_str(&format!(
            "{:<14} {:>6.1} {:>6.1} {:>6.1} {:>7.1} | {:>6.1} {:>6.1} {:>6.1} {:>7.1}\n",
            r.label, a.r1, a.r5, a.r10, a.rsum, b.r1, b.r5, b.r10, b.rsum
        ));
    }
    s
}
