//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails. The training criteria take tens of minutes
//! on a single core.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rmarn::checkpoint;
use rmarn::data::{self, Dataset, Pair, PairManifest, Split, SyntheticConfig};
use rmarn::experiments::{train_and_test, ResultRow, Variant};
use rmarn::gradstages::{self, THRESHOLD};
use rmarn::numcore::kernels::soft;
use rmarn::numcore::Tensor;
use rmarn::objective::{contrastive_loss_value, LossConfig};
use rmarn::retrieval::{evaluate, DEFAULT_KS};
use rmarn::rls::ManifoldBundle;
use rmarn::simhead::low_rank_filter;
use rmarn::train::{self, score_pairs, RunConfig};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut worst = (0.0f64, String::new());
    for seed in 0..3 {
        let results = gradstages::check_all(seed, None).map_err(|e| e.to_string())?;
        for r in results {
            if r.report.max_rel_error >= worst.0 {
                worst = (r.report.max_rel_error, format!("{} seed {seed}", r.stage));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(
        worst.0 < THRESHOLD && secs < 60.0,
        format!("6 stages x seeds 0-2, worst rel err {:.2e} ({}), {secs:.1}s", worst.0, worst.1),
    )
}

fn attention_map_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.gen_range(1..=4);
        let r = rng.gen_range(1..=4);
        let d = rng.gen_range(1..=16);
        let (st, sp) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let (cap_t, cap_p) = (st + rng.gen_range(0..3), sp + rng.gen_range(0..3));
        let a = Tensor::<f64>::randn(&[k * r, d], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[k * r, d], 1.0, &mut rng);
        let e = rng
            .gen_bool(0.5)
            .then(|| Tensor::<f64>::randn(&[k, cap_t, cap_p], 1.0, &mut rng));
        let text = Tensor::<f64>::randn(&[st, d], 1.0, &mut rng);
        let point = Tensor::<f64>::randn(&[sp, d], 1.0, &mut rng);
        let bundle = ManifoldBundle::new(k, a.clone(), b.clone(), e.clone()).map_err(|e| e.to_string())?;
        let map = bundle.attention_map(&text, &point).map_err(|e| e.to_string())?;
        if map.shape() != [k, st, sp] {
            return Err(format!("map shape {:?}", map.shape()));
        }
        for i in 0..k {
            for x in 0..st {
                for y in 0..sp {
                    let mut want = e.as_ref().map_or(0.0, |e| e.data()[(i * cap_t + x) * cap_p + y]);
                    for q in 0..r {
                        let row = i * r + q;
                        let at: f64 = (0..d).map(|j| a.at2(row, j) * text.at2(x, j)).sum();
                        let bp: f64 = (0..d).map(|j| b.at2(row, j) * point.at2(y, j)).sum();
                        want += at * bp;
                    }
                    worst = worst.max((want - map.data()[(i * st + x) * sp + y]).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-10, format!("100 instances, max abs diff {worst:.2e}"))
}

fn shrinkage_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let step = 5e-5;
    for _ in 0..1000 {
        let m: f64 = rng.gen_range(-4.0..4.0);
        let lambda: f64 = rng.gen_range(0.0..2.0);
        let obj = |x: f64| 0.5 * (m - x) * (m - x) + lambda * x.abs();
        let mut best = (f64::INFINITY, 0.0);
        let n = (10.0 / step) as i64;
        for j in -n / 2..=n / 2 {
            let x = j as f64 * step;
            let v = obj(x);
            if v < best.0 {
                best = (v, x);
            }
        }
        let got = soft(m, lambda).map_err(|e| e.to_string())?;
        worst = worst.max((got - best.1).abs());
    }
    // rotation by 30 degrees, undone by its transpose
    let (c, s) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
    let rot = Tensor::new(vec![2, 2], vec![c, -s, s, c]).unwrap();
    let map = Tensor::<f64>::randn(&[2, 6, 9], 1.0, &mut rng);
    let got = low_rank_filter(&map, &rot, 0.5).map_err(|e| e.to_string())?;
    let plane = 54;
    let mut lrf_worst = 0.0f64;
    for p in 0..plane {
        let (m0, m1) = (map.data()[p], map.data()[plane + p]);
        let (v0, v1) = (soft(c * m0 - s * m1, 0.5).unwrap(), soft(s * m0 + c * m1, 0.5).unwrap());
        let (w0, w1) = (c * v0 + s * v1, -s * v0 + c * v1);
        lrf_worst = lrf_worst
            .max((w0 - got.data()[p]).abs())
            .max((w1 - got.data()[plane + p]).abs());
    }
    ensure(
        worst <= 1e-4 && lrf_worst <= 1e-10,
        format!("soft vs grid max diff {worst:.2e} (1000 draws); rotated filter max diff {lrf_worst:.2e}"),
    )
}

fn recall_properties() -> Outcome {
    // 100 queries whose matched item sits at rank 0 (31), 2 (30), 7 (8) or 50 (31)
    let ranks: Vec<usize> = [(0, 31), (2, 30), (7, 8), (50, 31)]
        .iter()
        .flat_map(|&(r, n)| std::iter::repeat(r).take(n))
        .collect();
    let n = ranks.len();
    let sim = Tensor::<f64>::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        if i == j {
            0.0
        } else {
            // items after the matched one in cyclic order beat it, `rank` of them
            let offset = (j + n - i) % n;
            if offset <= ranks[i] { 1.0 } else { -1.0 }
        }
    });
    let rsum = evaluate(&sim, &DEFAULT_KS).map_err(|e| e.to_string())?[0].rsum;
    if rsum != 161.0 {
        return Err(format!("Rsum(31, 61, 69) gave {rsum}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..1000 {
        let n = rng.gen_range(2..40);
        let coarse = trial % 2 == 0;
        let m = Tensor::<f64>::from_fn(&[n, n], |_| {
            let v: f64 = rng.gen_range(-3.0..3.0);
            // every other matrix is rounded so ties occur
            if coarse { (v * 4.0).round() / 4.0 } else { v }
        });
        let base = evaluate(&m, &DEFAULT_KS).map_err(|e| e.to_string())?;
        for rep in &base {
            let (r1, r5, r10) = (rep.recall[0].1, rep.recall[1].1, rep.recall[2].1);
            if !(r1 <= r5 && r5 <= r10) {
                return Err(format!("trial {trial}: recall not monotone in k: {rep:?}"));
            }
        }
        for (name, f) in [
            ("exp", (|x: f64| x.exp()) as fn(f64) -> f64),
            ("affine", |x| 3.0 * x + 7.0),
            ("cube", |x| x * x * x),
        ] {
            if evaluate(&m.map(f), &DEFAULT_KS).map_err(|e| e.to_string())? != base {
                return Err(format!("trial {trial}: {name} transform changed recall"));
            }
        }
    }
    Ok("Rsum(31, 61, 69) = 161; 1000 matrices monotone-invariant with R@1 <= R@5 <= R@10".into())
}

fn loss_values() -> Outcome {
    let mut worst = 0.0f64;
    for b in [2usize, 8, 64] {
        let s = Tensor::<f64>::full(&[b, b], 0.37);
        let l = contrastive_loss_value(&s, &LossConfig::default()).map_err(|e| e.to_string())?;
        worst = worst.max((l - (b as f64).ln()).abs());
    }
    let cfg = LossConfig {
        tau_text: 1.0,
        tau_point: 1.0,
        alpha_text: 0.5,
        alpha_point: 0.5,
    };
    let l = contrastive_loss_value(&Tensor::<f64>::identity(2), &cfg).map_err(|e| e.to_string())?;
    let id_err = (l - 0.313_261_687_518_222_834).abs();
    ensure(
        worst <= 1e-9 && id_err <= 1e-9,
        format!("uniform max err {worst:.2e}; identity loss {l:.18} (err {id_err:.2e})"),
    )
}

struct Splits {
    train: Vec<Pair>,
    val: Vec<Pair>,
    test: Vec<Pair>,
}

fn synthetic(seed: u64) -> Splits {
    let pairs = data::synthesize(&SyntheticConfig {
        pairs: 200,
        noise: 0.1,
        seed,
        ..SyntheticConfig::default()
    })
    .expect("synthetic data");
    let pick = |s| pairs.iter().filter(|p| p.1 == s).map(|p| p.0.clone()).collect();
    Splits {
        train: pick(Split::Train),
        val: pick(Split::Val),
        test: pick(Split::Test),
    }
}

fn small(seed: u64, variant: Variant) -> RunConfig {
    let mut cfg = RunConfig::preset("small").expect("small preset");
    cfg.seed = seed;
    cfg.model.branches = variant.apply(cfg.model.branches);
    cfg
}

fn run_variant(seed: u64, variant: Variant, s: &Splits) -> Result<(ResultRow, f64), String> {
    let t0 = Instant::now();
    let row = train_and_test(variant.label(), &small(seed, variant), &s.train, &s.val, &s.test, None)
        .map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    println!(
        "    seed {seed} {:<12} test rsum {:.1}/{:.1} R@1 {:.1}/{:.1} best epoch {} ({secs:.0}s)",
        variant.label(),
        row.text_to_point.rsum,
        row.point_to_text.rsum,
        row.text_to_point.r1,
        row.point_to_text.r1,
        row.best_epoch
    );
    Ok((row, secs))
}

fn small_profile(full0: &(ResultRow, f64)) -> Outcome {
    let (row, secs) = full0;
    let (a, b) = (&row.text_to_point, &row.point_to_text);
    ensure(
        a.r1 >= 90.0 && b.r1 >= 90.0 && a.rsum >= 280.0 && b.rsum >= 280.0 && *secs <= 600.0,
        format!(
            "R@1 {:.1}/{:.1}, Rsum {:.1}/{:.1} (text->point/point->text), {secs:.0}s",
            a.r1, b.r1, a.rsum, b.rsum
        ),
    )
}

fn ablation(rows: &[Vec<ResultRow>]) -> Outcome {
    let mean = |v: usize| rows.iter().map(|r| r[v].mean_rsum).sum::<f64>() / rows.len() as f64;
    let means: Vec<f64> = (0..Variant::ALL.len()).map(mean).collect();
    let idx = |v: Variant| Variant::ALL.iter().position(|&x| x == v).unwrap();
    let full = means[idx(Variant::Full)];
    let worst_seeds: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r[1..].iter().all(|o| r[0].mean_rsum < o.mean_rsum))
        .map(|(s, _)| s)
        .collect();
    let table: Vec<String> = Variant::ALL
        .iter()
        .zip(&means)
        .map(|(v, m)| format!("{} {m:.2}", v.label()))
        .collect();
    ensure(
        full >= means[idx(Variant::NoGps)] && full >= means[idx(Variant::NoRls)] && worst_seeds.is_empty(),
        format!("mean Rsum over seeds 0-2: {}; full worst on seeds {worst_seeds:?}", table.join(", ")),
    )
}

fn reproducibility() -> Outcome {
    let s = synthetic(0);
    let mut cfg = small(0, Variant::Full);
    cfg.epochs = 2;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = train::train_to_dir(&cfg, &s.train, &s.val, &a).map_err(|e| e.to_string())?;
    // a different thread count must not change anything
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().map_err(|e| e.to_string())?;
    pool.install(|| train::train_to_dir(&cfg, &s.train, &s.val, &b)).map_err(|e| e.to_string())?;
    let read = |p: std::path::PathBuf| fs::read(p).map_err(|e| e.to_string());
    let log_same = read(a.join("metrics.jsonl"))? == read(b.join("metrics.jsonl"))?;
    let ckpt_same = read(a.join("final.rmck"))? == read(b.join("final.rmck"))?;

    let (loaded, _) = checkpoint::load(&a.join("final.rmck")).map_err(|e| e.to_string())?;
    let bits = |t: Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let before = bits(score_pairs(&ra.final_model, &s.test).map_err(|e| e.to_string())?);
    let after = bits(score_pairs(&loaded, &s.test).map_err(|e| e.to_string())?);
    let eval_same = before == after;

    let dir = tmp.path().join("data");
    let cfg = SyntheticConfig::default();
    let manifest = data::generate_synthetic(&cfg, &dir).map_err(|e| e.to_string())?;
    let ds = Dataset::open(&dir).map_err(|e| e.to_string())?;
    let expected = data::synthesize(&cfg).map_err(|e| e.to_string())?;
    let mut loaded_pairs = Vec::new();
    for split in Split::ALL {
        loaded_pairs.extend(ds.load(split).map_err(|e| e.to_string())?);
    }
    let mut want: Vec<&Pair> = Vec::new();
    for split in Split::ALL {
        want.extend(expected.iter().filter(|p| p.1 == split).map(|p| &p.0));
    }
    let rmft_same = loaded_pairs.len() == want.len()
        && loaded_pairs.iter().zip(&want).all(|(a, b)| {
            let same = |x: &Tensor<f32>, y: &Tensor<f32>| {
                x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
            };
            a.id == b.id && same(&a.text.tokens, &b.text.tokens) && same(&a.point.tokens, &b.point.tokens)
        });
    let json = manifest.to_json().map_err(|e| e.to_string())?;
    let manifest_same = ds.manifest == manifest
        && PairManifest::from_json(&json).map_err(|e| e.to_string())?.to_json().map_err(|e| e.to_string())? == json
        && read(dir.join("manifest.json"))? == json.as_bytes();
    ensure(
        log_same && ckpt_same && eval_same && rmft_same && manifest_same,
        format!(
            "metrics log identical {log_same}, checkpoint identical {ckpt_same}, reloaded eval bit-exact \
             {eval_same}, RMFT exact {rmft_same}, manifest exact {manifest_same}"
        ),
    )
}

fn report(n: usize, name: &str, outcome: Outcome, failed: &mut usize) {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => {
            *failed += 1;
            ("FAIL", d)
        }
    };
    println!("{tag} [{n}] {name}: {detail}");
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters: this suite has a single entry
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    if let Some(filter) = args.iter().find(|a| !a.starts_with('-')) {
        if !"acceptance".contains(filter.as_str()) {
            return ExitCode::SUCCESS;
        }
    }
    let mut failed = 0;
    report(1, "gradient checks", gradients(), &mut failed);
    report(2, "attention map vs naive loop", attention_map_oracle(), &mut failed);
    report(3, "shrinkage and rotated filter", shrinkage_oracle(), &mut failed);
    report(4, "recall metrics", recall_properties(), &mut failed);
    report(5, "contrastive loss values", loss_values(), &mut failed);

    println!("    training the small profile, 5 variants x 3 seeds");
    let mut rows: Vec<Vec<ResultRow>> = Vec::new();
    let mut full0 = None;
    let mut train_err = None;
    'seeds: for seed in 0..3 {
        let s = synthetic(seed);
        let mut per_seed = Vec::new();
        for v in Variant::ALL {
            match run_variant(seed, v, &s) {
                Ok(r) => {
                    if seed == 0 && v == Variant::Full {
                        full0 = Some(r.clone());
                    }
                    per_seed.push(r.0);
                }
                Err(e) => {
                    train_err = Some(format!("seed {seed} {}: {e}", v.label()));
                    break 'seeds;
                }
            }
        }
        rows.push(per_seed);
    }
    let c6 = match &full0 {
        Some(r) => small_profile(r),
        None => Err(train_err.clone().unwrap_or_default()),
    };
    report(6, "small profile retrieval", c6, &mut failed);
    let c7 = match train_err {
        None => ablation(&rows),
        Some(e) => Err(e),
    };
    report(7, "ablation ordering", c7, &mut failed);
    report(8, "reproducibility and round trips", reproducibility(), &mut failed);

    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
