//! Finite-difference checks of every differentiable stage at `f64`, used by
//! the `gradcheck` command and the test suites.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::afr::{self, AfrConfig, AfrVars, FeatureSequence, Modality};
use crate::error::Result;
use crate::model::{ModelConfig, ModelVars, Rmarn};
use crate::numcore::gradcheck::analytic_gradients;
use crate::numcore::{
    compare_gradients, Bound, GradCheckOptions, GradCheckReport, Graph, ParamStore, Tensor, Var,
};
use crate::objective::{contrastive_loss, LossConfig};
use crate::rls::{self, BiasMode, BundleVars, RlsConfig};
use crate::simhead::{self, HeadConfig, HeadVars, Pooling};

pub const THRESHOLD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    AfrEncode,
    AttentionMap,
    FilterAndPool,
    GlobalAndFuse,
    Contrastive,
    EndToEnd,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::AfrEncode,
        Stage::AttentionMap,
        Stage::FilterAndPool,
        Stage::GlobalAndFuse,
        Stage::Contrastive,
        Stage::EndToEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::AfrEncode => "afr_encode",
            Stage::AttentionMap => "riemann_attention_map",
            Stage::FilterAndPool => "lrf_scp",
            Stage::GlobalAndFuse => "gps_fuse",
            Stage::Contrastive => "contrastive_loss",
            Stage::EndToEnd => "end_to_end",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct StageResult {
    pub stage: Stage,
    pub report: GradCheckReport,
}

impl StageResult {
    pub fn passed(&self) -> bool {
        self.report.passes(THRESHOLD)
    }
}

fn store_parts(s: &ParamStore<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    s.iter().map(|(n, t)| (n.to_string(), t.clone())).unzip()
}

fn run<F>(
    f: F,
    params: &[Tensor<f64>],
    corrupt: bool,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut analytic = analytic_gradients(&f, params)?;
    if corrupt {
        // checker sanity hook: a wrong gradient must be caught
        let i = analytic
            .iter()
            .position(|g| g.max_abs() > 1e-3)
            .unwrap_or(0);
        analytic[i] = analytic[i].map(|v| 2.0 * v);
    }
    compare_gradients(f, params, &analytic, opts)
}

fn readout(g: &mut Graph<f64>, x: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(x, wv)?;
    Ok(g.sum(p))
}

/// Runs one stage from `seed`. `corrupt` doubles one analytic gradient
/// before comparison.
pub fn check_stage(stage: Stage, seed: u64, corrupt: bool) -> Result<StageResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(stage as u64));
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let report = match stage {
        Stage::AfrEncode => {
            let cfg = AfrConfig {
                d_model: 8,
                nhead: 2,
                layers: 2,
                ffn_width: 6,
                ..AfrConfig::default()
            };
            let mut store = ParamStore::new();
            afr::init_params(&mut store, "text", 5, &cfg, &mut rng);
            let (names, params) = store_parts(&store);
            let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 8], 1.0, &mut rng);
            let f = move |g: &mut Graph<f64>, p: &[Var]| -> Result<Var> {
                let vars = AfrVars::bind(&Bound::from_parts(&names, p), "text", cfg.layers)?;
                let xv = g.constant(x.clone());
                let out = afr::encode(g, xv, &vars, &cfg, None)?;
                readout(g, out, &w)
            };
            run(f, &params, corrupt, opts)?
        }
        Stage::AttentionMap => {
            let cfg = RlsConfig {
                manifolds: 3,
                rank: 4,
                bias: BiasMode::LearnedBias,
                max_text_len: 5,
                max_point_len: 6,
            };
            let mut store = ParamStore::new();
            rls::init_params(&mut store, &cfg, 6, &mut rng);
            // a zero bias table would hide indexing mistakes
            let e = store.get_mut(rls::BIAS_TABLE).unwrap();
            *e = Tensor::randn(e.shape(), 0.5, &mut rng);
            let (mut names, mut params) = store_parts(&store);
            names.push("text".into());
            names.push("point".into());
            params.push(Tensor::randn(&[4, 6], 1.0, &mut rng));
            params.push(Tensor::randn(&[5, 6], 1.0, &mut rng));
            let w = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
            let f = move |g: &mut Graph<f64>, p: &[Var]| -> Result<Var> {
                let bound = Bound::from_parts(&names, p);
                let bundle = BundleVars::bind(&bound, &cfg)?;
                let m = rls::riemann_attention_map(g, bound.get("text")?, bound.get("point")?, &bundle)?;
                readout(g, m, &w)
            };
            run(f, &params, corrupt, opts)?
        }
        Stage::FilterAndPool => {
            let mut store = ParamStore::new();
            let hc = HeadConfig {
                manifolds: 3,
                ..HeadConfig::default()
            };
            simhead::init_params(&mut store, &hc, &mut rng);
            let d = store.get_mut(simhead::LRF_MIX).unwrap();
            *d = Tensor::randn(d.shape(), 0.7, &mut rng);
            let u = store.get_mut(simhead::LRF_UNMIX).unwrap();
            *u = Tensor::randn(u.shape(), 0.7, &mut rng);
            let (mut names, mut params) = store_parts(&store);
            names.push("map".into());
            params.push(Tensor::randn(&[3, 4, 5], 1.0, &mut rng));
            let f = move |g: &mut Graph<f64>, p: &[Var]| -> Result<Var> {
                let bound = Bound::from_parts(&names, p);
                let head = HeadVars::bind(&bound)?;
                let m = simhead::lrf(g, bound.get("map")?, &head)?;
                simhead::scp(g, m, &head, Default::default())
            };
            run(f, &params, corrupt, opts)?
        }
        Stage::GlobalAndFuse => {
            let mut store = ParamStore::new();
            simhead::init_params(&mut store, &HeadConfig::default(), &mut rng);
            let (mut names, mut params) = store_parts(&store);
            for (n, t) in [
                ("text", Tensor::randn(&[3, 6], 1.0, &mut rng)),
                ("point", Tensor::randn(&[5, 6], 1.0, &mut rng)),
                ("local", Tensor::randn(&[1], 1.0, &mut rng)),
            ] {
                names.push(n.into());
                params.push(t);
            }
            let f = move |g: &mut Graph<f64>, p: &[Var]| -> Result<Var> {
                let bound = Bound::from_parts(&names, p);
                let head = HeadVars::bind(&bound)?;
                let (t, q) = (bound.get("text")?, bound.get("point")?);
                let mean = simhead::gps(g, t, q, Pooling::Mean)?;
                let fused = simhead::fuse(g, bound.get("local")?, mean, &head)?;
                let max = simhead::gps(g, t, q, Pooling::Max)?;
                g.add(fused, max)
            };
            run(f, &params, corrupt, opts)?
        }
        Stage::Contrastive => {
            let s = Tensor::randn(&[6, 6], 0.1, &mut rng);
            let cfg = LossConfig {
                tau_point: 0.1,
                alpha_text: 0.4,
                ..LossConfig::default()
            };
            let f = move |g: &mut Graph<f64>, p: &[Var]| contrastive_loss(g, p[0], &cfg);
            run(f, &[s], corrupt, opts)?
        }
        Stage::EndToEnd => {
            let mut cfg = ModelConfig {
                text_width: 5,
                point_width: 4,
                afr: AfrConfig {
                    d_model: 8,
                    nhead: 2,
                    layers: 1,
                    ffn_width: 8,
                    ..AfrConfig::default()
                },
                rls: RlsConfig {
                    manifolds: 2,
                    rank: 3,
                    bias: BiasMode::LearnedBias,
                    max_text_len: 4,
                    max_point_len: 5,
                },
                ..ModelConfig::default()
            };
            cfg.loss.tau_text = 0.5;
            cfg.loss.tau_point = 0.5;
            let model = Rmarn::<f64>::new(cfg, seed)?;
            let (names, params) = store_parts(&model.params);
            let mk = |m, len, w, rng: &mut ChaCha8Rng, i: usize| {
                FeatureSequence::new(format!("s{i}"), m, Tensor::randn(&[len, w], 1.0, rng))
            };
            let texts = (0..3)
                .map(|i| mk(Modality::Text, 2 + i % 3, 5, &mut rng, i))
                .collect::<Result<Vec<_>>>()?;
            let points = (0..3)
                .map(|i| mk(Modality::PointCloud, 3 + i % 3, 4, &mut rng, i))
                .collect::<Result<Vec<_>>>()?;
            let f = move |g: &mut Graph<f64>, p: &[Var]| -> Result<Var> {
                let vars = ModelVars::bind(&Bound::from_parts(&names, p), &cfg)?;
                model.batch_loss(g, &vars, &texts, &points, None)
            };
            let opts = GradCheckOptions {
                max_coords: 12,
                ..opts
            };
            run(f, &params, corrupt, opts)?
        }
    };
    Ok(StageResult { stage, report })
}

/// All six stages in order.
pub fn check_all(seed: u64, corrupt: Option<Stage>) -> Result<Vec<StageResult>> {
    Stage::ALL
        .iter()
        .map(|&s| check_stage(s, seed, corrupt == Some(s)))
        .collect()
}
