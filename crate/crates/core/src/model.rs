//! The full retrieval model: two refiners, the manifold bundle and the head.

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::afr::{self, AfrConfig, AfrVars, FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::numcore::{Bound, Graph, PairFn, ParamStore, Real, Tensor, Var};
use crate::objective::{contrastive_loss, LossConfig};
use crate::rls::{self, BundleVars, RlsConfig};
use crate::simhead::{self, HeadConfig, HeadVars, Pooling};

/// Component switches used by the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Branches {
    /// Self-attention refiners; off leaves only the input projection.
    pub afr: bool,
    /// Local manifold similarity plus the convolutional head.
    pub rls: bool,
    /// Global pooled cosine.
    pub gps: bool,
    /// Low-rank filtering of the map before the convolutional head.
    pub lrf: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            afr: true,
            rls: true,
            gps: true,
            lrf: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub text_width: usize,
    pub point_width: usize,
    pub afr: AfrConfig,
    pub rls: RlsConfig,
    pub lambda_init: f64,
    pub pooling: Pooling,
    /// Starting fusion weight of the local score.
    pub local_weight_init: f64,
    pub branches: Branches,
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            text_width: 32,
            point_width: 32,
            afr: AfrConfig::default(),
            rls: RlsConfig::default(),
            lambda_init: 0.1,
            pooling: Pooling::Mean,
            local_weight_init: 1.0,
            branches: Branches::default(),
            loss: LossConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            manifolds: self.rls.manifolds,
            lambda_init: self.lambda_init,
            pooling: self.pooling,
            local_weight_init: self.local_weight_init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_width == 0 || self.point_width == 0 {
            return Err(Error::Config("feature widths must be positive".into()));
        }
        if !self.branches.rls && !self.branches.gps {
            return Err(Error::Config(
                "at least one of the local and global similarity branches must be enabled".into(),
            ));
        }
        self.afr.validate()?;
        self.rls.validate()?;
        self.head().validate()?;
        self.loss.validate()
    }
}

/// Parameters plus configuration. `T` is `f32` for training and `f64` for
/// numerical checks.
#[derive(Clone, Debug, PartialEq)]
pub struct Rmarn<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Every parameter handle needed by a forward pass.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub text: AfrVars,
    pub point: AfrVars,
    pub bundle: BundleVars,
    pub head: HeadVars,
}

impl ModelVars {
    pub fn bind(bound: &Bound, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            text: AfrVars::bind(bound, Modality::Text.prefix(), cfg.afr.layers)?,
            point: AfrVars::bind(bound, Modality::PointCloud.prefix(), cfg.afr.layers)?,
            bundle: BundleVars::bind(bound, &cfg.rls)?,
            head: HeadVars::bind(bound)?,
        })
    }

    /// Shared (non-per-sequence) handles in the order [`pair_score`] expects.
    fn shared(&self) -> Vec<Var> {
        let h = &self.head;
        let mut v = vec![
            h.lrf_mix,
            h.lrf_lambda,
            h.lrf_unmix,
            h.lrf_unmix_bias,
            h.conv1,
            h.bias1,
            h.conv2,
            h.bias2,
            h.readout,
            h.readout_bias,
            h.w_scp,
            h.w_gps,
        ];
        v.extend(self.bundle.bias);
        v
    }
}

fn head_from_shared(s: &[Var]) -> HeadVars {
    HeadVars {
        lrf_mix: s[0],
        lrf_lambda: s[1],
        lrf_unmix: s[2],
        lrf_unmix_bias: s[3],
        conv1: s[4],
        bias1: s[5],
        conv2: s[6],
        bias2: s[7],
        readout: s[8],
        readout_bias: s[9],
        w_scp: s[10],
        w_gps: s[11],
    }
}

/// Per-sequence values that feed the pairwise score.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub tokens: Var,
    /// Tokens projected through every manifold factor (`s × k·r`), present
    /// when the local branch is on.
    pub projected: Option<Var>,
}

impl Encoded {
    fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.tokens];
        v.extend(self.projected);
        v
    }
}

/// Score of one text/point pair given their encodings. `shared` is laid out
/// as in `ModelVars::shared`.
pub fn pair_score<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    text: &[Var],
    point: &[Var],
    shared: &[Var],
) -> Result<Var> {
    let head = head_from_shared(shared);
    let b = cfg.branches;
    let global = if b.gps {
        Some(simhead::gps(g, text[0], point[0], cfg.pooling)?)
    } else {
        None
    };
    if !b.rls {
        return global.ok_or_else(|| Error::Config("no similarity branch enabled".into()));
    }
    let bias = shared.get(12).copied();
    let mut map = rls::map_from_projections(g, text[1], point[1], cfg.rls.manifolds, bias)?;
    if b.lrf {
        map = simhead::lrf(g, map, &head)?;
    }
    let local = simhead::scp(g, map, &head, cfg.afr.gelu)?;
    match global {
        Some(gl) => simhead::fuse(g, local, gl, &head),
        None => Ok(local),
    }
}

impl<T: Real> Rmarn<T> {
    /// Fresh parameters. The layout does not depend on the branch switches,
    /// so ablated variants start from identical values for shared parts.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        afr::init_params(
            &mut params,
            Modality::Text.prefix(),
            config.text_width,
            &config.afr,
            &mut rng,
        );
        afr::init_params(
            &mut params,
            Modality::PointCloud.prefix(),
            config.point_width,
            &config.afr,
            &mut rng,
        );
        rls::init_params(&mut params, &config.rls, config.afr.d_model, &mut rng);
        simhead::init_params(&mut params, &config.head(), &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let reference = Rmarn::<T>::new(config, 0)?;
        for ((n1, t1), (n2, t2)) in reference.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::Config(format!(
                    "parameter `{n2}` {:?} does not fit the configuration (expected `{n1}` {:?})",
                    t2.shape(),
                    t1.shape()
                )));
            }
        }
        if reference.params.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> Rmarn<U> {
        Rmarn {
            config: self.config,
            params: self.params.cast(),
        }
    }

    fn check_sequence(&self, seq: &FeatureSequence, modality: Modality) -> Result<()> {
        seq.validate()?;
        let want = match modality {
            Modality::Text => self.config.text_width,
            Modality::PointCloud => self.config.point_width,
        };
        if seq.modality != modality {
            return Err(Error::Argument(format!(
                "sequence `{}` is {:?}, expected {:?}",
                seq.id, seq.modality, modality
            )));
        }
        if seq.width() != want {
            return Err(Error::Dimension {
                op: "encode",
                axis: "feature width",
                expected: want,
                got: seq.width(),
            });
        }
        if modality == Modality::Text
            && self.config.branches.rls
            && self.config.rls.bias == rls::BiasMode::LearnedBias
            && seq.len() > self.config.rls.max_text_len
        {
            return Err(Error::Config(format!(
                "text `{}` has {} tokens, above the bias table capacity {}",
                seq.id,
                seq.len(),
                self.config.rls.max_text_len
            )));
        }
        if modality == Modality::PointCloud
            && self.config.branches.rls
            && self.config.rls.bias == rls::BiasMode::LearnedBias
            && seq.len() > self.config.rls.max_point_len
        {
            return Err(Error::Config(format!(
                "point cloud `{}` has {} tokens, above the bias table capacity {}",
                seq.id,
                seq.len(),
                self.config.rls.max_point_len
            )));
        }
        Ok(())
    }

    /// Refines one sequence and, if needed, projects it onto the manifolds.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        seq: &FeatureSequence,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Encoded> {
        self.check_sequence(seq, seq.modality)?;
        let (afr_vars, factors) = match seq.modality {
            Modality::Text => (&vars.text, vars.bundle.text_factors),
            Modality::PointCloud => (&vars.point, vars.bundle.point_factors),
        };
        let x = g.constant(seq.tokens.cast());
        let tokens = if self.config.branches.afr {
            afr::encode(g, x, afr_vars, &self.config.afr, rng)?
        } else {
            afr::project_input(g, x, afr_vars)?
        };
        let projected = if self.config.branches.rls {
            Some(rls::project(g, tokens, factors)?)
        } else {
            None
        };
        Ok(Encoded { tokens, projected })
    }

    /// `texts.len() × points.len()` score matrix on `g`.
    pub fn similarity(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        texts: &[Encoded],
        points: &[Encoded],
    ) -> Result<Var> {
        let cfg = self.config;
        let f: Arc<PairFn<T>> = Arc::new(move |g, t, p, s| pair_score(g, &cfg, t, p, s));
        g.pair_grid(
            texts.iter().map(Encoded::vars).collect(),
            points.iter().map(Encoded::vars).collect(),
            vars.shared(),
            f,
        )
    }

    /// Contrastive loss of a batch of matched pairs; `rng` enables dropout.
    pub fn batch_loss(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        texts: &[FeatureSequence],
        points: &[FeatureSequence],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        if texts.len() != points.len() {
            return Err(Error::Argument(format!(
                "{} texts but {} point clouds in batch",
                texts.len(),
                points.len()
            )));
        }
        let mut enc_t = Vec::with_capacity(texts.len());
        for t in texts {
            self.check_sequence(t, Modality::Text)?;
            let r: Option<&mut dyn RngCore> = match rng {
                Some(ref mut r) => Some(&mut **r),
                None => None,
            };
            enc_t.push(self.encode(g, vars, t, r)?);
        }
        let mut enc_p = Vec::with_capacity(points.len());
        for p in points {
            self.check_sequence(p, Modality::PointCloud)?;
            let r: Option<&mut dyn RngCore> = match rng {
                Some(ref mut r) => Some(&mut **r),
                None => None,
            };
            enc_p.push(self.encode(g, vars, p, r)?);
        }
        let s = self.similarity(g, vars, &enc_t, &enc_p)?;
        contrastive_loss(g, s, &self.config.loss)
    }

    /// Eval-mode score matrix for plain sequences (rows: texts).
    pub fn score_matrix(
        &self,
        texts: &[FeatureSequence],
        points: &[FeatureSequence],
    ) -> Result<Tensor<T>> {
        if texts.is_empty() || points.is_empty() {
            return Err(Error::Argument("need at least one text and one point cloud".into()));
        }
        let mut g = Graph::inference();
        let vars = ModelVars::bind(&self.params.bind(&mut g), &self.config)?;
        let mut enc_t = Vec::with_capacity(texts.len());
        for t in texts {
            self.check_sequence(t, Modality::Text)?;
            enc_t.push(self.encode(&mut g, &vars, t, None)?);
        }
        let mut enc_p = Vec::with_capacity(points.len());
        for p in points {
            self.check_sequence(p, Modality::PointCloud)?;
            enc_p.push(self.encode(&mut g, &vars, p, None)?);
        }
        let s = self.similarity(&mut g, &vars, &enc_t, &enc_p)?;
        Ok(g.value(s).clone())
    }

    /// Eval-mode loss of matched pairs.
    pub fn eval_loss(&self, texts: &[FeatureSequence], points: &[FeatureSequence]) -> Result<T> {
        let mut g = Graph::inference();
        let vars = ModelVars::bind(&self.params.bind(&mut g), &self.config)?;
        let l = self.batch_loss(&mut g, &vars, texts, points, None)?;
        Ok(g.value(l).item())
    }

    /// One loss evaluation with gradients, in store order.
    pub fn loss_and_gradients(
        &self,
        texts: &[FeatureSequence],
        points: &[FeatureSequence],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(T, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let vars = ModelVars::bind(&bound, &self.config)?;
        let l = self.batch_loss(&mut g, &vars, texts, points, rng)?;
        let grads = g.backward(l)?;
        let value = g.value(l).item();
        Ok((value, bound.gradients(&g, &grads)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{compare_gradients, GradCheckOptions};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
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
                ..RlsConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn seqs(n: usize, seed: u64) -> (Vec<FeatureSequence>, Vec<FeatureSequence>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = (0..n)
            .map(|i| {
                FeatureSequence::new(
                    format!("t{i}"),
                    Modality::Text,
                    Tensor::randn(&[2 + i % 2, 5], 1.0, &mut rng),
                )
                .unwrap()
            })
            .collect();
        let p = (0..n)
            .map(|i| {
                FeatureSequence::new(
                    format!("p{i}"),
                    Modality::PointCloud,
                    Tensor::randn(&[3 + i % 3, 4], 1.0, &mut rng),
                )
                .unwrap()
            })
            .collect();
        (t, p)
    }

    #[test]
    fn all_branches_off_is_config_error() {
        let mut cfg = tiny_config();
        cfg.branches.rls = false;
        cfg.branches.gps = false;
        assert!(matches!(Rmarn::<f32>::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn layout_is_independent_of_switches() {
        let a = Rmarn::<f32>::new(tiny_config(), 3).unwrap();
        let mut cfg = tiny_config();
        cfg.branches = Branches {
            afr: false,
            rls: true,
            gps: false,
            lrf: false,
        };
        let b = Rmarn::<f32>::new(cfg, 3).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn score_matrix_matches_single_pairs() {
        let m = Rmarn::<f64>::new(tiny_config(), 1).unwrap();
        let (t, p) = seqs(3, 2);
        let full = m.score_matrix(&t, &p).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let one = m.score_matrix(&t[i..=i], &p[j..=j]).unwrap();
                assert_eq!(one.item(), full.at2(i, j));
            }
        }
    }

    #[test]
    fn global_only_scores_are_cosines() {
        let mut cfg = tiny_config();
        cfg.branches.rls = false;
        let m = Rmarn::<f64>::new(cfg, 4).unwrap();
        let (t, p) = seqs(2, 5);
        let s = m.score_matrix(&t, &p).unwrap();
        assert!(s.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn rejects_wrong_width_and_modality() {
        let m = Rmarn::<f32>::new(tiny_config(), 0).unwrap();
        let (t, p) = seqs(2, 1);
        assert!(m.score_matrix(&p, &t).is_err());
        let bad = FeatureSequence::new("x", Modality::Text, Tensor::zeros(&[2, 7])).unwrap();
        assert!(matches!(
            m.score_matrix(&[bad], &p[..1]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn end_to_end_gradients_check() {
        let m = Rmarn::<f64>::new(tiny_config(), 6).unwrap();
        let (t, p) = seqs(3, 7);
        let (_, analytic) = m.loss_and_gradients(&t, &p, None).unwrap();
        let params: Vec<Tensor<f64>> = m.params.iter().map(|(_, v)| v.clone()).collect();
        let names: Vec<String> = m.params.names().map(String::from).collect();
        let cfg = m.config;
        let f = move |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
            let model = Rmarn::<f64> {
                config: cfg,
                params: ParamStore::new(),
            };
            let mv = ModelVars::bind(&Bound::from_parts(&names, vars), &cfg)?;
            model.batch_loss(g, &mv, &t, &p, None)
        };
        let opts = GradCheckOptions {
            max_coords: 8,
            ..Default::default()
        };
        let r = compare_gradients(f, &params, &analytic, opts).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn dropout_changes_loss_only_with_rng() {
        let m = Rmarn::<f64>::new(tiny_config(), 8).unwrap();
        let (t, p) = seqs(2, 9);
        let a = m.eval_loss(&t, &p).unwrap();
        let b = m.eval_loss(&t, &p).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, _) = m.loss_and_gradients(&t, &p, Some(&mut rng)).unwrap();
        assert_ne!(a, c);
    }
}
