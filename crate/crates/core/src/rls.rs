//! Multi-manifold local similarity between text and point tokens.
//!
//! Each manifold `i` scores a token pair as `(A_i t)·(B_i p) + e_i(a, b)`.
//! The transported-metric tensor of the underlying geometry is never built:
//! its position-independent part is the learned low-rank product `A_iᵀB_i`,
//! and the position-only remainder is the optional bias table `e`.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{kernels, Bound, Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    #[default]
    Off,
    LearnedBias,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlsConfig {
    /// Number of manifolds (channels of the similarity map).
    pub manifolds: usize,
    /// Shared rank of every `A_i`, `B_i`.
    pub rank: usize,
    pub bias: BiasMode,
    /// Capacity of the learned bias table along each token axis.
    pub max_text_len: usize,
    pub max_point_len: usize,
}

impl Default for RlsConfig {
    fn default() -> Self {
        Self {
            manifolds: 8,
            rank: 256,
            bias: BiasMode::Off,
            max_text_len: 64,
            max_point_len: 256,
        }
    }
}

impl RlsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.manifolds == 0 || self.rank == 0 {
            return Err(Error::Config(format!(
                "manifold count ({}) and rank ({}) must be positive",
                self.manifolds, self.rank
            )));
        }
        if self.bias == BiasMode::LearnedBias && (self.max_text_len == 0 || self.max_point_len == 0)
        {
            return Err(Error::Config("bias table capacity must be positive".into()));
        }
        Ok(())
    }
}

pub const TEXT_FACTORS: &str = "rls.a";
pub const POINT_FACTORS: &str = "rls.b";
pub const BIAS_TABLE: &str = "rls.e";

/// Factors `A` and `B` are stored stacked, `(k·r) × d`, rows `i·r..(i+1)·r`
/// belonging to manifold `i`. They start as centered Gaussians with std
/// `1/sqrt(d)`; the bias table starts at zero.
pub fn init_params<T: Real>(
    store: &mut ParamStore<T>,
    cfg: &RlsConfig,
    width: usize,
    rng: &mut dyn RngCore,
) {
    let rows = cfg.manifolds * cfg.rank;
    let std = 1.0 / (width as f64).sqrt();
    store.insert(TEXT_FACTORS, Tensor::randn(&[rows, width], std, rng));
    store.insert(POINT_FACTORS, Tensor::randn(&[rows, width], std, rng));
    if cfg.bias == BiasMode::LearnedBias {
        store.insert(
            BIAS_TABLE,
            Tensor::zeros(&[cfg.manifolds, cfg.max_text_len, cfg.max_point_len]),
        );
    }
}

/// Learned per-manifold factors in plain tensor form.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldBundle<T> {
    pub manifolds: usize,
    pub rank: usize,
    pub text_factors: Tensor<T>,
    pub point_factors: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> ManifoldBundle<T> {
    pub fn new(
        manifolds: usize,
        text_factors: Tensor<T>,
        point_factors: Tensor<T>,
        bias: Option<Tensor<T>>,
    ) -> Result<Self> {
        if text_factors.ndim() != 2 || text_factors.shape() != point_factors.shape() {
            return Err(Error::Shape(format!(
                "factor stacks must be equal (k·r)×d matrices, got {:?} and {:?}",
                text_factors.shape(),
                point_factors.shape()
            )));
        }
        if manifolds == 0 || text_factors.rows() % manifolds != 0 {
            return Err(Error::Config(format!(
                "{} factor rows do not split into {manifolds} manifolds",
                text_factors.rows()
            )));
        }
        if let Some(e) = &bias {
            if e.ndim() != 3 || e.shape()[0] != manifolds {
                return Err(Error::Shape(format!(
                    "bias table must be {manifolds}×S_T×S_P, got {:?}",
                    e.shape()
                )));
            }
        }
        Ok(Self {
            manifolds,
            rank: text_factors.rows() / manifolds,
            text_factors,
            point_factors,
            bias,
        })
    }

    pub fn from_store(store: &ParamStore<T>, cfg: &RlsConfig) -> Result<Self> {
        let get = |n: &str| {
            store
                .get(n)
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing parameter `{n}`")))
        };
        let bias = match cfg.bias {
            BiasMode::Off => None,
            BiasMode::LearnedBias => Some(get(BIAS_TABLE)?),
        };
        Self::new(cfg.manifolds, get(TEXT_FACTORS)?, get(POINT_FACTORS)?, bias)
    }

    pub fn width(&self) -> usize {
        self.text_factors.cols()
    }

    /// `r×d` factor of manifold `i` (text side when `text`, else point side).
    pub fn factor(&self, i: usize, text: bool) -> Tensor<T> {
        let src = if text {
            &self.text_factors
        } else {
            &self.point_factors
        };
        let d = self.width();
        let rows = &src.data()[i * self.rank * d..(i + 1) * self.rank * d];
        Tensor::new(vec![self.rank, d], rows.to_vec()).expect("factor slice")
    }

    /// Evaluates the attention map outside of any training graph.
    pub fn attention_map(&self, text: &Tensor<T>, point: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let t = g.constant(text.clone());
        let p = g.constant(point.clone());
        let vars = BundleVars {
            manifolds: self.manifolds,
            text_factors: g.constant(self.text_factors.clone()),
            point_factors: g.constant(self.point_factors.clone()),
            bias: self.bias.clone().map(|e| g.constant(e)),
        };
        let m = riemann_attention_map(&mut g, t, p, &vars)?;
        Ok(g.value(m).clone())
    }
}

/// Graph handles for the bundle's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BundleVars {
    pub manifolds: usize,
    pub text_factors: Var,
    pub point_factors: Var,
    pub bias: Option<Var>,
}

impl BundleVars {
    pub fn bind(bound: &Bound, cfg: &RlsConfig) -> Result<Self> {
        Ok(Self {
            manifolds: cfg.manifolds,
            text_factors: bound.get(TEXT_FACTORS)?,
            point_factors: bound.get(POINT_FACTORS)?,
            bias: match cfg.bias {
                BiasMode::Off => None,
                BiasMode::LearnedBias => Some(bound.get(BIAS_TABLE)?),
            },
        })
    }
}

/// `(A_i t)·(B_i p) + e` for a single token pair.
pub fn token_similarity<T: Real>(
    t: &[T],
    p: &[T],
    a_i: &Tensor<T>,
    b_i: &Tensor<T>,
    e: T,
) -> Result<T> {
    let d = a_i.cols();
    if t.len() != d || p.len() != d || b_i.shape() != a_i.shape() {
        return Err(Error::Dimension {
            op: "token_similarity",
            axis: "width",
            expected: d,
            got: if t.len() != d { t.len() } else { p.len() },
        });
    }
    let mut acc = e;
    for q in 0..a_i.rows() {
        acc += kernels::dot(a_i.row(q), t) * kernels::dot(b_i.row(q), p);
    }
    Ok(acc)
}

/// All manifold projections of a sequence at once: `s×d → s×(k·r)`.
pub fn project<T: Real>(g: &mut Graph<T>, feats: Var, factors: Var) -> Result<Var> {
    let (d, fd) = (g.shape(feats)[1], g.shape(factors)[1]);
    if d != fd {
        return Err(Error::Dimension {
            op: "riemann_attention_map",
            axis: "width",
            expected: fd,
            got: d,
        });
    }
    g.matmul_nt(feats, factors)
}

/// Map from already-projected sequences; adds the cropped bias table when
/// present. Output is `k × s_T × s_P`.
pub fn map_from_projections<T: Real>(
    g: &mut Graph<T>,
    text_proj: Var,
    point_proj: Var,
    manifolds: usize,
    bias: Option<Var>,
) -> Result<Var> {
    let m = g.channel_bilinear(text_proj, point_proj, manifolds)?;
    match bias {
        None => Ok(m),
        Some(e) => {
            let (st, sp) = (g.shape(text_proj)[0], g.shape(point_proj)[0]);
            let window = g.crop3(e, st, sp)?;
            g.add(m, window)
        }
    }
}

/// The `k × s_T × s_P` Riemann attention map of two refined sequences.
pub fn riemann_attention_map<T: Real>(
    g: &mut Graph<T>,
    text: Var,
    point: Var,
    bundle: &BundleVars,
) -> Result<Var> {
    for v in [text, point] {
        if g.shape(v).len() != 2 || g.shape(v)[0] == 0 {
            return Err(Error::Shape(format!(
                "attention map inputs must be non-empty matrices, got {:?}",
                g.shape(v)
            )));
        }
    }
    let tp = project(g, text, bundle.text_factors)?;
    let pp = project(g, point, bundle.point_factors)?;
    map_from_projections(g, tp, pp, bundle.manifolds, bundle.bias)
}
