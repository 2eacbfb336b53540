//! Adaptive feature refiner: a per-modality input projection followed by a
//! stack of post-norm self-attention encoder layers.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Bound, Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    #[serde(rename = "pointcloud")]
    PointCloud,
}

impl Modality {
    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::PointCloud => "point",
        }
    }
}

/// One modality's token features (`s × h`, stored as `f32`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub modality: Modality,
    pub tokens: Tensor<f32>,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, modality: Modality, tokens: Tensor<f32>) -> Result<Self> {
        let seq = Self {
            id: id.into(),
            modality,
            tokens,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.ndim() != 2 || self.tokens.rows() == 0 || self.tokens.cols() == 0 {
            return Err(Error::Shape(format!(
                "feature sequence `{}` must be a non-empty s×h matrix, got {:?}",
                self.id,
                self.tokens.shape()
            )));
        }
        if !self.tokens.is_finite() {
            return Err(Error::NonFinite(format!("features of `{}`", self.id)));
        }
        Ok(())
    }
}

/// Shape of the tanh GELU used in the feed-forward sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeluShape {
    pub eps: f64,
    pub rho: f64,
}

impl Default for GeluShape {
    fn default() -> Self {
        Self {
            eps: 0.5,
            rho: 0.044715,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AfrConfig {
    pub d_model: usize,
    pub nhead: usize,
    pub layers: usize,
    pub ffn_width: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub gelu: GeluShape,
}

impl Default for AfrConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            nhead: 32,
            layers: 8,
            ffn_width: 512,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            gelu: GeluShape::default(),
        }
    }
}

impl AfrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.nhead == 0 || self.d_model % self.nhead != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of nhead {}",
                self.d_model, self.nhead
            )));
        }
        if self.ffn_width == 0 {
            return Err(Error::Config("ffn width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.nhead
    }
}

const LAYER_TENSORS: [&str; 12] = [
    "wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b",
];

/// Graph handles for one encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// Graph handles for a whole refiner: input projection plus layers.
#[derive(Clone, Debug)]
pub struct AfrVars {
    pub proj_w: Var,
    pub proj_b: Var,
    pub layers: Vec<EncoderLayerVars>,
}

fn gaussian<T: Real>(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> Tensor<T> {
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Adds the refiner parameters for one modality to `store` under `prefix`.
pub fn init_params<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    input_width: usize,
    cfg: &AfrConfig,
    rng: &mut dyn RngCore,
) {
    let d = cfg.d_model;
    store.insert(format!("{prefix}.proj.w"), gaussian(&[input_width, d], input_width, rng));
    store.insert(format!("{prefix}.proj.b"), Tensor::zeros(&[d]));
    for i in 0..cfg.layers {
        let p = format!("{prefix}.layer{i}");
        for name in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{p}.{name}"), gaussian(&[d, d], d, rng));
        }
        store.insert(format!("{p}.w1"), gaussian(&[d, cfg.ffn_width], d, rng));
        store.insert(format!("{p}.b1"), Tensor::zeros(&[cfg.ffn_width]));
        store.insert(format!("{p}.w2"), gaussian(&[cfg.ffn_width, d], cfg.ffn_width, rng));
        store.insert(format!("{p}.b2"), Tensor::zeros(&[d]));
        for ln in ["ln1", "ln2"] {
            store.insert(format!("{p}.{ln}_g"), Tensor::full(&[d], T::one()));
            store.insert(format!("{p}.{ln}_b"), Tensor::zeros(&[d]));
        }
    }
}

impl AfrVars {
    pub fn bind(bound: &Bound, prefix: &str, layers: usize) -> Result<Self> {
        let mut out = Vec::with_capacity(layers);
        for i in 0..layers {
            let p = format!("{prefix}.layer{i}");
            let v: Vec<Var> = LAYER_TENSORS
                .iter()
                .map(|n| bound.get(&format!("{p}.{n}")))
                .collect::<Result<_>>()?;
            out.push(EncoderLayerVars {
                wq: v[0],
                wk: v[1],
                wv: v[2],
                wo: v[3],
                w1: v[4],
                b1: v[5],
                w2: v[6],
                b2: v[7],
                ln1_gain: v[8],
                ln1_bias: v[9],
                ln2_gain: v[10],
                ln2_bias: v[11],
            });
        }
        Ok(Self {
            proj_w: bound.get(&format!("{prefix}.proj.w"))?,
            proj_b: bound.get(&format!("{prefix}.proj.b"))?,
            layers: out,
        })
    }
}

/// Multi-head scaled dot-product self-attention on an `s×d` input.
pub fn self_attention<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    layer: &EncoderLayerVars,
    nhead: usize,
) -> Result<Var> {
    let d = g.shape(x)[1];
    if nhead == 0 || d % nhead != 0 {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {nhead} heads"
        )));
    }
    let de = d / nhead;
    let q = g.matmul(x, layer.wq)?;
    let k = g.matmul(x, layer.wk)?;
    let v = g.matmul(x, layer.wv)?;
    let scale = T::of(1.0 / (de as f64).sqrt());
    let mut heads = Vec::with_capacity(nhead);
    for h in 0..nhead {
        let qh = g.cols(q, h * de, de)?;
        let kh = g.cols(k, h * de, de)?;
        let vh = g.cols(v, h * de, de)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = if nhead == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    g.matmul(cat, layer.wo)
}

/// `GELU(x W1 + b1) W2 + b2`, row-wise.
pub fn feed_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    layer: &EncoderLayerVars,
    gelu: GeluShape,
) -> Result<Var> {
    let h = g.matmul(x, layer.w1)?;
    let h = g.add_row_bias(h, layer.b1)?;
    let h = g.gelu(h, T::of(gelu.eps), T::of(gelu.rho));
    let o = g.matmul(h, layer.w2)?;
    g.add_row_bias(o, layer.b2)
}

/// One post-norm encoder layer: `S = LN(X + Att(X))`, `X' = LN(S + FFN(S))`.
/// Dropout is applied to each sublayer output when `rng` is given.
pub fn encoder_layer<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    layer: &EncoderLayerVars,
    cfg: &AfrConfig,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let eps = T::of(cfg.layer_norm_eps);
    let mut att = self_attention(g, x, layer, cfg.nhead)?;
    if let Some(r) = rng.as_deref_mut() {
        att = g.dropout(att, cfg.dropout, r)?;
    }
    let res = g.add(x, att)?;
    let s = g.layer_norm(res, layer.ln1_gain, layer.ln1_bias, eps)?;
    let mut ff = feed_forward(g, s, layer, cfg.gelu)?;
    if let Some(r) = rng {
        ff = g.dropout(ff, cfg.dropout, r)?;
    }
    let res = g.add(s, ff)?;
    g.layer_norm(res, layer.ln2_gain, layer.ln2_bias, eps)
}

/// Input projection only (the refiner-free ablation path).
pub fn project_input<T: Real>(g: &mut Graph<T>, x: Var, vars: &AfrVars) -> Result<Var> {
    let w_in = g.shape(vars.proj_w)[0];
    let h = g.shape(x)[1];
    if h != w_in {
        return Err(Error::Config(format!(
            "feature width {h} does not match the refiner input width {w_in}"
        )));
    }
    let p = g.matmul(x, vars.proj_w)?;
    g.add_row_bias(p, vars.proj_b)
}

/// Projects an `s×h` sequence to `s×d` and runs it through the layer stack.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    vars: &AfrVars,
    cfg: &AfrConfig,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    if vars.layers.is_empty() {
        return Err(Error::Config("encoder stack is empty".into()));
    }
    let mut h = project_input(g, x, vars)?;
    for layer in &vars.layers {
        let r: Option<&mut dyn RngCore> = match rng {
            Some(ref mut r) => Some(&mut **r),
            None => None,
        };
        h = encoder_layer(g, h, layer, cfg, r)?;
    }
    Ok(h)
}
