//! Turns a `k × s_T × s_P` similarity map plus two encodings into a scalar.
//!
//! Three pieces, each switchable from the model config:
//! - low-rank filtering: a learned channel mixing `D`, shrinkage, and a
//!   learned mixing back (both start at the identity);
//! - similarity convolution pooling: two 3×3 convolutions, a spatial mean and
//!   a linear readout;
//! - global pooled cosine of the two encodings.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::afr::GeluShape;
use crate::error::{Error, Result};
use crate::numcore::{kernels, Bound, Graph, ParamStore, Real, Tensor, Var};

pub use crate::numcore::kernels::soft;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub manifolds: usize,
    /// Starting shrinkage. Stored through a softplus so it stays positive.
    pub lambda_init: f64,
    pub pooling: Pooling,
    /// Starting weight of the local score in the fusion; the global weight
    /// starts at 1.
    pub local_weight_init: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            manifolds: 8,
            lambda_init: 0.1,
            pooling: Pooling::Mean,
            local_weight_init: 1.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.manifolds == 0 {
            return Err(Error::Config("head needs at least one channel".into()));
        }
        if !(self.lambda_init > 0.0 && self.lambda_init.is_finite()) {
            return Err(Error::Config(format!(
                "initial shrinkage must be > 0, got {}",
                self.lambda_init
            )));
        }
        Ok(())
    }
}

pub const LRF_MIX: &str = "head.lrf_d";
pub const LRF_LAMBDA: &str = "head.lrf_lambda";
pub const LRF_UNMIX: &str = "head.lrf_out";
pub const LRF_UNMIX_BIAS: &str = "head.lrf_out_b";
pub const SCP_CONV1: &str = "head.scp_w1";
pub const SCP_BIAS1: &str = "head.scp_b1";
pub const SCP_CONV2: &str = "head.scp_w2";
pub const SCP_BIAS2: &str = "head.scp_b2";
pub const SCP_READOUT: &str = "head.scp_w";
pub const SCP_READOUT_BIAS: &str = "head.scp_b";
pub const FUSE_SCP: &str = "head.w_scp";
pub const FUSE_GPS: &str = "head.w_gps";

/// `x` such that `softplus(x) = y`, for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn conv_identity<T: Real>(k: usize) -> Tensor<T> {
    Tensor::from_fn(&[k, k, 1, 1], |i| {
        if i / k == i % k {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Adds every head parameter. Which ones a forward pass touches depends on
/// the enabled branches, but the store layout does not.
pub fn init_params<T: Real>(store: &mut ParamStore<T>, cfg: &HeadConfig, rng: &mut dyn RngCore) {
    let k = cfg.manifolds;
    store.insert(LRF_MIX, conv_identity(k));
    store.insert(LRF_LAMBDA, Tensor::scalar(T::of(inverse_softplus(cfg.lambda_init))));
    store.insert(LRF_UNMIX, conv_identity(k));
    store.insert(LRF_UNMIX_BIAS, Tensor::zeros(&[k]));
    let fan1 = (k * 9) as f64;
    let fan2 = (2 * k * 9) as f64;
    store.insert(SCP_CONV1, Tensor::randn(&[2 * k, k, 3, 3], 1.0 / fan1.sqrt(), rng));
    store.insert(SCP_BIAS1, Tensor::zeros(&[2 * k]));
    store.insert(SCP_CONV2, Tensor::randn(&[k, 2 * k, 3, 3], 1.0 / fan2.sqrt(), rng));
    store.insert(SCP_BIAS2, Tensor::zeros(&[k]));
    store.insert(SCP_READOUT, Tensor::randn(&[k], 1.0 / (k as f64).sqrt(), rng));
    store.insert(SCP_READOUT_BIAS, Tensor::zeros(&[1]));
    store.insert(FUSE_SCP, Tensor::scalar(T::of(cfg.local_weight_init)));
    store.insert(FUSE_GPS, Tensor::scalar(T::one()));
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub lrf_mix: Var,
    pub lrf_lambda: Var,
    pub lrf_unmix: Var,
    pub lrf_unmix_bias: Var,
    pub conv1: Var,
    pub bias1: Var,
    pub conv2: Var,
    pub bias2: Var,
    pub readout: Var,
    pub readout_bias: Var,
    pub w_scp: Var,
    pub w_gps: Var,
}

impl HeadVars {
    pub fn bind(bound: &Bound) -> Result<Self> {
        Ok(Self {
            lrf_mix: bound.get(LRF_MIX)?,
            lrf_lambda: bound.get(LRF_LAMBDA)?,
            lrf_unmix: bound.get(LRF_UNMIX)?,
            lrf_unmix_bias: bound.get(LRF_UNMIX_BIAS)?,
            conv1: bound.get(SCP_CONV1)?,
            bias1: bound.get(SCP_BIAS1)?,
            conv2: bound.get(SCP_CONV2)?,
            bias2: bound.get(SCP_BIAS2)?,
            readout: bound.get(SCP_READOUT)?,
            readout_bias: bound.get(SCP_READOUT_BIAS)?,
            w_scp: bound.get(FUSE_SCP)?,
            w_gps: bound.get(FUSE_GPS)?,
        })
    }
}

/// Channel mix, shrink by `softplus(raw λ)`, mix back plus a bias.
pub fn lrf<T: Real>(g: &mut Graph<T>, map: Var, vars: &HeadVars) -> Result<Var> {
    let mixed = g.conv2d(map, vars.lrf_mix, None, (0, 0), (1, 1))?;
    let lambda = g.softplus(vars.lrf_lambda);
    let shrunk = g.soft_threshold(mixed, lambda)?;
    g.conv2d(shrunk, vars.lrf_unmix, Some(vars.lrf_unmix_bias), (0, 0), (1, 1))
}

/// Convolutional pooling of a `k×s_T×s_P` map to a `[1]` score.
pub fn scp<T: Real>(g: &mut Graph<T>, map: Var, vars: &HeadVars, gelu: GeluShape) -> Result<Var> {
    let h = g.conv2d(map, vars.conv1, Some(vars.bias1), (1, 1), (1, 1))?;
    let h = g.gelu(h, T::of(gelu.eps), T::of(gelu.rho));
    let h = g.conv2d(h, vars.conv2, Some(vars.bias2), (1, 1), (1, 1))?;
    let pooled = g.spatial_mean(h)?;
    let s = g.dot(pooled, vars.readout)?;
    g.add(s, vars.readout_bias)
}

/// Cosine of the pooled encodings. A zero pooled vector scores 0.
pub fn gps<T: Real>(g: &mut Graph<T>, text: Var, point: Var, pooling: Pooling) -> Result<Var> {
    let (a, b) = match pooling {
        Pooling::Mean => (g.mean_rows(text)?, g.mean_rows(point)?),
        Pooling::Max => (g.max_rows(text)?, g.max_rows(point)?),
    };
    g.cosine(a, b)
}

/// `w_scp · scp + w_gps · gps`.
pub fn fuse<T: Real>(g: &mut Graph<T>, scp: Var, gps: Var, vars: &HeadVars) -> Result<Var> {
    let a = g.mul(vars.w_scp, scp)?;
    let b = g.mul(vars.w_gps, gps)?;
    g.add(a, b)
}

/// Inverse of a small square matrix by Gauss-Jordan elimination with
/// partial pivoting.
pub fn invert<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    if m.ndim() != 2 || m.rows() != m.cols() {
        return Err(Error::Shape(format!("cannot invert a {:?} tensor", m.shape())));
    }
    let n = m.rows();
    let mut a = m.data().to_vec();
    let mut inv = Tensor::<T>::identity(n).into_data();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                a[i * n + col]
                    .abs()
                    .partial_cmp(&a[j * n + col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap();
        let p = a[pivot * n + col];
        if p == T::zero() || !p.is_finite() {
            return Err(Error::Argument("matrix is singular".into()));
        }
        for j in 0..n {
            a.swap(col * n + j, pivot * n + j);
            inv.swap(col * n + j, pivot * n + j);
        }
        for j in 0..n {
            a[col * n + j] = a[col * n + j] / p;
            inv[col * n + j] = inv[col * n + j] / p;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = a[i * n + col];
            if f == T::zero() {
                continue;
            }
            for j in 0..n {
                a[i * n + j] = a[i * n + j] - f * a[col * n + j];
                inv[i * n + j] = inv[i * n + j] - f * inv[col * n + j];
            }
        }
    }
    Tensor::new(vec![n, n], inv)
}

/// Plain-tensor filter `D⁻¹ soft(D m, λ)` applied independently at every
/// position of a `k×h×w` map. `d` is `k×k`.
pub fn low_rank_filter<T: Real>(map: &Tensor<T>, d: &Tensor<T>, lambda: T) -> Result<Tensor<T>> {
    let d_inv = invert(d)?;
    if map.ndim() != 3 || map.shape()[0] != d.rows() {
        return Err(Error::Dimension {
            op: "low_rank_filter",
            axis: "channels",
            expected: d.rows(),
            got: map.shape().first().copied().unwrap_or(0),
        });
    }
    let k = d.rows();
    let plane = map.shape()[1] * map.shape()[2];
    let mut out = vec![T::zero(); map.len()];
    let mut v = vec![T::zero(); k];
    let mut u = vec![T::zero(); k];
    for pos in 0..plane {
        for c in 0..k {
            v[c] = map.data()[c * plane + pos];
        }
        for c in 0..k {
            u[c] = soft(kernels::dot(d.row(c), &v), lambda)?;
        }
        for c in 0..k {
            out[c * plane + pos] = kernels::dot(d_inv.row(c), &u);
        }
    }
    Tensor::new(map.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{check_gradients, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(k: usize, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let cfg = HeadConfig {
            manifolds: k,
            ..Default::default()
        };
        init_params(&mut s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        s
    }

    #[test]
    fn inverse_softplus_round_trips() {
        for y in [1e-3, 0.1, 1.0, 5.0, 40.0] {
            let x = inverse_softplus(y);
            let back = crate::numcore::graph::softplus(x);
            assert!((back - y).abs() < 1e-12 * y.max(1.0), "{y} -> {back}");
        }
    }

    #[test]
    fn filter_at_init_is_plain_shrinkage() {
        let s = store(3, 0);
        let mut g = Graph::inference();
        let vars = HeadVars::bind(&s.bind(&mut g)).unwrap();
        let map = Tensor::randn(&[3, 2, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let m = g.constant(map.clone());
        let out = lrf(&mut g, m, &vars).unwrap();
        for (o, x) in g.value(out).data().iter().zip(map.data()) {
            assert!((o - kernels::shrink(*x, 0.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn invert_matches_known_inverse() {
        let m = Tensor::<f64>::from_rows(&[vec![4.0, 7.0], vec![2.0, 6.0]]);
        let inv = invert(&m).unwrap();
        let want = [0.6, -0.7, -0.2, 0.4];
        for (a, b) in inv.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
        let sing = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(invert(&sing).is_err());
    }

    #[test]
    fn identity_mixing_reduces_to_soft() {
        let map = Tensor::<f64>::from_fn(&[2, 1, 3], |i| i as f64 * 0.3 - 0.7);
        let out = low_rank_filter(&map, &Tensor::identity(2), 0.25).unwrap();
        for (o, x) in out.data().iter().zip(map.data()) {
            assert_eq!(*o, soft(*x, 0.25).unwrap());
        }
    }

    #[test]
    fn zero_shrinkage_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let map = Tensor::randn(&[3, 2, 2], 1.0, &mut rng);
        let out = low_rank_filter(&map, &d, 0.0).unwrap();
        for (o, x) in out.data().iter().zip(map.data()) {
            assert!((o - x).abs() < 1e-12);
        }
    }

    #[test]
    fn gps_of_identical_sequences_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        for pooling in [Pooling::Mean, Pooling::Max] {
            let mut g = Graph::inference();
            let a = g.constant(x.clone());
            let b = g.constant(x.clone());
            let c = gps(&mut g, a, b, pooling).unwrap();
            assert!((g.value(c).item() - 1.0).abs() < 1e-12);
        }
        let mut g = Graph::inference();
        let a = g.constant(x.clone());
        let z = g.constant(Tensor::zeros(&[3, 6]));
        let c = gps(&mut g, a, z, Pooling::Mean).unwrap();
        assert_eq!(g.value(c).item(), 0.0);
    }

    #[test]
    fn scp_of_constant_map_with_zero_kernels_is_bias() {
        let mut s = store(2, 3);
        s.get_mut(SCP_CONV2).unwrap().data_mut().fill(0.0);
        s.get_mut(SCP_BIAS2).unwrap().data_mut().copy_from_slice(&[0.5, -1.0]);
        s.get_mut(SCP_READOUT).unwrap().data_mut().copy_from_slice(&[2.0, 3.0]);
        s.get_mut(SCP_READOUT_BIAS).unwrap().data_mut()[0] = 0.25;
        let mut g = Graph::inference();
        let vars = HeadVars::bind(&s.bind(&mut g)).unwrap();
        let m = g.constant(Tensor::full(&[2, 3, 5], 0.7));
        let out = scp(&mut g, m, &vars, GeluShape::default()).unwrap();
        assert!((g.value(out).item() - (1.0 - 3.0 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn head_gradients_check() {
        let s = store(2, 4);
        let names: Vec<String> = s.names().map(String::from).collect();
        let mut params: Vec<Tensor<f64>> = s.iter().map(|(_, t)| t.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // move the mixing off the identity so every path carries gradient
        params[0] = Tensor::randn(&[2, 2, 1, 1], 0.7, &mut rng);
        let map = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let text = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let point = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let f = move |g: &mut Graph<f64>, p: &[Var]| -> Result<Var> {
            let vars = HeadVars::bind(&Bound::from_parts(&names, p))?;
            let m = g.constant(map.clone());
            let t = g.constant(text.clone());
            let q = g.constant(point.clone());
            let filtered = lrf(g, m, &vars)?;
            let a = scp(g, filtered, &vars, GeluShape::default())?;
            let b = gps(g, t, q, Pooling::Mean)?;
            fuse(g, a, b, &vars)
        };
        let r = check_gradients(f, &params, GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
