//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every function returns plain `f32` buffers so the page can draw them on a
//! canvas without further decoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rmarn::numcore::{kernels, Tensor};
use rmarn::rls::ManifoldBundle;
use rmarn::simhead;
use wasm_bindgen::prelude::*;

fn rotation(k: usize, degrees: f64) -> Tensor<f64> {
    // rotate consecutive channel pairs; an odd last channel is left alone
    let (s, c) = degrees.to_radians().sin_cos();
    let mut d = Tensor::identity(k);
    for p in (0..k.saturating_sub(1)).step_by(2) {
        let data = d.data_mut();
        data[p * k + p] = c;
        data[p * k + p + 1] = -s;
        data[(p + 1) * k + p] = s;
        data[(p + 1) * k + p + 1] = c;
    }
    d
}

/// Random token sequences scored through `manifolds` random manifolds.
/// Returns the map (`manifolds × text_len × point_len`) followed by the same
/// map after filtering with a channel rotation of `degrees` and shrinkage
/// `lambda`.
#[wasm_bindgen]
pub fn similarity_map(
    seed: u32,
    text_len: usize,
    point_len: usize,
    manifolds: usize,
    lambda: f64,
    degrees: f64,
) -> Result<Vec<f32>, JsError> {
    let (width, rank) = (16, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let text = Tensor::<f64>::randn(&[text_len.max(1), width], 1.0, &mut rng);
    let point = Tensor::<f64>::randn(&[point_len.max(1), width], 1.0, &mut rng);
    let k = manifolds.max(1);
    let std = 1.0 / (width as f64).sqrt();
    let a = Tensor::randn(&[k * rank, width], std, &mut rng);
    let b = Tensor::randn(&[k * rank, width], std, &mut rng);
    let bundle = ManifoldBundle::new(k, a, b, None).map_err(|e| JsError::new(&e.to_string()))?;
    let map = bundle
        .attention_map(&text, &point)
        .map_err(|e| JsError::new(&e.to_string()))?;
    let filtered = simhead::low_rank_filter(&map, &rotation(k, degrees), lambda.max(0.0))
        .map_err(|e| JsError::new(&e.to_string()))?;
    Ok(map
        .data()
        .iter()
        .chain(filtered.data())
        .map(|&v| v as f32)
        .collect())
}

fn grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let n = n.max(2);
    (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

/// `soft(x, lambda)` sampled at `n` points of `[lo, hi]`.
#[wasm_bindgen]
pub fn shrink_curve(lambda: f64, lo: f64, hi: f64, n: usize) -> Result<Vec<f32>, JsError> {
    grid(lo, hi, n)
        .map(|x| {
            kernels::soft(x, lambda.max(0.0))
                .map(|v| v as f32)
                .map_err(|e| JsError::new(&e.to_string()))
        })
        .collect()
}

/// The tanh GELU with shape parameters `eps` and `rho`, sampled like
/// [`shrink_curve`].
#[wasm_bindgen]
pub fn gelu_curve(eps: f64, rho: f64, lo: f64, hi: f64, n: usize) -> Vec<f32> {
    grid(lo, hi, n)
        .map(|x| kernels::gelu(x, eps, rho) as f32)
        .collect()
}
