use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rmarn::numcore::kernels::{self, soft};
use rmarn::numcore::{
    check_gradients, AdamConfig, AdamState, GradCheckOptions, Graph, ParamStore, Tensor, Var,
};
use rmarn::Result;

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    Tensor::from_fn(&[n, m], |idx| {
        let (i, j) = (idx / m, idx % m);
        (0..k).map(|q| a.at2(i, q) * b.at2(q, j)).sum()
    })
}

fn close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_variants_agree_with_naive(n in 1usize..6, k in 1usize..6, m in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::randn(&[n, k], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[k, m], 1.0, &mut rng);
        let want = naive_matmul(&a, &b);
        prop_assert!(close(&kernels::matmul(&a, &b).unwrap(), &want, 1e-12));
        prop_assert!(close(&kernels::matmul_nt(&a, &b.transpose()).unwrap(), &want, 1e-12));
        prop_assert!(close(&kernels::matmul_tn(&a.transpose(), &b).unwrap(), &want, 1e-12));
    }

    #[test]
    fn softmax_rows_are_distributions(r in 1usize..5, c in 1usize..7, seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[r, c], 3.0, &mut rng);
        let p = kernels::softmax_rows(&x).unwrap();
        let lp = kernels::log_softmax_rows(&x).unwrap();
        for i in 0..r {
            let s: f64 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for j in 0..c {
                prop_assert!((lp.at2(i, j).exp() - p.at2(i, j)).abs() < 1e-12);
            }
        }
        // invariant to a constant shift of each row
        let shifted = kernels::softmax_rows(&x.map(|v| v + shift)).unwrap();
        prop_assert!(close(&shifted, &p, 1e-12));
    }

    #[test]
    fn soft_threshold_is_odd_and_shrinks(x in -10.0f64..10.0, lambda in 0.0f64..5.0) {
        let y = soft(x, lambda).unwrap();
        prop_assert_eq!(soft(-x, lambda).unwrap(), -y);
        prop_assert!(y.abs() <= x.abs());
        prop_assert!(y == 0.0 || y.signum() == x.signum());
        prop_assert!(((x - y).abs() - lambda.min(x.abs())).abs() < 1e-12);
    }

    #[test]
    fn conv2d_matches_direct_sum(c in 1usize..3, o in 1usize..3, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[c, h, w], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[o, c, 3, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[o], 1.0, &mut rng);
        let y = kernels::conv2d(&x, &k, Some(&b), (1, 1), (1, 1)).unwrap();
        prop_assert_eq!(y.shape(), &[o, h, w][..]);
        let xd = |ci: usize, i: isize, j: isize| -> f64 {
            if i < 0 || j < 0 || i >= h as isize || j >= w as isize { 0.0 } else { x.data()[(ci * h + i as usize) * w + j as usize] }
        };
        for oc in 0..o {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = b.data()[oc];
                    for ci in 0..c {
                        for di in 0..3 {
                            for dj in 0..3 {
                                acc += k.data()[((oc * c + ci) * 3 + di) * 3 + dj]
                                    * xd(ci, i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            }
                        }
                    }
                    prop_assert!((acc - y.data()[(oc * h + i) * w + j]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn gelu_grad_matches_difference() {
    for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
        let (eps, rho) = (0.5, 0.044715);
        let h = 1e-6;
        let num = (kernels::gelu(x + h, eps, rho) - kernels::gelu(x - h, eps, rho)) / (2.0 * h);
        assert!((num - kernels::gelu_grad(x, eps, rho)).abs() < 1e-8);
    }
}

#[test]
fn negative_lambda_is_rejected() {
    assert!(soft(1.0f64, -0.1).is_err());
    assert!(soft(1.0f64, f64::NAN).is_err());
}

fn check(f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, params: &[Tensor<f64>]) {
    let r = check_gradients(f, params, GradCheckOptions::default()).unwrap();
    assert!(r.passes(1e-5), "{r:?}");
}

#[test]
fn graph_ops_have_correct_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
    let wc = w.clone();
    let ws = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
    check(
        move |g, p| {
            let m = g.matmul(p[0], p[1])?;
            let s = g.softmax_rows(m)?;
            let l = g.log_softmax_rows(p[0])?;
            let wv = g.constant(wc.clone());
            let lw = g.mul(l, wv)?;
            let wsv = g.constant(ws.clone());
            let sw = g.mul(s, wsv)?;
            let a = g.sum(sw);
            let b = g.sum(lw);
            let c = g.mul(a, b)?;
            Ok(g.add(c, a)?)
        },
        &[a.clone(), b],
    );
    let gain = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
    let bias = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
    check(
        move |g, p| {
            let y = g.layer_norm(p[0], p[1], p[2], 1e-5)?;
            let y = g.gelu(y, 0.5, 0.044715);
            let wv = g.constant(w.clone());
            let y = g.mul(y, wv)?;
            Ok(g.sum(y))
        },
        &[a.clone(), gain, bias],
    );
    let q = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
    check(
        |g, p| {
            let x = g.mean_rows(p[0])?;
            let y = g.max_rows(p[1])?;
            let c = g.cosine(x, y)?;
            let d = g.dot(x, y)?;
            let sp = g.softplus(d);
            Ok(g.add(c, sp)?)
        },
        &[a.clone(), q.clone()],
    );
    let k = 2;
    let x = Tensor::<f64>::randn(&[3, 6], 1.0, &mut rng);
    let y = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
    let wm = Tensor::<f64>::randn(&[k, 3, 4], 1.0, &mut rng);
    check(
        move |g, p| {
            let m = g.channel_bilinear(p[0], p[1], 2)?;
            let wv = g.constant(wm.clone());
            let m = g.mul(m, wv)?;
            Ok(g.sum(m))
        },
        &[x, y],
    );
}

#[test]
fn soft_threshold_gradient_away_from_kinks() {
    let x = Tensor::<f64>::new(vec![6], vec![-2.0, -0.9, -0.2, 0.1, 0.7, 1.8]).unwrap();
    let lambda = Tensor::<f64>::scalar(0.5);
    check(
        |g, p| {
            let y = g.soft_threshold(p[0], p[1])?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        },
        &[x, lambda],
    );
}

#[test]
fn conv2d_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::<f64>::randn(&[2, 4, 5], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[3], 1.0, &mut rng);
    check(
        |g, p| {
            let y = g.conv2d(p[0], p[1], Some(p[2]), (1, 1), (1, 1))?;
            let y = g.gelu(y, 0.5, 0.044715);
            g.spatial_mean(y).map(|m| g.sum(m))
        },
        &[x, w, b],
    );
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut store = ParamStore::<f64>::new();
    store.insert("x", Tensor::new(vec![2], vec![3.0, -4.0]).unwrap());
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let mut opt = AdamState::new(cfg, &store).unwrap();
    for _ in 0..500 {
        let x = store.get("x").unwrap().clone();
        let grad = x.map(|v| 2.0 * (v - 1.0));
        opt.step(&mut store, &[grad]).unwrap();
    }
    for &v in store.get("x").unwrap().data() {
        assert!((v - 1.0).abs() < 1e-3, "{v}");
    }
    assert_eq!(opt.step_count, 500);
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut store = ParamStore::<f64>::new();
    store.insert("x", Tensor::zeros(&[2]));
    let mut opt = AdamState::new(AdamConfig::default(), &store).unwrap();
    assert!(opt.step(&mut store, &[Tensor::zeros(&[3])]).is_err());
    assert!(opt.step(&mut store, &[]).is_err());
}
