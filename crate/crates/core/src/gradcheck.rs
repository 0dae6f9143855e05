//! Central finite-difference verification of reverse-mode gradients.

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

/// Relative error between an analytic and a numerical derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares `backward` against central differences with step `h` for every
/// scalar of every tensor in `params`. `f` must build a scalar from the
/// parameter leaves it is given. Returns the largest relative error.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("leaves require grad"))
        .collect();

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.len() {
            let x0 = p.data()[i];
            work[pi].data_mut()[i] = x0 + h;
            let up = eval(&work)?;
            work[pi].data_mut()[i] = x0 - h;
            let down = eval(&work)?;
            work[pi].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[pi].data()[i], numeric));
        }
    }
    Ok(worst)
}

/// [`finite_diff_check`] over every tensor of a parameter store; `f`
/// reads the parameters through a [`Binding`] in which all are trainable.
pub fn check_params<F>(f: F, params: &ParamStore<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Binding) -> Result<Var>,
{
    let names: Vec<&str> = params.names().collect();
    let values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    finite_diff_check(
        |g, vars| {
            let b = Binding::from_leaves(names.iter().copied().zip(vars.iter().copied()));
            f(g, &b)
        },
        &values,
        h,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{AttnMask, GatherPlan};
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// `sum(x * w)` for a fixed random `w`, so no gradient vanishes by symmetry.
    fn weighted(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
        let w = g.constant(random(g.shape(x), seed));
        let y = g.mul(x, w)?;
        g.sum(y)
    }

    fn check(params: &[Tensor<f64>], tol: f64, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
        let err = finite_diff_check(f, params, 1e-6).unwrap();
        assert!(err < tol, "relative error {err} exceeds {tol}");
    }

    #[test]
    fn matmul_gradient() {
        let b = random(&[7, 3], 2);
        check(&[random(&[5, 7], 1)], 1e-7, |g, v| {
            let b = g.constant(b.clone());
            let y = g.matmul(v[0], b)?;
            g.sum(y)
        });
        check(&[random(&[5, 7], 1), random(&[7, 3], 2)], 1e-7, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted(g, y, 3)
        });
    }

    #[test]
    fn elementwise_gradients() {
        let ps = [random(&[3, 4], 1), random(&[3, 4], 2), random(&[4], 3)];
        check(&ps, 1e-6, |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let m = g.mul(s, v[1])?;
            let c = g.scale(m, 1.7)?;
            let b = g.add_bias(c, v[2])?;
            let r = g.relu(b)?;
            weighted(g, r, 4)
        });
        check(&[random(&[2, 5], 5)], 1e-6, |g, v| g.mean(v[0]));
    }

    #[test]
    fn softmax_gradient() {
        let mask = Tensor::new(&[1, 5], vec![true, true, false, true, true]).unwrap();
        check(&[random(&[3, 5], 6)], 1e-6, |g, v| {
            let s = g.softmax(v[0], 1, Some(&mask))?;
            weighted(g, s, 7)
        });
        check(&[random(&[4, 3, 2], 8)], 1e-6, |g, v| {
            let s = g.softmax(v[0], 1, None)?;
            weighted(g, s, 9)
        });
    }

    #[test]
    fn layer_norm_gradient() {
        let ps = [random(&[4, 6], 10), random(&[6], 11), random(&[6], 12)];
        check(&ps, 1e-6, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted(g, y, 13)
        });
    }

    #[test]
    fn attention_gradient() {
        let ps = [
            random(&[2 * 2, 4], 14),
            random(&[2 * 3, 4], 15),
            random(&[2 * 3, 4], 16),
        ];
        let mask = AttnMask::Keys(vec![true, false, true, true, true, true]);
        check(&ps, 1e-5, |g, v| {
            let y = g.attention(v[0], v[1], v[2], 2, 2, &mask)?;
            weighted(g, y, 17)
        });
        let full = AttnMask::Full((0..12).map(|i| i % 5 != 1).collect());
        check(&ps, 1e-5, |g, v| {
            let y = g.attention(v[0], v[1], v[2], 2, 1, &full)?;
            weighted(g, y, 18)
        });
    }

    #[test]
    fn conv_gradient() {
        check(&[random(&[4, 5, 2], 19), random(&[3, 3, 2, 3], 20)], 1e-6, |g, v| {
            let y = g.conv2d(v[0], v[1])?;
            weighted(g, y, 21)
        });
        check(&[random(&[3, 4, 3], 22), random(&[1, 3, 3, 2], 23)], 1e-6, |g, v| {
            let y = g.conv2d(v[0], v[1])?;
            weighted(g, y, 24)
        });
    }

    #[test]
    fn gather_and_reshaping_gradients() {
        let mut plan = GatherPlan::new(2);
        plan.push_row(&[(0, 0.25), (3, 0.75)]);
        plan.push_zero_row();
        plan.push_row(&[(2, -1.5), (2, 0.5)]);
        check(&[random(&[4, 3], 25), random(&[3, 2], 26)], 1e-6, |g, v| {
            let s = g.gather(v[0], plan.clone())?;
            let c = g.concat_cols(s, v[1])?;
            let st = g.stack_rows(&[c, c])?;
            let r = g.repeat_rows(st, 2)?;
            let rs = g.row_scale(r, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect())?;
            let re = g.reshape(rs, &[6, 10])?;
            weighted(g, re, 27)
        });
    }

    #[test]
    fn l1_gradient() {
        let target = random(&[3, 3], 28);
        check(&[random(&[3, 3], 29)], 1e-6, |g, v| g.l1_loss(v[0], &target));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_are_distributions(
            data in prop::collection::vec(-30.0f64..30.0, 12),
            keep in prop::collection::vec(any::<bool>(), 4),
        ) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(&[3, 4], data).unwrap());
            let mask = Tensor::new(&[1, 4], keep.clone()).unwrap();
            let y = g.softmax(x, 1, Some(&mask)).unwrap();
            for r in 0..3 {
                let row = &g.value(y).data()[r * 4..(r + 1) * 4];
                let total: f64 = row.iter().sum();
                if keep.iter().any(|&k| k) {
                    prop_assert!((total - 1.0).abs() < 1e-12);
                } else {
                    prop_assert_eq!(total, 0.0);
                }
                for (w, k) in row.iter().zip(&keep) {
                    prop_assert!(*w >= 0.0);
                    if !k {
                        prop_assert_eq!(*w, 0.0);
                    }
                }
            }
        }

        #[test]
        fn layer_norm_standardizes_rows(
            data in prop::collection::vec(-100.0f64..100.0, 16),
        ) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(&[2, 8], data.clone()).unwrap());
            let gamma = g.constant(Tensor::full(&[8], 1.0));
            let beta = g.constant(Tensor::zeros(&[8]));
            let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
            for r in 0..2 {
                let row = &g.value(y).data()[r * 8..(r + 1) * 8];
                let src = &data[r * 8..(r + 1) * 8];
                let m: f64 = src.iter().sum::<f64>() / 8.0;
                let var: f64 = src.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 8.0;
                let mean: f64 = row.iter().sum::<f64>() / 8.0;
                prop_assert!(mean.abs() < 1e-9);
                let out_var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 8.0;
                prop_assert!((out_var - var / (var + 1e-5)).abs() < 1e-9);
            }
        }
    }
}
