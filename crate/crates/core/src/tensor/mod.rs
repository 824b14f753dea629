//! Minimal reverse-mode tensor engine: f64 everywhere, deterministic under
//! rayon, with exactly the op set the avatar models need.

mod graph;
pub mod kernels;
mod ops;
mod params;

pub use graph::{CustomOp, Graph, SparseMat, Tid};
pub use params::{hex, ParamStore};

#[cfg(test)]
mod gradcheck {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Central finite differences of `f` (built fresh per evaluation) against
    /// the analytic gradient at `x0`.
    fn check<F>(shape: &[usize], build: F, h: f64, tol: f64)
    where
        F: Fn(&mut Graph, Tid) -> Tid,
    {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let n: usize = shape.iter().product();
        let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut g = Graph::new();
        let x = g.var(ArrayD::from_shape_vec(IxDyn(shape), x0.clone()).unwrap());
        let y = build(&mut g, x);
        assert_eq!(g.value(y).len(), 1, "gradcheck loss must be scalar");
        g.backward(y);
        let analytic = g.grad(x).expect("no gradient reached input").clone();

        let eval = |xv: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.var(ArrayD::from_shape_vec(IxDyn(shape), xv.to_vec()).unwrap());
            let y = build(&mut g, x);
            g.scalar(y)
        };

        let mut worst = 0.0f64;
        for k in 0..n {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[k];
            let denom = fd.abs().max(an.abs()).max(1e-4);
            worst = worst.max((fd - an).abs() / denom);
        }
        assert!(worst <= tol, "gradcheck worst rel err {worst:.3e} > {tol:.1e}");
    }

    #[test]
    fn elementwise_chain() {
        check(
            &[3, 4],
            |g, x| {
                let a = g.sigmoid(x);
                let b = g.softplus(x);
                let c = g.mul(a, b);
                let d = g.tanh(c);
                let e = g.leaky_relu(d, 0.2);
                g.mean_all(e)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn exp_ln_sqrt_abs() {
        check(
            &[8],
            |g, x| {
                let a = g.square(x);
                let a = g.add_scalar(a, 1.1);
                let b = g.sqrt(a);
                let c = g.ln(b);
                let d = g.exp(c);
                let e = g.abs(d);
                g.sum_all(e)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn matmul_and_div() {
        check(
            &[3, 3],
            |g, x| {
                let y = g.matmul(x, x);
                let d = g.add_scalar(x, 5.0);
                let q = g.div(y, d);
                g.mean_all(q)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn bmm_permute_reshape() {
        check(
            &[2, 3, 4],
            |g, x| {
                let xt = g.permute(x, &[0, 2, 1]);
                let y = g.bmm(x, xt);
                let y = g.reshape(y, &[2 * 3 * 3]);
                g.mean_all(y)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn softmax_layernorm() {
        check(
            &[4, 5],
            |g, x| {
                let s = g.softmax(x);
                let l = g.layer_norm_core(x, 1e-5);
                let m = g.mul(s, l);
                g.sum_all(m)
            },
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn conv2d_stride2() {
        check(
            &[2, 6, 6],
            |g, x| {
                let w = g.var(ArrayD::from_shape_fn(IxDyn(&[3, 2, 3, 3]), |ix| {
                    ((ix[0] * 11 + ix[1] * 7 + ix[2] * 3 + ix[3]) as f64 * 0.17).sin() * 0.5
                }));
                let y = g.conv2d(x, w, 2, 1);
                let y = g.square(y);
                g.mean_all(y)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn conv2d_weight_grad() {
        check(
            &[3, 2, 3, 3],
            |g, w| {
                let x = g.input(ArrayD::from_shape_fn(IxDyn(&[2, 5, 5]), |ix| {
                    ((ix[0] * 25 + ix[1] * 5 + ix[2]) as f64 * 0.13).cos()
                }));
                let y = g.conv2d(x, w, 1, 1);
                g.mean_all(y)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn conv_transpose_2x() {
        check(
            &[2, 4, 4],
            |g, x| {
                let w = g.var(ArrayD::from_shape_fn(IxDyn(&[2, 3, 4, 4]), |ix| {
                    ((ix[0] * 48 + ix[1] * 16 + ix[2] * 4 + ix[3]) as f64 * 0.11).sin() * 0.3
                }));
                let y = g.conv_transpose2d(x, w, 2, 1);
                assert_eq!(g.shape(y), &[3, 8, 8]);
                let y = g.square(y);
                g.mean_all(y)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn conv_transpose_weight_grad() {
        check(
            &[2, 3, 4, 4],
            |g, w| {
                let x = g.input(ArrayD::from_shape_fn(IxDyn(&[2, 4, 4]), |ix| {
                    ((ix[0] * 16 + ix[1] * 4 + ix[2]) as f64 * 0.21).cos()
                }));
                let y = g.conv_transpose2d(x, w, 2, 1);
                g.mean_all(y)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn pools_and_resize() {
        check(
            &[2, 8, 8],
            |g, x| {
                let a = g.max_pool2d(x, 3, 2, 1);
                let b = g.avg_pool2d(x, 2);
                let c = g.resize_bilinear(x, 5, 3);
                let sa = g.mean_all(a);
                let sb = g.mean_all(b);
                let sc = g.mean_all(c);
                let s = g.add(sa, sb);
                g.add(s, sc)
            },
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn depthwise_conv_grads() {
        check(
            &[2, 6, 6],
            |g, x| {
                let k = g.var(ArrayD::from_shape_fn(IxDyn(&[2, 3, 3]), |ix| {
                    ((ix[0] * 9 + ix[1] * 3 + ix[2]) as f64 * 0.31).sin()
                }));
                let y = g.depthwise_conv2d(x, k, 0);
                g.mean_all(y)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn rows_and_slices() {
        check(
            &[4, 3],
            |g, x| {
                let r = g.select_row(x, 2);
                let t = g.tile_rows(r, 5);
                let idx = std::sync::Arc::new(vec![0usize, 2, 2, 3]);
                let ga = g.gather_rows(x, idx);
                let s = g.slice(x, 0, 1, 3);
                let bvec = g.mean_axis0(s);
                let xb = g.add_rowvec(x, bvec);
                let xm = g.mul_rowvec(xb, bvec);
                let c = g.concat(&[xm, ga], 0);
                let st = g.mean_all(t);
                let sc = g.mean_all(c);
                g.add(st, sc)
            },
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn row_normalize_grad() {
        check(
            &[5, 4],
            |g, x| {
                let q = g.add_scalar(x, 0.3); // keep away from the eps fallback
                let n = g.row_normalize(q, 1e-8);
                let n = g.square(n);
                g.mean_all(n)
            },
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn sparse_apply_grad() {
        let m = std::sync::Arc::new(SparseMat {
            nrows: 2,
            ncols: 3,
            indptr: vec![0, 2, 4],
            indices: vec![0, 1, 1, 2],
            weights: vec![0.25, 0.75, 0.5, 0.5],
        });
        check(
            &[3, 3],
            move |g, x| {
                let y = g.sparse_apply(m.clone(), x);
                let y = g.square(y);
                g.mean_all(y)
            },
            1e-6,
            1e-7,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(ArrayD::from_shape_fn(IxDyn(&[6, 9]), |ix| {
            ((ix[0] * 9 + ix[1]) as f64 * 0.7).sin() * 3.0
        }));
        let s = g.softmax(x);
        for r in 0..6 {
            let sum: f64 = (0..9).map(|c| g.value(s)[[r, c]]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
