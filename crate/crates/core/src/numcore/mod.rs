//! Dense tensors with a dynamic reverse-mode tape.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, rel_error, FdConfig, FdReport};
pub use graph::{pool_bin, Gradients, Graph, KeyMask, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
        let m = g.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
        let r = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(r), &[1., 2., 3., 4.]);

        let a = g.constant(&t(&[1, 2], &[1., 2.]));
        let b = g.constant(&t(&[2, 1], &[3., 4.]));
        let r = g.matmul(a, b).unwrap();
        assert_eq!(g.value(r), &[11.]);

        let z = g.constant(&Tensor::zeros(vec![2, 3]));
        let any = g.constant(&t(&[3, 5], &(0..15).map(|v| v as f64).collect::<Vec<_>>()));
        let r = g.matmul(z, any).unwrap();
        assert_eq!(g.shape(r), &[2, 5]);
        assert!(g.value(r).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&Tensor::zeros(vec![2, 3]));
        let b = g.constant(&Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[2], &[0., 0.]));
        let y = g.softmax(x, 0).unwrap();
        assert!(close(g.value(y), &[0.5, 0.5], 1e-15));
        let x = g.constant(&t(&[3], &[1., 1., 1.]));
        let y = g.softmax(x, 0).unwrap();
        assert!(close(g.value(y), &[1. / 3.; 3], 1e-15));
        let x = g.constant(&t(&[2], &[0., 3f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        assert!(close(g.value(y), &[0.25, 0.75], 1e-15));
        assert!(matches!(g.softmax(x, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[3], &[1000., 1000., 999.]));
        let y = g.softmax(x, 0).unwrap();
        assert!(g.value(y).iter().all(|v| v.is_finite()));
        assert!((g.value(y).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(&t(&[2], &[1., 1.]));
        let zeros = g.constant(&t(&[2], &[0., 0.]));
        let x = g.constant(&t(&[2], &[5., 5.]));
        let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0., 0.]);

        let x = g.constant(&t(&[2], &[1., 3.]));
        let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
        assert!(close(g.value(y), &[-1., 1.], 1e-9));

        let gain0 = g.constant(&t(&[2], &[0., 0.]));
        let bias = g.constant(&t(&[2], &[0.3, -0.7]));
        let y = g.layer_norm(x, gain0, bias, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0.3, -0.7]);

        assert!(matches!(g.layer_norm(x, ones, zeros, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(g.layer_norm(x, ones, zeros, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn activation_examples() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[3], &[0., 3f64.ln(), -2.]));
        let s = g.sigmoid(x);
        assert_eq!(g.value(s)[0], 0.5);
        assert!((g.value(s)[1] - 0.75).abs() < 1e-15);
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0., 3f64.ln(), 0.]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(&t(&[3], &[1., -2., 5.]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1., 1., 1.]);

        let mut g = Graph::new();
        let x = g.param(&t(&[1], &[3.]));
        let sq = g.mul(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1., 2.]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1., 2.]));
        let c = g.constant(&t(&[2], &[3., 4.]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3., 4.]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn gradcheck_rejects_bad_step_and_nondeterminism() {
        let x = t(&[2], &[1., 2.]);
        let cfg = FdConfig { h: 0.0, ..FdConfig::default() };
        let f = |g: &mut Graph<f64>, v: Var| {
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        };
        assert!(matches!(finite_diff_check(f, &x, cfg), Err(Error::Parameter(_))));

        let report = finite_diff_check(f, &x, FdConfig::default()).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-8);

        let counter = std::cell::Cell::new(0u32);
        let noisy = |g: &mut Graph<f64>, v: Var| {
            counter.set(counter.get() + 1);
            let s = g.sum(v);
            Ok(g.add_scalar(s, counter.get() as f64))
        };
        assert!(matches!(
            finite_diff_check(noisy, &x, FdConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn adaptive_pool_examples() {
        let mut g = Graph::new();
        let v = g.constant(&t(&[4], &[1., 2., 3., 4.]));
        let p = g.adaptive_avg_pool1d(v, 2).unwrap();
        assert_eq!(g.value(p), &[1.5, 3.5]);
        let v = g.constant(&t(&[3], &[1., 2., 3.]));
        let p = g.adaptive_avg_pool1d(v, 2).unwrap();
        assert_eq!(g.value(p), &[1.5, 2.5]);
        let p = g.adaptive_avg_pool1d(v, 3).unwrap();
        assert_eq!(g.value(p), &[1., 2., 3.]);
        assert!(matches!(g.adaptive_avg_pool1d(v, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn dropout_is_inverted_and_seeded() {
        let x = t(&[1000], &vec![1.0; 1000]);
        let run = |seed| {
            let mut g = Graph::new();
            let v = g.constant(&x);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = g.dropout(v, 0.25, &mut rng).unwrap();
            g.value(d).to_vec()
        };
        let a = run(3);
        assert_eq!(a, run(3));
        assert!(a.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        let kept = a.iter().filter(|&&v| v > 0.0).count();
        assert!((650..850).contains(&kept), "{kept}");
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, h, w, k, stride, pad, out_c) = (2, 5, 4, 3, 2, 1, 3);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wt: Vec<f64> = (0..out_c * c * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let xv = g.constant(&t(&[c, h, w], &x));
        let cols = g.im2col(xv, k, stride, pad).unwrap();
        let wv = g.constant(&t(&[out_c, c * k * k], &wt));
        let y = g.matmul(wv, cols).unwrap();
        let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
        assert_eq!(g.shape(y), &[out_c, oh * ow]);
        for o in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ch in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += wt[o * c * k * k + (ch * k + ki) * k + kj]
                                        * x[(ch * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((g.value(y)[o * oh * ow + oy * ow + ox] - s).abs() < 1e-12);
                }
            }
        }
    }
}
