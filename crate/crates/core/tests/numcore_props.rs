use epmvg_core::numcore::{finite_diff_check, pool_bin, FdConfig, Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn matmul_values(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let (x, y) = (g.constant(a), g.constant(b));
    let z = g.matmul(x, y).unwrap();
    g.tensor(z)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in matrix(3, 5)) {
        let mut g = Graph::new();
        let v = g.constant(&x);
        let s = g.softmax(v, 1).unwrap();
        for row in g.value(s).chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn softmax_is_permutation_equivariant(x in prop::collection::vec(-2.0f64..2.0, 6), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..6).collect();
        // Fisher-Yates driven by the seed.
        let mut s = seed;
        for i in (1..6).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let softmax = |v: &[f64]| {
            let mut g = Graph::new();
            let t = g.constant(&Tensor::new(vec![1, v.len()], v.to_vec()).unwrap());
            let s = g.softmax(t, 1).unwrap();
            g.value(s).to_vec()
        };
        let base = softmax(&x);
        let permuted: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let out = softmax(&permuted);
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((out[j] - base[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_is_bit_deterministic(a in matrix(3, 4), b in matrix(4, 2)) {
        let grads = || {
            let mut g = Graph::new();
            let (x, y) = (g.param(&a), g.param(&b));
            let z = g.matmul(x, y).unwrap();
            let z = g.sigmoid(z);
            let s = g.softmax(z, 1).unwrap();
            let l = g.ln(s);
            let loss = g.sum(l);
            let gr = g.backward(loss).unwrap();
            (gr.get(x).unwrap().to_vec(), gr.get(y).unwrap().to_vec())
        };
        let (g1, g2) = (grads(), grads());
        prop_assert!(g1.0.iter().zip(&g2.0).all(|(p, q)| p.to_bits() == q.to_bits()));
        prop_assert!(g1.1.iter().zip(&g2.1).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn matmul_is_associative(a in matrix(4, 4), b in matrix(4, 4), c in matrix(4, 4)) {
        let left = matmul_values(&matmul_values(&a, &b), &c);
        let right = matmul_values(&a, &matmul_values(&b, &c));
        for (p, q) in left.data().iter().zip(right.data()) {
            prop_assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn pooling_preserves_bin_means(v in prop::collection::vec(-2.0f64..2.0, 1..=16), out in 1usize..=16) {
        let d = v.len();
        let mut g = Graph::new();
        let x = g.constant(&Tensor::vector(v.clone()).unwrap());
        let p = g.adaptive_avg_pool1d(x, out).unwrap();
        let pooled = g.value(p).to_vec();
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let bin_means: Vec<f64> = (0..out).map(|i| {
            let (s, e) = pool_bin(i, d, out);
            mean(&v[s..e])
        }).collect();
        prop_assert!((mean(&pooled) - mean(&bin_means)).abs() < 1e-12);
        if d % out == 0 {
            prop_assert!((mean(&pooled) - mean(&v)).abs() < 1e-12);
        }
    }
}

#[test]
fn pooling_gradient_matches_finite_differences() {
    for (d, out) in [(7, 3), (3, 5), (16, 16), (12, 4)] {
        let x = Tensor::vector((0..d).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let w = Tensor::vector((0..out).map(|i| 1.0 + i as f64 * 0.5).collect()).unwrap();
        let f = |g: &mut Graph<f64>, x: epmvg_core::numcore::Var| {
            let p = g.adaptive_avg_pool1d(x, out)?;
            let wv = g.constant(&w);
            let y = g.mul(p, wv)?;
            let y = g.mul(y, p)?;
            Ok(g.sum(y))
        };
        let cfg = FdConfig {
            h: 1e-5,
            tol: 1e-6,
            floor: 1e-3,
        };
        let report = finite_diff_check(f, &x, cfg).unwrap();
        assert!(report.passed, "d={d} out={out}: {}", report.max_rel_error);
    }
}
