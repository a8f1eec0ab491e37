use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsal_core::tensor::gradcheck::{check_gradients, weighted_sum};
use tsal_core::tensor::{Graph, SparseMatrix, Tensor, TensorError, Var};

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;
const CASES: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks stay outside ±h.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { v } else { -v }
    })
}

fn dims(rng: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

/// Runs `build` on random inputs for `CASES` seeds and checks gradients.
fn suite(name: &str, mut make: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>)) {
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 13);
        let (inputs, f) = make(&mut rng);
        let report = check_gradients(&inputs, H, |g, v| f(g, v)).unwrap();
        assert!(report.max_rel_err < TOL, "{name} seed {seed}: rel err {}", report.max_rel_err);
        assert!(report.checked > 0);
    }
}

fn reducer(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    rand_tensor(rng, &[n])
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let y = g.softmax(x);
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_fn(&[7, 13], |_| rng.random_range(-20.0..20.0)));
    let y = g.softmax(x);
    for row in g.value(y).data().chunks(13) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_fn(&[5, 64], |_| rng.random_range(-3.0..5.0)));
    let gamma = g.constant(Tensor::full(&[64], 1.0));
    let beta = g.constant(Tensor::zeros(&[64]));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    for row in g.value(y).data().chunks(64) {
        let m = row.iter().map(|&v| v as f64).sum::<f64>() / 64.0;
        let var = row.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 64.0;
        assert!(m.abs() < 1e-5, "mean {m}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
}

#[test]
fn identity_kernel_conv_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, h, w, c) = (2, 5, 6, 3);
    let mut g = Graph::<f32>::new();
    let xt = Tensor::from_fn(&[n, h, w, c], |_| rng.random_range(-1.0..1.0));
    let x = g.constant(xt.clone());
    // center tap = identity matrix over channels
    let wt = Tensor::from_fn(&[3, 3, c, c], |i| {
        let (tap, ci, co) = (i / (c * c), (i / c) % c, i % c);
        if tap == 4 && ci == co { 1.0 } else { 0.0 }
    });
    let wv = g.constant(wt);
    let b = g.constant(Tensor::zeros(&[c]));
    let y = g.conv2d(x, wv, b).unwrap();
    assert_eq!(g.value(y), &xt);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_tensor(&mut rng, &[2, 3]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    let mut g = Graph::<f64>::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    assert_eq!(g.shape(c), &[2, 4]);
    for i in 0..2 {
        for j in 0..4 {
            let mut s = 0.0;
            for k in 0..3 {
                s += a.at(&[i, k]) * b.at(&[k, j]);
            }
            assert!((g.value(c).at(&[i, j]) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] }
    );
    assert!(err.to_string().contains("matmul") && err.to_string().contains("[2, 3]"));
    let c = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.add(a, c).is_err());
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::<f32>::new();
    let a = g.param(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(a), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn sum_gradient_is_ones_and_sigmoid_quarter() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[4]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[1]));
    let y = g.sigmoid(x);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::from_fn(&[2, 8, 8, 16], |_| rng.random_range(-1.0..1.0)));
        let w = g.param(Tensor::from_fn(&[3, 3, 16, 32], |_| rng.random_range(-0.1..0.1)));
        let b = g.param(Tensor::zeros(&[32]));
        let y = g.conv2d(x, w, b).unwrap();
        let r = g.relu(y);
        let l = g.mean(r);
        g.backward(l).unwrap();
        (g.value(y).clone(), g.grad(w).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

// ---------------------------------------------------------------- gradients

#[test]
fn grad_add_mul_scale() {
    suite("add/mul/scale", |rng| {
        let s = dims(rng, 2, 1, 4);
        let r = reducer(rng, s.iter().product());
        let ins = vec![rand_tensor(rng, &s), rand_tensor(rng, &s)];
        (ins, Box::new(move |g, v| {
            let a = g.add(v[0], v[1])?;
            let m = g.mul(a, v[1])?;
            let y = g.scale(m, 0.7);
            weighted_sum(g, y, &r)
        }))
    });
}

#[test]
fn grad_add_bias_and_mul_rows() {
    suite("add_bias/mul_rows", |rng| {
        let s = dims(rng, 3, 1, 4);
        let r = reducer(rng, s.iter().product());
        let ins = vec![rand_tensor(rng, &s), rand_tensor(rng, &[s[2]]), rand_tensor(rng, &[s[0], s[1]])];
        (ins, Box::new(move |g, v| {
            let a = g.add_bias(v[0], v[1])?;
            let y = g.mul_rows(a, v[2])?;
            weighted_sum(g, y, &r)
        }))
    });
}

#[test]
fn grad_matmul() {
    suite("matmul", |rng| {
        let d = dims(rng, 3, 1, 5);
        let r = reducer(rng, d[0] * d[2]);
        let ins = vec![rand_tensor(rng, &[d[0], d[1]]), rand_tensor(rng, &[d[1], d[2]])];
        (ins, Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, &r)
        }))
    });
}

#[test]
fn grad_bmm_and_permute() {
    suite("bmm/permute", |rng| {
        let d = dims(rng, 4, 1, 4);
        let r = reducer(rng, d[0] * d[1] * d[3]);
        let ins = vec![rand_tensor(rng, &[d[0], d[1], d[2]]), rand_tensor(rng, &[d[0], d[3], d[2]])];
        (ins, Box::new(move |g, v| {
            let bt = g.permute(v[1], &[0, 2, 1])?;
            let y = g.bmm(v[0], bt)?;
            let y = g.permute(y, &[2, 0, 1])?;
            weighted_sum(g, y, &r)
        }))
    });
}

#[test]
fn grad_reshape_and_permute4() {
    suite("reshape/permute", |rng| {
        let d = dims(rng, 4, 1, 3);
        let n: usize = d.iter().product();
        let r = reducer(rng, n);
        let ins = vec![rand_tensor(rng, &d)];
        (ins, Box::new(move |g, v| {
            let p = g.permute(v[0], &[3, 1, 0, 2])?;
            let y = g.reshape(p, &[n])?;
            weighted_sum(g, y, &r)
        }))
    });
}

#[test]
fn grad_softmax() {
    suite("softmax", |rng| {
        let d = dims(rng, 2, 1, 6);
        let r = reducer(rng, d[0] * d[1]);
        let ins = vec![rand_tensor(rng, &d)];
        (ins, Box::new(move |g, v| {
            let y = g.softmax(v[0]);
            weighted_sum(g, y, &r)
        }))
    });
}

#[test]
fn grad_layer_norm() {
    suite("layer_norm", |rng| {
        let d = dims(rng, 2, 2, 6);
        let r = reducer(rng, d[0] * d[1]);
        let ins = vec![rand_tensor(rng, &d), rand_tensor(rng, &[d[1]]), rand_tensor(rng, &[d[1]])];
        (ins, Box::new(move |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, y, &r)
        }))
    });
}

#[test]
fn grad_relu_sigmoid() {
    suite("relu/sigmoid", |rng| {
        let d = dims(rng, 2, 1, 6);
        let r = reducer(rng, d[0] * d[1]);
        let ins = vec![rand_away_from_zero(rng, &d)];
        (ins, Box::new(move |g, v| {
            let a = g.relu(v[0]);
            let b = g.sigmoid(v[0]);
            let y = g.add(a, b)?;
            weighted_sum(g, y, &r)
        }))
    });
}

#[test]
fn grad_conv2d() {
    suite("conv2d", |rng| {
        let d = dims(rng, 5, 1, 4);
        let (n, h, w, ci, co) = (d[0].min(2), d[1], d[2], d[3], d[4]);
        let r = reducer(rng, n * h * w * co);
        let ins = vec![
            rand_tensor(rng, &[n, h, w, ci]),
            rand_tensor(rng, &[3, 3, ci, co]),
            rand_tensor(rng, &[co]),
        ];
        (ins, Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            weighted_sum(g, y, &r)
        }))
    });
}

#[test]
fn grad_avg_pool_and_upsample() {
    suite("avg_pool/upsample", |rng| {
        let d = dims(rng, 4, 1, 3);
        let k = rng.random_range(1..=3);
        let (n, h, w, c) = (d[0], d[1] * k, d[2] * k, d[3]);
        let (oh, ow) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let r = reducer(rng, n * oh * ow * c);
        let ins = vec![rand_tensor(rng, &[n, h, w, c])];
        (ins, Box::new(move |g, v| {
            let p = g.avg_pool2d(v[0], k)?;
            let y = g.upsample_bilinear(p, oh, ow)?;
            weighted_sum(g, y, &r)
        }))
    });
}

#[test]
fn grad_concat_and_embed() {
    suite("concat/embed", |rng| {
        let d = dims(rng, 4, 1, 4);
        let ids: Vec<usize> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..d[0])).collect();
        let r = reducer(rng, ids.len() * (d[1] + d[2]));
        let ins = vec![rand_tensor(rng, &[d[0], d[1]]), rand_tensor(rng, &[d[0], d[2]])];
        (ins, Box::new(move |g, v| {
            let c = g.concat(&[v[0], v[1]])?;
            let y = g.embed(c, &ids)?;
            weighted_sum(g, y, &r)
        }))
    });
}

#[test]
fn grad_sparse_linear_and_mean() {
    suite("sparse/mean", |rng| {
        let cols = rng.random_range(2..=12);
        let rows_n = rng.random_range(1..=8);
        let rows: Vec<Vec<(usize, f64)>> = (0..rows_n)
            .map(|_| (0..3).map(|_| (rng.random_range(0..cols), rng.random_range(-1.0..1.0))).collect())
            .collect();
        let m = Arc::new(SparseMatrix::from_rows(cols, rows));
        let r = reducer(rng, rows_n);
        let ins = vec![rand_tensor(rng, &[cols])];
        (ins, Box::new(move |g, v| {
            let y = g.sparse_linear(v[0], m.clone(), &[rows_n])?;
            let w = weighted_sum(g, y, &r)?;
            let m2 = g.mean(v[0]);
            let both = g.concat(&[w, m2])?;
            Ok(g.sum(both))
        }))
    });
}

#[test]
fn grad_kld_and_cc_losses() {
    suite("kld/cc", |rng| {
        let n = rng.random_range(2..=12);
        let target: Vec<f32> = (0..n).map(|i| if i == 0 { 1.0 } else { rng.random_range(0.0..1.0) }).collect();
        let ins = vec![Tensor::from_fn(&[n], |_| rng.random_range(0.1..1.0))];
        (ins, Box::new(move |g, v| {
            let k = g.kld_loss(v[0], &target)?;
            let c = g.cc_loss(v[0], &target)?;
            let both = g.concat(&[k, c])?;
            Ok(g.sum(both))
        }))
    });
}

#[test]
fn kld_loss_closed_forms() {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::full(&[4], 0.25));
    let l = g.kld_loss(p, &[1.0, 0.0, 0.0, 0.0]).unwrap();
    assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-5);
    let q = g.constant(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
    let l = g.kld_loss(q, &[0.1, 0.2, 0.3, 0.4]).unwrap();
    assert!(g.value(l).data()[0].abs() < 1e-5);
}
