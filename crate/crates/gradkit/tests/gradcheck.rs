//! Central finite-difference checks of every backward rule, in f64.

use gradkit::fdcheck::{max_rel_err, primitive_suite, Build};
use gradkit::{GradError, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn assert_grad(name: &str, inputs: Vec<Tensor<f64>>, f: &Build, tol: f64) {
    let err = max_rel_err(&inputs, f, H).unwrap();
    assert!(err <= tol, "{name}: max rel err {err:e} > {tol:e}");
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let report = primitive_suite(&mut || rng.random_range(-1.0..1.0)).unwrap();
    assert!(report.len() >= 30);
    for (name, err) in report {
        assert!(err <= PRIMITIVE_TOL, "{name}: max rel err {err:e}");
    }
}

#[test]
fn conv_relu_linear_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![
        random(&mut rng, &[2, 1, 5, 5]),
        random(&mut rng, &[3, 1, 3, 3]),
        random(&mut rng, &[3]),
        random(&mut rng, &[4, 3, 3, 3]),
        random(&mut rng, &[4]),
        random(&mut rng, &[4, 2]),
        random(&mut rng, &[2]),
    ];
    let net: Box<Build> = Box::new(|_, v| {
        let h = v[0].conv2d(v[1], Some(v[2]), 1)?.relu()?;
        let h = h.conv2d(v[3], Some(v[4]), 1)?.relu()?;
        h.permute(&[0, 2, 3, 1])?.linear(v[5], Some(v[6]))
    });
    assert_grad("conv-relu-linear", inputs, net.as_ref(), PRIMITIVE_TOL);
}

#[test]
fn scaled_dot_product_attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![
        random(&mut rng, &[1, 6, 4]),
        random(&mut rng, &[1, 6, 4]),
        random(&mut rng, &[4, 3]),
        random(&mut rng, &[4, 3]),
        random(&mut rng, &[4, 3]),
        random(&mut rng, &[3, 4]),
        Tensor::full(&[4], 1.0),
        Tensor::zeros(&[4]),
    ];
    let attn: Box<Build> = Box::new(|_, v| {
        let q = v[0].linear(v[2], None)?;
        let k = v[1].linear(v[3], None)?;
        let val = v[1].linear(v[4], None)?;
        let scores = q.matmul(k.transpose_last()?)?.mul_scalar(1.0 / 3f64.sqrt())?;
        let out = scores.softmax()?.matmul(val)?.linear(v[5], None)?;
        v[0].add(out)?.layer_norm(v[6], v[7])
    });
    assert_grad("attention", inputs, attn.as_ref(), PRIMITIVE_TOL);
}

#[test]
fn sum_of_squares_gradient_is_twice_input() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_vec(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap());
    g.backward(x.sqr().unwrap().sum().unwrap()).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, -2.0, 4.0, 0.0]);
}

#[test]
fn mean_gradient_is_one_over_n() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[2, 5], 3.0));
    g.backward(x.mean().unwrap()).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.1));
}

#[test]
fn repeated_backward_accumulates() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_vec(vec![2], vec![1.0, 3.0]).unwrap());
    let loss = x.sqr().unwrap().sum().unwrap();
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 12.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[3]));
    assert_eq!(g.backward(x), Err(GradError::NotScalar(vec![3])));
}

#[test]
fn non_finite_values_trip_an_error() {
    let g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[2]));
    assert_eq!(x.reciprocal().unwrap_err(), GradError::NonFinite { op: "reciprocal" });
    let big = g.constant(Tensor::full(&[1], 100.0));
    assert!(big.exp().is_err());
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[2], 1.0));
    let c = g.constant(Tensor::full(&[2], 2.0));
    let loss = x.mul(c).unwrap().sum().unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[2, 4, 8, 8], |_| rng.random_range(-1.0..1.0)));
        let w = g.constant(Tensor::from_fn(&[6, 4, 3, 3], |_| rng.random_range(-1.0..1.0)));
        let y = x.conv2d(w, None, 1).unwrap().gelu().unwrap();
        let t = y.reshape(&[2, 6, 64]).unwrap();
        let s = t.matmul(t.transpose_last().unwrap()).unwrap().softmax().unwrap();
        s.value().data().to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn permute_then_inverse_is_identity(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4) {
            let g = Graph::<f64>::new();
            let t = Tensor::from_fn(&[d0, d1, d2], |i| i as f64);
            let x = g.constant(t.clone());
            let y = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
            prop_assert_eq!(&*y.value(), &t);
        }

        #[test]
        fn broadcast_add_matches_explicit_expansion(rows in 1usize..5, cols in 1usize..5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, &[rows, cols]);
            let b = random(&mut rng, &[1, cols]);
            let g = Graph::<f64>::new();
            let y = g.constant(a.clone()).add(g.constant(b.clone())).unwrap().value();
            for r in 0..rows {
                for c in 0..cols {
                    prop_assert_eq!(y.data()[r * cols + c], a.data()[r * cols + c] + b.data()[c]);
                }
            }
        }
    }
}
