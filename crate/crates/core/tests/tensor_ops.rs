use manet::autograd::Graph;
use manet::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn eval1(x: Tensor<f32>, f: impl FnOnce(&mut Graph<f32>, manet::autograd::Var) -> manet::autograd::Var) -> Tensor<f32> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v);
    g.value(out).clone()
}

fn matmul(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(a, b).unwrap();
    g.value(c).clone()
}

#[test]
fn matmul_identity_zero_and_triple_loop() {
    let mut r = rng(1);
    let b = Tensor::<f32>::uniform([3, 3], -1.0, 1.0, &mut r);
    assert_eq!(matmul(&Tensor::eye(3), &b), b);
    let z = matmul(&Tensor::zeros([2, 4]), &Tensor::uniform([4, 5], -1.0, 1.0, &mut r));
    assert_eq!(z, Tensor::zeros([2, 5]));

    let a = Tensor::<f32>::uniform([3, 3], -1.0, 1.0, &mut r);
    let c = matmul(&a, &b);
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0f32;
            for k in 0..3 {
                s += a.at(&[i, k]) * b.at(&[k, j]);
            }
            assert!((c.at(&[i, j]) - s).abs() < 1e-5);
        }
    }
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([4, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

proptest! {
    #[test]
    fn matmul_is_linear_in_scale(alpha in -3.0f32..3.0, seed in 0u64..1000) {
        let mut r = rng(seed);
        let a = Tensor::<f32>::uniform([3, 4], -1.0, 1.0, &mut r);
        let b = Tensor::<f32>::uniform([4, 2], -1.0, 1.0, &mut r);
        let lhs = matmul(&a.map(|v| v * alpha), &b);
        let rhs = matmul(&a, &b).map(|v| v * alpha);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }
}

fn layer_norm(x: Tensor<f32>, gamma: Tensor<f32>, beta: Tensor<f32>) -> Tensor<f32> {
    let mut g = Graph::new();
    let (x, ga, be) = (g.constant(x), g.constant(gamma), g.constant(beta));
    let y = g.layer_norm(x, ga, be, 1e-6).unwrap();
    g.value(y).clone()
}

#[test]
fn layer_norm_cases() {
    let c = 8;
    let out = layer_norm(Tensor::full([1, c], 3.0), Tensor::ones([c]), Tensor::zeros([c]));
    assert!(out.data().iter().all(|&v| v == 0.0));

    let mut r = rng(2);
    let beta = Tensor::<f32>::uniform([c], -1.0, 1.0, &mut r);
    let out = layer_norm(Tensor::uniform([2, c], -1.0, 1.0, &mut r), Tensor::zeros([c]), beta.clone());
    for row in out.data().chunks(c) {
        assert_eq!(row, beta.data());
    }

    let x: Tensor<f32> = Tensor::uniform([1, 64], -5.0, 5.0, &mut r);
    let y = layer_norm(x, Tensor::ones([64]), Tensor::zeros([64]));
    let d: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
    let mean = d.iter().sum::<f64>() / 64.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
    assert!(mean.abs() < 1e-6, "mean {mean}");
    assert!((var - 1.0).abs() < 1e-3, "var {var}");

    let mut g = Graph::<f32>::new();
    let (x, ga, be) =
        (g.constant(Tensor::zeros([2, 4])), g.constant(Tensor::ones([3])), g.constant(Tensor::zeros([3])));
    assert!(g.layer_norm(x, ga, be, 1e-6).is_err());
}

#[test]
fn activations() {
    let x = Tensor::<f32>::new([3], vec![-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(eval1(x, |g, v| g.relu(v)).data(), &[0.0, 0.0, 2.0]);
    assert_eq!(eval1(Tensor::zeros([1]), |g, v| g.sigmoid(v)).data(), &[0.5]);
    let s = eval1(Tensor::full([1, 4], 7.0), |g, v| g.softmax(v, 1).unwrap());
    assert_eq!(s.data(), &[0.25; 4]);
    let s = eval1(Tensor::uniform([5, 7], -4.0, 4.0, &mut rng(3)), |g, v| g.softmax(v, 1).unwrap());
    for row in s.data().chunks(7) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

fn conv(x: &Tensor<f32>, w: &Tensor<f32>, stride: usize, pad: usize) -> manet::Result<Tensor<f32>> {
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, None, stride, pad)?;
    Ok(g.value(y).clone())
}

#[test]
fn conv2d_identity_counting_and_oracle() {
    let x = Tensor::<f32>::uniform([1, 5, 5], -1.0, 1.0, &mut rng(4));
    assert_eq!(conv(&x, &Tensor::ones([1, 1, 1, 1]), 1, 0).unwrap(), x);

    let y = conv(&Tensor::ones([1, 5, 5]), &Tensor::ones([1, 1, 3, 3]), 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 3, 3]);
    assert_eq!(y.at(&[0, 1, 1]), 9.0);

    let mut r = rng(5);
    let x = Tensor::<f32>::uniform([2, 6, 6], -1.0, 1.0, &mut r);
    let w = Tensor::<f32>::uniform([3, 2, 2, 2], -1.0, 1.0, &mut r);
    let y = conv(&x, &w, 2, 0).unwrap();
    assert_eq!(y.shape(), &[3, 3, 3]);
    for o in 0..3 {
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0f32;
                for c in 0..2 {
                    for a in 0..2 {
                        for b in 0..2 {
                            s += x.at(&[c, 2 * i + a, 2 * j + b]) * w.at(&[o, c, a, b]);
                        }
                    }
                }
                assert!((y.at(&[o, i, j]) - s).abs() < 1e-5);
            }
        }
    }
    assert!(conv(&Tensor::zeros([1, 5, 5]), &Tensor::ones([1, 1, 2, 2]), 2, 0).is_err());
}

fn deconv(x: &Tensor<f32>, w: &Tensor<f32>, up: usize) -> manet::Result<Tensor<f32>> {
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.deconv2d(xv, wv, None, up)?;
    Ok(g.value(y).clone())
}

#[test]
fn deconv_shapes_and_scatter_oracle() {
    let mut r = rng(6);
    assert_eq!(deconv(&Tensor::zeros([2, 8, 8]), &Tensor::zeros([2, 3, 2, 2]), 2).unwrap().shape(), &[3, 16, 16]);
    assert_eq!(deconv(&Tensor::zeros([2, 16, 16]), &Tensor::zeros([2, 3, 4, 4]), 4).unwrap().shape(), &[3, 64, 64]);
    assert!(deconv(&Tensor::zeros([2, 4, 4]), &Tensor::zeros([2, 3, 3, 3]), 3).is_err());

    // A single hot pixel stamps the kernel at its output block.
    let w = Tensor::<f32>::uniform([1, 2, 2, 2], -1.0, 1.0, &mut r);
    let mut x = Tensor::<f32>::zeros([1, 3, 3]);
    x.set(&[0, 0, 0], 1.0);
    let y = deconv(&x, &w, 2).unwrap();
    for o in 0..2 {
        for i in 0..6 {
            for j in 0..6 {
                let want = if i < 2 && j < 2 { w.at(&[0, o, i, j]) } else { 0.0 };
                assert_eq!(y.at(&[o, i, j]), want);
            }
        }
    }

    // Scatter-add oracle on random input.
    let x = Tensor::<f32>::uniform([2, 3, 3], -1.0, 1.0, &mut r);
    let w = Tensor::<f32>::uniform([2, 2, 4, 4], -1.0, 1.0, &mut r);
    let y = deconv(&x, &w, 4).unwrap();
    let mut want = Tensor::<f32>::zeros([2, 12, 12]);
    for ci in 0..2 {
        for i in 0..3 {
            for j in 0..3 {
                for co in 0..2 {
                    for a in 0..4 {
                        for b in 0..4 {
                            let v = want.at(&[co, 4 * i + a, 4 * j + b]) + x.at(&[ci, i, j]) * w.at(&[ci, co, a, b]);
                            want.set(&[co, 4 * i + a, 4 * j + b], v);
                        }
                    }
                }
            }
        }
    }
    assert!(y.max_abs_diff(&want) < 1e-5);
}

#[test]
fn global_avg_pool_cases() {
    let gap = |x: Tensor<f32>| eval1(x, |g, v| g.global_avg_pool(v).unwrap());
    assert_eq!(gap(Tensor::full([2, 3, 3], 1.5)).data(), &[1.5, 1.5]);
    assert_eq!(gap(Tensor::new([1, 1, 2], vec![1.0, 3.0]).unwrap()).data(), &[2.0]);
    let x = Tensor::<f32>::uniform([3, 4, 4], -1.0, 1.0, &mut rng(7));
    let y = gap(x.clone());
    for c in 0..3 {
        let s: f32 = x.data()[c * 16..(c + 1) * 16].iter().sum();
        assert!((y.data()[c] - s / 16.0).abs() < 1e-6);
    }
}

#[test]
fn frozen_leaf_gets_no_gradient() {
    use manet::param::{Component, ParamStore};
    let mut store = ParamStore::<f32>::new();
    let frozen = store.register("w", Tensor::ones([2, 2]), false, Component::Backbone).unwrap();
    let live = store.register("v", Tensor::ones([2, 2]), true, Component::Adapter).unwrap();
    let mut g = Graph::new();
    let (a, b) = (g.param(&store, frozen), g.param(&store, live));
    let c = g.matmul(a, b).unwrap();
    let loss = g.sum(c);
    g.backward(loss).unwrap();
    assert!(g.grad(a).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    assert!(g.grad(b).is_some());
    g.accumulate_param_grads(&mut store).unwrap();
    assert!(store.get(frozen).grad.is_none());
}

#[test]
fn forward_is_deterministic() {
    let x = Tensor::<f32>::uniform([4, 8], -1.0, 1.0, &mut rng(8));
    let run = || {
        eval1(x.clone(), |g, v| {
            let s = g.softmax(v, 1).unwrap();
            g.gelu(s)
        })
    };
    assert_eq!(run(), run());
}

#[test]
fn attention_rows_are_distributions() {
    let mut g = Graph::<f64>::new();
    let qkv = g.constant(Tensor::uniform([7, 24], -2.0, 2.0, &mut rng(5)));
    let out = g.attention(qkv, 2).unwrap();
    assert_eq!(g.shape(out), &[7, 8]);
    let w = g.attention_weights(out).unwrap();
    assert_eq!(w.len(), 2 * 7 * 7);
    for row in w.chunks(7) {
        assert!(row.iter().all(|&p| p > 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(g.attention(qkv, 5).is_err());
}
