//! Kernel and layer gradients against central finite differences over
//! randomly drawn shapes, in f64.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use efgd::backprop::{self, ExactTranspose};
use efgd::network::{LayerSpec, Network, NetworkConfig};
use efgd::tensor::{conv2d_forward, conv2d_input_grad, conv2d_output_size, conv2d_weight_grad};
use efgd::Tensor;

const H: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Max relative error of `grad` against central differences of `loss` at `x`.
fn check(x: &Tensor<f64>, grad: &Tensor<f64>, loss: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        let orig = x.data()[k];
        probe.data_mut()[k] = orig + H;
        let up = loss(&probe);
        probe.data_mut()[k] = orig - H;
        let down = loss(&probe);
        probe.data_mut()[k] = orig;
        worst = worst.max(rel_err(grad.data()[k], (up - down) / (2.0 * H)));
    }
    worst
}

fn weighted_sum(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn conv2d_gradients(
        n in 1usize..3, c in 1usize..4, oc in 1usize..4, hw in 3usize..8,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        prop_assume!(k <= hw + 2 * pad);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, c, hw, hw], &mut rng);
        let w = random(&[oc, c, k, k], &mut rng);
        let o = conv2d_output_size(hw, k, stride, pad).unwrap();
        let g = random(&[n, oc, o, o], &mut rng);

        let dx = conv2d_input_grad(&g, &w, x.shape(), stride, pad).unwrap();
        let dw = conv2d_weight_grad(&x, &g, k, stride, pad).unwrap();
        let ex = check(&x, &dx, |x| weighted_sum(&conv2d_forward(x, &w, stride, pad).unwrap(), &g));
        let ew = check(&w, &dw, |w| weighted_sum(&conv2d_forward(&x, w, stride, pad).unwrap(), &g));
        prop_assert!(ex <= 1e-5, "input grad rel err {ex:e}");
        prop_assert!(ew <= 1e-5, "kernel grad rel err {ew:e}");
    }

    #[test]
    fn matmul_gradients(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let g = random(&[m, n], &mut rng);
        let da = g.matmul(&b.transpose().unwrap()).unwrap();
        let db = a.transpose().unwrap().matmul(&g).unwrap();
        prop_assert!(check(&a, &da, |a| weighted_sum(&a.matmul(&b).unwrap(), &g)) <= 1e-5);
        prop_assert!(check(&b, &db, |b| weighted_sum(&a.matmul(b).unwrap(), &g)) <= 1e-5);
    }
}

/// A random conv/BN/pool/linear stack for one seed.
fn random_network(seed: u64) -> (NetworkConfig, usize) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..3);
    let hw = rng.random_range(5..9);
    let mut layers = vec![LayerSpec::Conv2d {
        out_channels: rng.random_range(1..4),
        kernel: rng.random_range(1..4),
        stride: rng.random_range(1..3),
        pad: rng.random_range(0..2),
        bias: rng.random_bool(0.5),
    }];
    if rng.random_bool(0.5) {
        layers.push(LayerSpec::BatchNorm { momentum: 0.1, eps: 1e-5 });
    }
    layers.push(LayerSpec::Relu {});
    if rng.random_bool(0.5) {
        layers.push(LayerSpec::MaxPool2d { kernel: 2, stride: None });
    }
    if rng.random_bool(0.5) {
        layers.push(LayerSpec::Linear { out_features: rng.random_range(2..6), bias: true });
        layers.push(LayerSpec::Relu {});
    }
    let classes = rng.random_range(2..5);
    layers.push(LayerSpec::Linear { out_features: classes, bias: rng.random_bool(0.5) });
    layers.push(if rng.random_bool(0.8) { LayerSpec::SoftmaxCrossEntropy {} } else { LayerSpec::MseOutput {} });
    (NetworkConfig { input: vec![c, hw, hw], layers }, classes)
}

/// Every parameter of 20 random networks. Uses a fourth-order stencil:
/// batch-normalized conv biases have true gradient zero, where a two-point
/// difference is all rounding noise.
#[test]
fn random_networks_match_finite_differences() {
    for seed in 0..20u64 {
        let (cfg, classes) = random_network(seed);
        let mut net = Network::<f64>::build(&cfg, seed).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 100);
        let batch = rng.random_range(2..5);
        let mut shape = vec![batch];
        shape.extend_from_slice(&cfg.input);
        let x = random(&shape, &mut rng);
        let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();

        let out = net.forward_train(&x, &labels).unwrap();
        let pass = backprop::backward(&net, &out.trace, &ExactTranspose, None).unwrap();
        let grads = backprop::parameter_grads(&net, &out.trace, &pass).unwrap();
        let mut worst = 0.0f64;
        for (li, layer_grads) in grads.iter().enumerate() {
            for (pi, grad) in layer_grads.iter().enumerate() {
                for k in 0..grad.len() {
                    let orig = net.layers[li].params[pi].value.data()[k];
                    let mut at = |v: f64| {
                        net.layers[li].params[pi].value.data_mut()[k] = v;
                        net.forward_train(&x, &labels).unwrap().loss
                    };
                    let numeric = (-at(orig + 2.0 * H) + 8.0 * at(orig + H) - 8.0 * at(orig - H) + at(orig - 2.0 * H))
                        / (12.0 * H);
                    net.layers[li].params[pi].value.data_mut()[k] = orig;
                    worst = worst.max(rel_err(grad.data()[k], numeric));
                }
            }
        }
        assert!(worst <= 1e-5, "seed {seed}: {:?} rel err {worst:e}", cfg.layers);
    }
}
