//! Shared test utilities: central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use staa_core::autodiff::{NodeId, Tape};
use staa_core::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Largest relative gradient error of `build` over its inputs.
///
/// `build` constructs the computation from leaf nodes (one per input
/// tensor) and returns any output node. The harness contracts the output
/// with a fixed random weighting to a scalar, computes tape gradients,
/// and compares each one against a central finite difference.
pub fn gradcheck_max_err(
    inputs: &[Tensor<f64>],
    seed: u64,
    build: &dyn Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
) -> f64 {
    // Fixed contraction weights, shared by every evaluation.
    let (out_shape, weights) = {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &leaves);
        let shape = tape.value(out).shape().to_vec();
        let mut wrng = rng(seed ^ 0x5eed);
        let w: Vec<f64> = (0..tape.value(out).numel())
            .map(|_| wrng.gen_range(0.1..1.0))
            .collect();
        (shape, w)
    };

    let eval = |tensors: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &leaves);
        let wnode = tape.constant(Tensor::new(out_shape.clone(), weights.clone()).unwrap());
        let prod = tape.mul(out, wnode).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss).unwrap();
        let leaf_grads: Vec<Tensor<f64>> = leaves
            .iter()
            .map(|&l| grads.get(l).unwrap().clone())
            .collect();
        (value, leaf_grads)
    };

    let (_, analytic) = eval(inputs);

    let mut max_err: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        for elem in 0..input.numel() {
            let perturbed = |delta: f64| -> f64 {
                let mut data = input.data().to_vec();
                data[elem] += delta;
                let mut shifted: Vec<Tensor<f64>> = inputs.to_vec();
                shifted[which] = Tensor::new(input.shape().to_vec(), data).unwrap();
                eval(&shifted).0
            };
            let x = input.data()[elem];
            let h = 1e-5 * x.abs().max(1.0);
            let numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            let a = analytic[which].data()[elem];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_err = max_err.max(err);
        }
    }
    max_err
}

/// Asserts the finite-difference check passes at the given tolerance.
pub fn assert_gradcheck(
    name: &str,
    inputs: &[Tensor<f64>],
    seed: u64,
    tol: f64,
    build: &dyn Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
) {
    let err = gradcheck_max_err(inputs, seed, build);
    assert!(err < tol, "{name}: finite-difference error {err} >= {tol} (seed {seed})");
}
