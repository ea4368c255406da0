//! Same seed, same data: the whole parameter trajectory over 1000 optimizer
//! steps is bitwise identical.

use bcqforge_core::nn::{parameter_hash, rng_from_seed, Activation, Mlp, Optimizer, OptimizerKind, Parameterized, Tape, Tensor};
use rand::Rng;

fn trajectory(kind: OptimizerKind, seed: u64) -> Vec<String> {
    let mut rng = rng_from_seed(seed);
    let mut net = Mlp::new(&mut rng, &[5, 16, 3], Activation::Tanh, Activation::Identity);
    let mut opt = Optimizer::new(kind, 1e-2).unwrap();
    let mut hashes = Vec::with_capacity(1000);
    for _ in 0..1000 {
        let x = Tensor::matrix(8, 5, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
        let mut tape = Tape::new();
        let binding = tape.bind(&net);
        let xv = tape.leaf(x);
        let logits = net.forward_tape(&mut tape, binding.vars(), xv).unwrap();
        let loss = tape.cross_entropy(logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap().collect(&binding);
        opt.step(net.parameters_mut(), &grads).unwrap();
        hashes.push(parameter_hash(&net));
    }
    hashes
}

#[test]
fn adam_and_sgd_trajectories_are_bitwise_reproducible() {
    for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let a = trajectory(kind, 17);
        let b = trajectory(kind, 17);
        assert_eq!(a.len(), 1000);
        assert_eq!(a, b, "{kind:?}");
        assert_ne!(a, trajectory(kind, 18), "{kind:?}: seed has no effect");
    }
}
