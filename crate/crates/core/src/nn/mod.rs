//! Dense-network substrate: tensors, a gradient tape, layers, losses,
//! optimizers and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, TensorRecord};
pub use layers::{dense_forward, gru_step, sigmoid, Activation, DenseLayer, GruCell, Mlp, Parameterized};
pub use loss::{cross_entropy, huber_loss, softmax};
pub use optim::{Optimizer, OptimizerKind};
pub use tape::{Binding, Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator used for every stochastic step in the crate.
pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream seed from `(seed, index)` (splitmix64
/// finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable hash of every parameter's bit pattern.
pub fn parameter_hash<M: Parameterized + ?Sized>(model: &M) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for t in model.parameters() {
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.values() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
