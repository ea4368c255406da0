//! Hyperparameter search spaces for the classification baselines and for
//! BCQ. They are carried in the experiment config so a run records exactly
//! which grid it searched.

use serde::{Deserialize, Serialize};

use crate::nn::{Activation, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrGrid {
    #[serde(rename = "Inverse of regularization strength")]
    pub inverse_regularization: Vec<f64>,
}

impl Default for LrGrid {
    fn default() -> Self {
        Self { inverse_regularization: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpGrid {
    #[serde(rename = "Hidden layer size")]
    pub hidden: Vec<usize>,
    #[serde(rename = "Batch size")]
    pub batch_size: Vec<usize>,
    #[serde(rename = "Activation function")]
    pub activation: Vec<Activation>,
    #[serde(rename = "Optimizer")]
    pub optimizer: Vec<OptimizerKind>,
    #[serde(rename = "Learning rate")]
    pub learning_rate: Vec<f64>,
}

impl Default for MlpGrid {
    fn default() -> Self {
        Self {
            hidden: vec![16, 32, 64, 128, 256, 512],
            batch_size: vec![8, 16, 32, 64, 128, 256],
            activation: vec![Activation::Relu, Activation::Tanh, Activation::Sigmoid],
            optimizer: vec![OptimizerKind::Sgd, OptimizerKind::Adam],
            learning_rate: vec![1e-4, 1e-3, 1e-2, 1e-1],
        }
    }
}

impl MlpGrid {
    /// Every combination in lexicographic order
    /// (hidden, batch, activation, optimizer, learning rate).
    pub fn combinations(&self) -> Vec<MlpCandidate> {
        let mut out = Vec::new();
        for &hidden in &self.hidden {
            for &batch_size in &self.batch_size {
                for &activation in &self.activation {
                    for &optimizer in &self.optimizer {
                        for &learning_rate in &self.learning_rate {
                            out.push(MlpCandidate { hidden, batch_size, activation, optimizer, learning_rate });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpCandidate {
    pub hidden: usize,
    pub batch_size: usize,
    pub activation: Activation,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcqGrid {
    #[serde(rename = "Number of nodes per layer in Q-network")]
    pub hidden: Vec<usize>,
    #[serde(rename = "Batch size")]
    pub batch_size: Vec<usize>,
    #[serde(rename = "Optimizer")]
    pub optimizer: Vec<OptimizerKind>,
    #[serde(rename = "Discount factor")]
    pub gamma: Vec<f64>,
    #[serde(rename = "Target Q-network update frequency")]
    pub target_sync: Vec<usize>,
    #[serde(rename = "Learning rate")]
    pub learning_rate: Vec<f64>,
    #[serde(rename = "Threshold")]
    pub tau: Vec<f64>,
    #[serde(rename = "Huber loss")]
    pub kappa: Vec<f64>,
}

impl Default for BcqGrid {
    fn default() -> Self {
        Self {
            hidden: vec![32, 64, 128],
            batch_size: vec![8, 16, 32, 64, 128, 256, 512],
            optimizer: vec![OptimizerKind::Sgd, OptimizerKind::Adam],
            gamma: vec![0.97, 0.975, 0.98, 0.985, 0.99, 0.995],
            target_sync: vec![1000, 2000, 4000, 8000],
            learning_rate: vec![1e-6, 5e-6, 1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3],
            tau: vec![0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5],
            kappa: vec![0.8, 0.9, 1.0, 1.1, 1.2],
        }
    }
}

/// All grids together, as embedded in the experiment config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lr: LrGrid,
    pub mlp: MlpGrid,
    pub bcq: BcqGrid,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_grid_size() {
        assert_eq!(MlpGrid::default().combinations().len(), 6 * 6 * 3 * 2 * 4);
    }

    #[test]
    fn bcq_defaults_lie_on_the_grid() {
        let g = BcqGrid::default();
        let c = crate::bcq::BcqConfig::default();
        assert!(g.hidden.contains(&c.hidden));
        assert!(g.batch_size.contains(&c.batch_size));
        assert!(g.gamma.contains(&c.gamma));
        assert!(g.target_sync.contains(&c.target_sync));
        assert!(g.learning_rate.contains(&c.learning_rate));
        assert!(g.tau.contains(&c.tau));
        assert!(g.kappa.contains(&c.kappa));
    }

    #[test]
    fn json_uses_table_labels() {
        let json = serde_json::to_string(&SearchSpace::default()).unwrap();
        assert!(json.contains("\"Target Q-network update frequency\":[1000,2000,4000,8000]"));
        assert!(json.contains("\"Inverse of regularization strength\":[0.001,0.01,0.1,1.0,10.0,100.0,1000.0]"));
        assert!(json.contains("\"Batch size\":[8,16,32,64,128,256]"));
        let back: SearchSpace = serde_json::from_str(&json).unwrap();
        assert_eq!(back, SearchSpace::default());
    }
}
