use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::BnUpdate;

/// Mode and stochastic state threaded through one forward pass.
pub struct Forward {
    pub train: bool,
    pub rng: ChaCha8Rng,
    /// Residual and attention dropout rate.
    pub dropout: f64,
    /// Rate of the time-shared dropout on the input embedding.
    pub input_dropout: f64,
    /// Normalization layers use their running statistics even in train mode.
    pub frozen_bn: bool,
    pub bn_updates: Vec<BnUpdate>,
}

impl Forward {
    pub fn eval() -> Self {
        Forward {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            dropout: 0.0,
            input_dropout: 0.0,
            frozen_bn: false,
            bn_updates: Vec::new(),
        }
    }

    pub fn train(rng: ChaCha8Rng, dropout: f64, input_dropout: f64) -> Self {
        Forward {
            train: true,
            rng,
            dropout,
            input_dropout,
            frozen_bn: false,
            bn_updates: Vec::new(),
        }
    }
}
