//! Alternating architecture/weight optimization.

mod adam;
mod step;
mod driver;

pub use adam::Adam;
pub use driver::{search_loop, LogRow, SearchOutcome};
pub use step::{
    batch_loss_and_grads, first_order_arch_step, second_order_arch_step, weight_step,
    ArchStepReport,
};

use crate::error::Result;
use crate::nn::Fwd;
use crate::tensor::{Scalar, Var};

/// Optimizer settings used during the search phase (architecture side).
pub const ALPHA_LR: f64 = 3e-4;
pub const ALPHA_BETAS: (f64, f64) = (0.5, 0.999);
pub const ALPHA_WEIGHT_DECAY: f64 = 1e-3;

/// Optimizer settings for network weights (search and from-scratch training).
pub const WEIGHT_LR: f64 = 5e-4;
pub const WEIGHT_BETAS: (f64, f64) = (0.5, 0.999);
pub const WEIGHT_DECAY: f64 = 3e-4;

pub const ADAM_EPS: f64 = 1e-8;

/// Finite-difference scale for the implicit second-order term.
pub const FD_SCALE: f64 = 0.01;

/// Loss threshold beyond which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    First,
    Second,
}

impl Order {
    pub fn name(self) -> &'static str {
        match self {
            Order::First => "first",
            Order::Second => "second",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "first" => Some(Order::First),
            "second" => Some(Order::Second),
            _ => None,
        }
    }
}

/// Settings for one search run.
#[derive(Debug, Clone)]
pub struct SearchConfig {
    /// Inner learning rate of the virtual weight step; 0 behaves as
    /// first-order regardless of `order`.
    pub xi: f64,
    pub order: Order,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub fd_scale: f64,
    /// Discretization flag: drop the zero op at argmax time.
    pub exclude_zero: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            xi: WEIGHT_LR,
            order: Order::First,
            epochs: 3,
            batch_size: 4,
            seed: 0,
            fd_scale: FD_SCALE,
            exclude_zero: true,
        }
    }
}

/// A differentiable objective over a parameter store: the supernet tasks
/// (and the toy problems the optimizer is verified on) implement this.
pub trait SupernetTask<T: Scalar> {
    type Item;
    /// Builds the scalar loss for one item on the session's tape.
    fn loss(&self, f: &mut Fwd<T>, item: &Self::Item) -> Result<Var>;
}
