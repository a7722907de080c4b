//! Neural networks with a closed-form linear last layer, and numerical checks
//! of the theory behind them.

pub mod backbone;
pub mod data;
pub mod dfiv;
pub mod error;
pub mod harness;
pub mod head;
pub mod linalg;
pub mod losses;
pub mod optim;
pub mod record;
pub mod rng;
pub mod snapshot;
pub mod theory;

pub use backbone::{Activation, ForwardTape, MlpBackbone, ParamGrads, Parameterization};
pub use error::{Error, Result};
pub use head::{HeadState, InitPolicy, Regularization};
pub use linalg::Matrix;
pub use losses::LossReport;
pub use data::{BatchSampler, Dataset, Splits};
pub use optim::{EvalKind, Method, OptimizerKind, OptimizerState, TrainConfig, TrainOutcome};
pub use record::RunRecord;
