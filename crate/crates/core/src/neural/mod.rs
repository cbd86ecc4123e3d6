//! Minimal dense neural-network toolkit: autodiff tape, layers and
//! gradient checking.

pub mod gradcheck;
pub mod layers;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{cpe_table, init_uniform, AttentionLayer, GruCell, Linear, Mlp, Norm};
pub use tape::{Grads, Matrix, ParamId, ParamSet, Tape, Var};
