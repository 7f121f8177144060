//! Dense multi-dimensional real arrays with reverse-mode differentiation,
//! deterministic random streams, and the 3D volume container shared by the
//! rest of the workspace.
//!
//! The differentiation engine is a Wengert tape: forward ops append to a
//! linear record, `backward` replays it in reverse. Buffers are immutable
//! once written, so a tape can be replayed any number of times.

pub mod error;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod volume;

pub use error::TensorError;
pub use rng::{derive_seed, RngStream};
pub use tape::{BatchNormMode, Gradients, Mode, Tape, TensorRef};
pub use tensor::{Real, Tensor};
pub use volume::Volume;

pub type Result<T> = std::result::Result<T, TensorError>;
