//! Dense n-d tensors with tape-based reverse-mode automatic
//! differentiation.
//!
//! The element type is `f64` by default so gradient checks can be held to
//! tight tolerances; build with `--features f32` for the faster 32-bit
//! mode (which the gradcheck CI suite does not cover).
//!
//! Tensors are immutable once created. Ops between tensors on the same
//! tape record backward closures; ops on plain tensors evaluate eagerly
//! with no recording. A tape is single-threaded; independent tapes can run
//! on independent threads.

mod error;
mod gradcheck;
mod io;
mod ops;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, GradcheckOpts, GradcheckReport};
pub use io::{load_tensor, read_tensor, save_tensor, write_tensor};
pub use ops::{concat, scaled_dot_attention, stack};
pub use tensor::{Elem, Tape, Tensor};
