//! Reverse-mode automatic differentiation over dense N-dimensional arrays.
//!
//! The engine records every primitive executed on a [`Tape`] and replays the
//! record in reverse to populate gradients. It carries exactly the primitives
//! a volumetric encoder/U-Net needs: 3D convolution, linear maps, group
//! normalization, dropout, nearest/strided resampling, batched matrix
//! products, softmax and the usual elementwise ops and reductions.
//!
//! ```
//! use flowct_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let w = tape.param(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let x = tape.constant(Tensor::from_vec(vec![3], vec![4.0, 5.0, 6.0]).unwrap());
//! let wx = tape.mul(w, x).unwrap();
//! let loss = tape.sum(wx).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap().data(), &[4.0, 5.0, 6.0]);
//! ```

mod attention;
mod conv;
mod error;
pub mod rng;
mod scalar;
mod tape;
mod tensor;

pub use attention::{attention_block, AttentionNorm, AttentionWeights};
pub use conv::conv3d_output_extent;
pub use error::{Result, TensorError};
pub use scalar::{DType, Scalar};
pub use tape::{DropoutKey, Tape, Var};
pub use tensor::Tensor;
