//! Bit-exact inference for binarized convolutional networks.
//!
//! Weights and activations restricted to ±1 are packed into 32-bit words
//! and multiplied with XNOR and popcount. The packed engine ([`engine`]) is
//! checked against a naive floating-point evaluation of the same network
//! ([`oracle`]) and timed against a full-precision implementation at the same
//! shapes ([`baseline`], [`bench`]).
//!
//! ```
//! use bcnn::{Engine, ReferenceConfig, preproc};
//!
//! let model = ReferenceConfig { height: 16, width: 16, ..Default::default() }
//!     .random_model(7)
//!     .unwrap();
//! let image = preproc::seeded_image(0, 0, model.input_shape());
//! let out = Engine::default().forward(&model, &image).unwrap();
//! assert_eq!(out.scores.len(), 4);
//! ```

pub mod baseline;
pub mod bench;
pub mod bitops;
pub mod engine;
pub mod error;
pub mod model;
pub mod oracle;
pub mod preproc;
pub mod tensor;

pub use bitops::{pack, unpack, xnor_dot, BinaryValue, PackedVector, Word, WORD_BITS};
pub use engine::{Engine, Inference};
pub use error::{Error, Result};
pub use model::{InputMode, Layer, ModelDescriptor, ReferenceConfig};
pub use preproc::Image;
pub use tensor::Shape3;
