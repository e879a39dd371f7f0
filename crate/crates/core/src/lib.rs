//! 3D-context-enhanced region-based lesion detection on CT volumes.
//!
//! The pipeline stages are:
//!
//! 1. **tensor / tape** – dense NCHW tensors with a reverse-mode
//!    differentiation tape providing exactly the primitives the detector
//!    needs, each verifiable against finite differences.
//! 2. **ct** – CT preprocessing: HU windowing, in-plane and z resampling,
//!    border clipping, and slice grouping into M three-channel images.
//! 3. **det** – detection geometry: anchors, box coding, IoU/IoBB, NMS,
//!    RPN target assignment, proposal generation, ROI sampling, and
//!    position-sensitive ROI pooling.
//! 4. **model** – the fusion detector: shared backbone over M images,
//!    RPN on the central image, per-image thin feature maps concatenated
//!    into an S²DM-channel map, PSROI head, four-term joint loss, SGD
//!    training loop, and checkpointing.
//! 5. **eval** – detection scoring: greedy matching under IoU or IoBB,
//!    FROC curves, sensitivity at fixed FP rates, stratified reports.
//! 6. **synth** – synthetic sphere-vs-disk volumes where true lesions
//!    need 3D context to distinguish from single-slice confusers.

pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub mod ct;
pub mod det;
pub mod eval;
pub mod model;
pub mod synth;

pub use error::{Error, Result};
pub use tape::{Roi, Tape, TensorId};
pub use tensor::{Scalar, Tensor};
