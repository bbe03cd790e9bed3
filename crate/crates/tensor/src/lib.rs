//! Dense tensors with a reverse-mode tape.
//!
//! Values are flat little-endian-serializable buffers; `Graph` records ops
//! eagerly and replays them backwards to accumulate parameter gradients.
//! Everything is single-threaded and bit-deterministic for a fixed binary:
//! the only external kernel is `matrixmultiply`'s GEMM.

mod archive;
mod conv;
mod error;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use archive::{
    read_archive, read_archive_file, write_archive, write_archive_file, ArchiveEntry, Payload,
    ARCHIVE_VERSION,
};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Grads, ParamId, ParamStore};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
