//! Distilling a small query encoder into the embedding space of a frozen
//! retrieval teacher, plus the evaluation, data and benchmarking tooling
//! around it.

pub mod augment;
pub mod bench;
mod binio;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod optim;
pub mod schedule;
pub mod teacher;
pub mod trainer;

pub use embedding::{cosine, dot, l2_normalize, Embedding, Matrix, MultiVector};
pub use encoder::{EncoderConfig, StudentEncoder, StudentParams};
pub use error::{Error, Result};
pub use losses::{combined_loss, LossConfig, Objective};
pub use teacher::{generate_synthetic_teacher, SyntheticTeacherSpec, TeacherCache};
