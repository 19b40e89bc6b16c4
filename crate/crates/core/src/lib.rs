pub mod audio;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod features;
pub mod loss;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod scoring;
pub mod synth;
pub mod toy;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/training-data.md")]
    struct TrainingData;
    #[doc = include_str!("../../../book/src/extractor.md")]
    struct Extractor;
    #[doc = include_str!("../../../book/src/diarisation.md")]
    struct Diarisation;
    #[doc = include_str!("../../../book/src/scoring.md")]
    struct Scoring;
}
