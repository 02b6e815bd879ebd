//! Query-by-example speaker retrieval.
//!
//! A segment is reduced to MFCC frames, then indexed twice: as a histogram
//! over a shared k-means codebook, and as a mean and covariance. Queries are
//! pruned with a cheap histogram similarity and the survivors are reranked
//! with a second-order statistical measure.

pub mod codebook;
pub mod error;
pub mod eval;
pub mod features;
pub(crate) mod format;
pub mod linalg;
pub mod pipeline;
pub mod ranking;
pub mod stats;
pub mod synth;
pub mod vsm;
pub mod wav;

pub use codebook::{histogram, sample_frames, train_kmeans, Codebook, FrameSet, KMeansParams, SegmentHistogram};
pub use error::{Error, Result};
pub use eval::{evaluate, timing_report, EvalConfig, EvalReport};
pub use features::{extract_features, FeatureConfig, FrameMatrix, MfccExtractor};
pub use pipeline::{build_index, retrieve, Labels, Query, RetrievalIndex, RetrieveConfig};
pub use ranking::{Candidate, CandidateList, Orientation};
pub use stats::{segment_stats, SegmentStats, SoMetric};
pub use synth::{brute_force_retrieve, generate, SynthCorpus, SynthSpec};
pub use vsm::VsmMetric;
pub use wav::{load_wav, SampleBuffer};
