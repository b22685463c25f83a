//! Unsupervised foreground/background segmentation of color images by
//! probabilistic matching on a superpixel graph.
//!
//! The pipeline over-segments the image into watershed superpixels, fits a
//! 3D Gaussian to each superpixel's CIELAB pixels, and models the foreground
//! and background regions with Gaussian mixtures. KL divergences between
//! those models are mapped through RBF kernels to per-superpixel assignment
//! probabilities (unary) and per-edge joint assignment probabilities
//! (pairwise). The tables are assembled into a sparse symmetric matrix over
//! the 2n label slots (foreground/background per superpixel) whose leading
//! eigenvector yields soft assignment marginals, either directly (`sgm`) or
//! inside an iterative Bayesian reweighting loop (`pgm`). Labels feed back
//! into model refits and kernel bandwidth refinement for a fixed number of
//! rounds, and independent reruns are combined by per-pixel majority vote.
//!
//! Modules:
//! - [`imageio`]: image decoding, sRGB to CIELAB conversion, trimap and
//!   bounding-box ingestion, mask encoding.
//! - [`superpixel`]: seeded marker-based watershed over-segmentation and the
//!   superpixel adjacency graph.
//! - [`colormodel`]: Gaussian and GMM color models and the KL divergences
//!   between them.
//! - [`probability`]: unary/pairwise assignment probabilities, bandwidth
//!   estimation, and assembly of the assignment matrix.
//! - [`inference`]: leading-eigenvector marginals (power iteration) and the
//!   probabilistic reweighting solver.
//! - [`pipeline`]: the full iterative segmentation loop and majority voting.
//! - [`eval`]: bounding-box error and overlap metrics plus a manifest-driven
//!   dataset harness.
//! - [`synth`]: synthetic scene generators used by tests and benchmarks.

pub mod colormodel;
mod error;
pub mod eval;
pub mod imageio;
pub mod inference;
pub mod pipeline;
pub mod probability;
pub mod superpixel;
pub mod synth;

pub use error::{Error, Result};

pub use colormodel::{GaussianModel, GmmModel};
pub use imageio::{BBox, LabImage, SegMask, TriMap, TrimapLabel};
pub use inference::{Label, MarginalTable};
pub use pipeline::{Mode, SegConfig, SegOutcome, Solver};
pub use probability::{AssignmentMatrix, Bandwidths, PairProbMatrix, UnaryTable};
