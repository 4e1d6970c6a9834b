//! Controllable positive-view construction for contrastive self-supervised
//! learning.
//!
//! - [`tensor`]: feature maps, PCA attention maps, similarity, aggregation.
//! - [`adaptive`]: foreground proportion, noise-level selection, embedding
//!   noising and generator requests.
//! - [`quality`]: pair-quality scores and batch loss reweighting.
//! - [`losses`]: InfoNCE, negative cosine, Sinkhorn-Knopp and KL.
//! - [`trainer`]: synthetic data and a small contrastive trainer used to
//!   check the mechanisms end to end.
//! - [`io`] and [`pipeline`]: tensor container, run configuration, tables and
//!   the command implementations behind the `genview` binary.

pub mod adaptive;
pub mod io;
pub mod losses;
pub mod pipeline;
pub mod quality;
pub mod seed;
pub mod tensor;
pub mod trainer;
