//! Desk-scale laboratory for ranking-based GUI action critics.
//!
//! A seeded synthetic affordance world generates pages of candidate actions
//! with a four-level functional taxonomy. A small Siamese encoder is trained
//! under interchangeable objectives (contrastive, binary cross-entropy,
//! pairwise hinge, listwise) and evaluated with a ranking metric suite plus a
//! best-of-N action-selection simulator.

pub mod checks;
pub mod domain;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod sim;
pub mod synthworld;
pub mod trainer;
