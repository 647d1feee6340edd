//! Two-stage majority-vote labeling of perturbed images.
//!
//! Judges first say whether the unperturbed image shows its label. Those who
//! keep it then vote on the perturbed image. Votes go to an append-only JSONL
//! log which can be replayed to rebuild the store.

pub mod api;
pub mod error;
pub mod store;
pub mod vote;

pub use api::{router, serve, SharedStore};
pub use error::{LabelError, Result};
pub use store::{Ack, ImageItem, LabelStore, StoreConfig, Task};
pub use vote::{decide, Choice, Disposition, Stage, Tally, VoteRecord, DEFAULT_PANEL_SIZE};
