//! Location inference from the sizes of encrypted location-based-service
//! sessions.
//!
//! An adversary who can only see per-session byte totals and timestamps
//! builds a labeled knowledge base by probing a grid of locations, then ranks
//! candidate positions for a target by comparing median session sizes over a
//! time window. The crate also ships a seeded synthetic traffic model that
//! stands in for live captures, and the evaluation harness used to measure
//! k-accuracy under varying window length, time misalignment and spatial
//! granularity.

pub mod attack;
pub mod cli;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod knowledge_base;
pub mod loc;
pub mod trace_model;

pub use attack::{select_candidates, CandidateSet};
pub use error::{Error, Result};
pub use ingest::SessionRecord;
pub use knowledge_base::{KnowledgeBase, TimeFrame, UserDataset};
pub use loc::LocId;
pub use trace_model::{calibrated_model, LocationGrid, TrafficModel};
