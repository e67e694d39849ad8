//! Procedural knowledge library engine.
//!
//! Notebooks and scripts are ingested into a document model, split into
//! semantically tagged and causally ordered units, versioned as unified-diff
//! patches, and exposed through reversible lenses and a small query language.

pub mod canonical;
pub mod classify;
pub mod clock;
pub mod fileset;
pub mod ingest;
pub mod lens;
pub mod patch;
pub mod query;
pub mod report;
pub mod store;

pub use fileset::FileSet;
