//! Round-based simulator for federated multi-label learning in which every
//! client holds the instances of exactly one class and never sees a negative
//! example.
//!
//! The crate covers the full loop: sparse multi-label datasets are sharded by
//! label onto clients, clients run local SGD on a positives-only hinge loss,
//! and the server aggregates model parameters, merges class embeddings, and
//! (depending on the algorithm) applies a geometric regularizer that keeps the
//! class embedding matrix from collapsing onto a single direction — the
//! characteristic failure mode of this setting.
//!
//! Five algorithms are wired up end to end, selected by
//! [`federation::Algorithm`]:
//!
//! * `fedavg` / `fedavg-fixed` — plain federated averaging, with the class
//!   embeddings either trained by clients or frozen at initialization;
//! * `fedaws` — averaging plus a server-side spreadout step that pushes all
//!   class embeddings apart;
//! * `fedalc` / `fedalc-fixed` — averaging plus a correlation-weighted
//!   repulsion whose pair weights are estimated from hashed label-set
//!   messages, so that frequently co-occurring classes are not forced apart;
//!   the `-fixed` variant pretrains the class embeddings from label sets
//!   alone and freezes them.
//!
//! Everything is deterministic for a fixed seed: a given config reproduces
//! its metrics CSV byte for byte, regardless of worker-thread count.
//!
//! The `examples/` directory is the guided tour; the `fedlabel` binary wraps
//! the same entry points behind `prepare` / `run` / `verify` subcommands.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod labelsets;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod oracles;

pub use error::{Error, Result};
