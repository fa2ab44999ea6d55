//! Row-wise kernel-density parameter selection for fine-tuned models.
//!
//! For every row of a fine-tuned matrix, the `k` entries whose values sit in
//! the densest part of the row's own Gaussian KDE keep their fine-tuned value;
//! every other entry is reset to the pre-trained value. The retained values
//! and their positions can be stored as a compact delta and injected back
//! into the pre-trained weights bit-exactly.
//!
//! Modules:
//! - [`tensor_store`]: KENW snapshot files
//! - [`kde`]: bandwidth, density and top-k ranking
//! - [`pruner`]: the reset rule over rows, matrices and snapshots
//! - [`delta`]: KEND delta files and injection
//! - [`viz`]: PGM views of the selection
//! - [`bench`]: toy classifier comparing KDE and random selection
//! - [`selftest`]: brute-force cross-check of the ranking

pub mod bench;
mod codec;
pub mod delta;
pub mod kde;
pub mod mask;
pub mod pruner;
pub mod selftest;
pub mod tensor_store;
pub mod viz;

pub use delta::{
    decode_delta, encode_delta, extract_delta, inject, load_delta, save_delta, DeltaContainer,
    DeltaEntry, DeltaError, DeltaSizes,
};
pub use kde::{bandwidth_scott, kde_density, select_top_k_row, Bandwidth, RowSelection};
pub use mask::{NamedMask, SelectionMask};
pub use pruner::{
    optimize_matrix, optimize_row, prune_snapshot, prune_snapshot_with, reset_stats, LayerRange,
    PruneConfig, PruneError, PruneOutcome, PruneStats, SelectionStrategy,
};
pub use tensor_store::{
    decode_snapshot, encode_snapshot, load_snapshot, load_snapshot_with_checksum, save_snapshot,
    snapshot_checksum, validate_pair, ModelSnapshot, PairReport, StoreError, WeightMatrix,
};
