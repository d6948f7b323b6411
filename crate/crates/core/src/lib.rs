//! Learned sparse lexicon retrieval: vocabulary-space representations,
//! lexicon-bottlenecked and contrastive training objectives with verified
//! analytic gradients, momentum machinery, and a quantized term-based
//! inverted index searched by exact lexicon matching, plus the evaluation
//! harness that measures recall, throughput and storage.
//!
//! Modules map onto the pipeline stages:
//!
//! * [`sparse_repr`]: logits to sparse lexicon vectors, importance
//!   distributions and bottleneck vectors; the LLGT logit file format.
//! * [`objectives`]: masking and the four training losses with analytic
//!   gradients.
//! * [`gradcheck`]: finite-difference verification of those gradients.
//! * [`momentum`]: EMA parameter tracking and FIFO negative queues.
//! * [`trainer`]: desk-scale two-phase training over synthetic pairs;
//!   checkpoints and metrics traces.
//! * [`lexindex`]: impact quantization, the inverted index, exact
//!   lexicon-matching search and its full-scan oracle; the LXIX file
//!   format.
//! * [`evalbench`]: recall at k, the QPS benchmark and canonical reports.

pub mod error;
pub mod evalbench;
pub mod gradcheck;
pub mod lexindex;
pub mod logging;
pub mod matrix;
pub mod momentum;
pub mod objectives;
pub mod selfcheck;
pub mod sparse_repr;
pub mod trainer;

pub use error::{Error, Result};
