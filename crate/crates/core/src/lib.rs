//! Contextualized neural topic modeling toolkit.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`corpus`]: tokenization, frequency-capped vocabularies, bags of words and
//!   cross-lingually aligned document sets.
//! * [`embedstore`]: the `PTEB1` binary embedding format and binding of
//!   embedding rows to documents by ID.
//! * [`lda`]: collapsed Gibbs sampling LDA, topic-count sweeps and bootstrap
//!   topic labels.
//! * [`nnkernel`]: a small dense-network core with analytic backpropagation.
//! * [`ntm`]: ProdLDA, CTM and the topic-classification variant (TCCTM).
//! * [`eval`]: NPMI coherence and cross-lingual transfer metrics.
//! * [`pipeline`]: configuration-driven orchestration used by the CLI.
//! * [`synth`]: planted-topic synthetic corpora with multilingual embeddings.

pub mod corpus;
pub mod embedstore;
pub mod eval;
pub mod lda;
pub mod nnkernel;
pub mod ntm;
pub mod pipeline;
pub mod synth;

pub use corpus::{AlignedCorpus, BowVector, Document, Vocab};
pub use embedstore::{BoundAligned, BoundDataset, EmbeddingMatrix};
pub use eval::EvalReport;
pub use lda::{LdaModel, TopicLabels};
pub use nnkernel::{Matrix, RngStream};
pub use ntm::{InputMode, NtmConfig, NtmModel, PriorParams};

/// Version string recorded in run manifests.
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
