//! Shared inputs for the criterion benchmarks.

use ctmkit_core::corpus::{build_vocab, vectorize_all};
use ctmkit_core::synth::{SynthConfig, SynthCorpus};
use ctmkit_core::{BowVector, Matrix, Vocab};

pub struct Workload {
    pub vocab: Vocab,
    pub bows: Vec<BowVector>,
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
}

/// Planted-topic corpus with `docs` documents and its pivot embeddings.
pub fn workload(docs: usize) -> Workload {
    let c = SynthCorpus::generate(&SynthConfig {
        docs,
        ..SynthConfig::default()
    });
    let vocab = build_vocab(&c.pivot_docs, 5000, &Default::default()).expect("non-empty corpus");
    let bows = vectorize_all(&c.pivot_docs, &vocab);
    let emb = c.pivot_embeddings();
    let embeddings = Matrix::from_vec(
        emb.len(),
        emb.dim(),
        (0..emb.len()).flat_map(|i| emb.row(i).iter().map(|&x| x as f64)).collect(),
    )
    .expect("embedding shape");
    Workload {
        vocab,
        bows,
        embeddings,
        labels: c.dominant,
    }
}
