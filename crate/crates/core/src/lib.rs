//! Similarity search over tree-ensemble leaf predictions, with AVClass tag
//! enrichment and ranking used as retrieval ground truth.
//!
//! * [`model`]: shared domain types
//! * [`io`]: `.lsim`, `.meta.jsonl`, AVClass, `.cooc.csv` and JSON-lines formats
//! * [`simindex`]: leaf similarity and exact top-K search
//! * [`tagbank`]: co-occurrence statistics, enrichment, rank scores
//! * [`eval`]: label homogeneity, relevance@K, mAP and report statistics
//! * [`synth`]: seeded synthetic databanks

pub mod eval;
pub mod io;
pub mod model;
pub mod simindex;
pub mod synth;
pub mod tagbank;

pub use model::{
    CoocTable, EnrichedTags, Label, LeafMatrix, LeafRow, LeafVector, LeafWidth, QueryHit,
    SampleMeta, ScoredTagList, Sha256, Subset, Tag, TagKind, TagRanking,
};
pub use simindex::{leaf_similarity, oracle_top_k, SimIndex};
