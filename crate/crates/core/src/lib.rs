//! Knowledge-graph grounded chain-of-thought synthesis.
//!
//! The pipeline turns question/answer pairs into reasoning records:
//!
//! 1. extract medical entities from the question and the answer with an LLM,
//! 2. link each entity to a graph node (exact name, embedding similarity,
//!    or LLM selection among the nearest candidates),
//! 3. enumerate the shortest paths between every question node and answer
//!    node and let the LLM keep the most relevant ones,
//! 4. generate a chain of thought guided by those paths,
//! 5. keep the record only if the LLM recovers the gold answer from the chain
//!    of thought alone.

pub mod embed_index;
pub mod graph;
pub mod llm;
pub mod mapping;
pub mod paths;
pub mod pipeline;
