pub mod conformance;
pub mod filter;
pub mod grammar;
pub mod jsonl;
pub mod lexicon;
pub mod metrics;
pub mod paraphrase;
pub mod parser;
pub mod pipeline;
pub mod protocol;
pub mod sampler;
pub mod serve;
pub mod sql;
pub mod text;
