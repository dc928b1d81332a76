//! Retrieval of prompts for zero-shot evaluation of a frozen language model:
//! task data, LM scoring, prompt labeling, a bi-encoder retriever, its
//! training, a MIPS index and the evaluation harness.

pub mod config;
pub mod encoder;
pub mod error;
pub mod evalharness;
pub mod index;
pub mod io;
pub mod labeling;
pub mod lmclient;
pub mod pipeline;
pub mod scoring;
pub mod synthetic;
pub mod taskdata;
pub mod text;
pub mod training;

pub use encoder::{EncoderParams, Vocab};
pub use error::{Error, Result};
pub use evalharness::{compare_runs, EvalConfig, EvalReport};
pub use index::{assemble_input, retrieve_topk, RetrievalIndex};
pub use labeling::{LabelOutcome, LabeledInstance, LabelingConfig};
pub use lmclient::{LanguageModel, LmError, TopicLm};
pub use scoring::PromptScore;
pub use taskdata::{PoolMode, PromptPool, PromptRecord, TaskExample, TaskSet, TaskSpec};
pub use training::{Checkpoint, TrainConfig};
