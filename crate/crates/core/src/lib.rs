//! Reinforced question value estimation for domain-adaptive extractive QA.
//!
//! A value estimator scores synthetic (context, question, answer) triples;
//! it is trained by REINFORCE with the QA reader's exact-match gain on a
//! small annotated set as reward, and its top-K% picks become the synthetic
//! finetuning data. Learners are pluggable; a deterministic toy backend and
//! a planted-noise sandbox make every algorithm runnable on a laptop.

pub mod corpus;
pub mod error;
pub mod filters;
pub mod learners;
pub mod metrics;
pub mod pipeline;
pub mod qve;
pub mod reinforce;
pub mod sandbox;
pub mod seed;
pub mod text;

pub use corpus::{AnswerSpan, Context, CorpusFormat, CorpusSplit, ExampleRef, Origin, QaExample, SplitKind};
pub use error::{Error, Result};
pub use learners::{Backend, LearnerCheckpoint, Prediction, QaReader, QgGenerator};
pub use metrics::{EvalResult, RewardMode};
pub use qve::{Encoder, QuestionValue, Qve, ValueHead};
