//! Core building blocks for answering multiple-choice video questions with an
//! ensemble of vision-language-model "modes".
//!
//! Everything in this crate is pure: question sets and mode recipes, prompt
//! rendering, parsing of structured model output, the similarity-modulated
//! weighted vote and the reporting helpers built on top of it. Network access
//! and scheduling live in `modevote-runtime`.

pub mod answer;
pub mod ensemble;
pub mod evalkit;
pub mod mode;
pub mod parser;
pub mod predictions;
pub mod prompt;
pub mod question;

pub use answer::{Caption, ClipRange, OptionIndex, StructuredAnswer, NUM_OPTIONS};
pub use ensemble::{
    compute_similarity, compute_weight, effective_weight, select_modes, vote, EnsembleDecision,
    EnsembleError, EnsembleSpec, ModeWeight, SimilarityMatrix, TiePolicy,
};
pub use mode::{CotField, CotFieldSet, FocusVariant, ModeConfig, ModeError, Paradigm, PromptStyle, Sampling};
pub use parser::{parse_structured, repair_candidates, ParseError, ParseErrorKind};
pub use predictions::{Labels, PredictionSet};
pub use prompt::{
    build_output_schema, clip_plan, render_focus_prompt, render_prompt, Numbering,
    OutputSchemaSpec, PromptError, PromptTemplate, Stage, TemplateSet,
};
pub use question::{validate_question_set, Question, QuestionRecord, QuestionSet, ValidationError};
