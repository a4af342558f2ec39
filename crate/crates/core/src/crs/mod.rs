//! The unified prompt-based CRS.
//!
//! One encoder/decoder backend serves understanding, elicitation and
//! generation through task prompts; recommendation is scored by a head over
//! trainable item embeddings and the encoded context.

pub mod backend;
pub mod head;
pub mod model;
pub mod oracle;
pub mod prompt;
pub mod tiny;
pub mod train;

pub use backend::{seq2seq_loss, DecodeConfig, DecodeStrategy, Seq2SeqBackend};
pub use head::{
    recommendation_loss, ItemEmbeddingTable, RecommendationHead, RecommendationScores, PROB_EPSILON,
};
pub use model::{seq_target, CrsOutput, CrsPrediction, CrsSettings, UnifiedCrs};
pub use oracle::{GoldEchoBackend, UniformBackend};
pub use prompt::{
    decode_prompt, make_task_prompt, parse_structured_output, render_frames, render_list,
    serialize_context, serialize_turns, special_token_list, split_segments, AssistMark,
    DecodedPrompt, DecodedTurn, PromptSequence, PromptVariant, SpecialToken, StructuredOutput,
    PROMPT_ELICIT, PROMPT_GENERATE, PROMPT_UNDERSTAND,
};
pub use tiny::{TinyConfig, TinySeq2Seq};
pub use train::{
    train_two_stage, RecExample, SeqExample, Stage, TrainingData, TrainingReport, TrainingSchedule,
};
