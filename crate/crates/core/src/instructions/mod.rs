//! Cooking-instruction generation from a title and ingredient names with a
//! small encoder-decoder text model.

mod format;
mod generate;
mod model;
mod tokenizer;

pub use format::{
    format_model_input, join_steps, parse_model_input, sanitize_field, split_into_steps, training_variants, FormatMode,
    InstructionInput,
};
pub use generate::{
    apply_repetition_penalty, beam_search, generate_ids, generate_instructions, generate_instructions_batch, greedy_decode,
    GeneratedRecipe, GenerationConfig, Seq2SeqBackbone,
};
pub use model::{
    finetune_instruction_model, record_input, training_pairs, InstructionEpochLog, InstructionModel, InstructionTrainConfig,
    Seq2SeqConfig, TrainedInstructionModel, CHECKPOINT_KIND,
};
pub use tokenizer::{split_words, WordTokenizer, BOS, EOS, UNK};
