//! Ingredient set prediction: an attention decoder over image embeddings that
//! emits ingredients until EOS, trained on max-pooled step scores.

mod decoder;
mod losses;
mod model;

pub use self::decoder::{decode_sequence, DecodeMode, DecoderConfig, IngredientDecoder, StepLogitsMatrix, DECODER_BLOCKS};
pub use self::losses::{
    bce_with_logit, cardinality_loss, composite_loss, eos_loss, eos_targets, ingredient_loss, pool_step_logits,
    sample_losses, LossBreakdown, LossWeights,
};
pub use self::model::{
    graph_losses, predict_ingredients, train_ingredient_model, train_ingredient_model_with, EpochLog, GraphLosses,
    Feeding, IngredientModel, IngredientModelConfig, TrainConfig, TrainedIngredientModel, CHECKPOINT_KIND,
};
