//! Comparison watermark schemes: a DCT coefficient-pair watermark and a
//! learned encoder/decoder watermark with noise and fine-tuning variants.

mod ae;
mod dct;

pub use ae::{
    ae_finetune_on_edits, ae_train, ae_train_adversarial, ae_train_with, AeMeta, AeTrainOptions, AeWatermarkParams,
};
pub use dct::{bit_accuracy, bits_to_text, dct_embed, dct_extract, text_to_bits, DctWatermarkConfig};
