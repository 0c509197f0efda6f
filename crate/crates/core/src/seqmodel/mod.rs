//! Recurrent encoder and decoder over token sequences.

mod cell;
mod decode;
mod nets;
mod vocab;

pub use cell::{CellKind, RecurrentCell};
pub use decode::{beam_search, generate, DecodeMode, DecoderStepper, Hypothesis, StepModel};
pub use nets::{CaptionModel, DecoderNet, EncoderNet, HeadMix, ModelConfig, PosteriorNodes};
pub use vocab::{TokenSequence, Vocabulary, END, START, UNK};
