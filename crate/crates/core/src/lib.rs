//! Symbolic-music pipeline toolkit.
//!
//! The data path runs from Standard MIDI Files ([`midi`]) through OctupleMIDI
//! tokens ([`octuple`]), bar-aligned clips ([`segment`]), musical features
//! ([`features`]) and ABC notation ([`abc`]) to annotation records and
//! instruction-tuning data ([`annotate`]). [`align`] trains a prefix
//! projection from a frozen music encoder into a frozen decoder LM with
//! LoRA adapters, and [`metrics`] scores generated text.

pub mod abc;
pub mod align;
pub mod annotate;
pub mod experiment;
pub mod features;
pub mod io;
pub mod metrics;
pub mod midi;
pub mod octuple;
pub mod segment;
pub mod synth;

pub use midi::{parse_smf, MidiError, MidiPiece, NoteEvent, Timeline};
pub use octuple::{OctupleToken, QuantConfig};
