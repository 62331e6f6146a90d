//! Contextual phrase biasing for autoregressive decoders.
//!
//! A small attention decoder scores every phrase of a biasing list against
//! encoder features. Phrases scoring no better than the empty phrase are
//! dropped, the survivors are compiled into partial-match tables, and beam
//! search adds a bonus for matched tokens on top of a base scorer, cancelling
//! the bonus of partial matches that die.
//!
//! ```
//! use ctxbias::{fusion, matcher, Phrase, Vocab};
//!
//! let vocab = Vocab::char_level("abc".chars()).unwrap();
//! let phrase = Phrase::new(&["ab"], &vocab).unwrap();
//! let tables = vec![matcher::build_table(&phrase).unwrap()];
//! let kept = fusion::filter_scores(&[-0.5, -3.0], -1.0, 0.0).unwrap();
//! assert_eq!(kept.kept, vec![0]);
//! assert!(matcher::recompute(&tables, phrase.match_tokens()).completed_total == 2);
//! ```

pub mod error;
pub mod evaluate;
pub mod fusion;
pub mod io;
pub mod matcher;
pub mod pipeline;
pub mod scorer;
pub mod synth;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use evaluate::{align, ErrorReport};
pub use fusion::{BaseScorer, BeamConfig, DecodeResult, FilterResult, Hypothesis};
pub use matcher::{MatchState, PartialMatchTable};
pub use scorer::{DecoderConfig, DecoderParams, ScoredPhrase};
pub use synth::{SynthConfig, SynthCorpus, ToyBaseScorer};
pub use trainer::{EpochLoss, TrainConfig};
pub use types::{
    EncoderFeatures, Phrase, PhraseLabel, TokenId, Utterance, Vocab, EOS, SEPARATOR, SOS,
};
