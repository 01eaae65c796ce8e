//! Decoding-time entity biasing for in-context knowledge editing.
//!
//! At each decode step the next-token distribution is cut down to a head set
//! (probability and rank filters), head tokens are compared against entity
//! strings from the edited facts by character n-gram Jaccard similarity, and
//! their scores are nudged towards new-knowledge entities and away from the
//! model's original (parametric) answers.
//!
//! ```
//! use tokbias::biaser::{bias_step, BiasConfig};
//! use tokbias::knowledge::EntitySet;
//! use tokbias::token_space::{Origin, TokenDistribution, TokenEntry};
//!
//! let dist = TokenDistribution::new(
//!     vec![
//!         TokenEntry::new(1, "▁Stephen", 0.6),
//!         TokenEntry::new(2, "▁Richard", 0.3),
//!         TokenEntry::new(3, "▁the", 0.1),
//!     ],
//!     Origin::FullVocabulary,
//! )
//! .unwrap();
//! let entities = EntitySet::from_words(&["richard", "dawkins"], &["stephen", "king"]).unwrap();
//! let mut cfg = BiasConfig::default();
//! cfg.filter.k = 3;
//! let scores = bias_step(&dist, &entities, &cfg).unwrap();
//! assert_eq!(scores.argmax().unwrap().0, 2);
//! ```

pub mod biaser;
pub mod decode;
pub mod entity_match;
pub mod eval;
pub mod filter;
mod jsonl;
pub mod knowledge;
pub mod token_space;
