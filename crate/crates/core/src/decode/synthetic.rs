//! Hash-driven backend with a realistic vocabulary size, for timing runs.
//!
//! Each step draws pseudo-random logits for the whole vocabulary from a hash
//! of the context tail, applies a softmax and returns the top slice, which is
//! the per-step work a real backend does after its forward pass. Pieces
//! derived from the supplied topic words get a logit boost so they regularly
//! reach the head set and exercise the matcher.

use std::hash::{DefaultHasher, Hash, Hasher};

use super::{BackendCapability, BackendError, ModelBackend};
use crate::token_space::{Origin, TokenDistribution, TokenEntry, TokenId, TokenPiece};

const CONTEXT_TAIL: usize = 64;
const LOGIT_SCALE: f64 = 4.0;
const TOPIC_BOOST: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct SyntheticLM {
    vocab: Vec<TokenPiece>,
    boost: Vec<f64>,
    seed: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

impl SyntheticLM {
    /// `topic_words` contribute a whole-word piece plus a prefix/suffix
    /// split; the rest of the vocabulary is filler words.
    pub fn new(vocab_size: usize, seed: u64, topic_words: &[&str]) -> Self {
        let mut vocab = Vec::with_capacity(vocab_size);
        let mut boost = Vec::with_capacity(vocab_size);
        for w in topic_words {
            let chars: Vec<char> = w.chars().collect();
            let mid = chars.len() / 2;
            let head: String = chars[..mid].iter().collect();
            let tail: String = chars[mid..].iter().collect();
            for piece in [
                format!("\u{120}{}", capitalize(w)),
                format!("\u{120}{}", capitalize(&head)),
                tail,
            ] {
                if piece.chars().count() > 1 && !vocab.iter().any(|p: &TokenPiece| p.raw == piece) {
                    vocab.push(TokenPiece::new(piece));
                    boost.push(TOPIC_BOOST);
                }
            }
        }
        let target = vocab_size.max(vocab.len() + 1);
        let mut i = 0;
        while vocab.len() < target {
            vocab.push(TokenPiece::new(format!("\u{120}w{i}")));
            boost.push(0.0);
            i += 1;
        }
        Self { vocab, boost, seed }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn context_key(&self, context: &str) -> u64 {
        let bytes = context.as_bytes();
        let tail = &bytes[bytes.len().saturating_sub(CONTEXT_TAIL)..];
        let mut h = DefaultHasher::new();
        self.seed.hash(&mut h);
        bytes.len().hash(&mut h);
        tail.hash(&mut h);
        h.finish()
    }
}

impl ModelBackend for SyntheticLM {
    fn capability(&self) -> BackendCapability {
        BackendCapability {
            max_context: None,
            max_top_n: self.vocab.len(),
            normalized: true,
            vocab_size: Some(self.vocab.len()),
        }
    }

    fn step(&self, context: &str, top_n: usize) -> Result<TokenDistribution, BackendError> {
        let key = self.context_key(context);
        let mut logits: Vec<f64> = (0..self.vocab.len())
            .map(|i| {
                let u = (splitmix(key ^ (i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d)) >> 11) as f64
                    / (1u64 << 53) as f64;
                LOGIT_SCALE * u + self.boost[i]
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in &mut logits {
            *l = (*l - max).exp();
            total += *l;
        }
        let n = top_n.clamp(1, self.vocab.len());
        let mut order: Vec<usize> = (0..self.vocab.len()).collect();
        let by_prob = |a: &usize, b: &usize| logits[*b].total_cmp(&logits[*a]).then(a.cmp(b));
        if n < order.len() {
            order.select_nth_unstable_by(n - 1, by_prob);
            order.truncate(n);
        }
        order.sort_unstable_by(by_prob);
        let entries = order
            .into_iter()
            .map(|i| TokenEntry {
                token: TokenId(i as u32),
                piece: self.vocab[i].clone(),
                prob: logits[i] / total,
            })
            .collect();
        let origin = if n == self.vocab.len() {
            Origin::FullVocabulary
        } else {
            Origin::TopSlice
        };
        TokenDistribution::new(entries, origin).map_err(|e| BackendError::Invalid(e.to_string()))
    }
}
