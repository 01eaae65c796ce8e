//! HTTP client for a next-token inference server.
//!
//! One POST per step. Request body:
//! `{"context": <string | [token ids]>, "top_n": <int>}`.
//! Response body:
//! `{"vocab_size": <int>, "normalized": <bool>, "tokens": [{"id", "piece", "prob"}]}`.
//! See `docs/protocol.md` for the full contract.

use std::time::Duration;

use log::warn;
use reqwest::blocking::Client;
use reqwest::header::CONTENT_TYPE;
use serde::{Deserialize, Serialize};

use super::{BackendCapability, BackendError, ModelBackend};
use crate::token_space::{Origin, PieceNormalizer, TokenDistribution, TokenEntry, TokenId, TokenPiece};

const NORMALIZED_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireContext {
    Text(String),
    Tokens(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub context: WireContext,
    pub top_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireToken {
    pub id: u32,
    pub piece: String,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub vocab_size: usize,
    pub normalized: bool,
    pub tokens: Vec<WireToken>,
}

/// What to do with a response flagged `normalized: false`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RenormalizePolicy {
    #[default]
    Refuse,
    /// Rescale the returned slice to sum to one (logged).
    Local,
}

/// Checks a wire response against the protocol and turns it into a
/// distribution. Unsorted rows are accepted and re-sorted with a warning.
pub fn validate_response(
    resp: WireResponse,
    top_n: usize,
    policy: RenormalizePolicy,
    normalizer: &PieceNormalizer,
) -> Result<TokenDistribution, BackendError> {
    let proto = |msg: String| Err(BackendError::Protocol(msg));
    if resp.tokens.is_empty() {
        return proto("empty token list".into());
    }
    let mut seen = std::collections::HashSet::with_capacity(resp.tokens.len());
    for t in &resp.tokens {
        if !t.prob.is_finite() || t.prob < 0.0 {
            return proto(format!("token {} has invalid probability {}", t.id, t.prob));
        }
        if t.id as usize >= resp.vocab_size {
            return proto(format!("token id {} outside vocabulary of {}", t.id, resp.vocab_size));
        }
        if !seen.insert(t.id) {
            return proto(format!("duplicate token id {}", t.id));
        }
    }
    let required = top_n.min(resp.vocab_size);
    if resp.tokens.len() < required {
        return proto(format!(
            "response has {} tokens, expected at least {required}",
            resp.tokens.len()
        ));
    }

    let mut tokens = resp.tokens;
    if tokens.windows(2).any(|w| w[0].prob < w[1].prob) {
        warn!("backend returned unsorted tokens; sorting locally");
        tokens.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.id.cmp(&b.id)));
    }
    let total: f64 = tokens.iter().map(|t| t.prob).sum();
    let scale = if resp.normalized {
        if total > 1.0 + NORMALIZED_EPS {
            return proto(format!("normalized response sums to {total}"));
        }
        1.0
    } else {
        match policy {
            RenormalizePolicy::Refuse => return Err(BackendError::NotNormalized),
            RenormalizePolicy::Local if total > 0.0 => {
                warn!("renormalizing unnormalized backend slice (sum {total})");
                1.0 / total
            }
            RenormalizePolicy::Local => return proto("unnormalized response has zero mass".into()),
        }
    };
    tokens.truncate(top_n.max(1));

    let entries: Vec<TokenEntry> = tokens
        .into_iter()
        .map(|t| TokenEntry {
            token: TokenId(t.id),
            piece: TokenPiece::with_normalizer(t.piece, normalizer),
            prob: t.prob * scale,
        })
        .collect();
    let coverage: f64 = entries.iter().map(|e| e.prob).sum();
    let origin = if entries.len() == resp.vocab_size && (coverage - 1.0).abs() <= NORMALIZED_EPS {
        Origin::FullVocabulary
    } else {
        Origin::TopSlice
    };
    TokenDistribution::new(entries, origin).map_err(|e| BackendError::Protocol(e.to_string()))
}

/// Blocking client for one inference endpoint. Safe to share across
/// threads; requests are independent.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    endpoint: String,
    client: Client,
    policy: RenormalizePolicy,
    normalizer: PieceNormalizer,
    max_top_n: usize,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            client,
            policy: RenormalizePolicy::Refuse,
            normalizer: PieceNormalizer::default(),
            max_top_n: usize::MAX,
        })
    }

    pub fn with_policy(mut self, policy: RenormalizePolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_normalizer(mut self, normalizer: PieceNormalizer) -> Self {
        self.normalizer = normalizer;
        self
    }

    pub fn with_max_top_n(mut self, max_top_n: usize) -> Self {
        self.max_top_n = max_top_n;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn send(&self, request: &WireRequest) -> Result<WireResponse, BackendError> {
        let body = serde_json::to_vec(request).map_err(|e| BackendError::Transport(e.to_string()))?;
        let resp = self
            .client
            .post(&self.endpoint)
            .header(CONTENT_TYPE, "application/json")
            .body(body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    BackendError::Timeout
                } else {
                    BackendError::Transport(e.to_string())
                }
            })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError::Transport(format!("HTTP {status}")));
        }
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("malformed response: {e}")))
    }
}

/// One wire round trip for `context`.
pub fn remote_step(
    client: &RemoteBackend,
    context: &WireContext,
    top_n: usize,
) -> Result<TokenDistribution, BackendError> {
    if top_n == 0 {
        return Err(BackendError::Protocol("top_n must be at least 1".into()));
    }
    let request = WireRequest {
        context: context.clone(),
        top_n,
    };
    let resp = client.send(&request)?;
    validate_response(resp, top_n, client.policy, &client.normalizer)
}

impl ModelBackend for RemoteBackend {
    fn capability(&self) -> BackendCapability {
        BackendCapability {
            max_context: None,
            max_top_n: self.max_top_n,
            normalized: self.policy == RenormalizePolicy::Refuse,
            vocab_size: None,
        }
    }

    fn step(&self, context: &str, top_n: usize) -> Result<TokenDistribution, BackendError> {
        remote_step(self, &WireContext::Text(context.to_string()), top_n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(id: u32, piece: &str, prob: f64) -> WireToken {
        WireToken {
            id,
            piece: piece.into(),
            prob,
        }
    }

    fn resp(tokens: Vec<WireToken>, normalized: bool) -> WireResponse {
        WireResponse {
            vocab_size: 100,
            normalized,
            tokens,
        }
    }

    fn check(r: WireResponse, top_n: usize) -> Result<TokenDistribution, BackendError> {
        validate_response(r, top_n, RenormalizePolicy::Refuse, &PieceNormalizer::default())
    }

    #[test]
    fn accepts_and_sorts() {
        let r = resp(vec![tok(1, "b", 0.2), tok(0, "a", 0.5), tok(2, "c", 0.1)], true);
        let d = check(r, 3).unwrap();
        assert_eq!(d.argmax(), TokenId(0));
        assert_eq!(d.origin(), Origin::TopSlice);
    }

    #[test]
    fn rejects_protocol_violations() {
        let neg = resp(vec![tok(0, "a", -0.1)], true);
        assert!(matches!(check(neg, 1), Err(BackendError::Protocol(_))));
        let short = resp(vec![tok(0, "a", 0.5)], true);
        assert!(matches!(check(short, 2), Err(BackendError::Protocol(_))));
        let dup = resp(vec![tok(0, "a", 0.5), tok(0, "a", 0.1)], true);
        assert!(matches!(check(dup, 2), Err(BackendError::Protocol(_))));
        let oob = resp(vec![tok(100, "a", 0.5)], true);
        assert!(matches!(check(oob, 1), Err(BackendError::Protocol(_))));
        let over = resp(vec![tok(0, "a", 0.9), tok(1, "b", 0.9)], true);
        assert!(matches!(check(over, 2), Err(BackendError::Protocol(_))));
        assert!(matches!(check(resp(vec![], true), 1), Err(BackendError::Protocol(_))));
    }

    #[test]
    fn unnormalized_policy() {
        let r = resp(vec![tok(0, "a", 3.0), tok(1, "b", 1.0)], false);
        assert_eq!(check(r.clone(), 2), Err(BackendError::NotNormalized));
        let d = validate_response(r, 2, RenormalizePolicy::Local, &PieceNormalizer::default()).unwrap();
        assert!((d.entries()[0].prob - 0.75).abs() < 1e-12);
    }

    #[test]
    fn short_vocab_is_full() {
        let r = WireResponse {
            vocab_size: 2,
            normalized: true,
            tokens: vec![tok(0, "a", 0.6), tok(1, "b", 0.4)],
        };
        let d = check(r, 10).unwrap();
        assert_eq!(d.origin(), Origin::FullVocabulary);
    }

    #[test]
    fn wire_context_shapes() {
        let text: WireRequest = serde_json::from_str(r#"{"context":"hi","top_n":4}"#).unwrap();
        assert_eq!(text.context, WireContext::Text("hi".into()));
        let ids: WireRequest = serde_json::from_str(r#"{"context":[1,2],"top_n":4}"#).unwrap();
        assert_eq!(ids.context, WireContext::Tokens(vec![1, 2]));
    }
}
