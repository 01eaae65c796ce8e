//! Vocabulary-facing types: token ids, decoded pieces and next-token
//! probability slices.
//!
//! Distributions always carry post-softmax probabilities over the full
//! vocabulary. A [`TokenDistribution`] with [`Origin::TopSlice`] is a
//! truncated view: its probabilities are not renormalized, so `coverage`
//! may be well below one.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Boundary markers stripped from decoded pieces by default.
pub const DEFAULT_MARKERS: [&str; 3] = ["\u{2581}", "\u{120}", " "];

const COVERAGE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistributionError {
    #[error("empty distribution")]
    Empty,
    #[error("probability {prob} for token {token} is not a finite non-negative value")]
    InvalidProb { token: TokenId, prob: f64 },
    #[error("probabilities are not sorted non-increasing at position {0}")]
    Unsorted(usize),
    #[error("duplicate token id {0}")]
    DuplicateToken(TokenId),
    #[error("coverage {0} exceeds 1")]
    CoverageTooHigh(f64),
    #[error("full-vocabulary distribution has coverage {0}, expected 1")]
    NotNormalized(f64),
    #[error("n_keep must be at least 1")]
    ZeroKeep,
}

/// Opaque index into a backend vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Strips word-boundary markers and folds case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PieceNormalizer {
    markers: Vec<String>,
}

impl Default for PieceNormalizer {
    fn default() -> Self {
        Self::new(DEFAULT_MARKERS.iter().map(|m| m.to_string()))
    }
}

impl PieceNormalizer {
    pub fn new<I, S>(markers: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let markers = markers
            .into_iter()
            .map(Into::into)
            .filter(|m: &String| !m.is_empty())
            .collect();
        Self { markers }
    }

    pub fn markers(&self) -> &[String] {
        &self.markers
    }

    /// Returns the remainder of `raw` after its leading marker, if it has one.
    pub fn strip_marker<'a>(&self, raw: &'a str) -> Option<&'a str> {
        self.markers.iter().find_map(|m| raw.strip_prefix(m.as_str()))
    }

    /// Leading markers and whitespace are peeled until none remain, so the
    /// result is a fixpoint of this function.
    pub fn normalize(&self, raw: &str) -> String {
        let mut rest = raw;
        loop {
            let trimmed = rest.trim_start();
            match self.strip_marker(trimmed) {
                Some(after) => rest = after,
                None => {
                    rest = trimmed;
                    break;
                }
            }
        }
        rest.trim_end().to_lowercase()
    }

    /// Text contribution of a piece when joining a generation: a leading
    /// marker becomes a single space.
    pub fn detokenize(&self, raw: &str) -> String {
        match self.strip_marker(raw) {
            Some(after) if !raw.starts_with(' ') => format!(" {after}"),
            _ => raw.to_string(),
        }
    }
}

/// `normalize_piece` with the default marker set.
pub fn normalize_piece(raw: &str) -> String {
    PieceNormalizer::default().normalize(raw)
}

/// A decoded token string together with its normalized matching form.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenPiece {
    pub raw: String,
    pub normalized: String,
}

impl TokenPiece {
    pub fn new(raw: impl Into<String>) -> Self {
        Self::with_normalizer(raw, &PieceNormalizer::default())
    }

    pub fn with_normalizer(raw: impl Into<String>, normalizer: &PieceNormalizer) -> Self {
        let raw = raw.into();
        let normalized = normalizer.normalize(&raw);
        Self { raw, normalized }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    FullVocabulary,
    TopSlice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub token: TokenId,
    pub piece: TokenPiece,
    pub prob: f64,
}

impl TokenEntry {
    pub fn new(token: u32, raw_piece: &str, prob: f64) -> Self {
        Self {
            token: TokenId(token),
            piece: TokenPiece::new(raw_piece),
            prob,
        }
    }
}

/// Next-token probabilities, sorted by descending probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution")]
pub struct TokenDistribution {
    entries: Vec<TokenEntry>,
    coverage: f64,
    origin: Origin,
}

#[derive(Deserialize)]
struct RawDistribution {
    entries: Vec<TokenEntry>,
    origin: Origin,
}

impl TryFrom<RawDistribution> for TokenDistribution {
    type Error = DistributionError;

    fn try_from(raw: RawDistribution) -> Result<Self, Self::Error> {
        Self::new(raw.entries, raw.origin)
    }
}

impl TokenDistribution {
    /// Validates already-sorted entries.
    pub fn new(entries: Vec<TokenEntry>, origin: Origin) -> Result<Self, DistributionError> {
        if entries.is_empty() {
            return Err(DistributionError::Empty);
        }
        let mut seen = HashSet::with_capacity(entries.len());
        let mut coverage = 0.0;
        for (i, e) in entries.iter().enumerate() {
            if !e.prob.is_finite() || e.prob < 0.0 {
                return Err(DistributionError::InvalidProb {
                    token: e.token,
                    prob: e.prob,
                });
            }
            if i > 0 && entries[i - 1].prob < e.prob {
                return Err(DistributionError::Unsorted(i));
            }
            if !seen.insert(e.token) {
                return Err(DistributionError::DuplicateToken(e.token));
            }
            coverage += e.prob;
        }
        if coverage > 1.0 + COVERAGE_EPS {
            return Err(DistributionError::CoverageTooHigh(coverage));
        }
        if origin == Origin::FullVocabulary && (coverage - 1.0).abs() > COVERAGE_EPS {
            return Err(DistributionError::NotNormalized(coverage));
        }
        Ok(Self {
            entries,
            coverage,
            origin,
        })
    }

    /// Sorts by descending probability (ties by ascending id), then validates.
    pub fn from_unsorted(
        mut entries: Vec<TokenEntry>,
        origin: Origin,
    ) -> Result<Self, DistributionError> {
        if let Some(bad) = entries.iter().find(|e| !e.prob.is_finite()) {
            return Err(DistributionError::InvalidProb {
                token: bad.token,
                prob: bad.prob,
            });
        }
        entries.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.token.cmp(&b.token)));
        Self::new(entries, origin)
    }

    pub fn entries(&self) -> &[TokenEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn max_prob(&self) -> f64 {
        self.entries[0].prob
    }

    pub fn argmax(&self) -> TokenId {
        self.entries[0].token
    }

    pub fn get(&self, token: TokenId) -> Option<&TokenEntry> {
        self.entries.iter().find(|e| e.token == token)
    }

    /// 0-based position of `token` in the sorted order.
    pub fn rank_of(&self, token: TokenId) -> Option<usize> {
        self.entries.iter().position(|e| e.token == token)
    }

    /// Keeps the subset of entries selected by `keep`, preserving order.
    pub(crate) fn restrict<F>(&self, mut keep: F) -> Self
    where
        F: FnMut(&TokenEntry) -> bool,
    {
        let entries: Vec<TokenEntry> = self.entries.iter().filter(|e| keep(e)).cloned().collect();
        let coverage = entries.iter().map(|e| e.prob).sum();
        Self {
            entries,
            coverage,
            origin: Origin::TopSlice,
        }
    }

    /// Multiplies every probability by `factor` (used for normalization
    /// repairs and scaling checks); result is a top slice.
    pub fn scaled(&self, factor: f64) -> Result<Self, DistributionError> {
        let entries = self
            .entries
            .iter()
            .map(|e| TokenEntry {
                prob: e.prob * factor,
                ..e.clone()
            })
            .collect();
        Self::new(entries, Origin::TopSlice)
    }
}

/// Keeps the `n_keep` most probable entries without renormalizing.
pub fn top_slice(
    dist: &TokenDistribution,
    n_keep: usize,
) -> Result<TokenDistribution, DistributionError> {
    if dist.is_empty() {
        return Err(DistributionError::Empty);
    }
    if n_keep == 0 {
        return Err(DistributionError::ZeroKeep);
    }
    let entries: Vec<TokenEntry> = dist.entries.iter().take(n_keep).cloned().collect();
    let coverage = entries.iter().map(|e| e.prob).sum();
    Ok(TokenDistribution {
        entries,
        coverage,
        origin: Origin::TopSlice,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn abc() -> TokenDistribution {
        TokenDistribution::new(
            vec![
                TokenEntry::new(0, "a", 0.7),
                TokenEntry::new(1, "b", 0.2),
                TokenEntry::new(2, "c", 0.1),
            ],
            Origin::FullVocabulary,
        )
        .unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_piece("\u{120}Daw"), "daw");
        assert_eq!(normalize_piece("Stephen"), "stephen");
        assert_eq!(normalize_piece(""), "");
        assert_eq!(normalize_piece("\u{2581}King"), "king");
        assert_eq!(normalize_piece(" King "), "king");
        assert_eq!(normalize_piece("\u{2581}"), "");
    }

    #[test]
    fn custom_marker_set() {
        let n = PieceNormalizer::new(["##"]);
        assert_eq!(n.normalize("##kins"), "kins");
        assert_eq!(n.normalize("\u{120}kins"), "\u{121}kins");
    }

    #[test]
    fn detokenize_marks_word_starts() {
        let n = PieceNormalizer::default();
        assert_eq!(n.detokenize("\u{120}Richard"), " Richard");
        assert_eq!(n.detokenize("\u{2581}the"), " the");
        assert_eq!(n.detokenize(" the"), " the");
        assert_eq!(n.detokenize("kins"), "kins");
    }

    #[test]
    fn top_slice_examples() {
        let d = abc();
        let s = top_slice(&d, 2).unwrap();
        assert_eq!(s.len(), 2);
        assert!((s.coverage() - 0.9).abs() < 1e-12);
        assert_eq!(s.origin(), Origin::TopSlice);
        assert_eq!(top_slice(&d, 10).unwrap().entries(), d.entries());

        let single =
            TokenDistribution::new(vec![TokenEntry::new(0, "a", 1.0)], Origin::FullVocabulary)
                .unwrap();
        let s = top_slice(&single, 1).unwrap();
        assert_eq!(s.coverage(), 1.0);
        assert_eq!(top_slice(&d, 0), Err(DistributionError::ZeroKeep));
    }

    #[test]
    fn validation_rejects_bad_distributions() {
        assert_eq!(
            TokenDistribution::new(vec![], Origin::TopSlice),
            Err(DistributionError::Empty)
        );
        let unsorted = vec![TokenEntry::new(0, "a", 0.1), TokenEntry::new(1, "b", 0.2)];
        assert_eq!(
            TokenDistribution::new(unsorted.clone(), Origin::TopSlice),
            Err(DistributionError::Unsorted(1))
        );
        assert!(TokenDistribution::from_unsorted(unsorted, Origin::TopSlice).is_ok());
        let neg = vec![TokenEntry::new(0, "a", -0.1)];
        assert!(matches!(
            TokenDistribution::new(neg, Origin::TopSlice),
            Err(DistributionError::InvalidProb { .. })
        ));
        let dup = vec![TokenEntry::new(0, "a", 0.5), TokenEntry::new(0, "a", 0.5)];
        assert_eq!(
            TokenDistribution::new(dup, Origin::TopSlice),
            Err(DistributionError::DuplicateToken(TokenId(0)))
        );
        let partial = vec![TokenEntry::new(0, "a", 0.5)];
        assert!(matches!(
            TokenDistribution::new(partial, Origin::FullVocabulary),
            Err(DistributionError::NotNormalized(_))
        ));
        let over = vec![TokenEntry::new(0, "a", 0.8), TokenEntry::new(1, "b", 0.8)];
        assert!(matches!(
            TokenDistribution::new(over, Origin::TopSlice),
            Err(DistributionError::CoverageTooHigh(_))
        ));
    }

    #[test]
    fn serde_revalidates() {
        let json = serde_json::to_string(&abc()).unwrap();
        let back: TokenDistribution = serde_json::from_str(&json).unwrap();
        assert_eq!(back, abc());
        let bad = json.replace("0.7", "-0.7");
        assert!(serde_json::from_str::<TokenDistribution>(&bad).is_err());
    }

    fn arb_dist() -> impl Strategy<Value = TokenDistribution> {
        prop::collection::vec(0.0f64..1.0, 1..64).prop_map(|weights| {
            let total: f64 = weights.iter().sum::<f64>() + 1e-9;
            let entries = weights
                .iter()
                .enumerate()
                .map(|(i, w)| TokenEntry::new(i as u32, "x", w / total))
                .collect();
            TokenDistribution::from_unsorted(entries, Origin::TopSlice).unwrap()
        })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,12}", pre in prop::sample::select(vec!["", " ", "\u{2581}", "\u{120}", "\u{2581}\u{2581}", " \u{120} "])) {
            let raw = format!("{pre}{s}");
            let once = normalize_piece(&raw);
            prop_assert_eq!(normalize_piece(&once), once.clone());
            prop_assert_eq!(once.trim(), once.as_str());
        }

        #[test]
        fn top_slice_keeps_order_and_coverage(d in arb_dist(), n in 1usize..80) {
            let s = top_slice(&d, n).unwrap();
            prop_assert!(s.coverage() <= d.coverage() + 1e-12);
            prop_assert_eq!(s.entries(), &d.entries()[..n.min(d.len())]);
            let max = d.entries().iter().map(|e| e.prob).fold(0.0, f64::max);
            prop_assert_eq!(d.max_prob(), max);
        }
    }
}
