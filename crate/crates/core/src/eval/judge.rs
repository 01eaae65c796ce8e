//! Answer judging.

use super::dataset::EvalInstance;

/// Decides whether a generated answer is correct for an instance.
pub trait Judge: Send + Sync {
    fn judge(&self, answer: &str, instance: &EvalInstance) -> bool;
}

/// Case-insensitive whole-word containment of the gold answer or any alias.
#[derive(Debug, Clone, Copy, Default)]
pub struct ContainmentJudge;

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// `needle` occurs as a contiguous run of whole words in `haystack`.
pub fn contains_words(haystack: &str, needle: &str) -> bool {
    let h = words(haystack);
    let n = words(needle);
    !n.is_empty() && h.windows(n.len()).any(|w| w == n.as_slice())
}

impl Judge for ContainmentJudge {
    fn judge(&self, answer: &str, instance: &EvalInstance) -> bool {
        std::iter::once(&instance.gold_answer)
            .chain(&instance.answer_aliases)
            .any(|gold| contains_words(answer, gold))
    }
}

pub fn judge(answer: &str, instance: &EvalInstance) -> bool {
    ContainmentJudge.judge(answer, instance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(gold: &str, aliases: &[&str]) -> EvalInstance {
        EvalInstance {
            id: "t".into(),
            questions: vec!["q".into()],
            edits: vec![],
            gold_answer: gold.into(),
            answer_aliases: aliases.iter().map(|s| s.to_string()).collect(),
            hop_count: 1,
        }
    }

    #[test]
    fn examples() {
        assert!(judge("The capital is Ottawa.", &inst("Ottawa", &[])));
        assert!(!judge("", &inst("Ottawa", &[])));
        assert!(!judge("Ottawan customs", &inst("Ottawa", &[])));
    }

    #[test]
    fn aliases_and_multiword() {
        let i = inst("United Kingdom", &["UK", "Britain"]);
        assert!(judge("the united  kingdom", &i));
        assert!(judge("Great Britain!", &i));
        assert!(!judge("united states kingdom", &i));
        assert!(!judge("ukraine", &i));
    }
}
