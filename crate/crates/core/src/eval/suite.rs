//! A scripted 20-instance editing suite for the mock backend.
//!
//! Every question is scripted so that plain decoding answers with the
//! model's original (parametric) entity while the edited answer sits lower
//! in the head set. Three shapes are used:
//!
//! - `A` (12 instances, four of them two-hop): the parametric first word
//!   leads at 0.55, the new first word follows at 0.25.
//! - `B` (4): the new answer is one word split into two sub-word pieces.
//! - `C` (4): the new answer is absent from the first step, where the
//!   parametric word (0.50) narrowly leads a neutral "the" (0.45). Only the
//!   parametric penalty can flip it; "the" then leads to
//!   "the city of <new>".
//!
//! The cloze induction prompts are scripted too, so the knowledge cache is
//! built from the mock like any other backend.

use std::path::{Path, PathBuf};

use super::dataset::{save_mquake_like, EvalInstance};
use crate::decode::{MockError, MockLM, MockScript};
use crate::knowledge::{build_cloze, induction_prompt, EditMemory, FactRecord};

const G: char = '\u{120}';

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteKind {
    A,
    B,
    C,
}

/// Shape of instance `i`.
pub fn suite_kind(i: usize) -> SuiteKind {
    match i % 5 {
        3 => SuiteKind::B,
        4 => SuiteKind::C,
        _ => SuiteKind::A,
    }
}

// (book, new author, parametric author)
const BOOKS: [(&str, &str, &str); 8] = [
    ("Misery", "Richard Dawkins", "Stephen King"),
    ("Emma", "Carl Sagan", "Jane Austen"),
    ("Beloved", "Isaac Asimov", "Toni Morrison"),
    ("Ulysses", "Mary Shelley", "James Joyce"),
    ("Walden", "Agatha Christie", "Henry Thoreau"),
    ("Middlemarch", "Jules Verne", "George Eliot"),
    ("Persuasion", "Franz Kafka", "Maria Edgeworth"),
    ("Nostromo", "Leo Tolstoy", "Joseph Conrad"),
];

// (book, new author, parametric author, new country, parametric country)
const TWO_HOP: [(&str, &str, &str, &str, &str); 4] = [
    ("Dracula", "Oliver Sacks", "Bram Stoker", "Norway", "Ireland"),
    ("Lolita", "Neil Gaiman", "Vladimir Nabokov", "Chile", "Russia"),
    ("Siddhartha", "Umberto Eco", "Hermann Hesse", "Kenya", "Germany"),
    ("Kokoro", "Pablo Neruda", "Natsume Soseki", "Mexico", "Japan"),
];

// (landmark, new place split in two pieces, parametric place)
const PLACES: [(&str, (&str, &str), &str); 4] = [
    ("Petra", ("Zan", "zibar"), "Jordan"),
    ("Angkor", ("Reyk", "javik"), "Cambodia"),
    ("Uluru", ("Valpa", "raiso"), "Australia"),
    ("Machu Picchu", ("Kath", "mandu"), "Peru"),
];

// (person, new city, parametric city)
const DEATHS: [(&str, &str, &str); 4] = [
    ("Frida Kahlo", "Lyon", "Coyoacan"),
    ("Ludwig Beethoven", "Porto", "Vienna"),
    ("Marie Curie", "Dublin", "Geneva"),
    ("Oscar Wilde", "Krakow", "Paris"),
];

const LEAD: f64 = 0.55;
const RUNNER_UP: f64 = 0.25;
const NEUTRAL: f64 = 0.10;
const C_LEAD: f64 = 0.50;
const C_NEUTRAL: f64 = 0.45;
const CHAIN: f64 = 0.9;

fn piece(word: &str) -> String {
    format!("{G}{word}")
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(piece).collect()
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn answer_ctx(question: &str) -> String {
    format!("Question: {question}\nAnswer:")
}

/// Scripts `ctx` to continue with `pieces` then the end piece.
fn chain(script: &mut MockScript, ctx: &str, pieces: &[String]) {
    script.chain(ctx, &refs(pieces), CHAIN);
}

fn script_induction(script: &mut MockScript, fact: &FactRecord, parametric: &str) {
    let cloze = build_cloze(fact).expect("suite facts are valid");
    chain(script, &induction_prompt(&cloze), &words(parametric));
}

/// Step one: `lead` vs `second` (+ "the"), then each continues to the end.
fn script_two_way(
    script: &mut MockScript,
    question: &str,
    lead: &[String],
    second: &[String],
) {
    let ctx = answer_ctx(question);
    let the = piece("the");
    script.rule(
        &ctx,
        &[(&lead[0], LEAD), (&second[0], RUNNER_UP), (&the, NEUTRAL)],
    );
    let detok = |p: &str| p.replace(G, " ");
    chain(script, &format!("{ctx}{}", detok(&lead[0])), &lead[1..]);
    chain(script, &format!("{ctx}{}", detok(&second[0])), &second[1..]);
}

pub struct ScriptedSuite {
    pub instances: Vec<EvalInstance>,
    pub script: MockScript,
}

pub struct SuiteFiles {
    pub dataset: PathBuf,
    pub memory: PathBuf,
    pub script: PathBuf,
}

impl ScriptedSuite {
    pub fn backend(&self) -> Result<MockLM, MockError> {
        MockLM::new(&self.script)
    }

    /// All edits of all instances.
    pub fn memory(&self) -> EditMemory {
        let edits = self.instances.iter().flat_map(|i| i.edits.iter().cloned()).collect();
        EditMemory::full(edits).expect("suite facts are valid")
    }

    /// Writes `suite.jsonl` (MQuAKE-style), `memory.jsonl` and
    /// `script.json` into `dir`.
    pub fn write_files(&self, dir: &Path) -> std::io::Result<SuiteFiles> {
        let files = SuiteFiles {
            dataset: dir.join("suite.jsonl"),
            memory: dir.join("memory.jsonl"),
            script: dir.join("script.json"),
        };
        save_mquake_like(&files.dataset, &self.instances)?;
        self.memory().save(&files.memory)?;
        self.script.save(&files.script)?;
        Ok(files)
    }
}

fn instance(
    id: String,
    questions: Vec<String>,
    edits: Vec<FactRecord>,
    gold: &str,
) -> EvalInstance {
    EvalInstance {
        id,
        hop_count: edits.len(),
        questions,
        edits,
        gold_answer: gold.to_string(),
        answer_aliases: Vec::new(),
    }
}

pub fn scripted_suite() -> ScriptedSuite {
    let mut script = MockScript::new();
    let mut instances = Vec::with_capacity(20);
    let (mut a, mut hop, mut b, mut c) = (0, 0, 0, 0);
    for i in 0..20 {
        let id = format!("s{i:02}");
        let fact = |j: usize, subject: &str, template: &str, object: &str| {
            FactRecord::templated(&format!("{id}:{j}"), subject, template, object)
        };
        let inst = match (suite_kind(i), i % 5) {
            (SuiteKind::A, 2) => {
                let (book, new, old, country, old_country) = TWO_HOP[hop];
                hop += 1;
                let f0 = fact(0, book, "{} was written by [X]", new);
                let f1 = fact(1, new, "{} is a citizen of [X]", country);
                script_induction(&mut script, &f0, old);
                script_induction(&mut script, &f1, old_country);
                let qs = vec![
                    format!("What is the country of citizenship of the author of {book}?"),
                    format!("The author of {book} is a citizen of which country?"),
                ];
                for q in &qs {
                    script_two_way(&mut script, q, &words(old_country), &words(country));
                }
                instance(id, qs, vec![f0, f1], country)
            }
            (SuiteKind::A, _) => {
                let (book, new, old) = BOOKS[a];
                a += 1;
                let f0 = fact(0, book, "{} was written by [X]", new);
                script_induction(&mut script, &f0, old);
                let qs = vec![format!("Who is the author of {book}?"), format!("Who wrote {book}?")];
                for q in &qs {
                    script_two_way(&mut script, q, &words(old), &words(new));
                }
                instance(id, qs, vec![f0], new)
            }
            (SuiteKind::B, _) => {
                let (landmark, (head, tail), old) = PLACES[b];
                b += 1;
                let new = format!("{head}{tail}");
                let f0 = fact(0, landmark, "{} is located in [X]", &new);
                script_induction(&mut script, &f0, old);
                let qs = vec![
                    format!("Where is {landmark} located?"),
                    format!("In which place can {landmark} be found?"),
                ];
                for q in &qs {
                    script_two_way(&mut script, q, &words(old), &[piece(head), tail.to_string()]);
                }
                instance(id, qs, vec![f0], &new)
            }
            (SuiteKind::C, _) => {
                let (person, new, old) = DEATHS[c];
                c += 1;
                let f0 = fact(0, person, "{} died in [X]", new);
                script_induction(&mut script, &f0, old);
                let qs = vec![
                    format!("In which city did {person} die?"),
                    format!("Where did {person} pass away?"),
                ];
                for q in &qs {
                    let ctx = answer_ctx(q);
                    let (lead, the) = (piece(old), piece("the"));
                    script.rule(&ctx, &[(&lead, C_LEAD), (&the, C_NEUTRAL)]);
                    chain(&mut script, &format!("{ctx} {old}"), &[]);
                    script.rule(&format!("{ctx} the"), &[(&piece("city"), CHAIN)]);
                    script.rule(&format!("{ctx} the city"), &[(&piece("of"), CHAIN)]);
                    let of = format!("{ctx} the city of");
                    script.rule(&of, &[(&lead, C_LEAD), (&piece(new), 0.4)]);
                    chain(&mut script, &format!("{of} {old}"), &[]);
                    chain(&mut script, &format!("{of} {new}"), &[]);
                }
                instance(id, qs, vec![f0], new)
            }
        };
        instances.push(inst);
    }
    ScriptedSuite { instances, script }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biaser::BiasConfig;
    use crate::decode::{decode, DecodeOptions};
    use crate::knowledge::{induce_parametric, EntitySet};

    #[test]
    fn shape_counts() {
        let s = scripted_suite();
        assert_eq!(s.instances.len(), 20);
        let count = |k| (0..20).filter(|i| suite_kind(*i) == k).count();
        assert_eq!((count(SuiteKind::A), count(SuiteKind::B), count(SuiteKind::C)), (12, 4, 4));
        assert_eq!(s.instances.iter().filter(|i| i.hop_count == 2).count(), 4);
        for inst in &s.instances {
            inst.validate().unwrap();
        }
        s.backend().unwrap();
    }

    #[test]
    fn induction_recovers_parametric_answers() {
        let s = scripted_suite();
        let lm = s.backend().unwrap();
        let misery = &s.instances[0].edits[0];
        let cloze = build_cloze(misery).unwrap();
        assert_eq!(cloze, "Misery was written by _");
        assert_eq!(induce_parametric(&lm, &cloze).unwrap(), "Stephen King");
        let petra = build_cloze(&s.instances[3].edits[0]).unwrap();
        assert_eq!(induce_parametric(&lm, &petra).unwrap(), "Jordan");
    }

    #[test]
    fn unbiased_decoding_gives_parametric_answers() {
        let s = scripted_suite();
        let lm = s.backend().unwrap();
        let cfg = BiasConfig::default().control();
        let opts = DecodeOptions {
            stop_at_newline: true,
            ..DecodeOptions::default()
        };
        let none = EntitySet::default();
        for (i, want) in [(0, "Stephen King"), (3, "Jordan"), (4, "Coyoacan"), (2, "Ireland")] {
            let prompt = answer_ctx(&s.instances[i].questions[0]);
            let g = decode(&lm, &prompt, &none, &cfg, &opts).unwrap();
            assert_eq!(g.text, want);
        }
    }
}
