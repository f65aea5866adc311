//! Grammar-based triplet extraction from benchmark-style prompts.
//!
//! Grammar: `prompt := NP (REL NP)*` with NP := optional article plus a
//! lexicon-aware noun phrase. Chained prompts yield consecutive
//! triplets sharing the middle noun. Deterministic and total on the
//! benchmark prompt shapes; nothing more.

use std::path::Path;

use crate::error::CoreError;
use crate::synth::Relation;

/// One (subject, relation, object) steering target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationTriplet {
    pub subject: String,
    pub relation: Relation,
    pub object: String,
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Surface forms of the four trained relations. Longest match wins, so
/// "on the top of" is tried before "on top of" never matters — matching
/// is by token count, checked longest-first.
const RELATION_FORMS: [(&str, Relation); 12] = [
    ("above", Relation::Above),
    ("on top of", Relation::Above),
    ("on the top of", Relation::Above),
    ("below", Relation::Below),
    ("under", Relation::Below),
    ("on the bottom of", Relation::Below),
    ("left of", Relation::LeftOf),
    ("to the left of", Relation::LeftOf),
    ("on the left of", Relation::LeftOf),
    ("right of", Relation::RightOf),
    ("to the right of", Relation::RightOf),
    ("on the right of", Relation::RightOf),
];

/// Relation-like phrases outside the four trained classes; recognized
/// so they fail loudly instead of dissolving into a noun phrase.
const UNSUPPORTED_FORMS: [&str; 4] = ["next to", "near", "beside", "side by side with"];

/// Multiword nouns plus the closed-class relation tables.
#[derive(Debug, Clone)]
pub struct Lexicon {
    /// Multiword noun entries, each stored as its token sequence.
    nouns: Vec<Vec<String>>,
}

impl Default for Lexicon {
    fn default() -> Self {
        let mut lex = Lexicon { nouns: Vec::new() };
        for n in ["fire hydrant", "hot dog", "teddy bear", "potted plant", "stop sign"] {
            lex.add_noun(n);
        }
        lex
    }
}

impl Lexicon {
    pub fn add_noun(&mut self, noun: &str) {
        let toks: Vec<String> = noun
            .to_lowercase()
            .split_whitespace()
            .map(str::to_string)
            .collect();
        if !toks.is_empty() && !self.nouns.contains(&toks) {
            self.nouns.push(toks);
        }
    }

    /// One noun entry per line; `#` starts a comment.
    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let mut lex = Lexicon::default();
        for line in std::fs::read_to_string(path)?.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            lex.add_noun(line);
        }
        Ok(lex)
    }

    /// Longest lexicon noun starting at `pos`, as a token count.
    fn noun_match(&self, tokens: &[String], pos: usize) -> Option<usize> {
        self.nouns
            .iter()
            .filter(|n| tokens[pos..].starts_with(n))
            .map(|n| n.len())
            .max()
    }
}

/// Canonical chained surface form of a triplet list, e.g.
/// "a frog above a sneakers below a teapot".
pub fn render_chained(triplets: &[RelationTriplet]) -> String {
    let mut out = String::new();
    for (i, t) in triplets.iter().enumerate() {
        if i == 0 {
            out.push_str(&format!("a {}", t.subject));
        }
        out.push_str(&format!(" {} a {}", relation_surface(t.relation), t.object));
    }
    out
}

/// Canonical surface form of a directional relation.
pub fn relation_surface(r: Relation) -> &'static str {
    match r {
        Relation::Above => "above",
        Relation::Below => "below",
        Relation::LeftOf => "left of",
        Relation::RightOf => "right of",
        Relation::Neutral => "with",
    }
}

/// Maps one relation phrase to its Relation; phrases outside the four
/// trained classes are an unsupported-relation error.
pub fn normalize_relation(phrase: &str) -> Result<Relation, CoreError> {
    let norm = phrase.to_lowercase();
    let norm = norm.split_whitespace().collect::<Vec<_>>().join(" ");
    for (form, r) in RELATION_FORMS {
        if norm == form {
            return Ok(r);
        }
    }
    Err(CoreError::UnsupportedRelation(norm))
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| ".,!?".contains(c)).to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Longest relation/unsupported phrase starting at `pos` (token count
/// and lookup result), or None if no phrase table entry starts here.
fn relation_match(
    tokens: &[String],
    pos: usize,
) -> Option<(usize, Result<Relation, CoreError>)> {
    let starts = |form: &str| -> Option<usize> {
        let parts: Vec<&str> = form.split(' ').collect();
        (tokens[pos..].len() >= parts.len()
            && tokens[pos..pos + parts.len()]
                .iter()
                .map(String::as_str)
                .eq(parts.iter().copied()))
        .then_some(parts.len())
    };
    let mut best: Option<(usize, Result<Relation, CoreError>)> = None;
    for (form, r) in RELATION_FORMS {
        if let Some(len) = starts(form) {
            if best.as_ref().map_or(true, |(l, _)| len > *l) {
                best = Some((len, Ok(r)));
            }
        }
    }
    for form in UNSUPPORTED_FORMS {
        if let Some(len) = starts(form) {
            if best.as_ref().map_or(true, |(l, _)| len > *l) {
                best = Some((len, Err(CoreError::UnsupportedRelation(form.into()))));
            }
        }
    }
    best
}

struct Parser<'a> {
    tokens: Vec<String>,
    pos: usize,
    lexicon: &'a Lexicon,
}

impl<'a> Parser<'a> {
    fn skip_fillers(&mut self) {
        while self.pos < self.tokens.len() {
            let t = self.tokens[self.pos].as_str();
            if ARTICLES.contains(&t) || t == "same" || t == "and" {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    /// NP: articles/fillers, then tokens up to the next relation phrase.
    /// Lexicon nouns are consumed whole and shield any relation word
    /// they might contain.
    fn noun_phrase(&mut self) -> Result<String, CoreError> {
        self.skip_fillers();
        let start = self.pos;
        let mut words: Vec<&str> = Vec::new();
        while self.pos < self.tokens.len() {
            if let Some(len) = self.lexicon.noun_match(&self.tokens, self.pos) {
                for t in &self.tokens[self.pos..self.pos + len] {
                    words.push(t);
                }
                self.pos += len;
                continue;
            }
            if relation_match(&self.tokens, self.pos).is_some() {
                break;
            }
            words.push(&self.tokens[self.pos]);
            self.pos += 1;
        }
        if words.is_empty() {
            return Err(CoreError::Parse {
                position: start,
                message: "expected a noun phrase".into(),
            });
        }
        Ok(words.join(" "))
    }
}

/// Extracts the relation triplets of a benchmark-style prompt.
///
/// A prompt with no relation yields an empty list; a relation with no
/// following noun phrase is a parse error carrying the token position.
pub fn parse_prompt(text: &str, lexicon: &Lexicon) -> Result<Vec<RelationTriplet>, CoreError> {
    if text.trim().is_empty() {
        return Err(CoreError::Parse {
            position: 0,
            message: "empty prompt".into(),
        });
    }
    let mut triplets: Vec<RelationTriplet> = Vec::new();
    // Clauses let the structured "X rel Y; and the same Y rel Z" form
    // reduce to repeated simple parses.
    for clause in text.split(';') {
        if clause.trim().is_empty() {
            continue;
        }
        let mut tokens = tokenize(clause);
        // Optional "a photo of" / "photo of" prefix.
        let off = usize::from(ARTICLES.contains(&tokens.first().map(String::as_str).unwrap_or("")));
        if tokens.len() >= off + 2 && tokens[off] == "photo" && tokens[off + 1] == "of" {
            tokens.drain(..off + 2);
        }
        let mut p = Parser {
            tokens,
            pos: 0,
            lexicon,
        };
        let mut subject = p.noun_phrase()?;
        while p.pos < p.tokens.len() {
            let (len, rel) = relation_match(&p.tokens, p.pos)
                .expect("noun_phrase stops only at phrase-table entries");
            let relation = rel?;
            let rel_pos = p.pos;
            p.pos += len;
            if p.pos >= p.tokens.len() {
                return Err(CoreError::Parse {
                    position: rel_pos,
                    message: format!(
                        "relation \"{}\" has no following noun phrase",
                        relation_surface(relation)
                    ),
                });
            }
            let object = p.noun_phrase()?;
            if subject == object {
                return Err(CoreError::Parse {
                    position: rel_pos,
                    message: format!("subject and object are both \"{subject}\""),
                });
            }
            triplets.push(RelationTriplet {
                subject: subject.clone(),
                relation,
                object: object.clone(),
            });
            subject = object;
        }
    }
    Ok(triplets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> Lexicon {
        Lexicon::default()
    }

    #[test]
    fn normalize_covers_all_canonical_surface_forms() {
        assert_eq!(normalize_relation("on the top of").unwrap(), Relation::Above);
        assert_eq!(normalize_relation("left of").unwrap(), Relation::LeftOf);
        assert_eq!(normalize_relation("UNDER").unwrap(), Relation::Below);
        assert_eq!(normalize_relation("to the right of").unwrap(), Relation::RightOf);
        assert!(matches!(
            normalize_relation("next to"),
            Err(CoreError::UnsupportedRelation(_))
        ));
        assert!(matches!(
            normalize_relation("behind"),
            Err(CoreError::UnsupportedRelation(_))
        ));
    }

    #[test]
    fn geneval_template_yields_exactly_one_triplet() {
        let nouns = [
            "backpack", "bowl", "cat", "sneakers", "duck", "robot", "teapot", "vase", "corgi",
            "mug", "furby", "teddy bear", "frog", "mouse", "table", "chair", "umbrella", "dog",
            "fire hydrant", "hot dog",
        ];
        let rels = [
            ("above", Relation::Above),
            ("below", Relation::Below),
            ("to the left of", Relation::LeftOf),
            ("to the right of", Relation::RightOf),
        ];
        for pair in nouns.windows(2) {
            for (surface, rel) in rels {
                for prefix in ["", "a photo of "] {
                    let prompt = format!("{prefix}a {} {surface} a {}", pair[0], pair[1]);
                    let got = parse_prompt(&prompt, &lex()).unwrap();
                    assert_eq!(
                        got,
                        vec![RelationTriplet {
                            subject: pair[0].into(),
                            relation: rel,
                            object: pair[1].into(),
                        }],
                        "prompt: {prompt}"
                    );
                }
            }
        }
    }

    #[test]
    fn chained_prompt_shares_the_middle_noun() {
        let got = parse_prompt("a frog above a sneakers below a teapot", &lex()).unwrap();
        assert_eq!(
            got,
            vec![
                RelationTriplet {
                    subject: "frog".into(),
                    relation: Relation::Above,
                    object: "sneakers".into(),
                },
                RelationTriplet {
                    subject: "sneakers".into(),
                    relation: Relation::Below,
                    object: "teapot".into(),
                },
            ]
        );
    }

    #[test]
    fn prompt_without_relation_is_empty() {
        assert_eq!(parse_prompt("a cat", &lex()).unwrap(), vec![]);
        assert_eq!(parse_prompt("a photo of a red bicycle", &lex()).unwrap(), vec![]);
    }

    #[test]
    fn dangling_relation_is_a_positioned_parse_error() {
        // Position is the token index: ["a", "cat", "above"] → 2.
        match parse_prompt("a cat above", &lex()) {
            Err(CoreError::Parse { position, .. }) => assert_eq!(position, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn multiword_nouns_are_never_split() {
        let got = parse_prompt("a fire hydrant above a teddy bear", &lex()).unwrap();
        assert_eq!(got[0].subject, "fire hydrant");
        assert_eq!(got[0].object, "teddy bear");
    }

    #[test]
    fn structured_clause_form_reduces_to_the_chain() {
        let got = parse_prompt(
            "a frog above a sneakers; and the same sneakers below a teapot",
            &lex(),
        )
        .unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].object, got[1].subject);
        assert_eq!(got[1].relation, Relation::Below);
    }

    #[test]
    fn unsupported_relation_phrase_fails_loudly() {
        assert!(matches!(
            parse_prompt("a cat next to a dog", &lex()),
            Err(CoreError::UnsupportedRelation(_))
        ));
    }

    #[test]
    fn render_then_parse_is_identity() {
        let nouns = ["frog", "teddy bear", "mug", "vase", "chair"];
        let rels = [
            Relation::Above,
            Relation::Below,
            Relation::LeftOf,
            Relation::RightOf,
        ];
        for k in 1..=3usize {
            for (i, &r0) in rels.iter().enumerate() {
                let triplets: Vec<RelationTriplet> = (0..k)
                    .map(|j| RelationTriplet {
                        subject: nouns[j].into(),
                        relation: rels[(i + j) % 4],
                        object: nouns[j + 1].into(),
                    })
                    .collect();
                let _ = r0;
                let rendered = render_chained(&triplets);
                let reparsed = parse_prompt(&rendered, &lex()).unwrap();
                assert_eq!(reparsed, triplets, "surface: {rendered}");
            }
        }
    }

    #[test]
    fn lexicon_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nouns.txt");
        std::fs::write(&path, "# extra nouns\nwine glass\n\ncell phone\n").unwrap();
        let lex = Lexicon::load(&path).unwrap();
        let got = parse_prompt("a wine glass left of a cell phone", &lex).unwrap();
        assert_eq!(got[0].subject, "wine glass");
        assert_eq!(got[0].object, "cell phone");
    }
}
