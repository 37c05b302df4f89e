//! Syntactic-parse providers.
//!
//! The entity grouper only needs, per word: a head index, a dependency
//! label and a coarse part of speech. Any dependency parser can sit behind
//! [`ParseProvider`]; the crate ships a deterministic rule-based provider
//! tuned for the noun-phrase prompts this pipeline targets, plus a
//! provider that replays parses produced offline by an external parser.

use std::collections::HashMap;

use serde::Deserialize;

use crate::token::split_words;

use super::ParseError;

/// Coarse part-of-speech tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosTag {
    Noun,
    Adjective,
    Determiner,
    /// Prepositions ("with", "of") and relational participles ("wearing").
    Relation,
    Conjunction,
    Other,
}

/// Dependency label, reduced to what grouping needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepLabel {
    /// Sentence head or a conjoined entity noun.
    Root,
    /// Adjectival or compound modifier of a noun.
    Modifier,
    /// Preposition/participle attached to an entity noun.
    Relation,
    /// Object noun inside a relation phrase.
    RelObject,
    /// Determiner attached to its noun.
    Det,
    /// Coordinating conjunction.
    Cc,
    Other,
}

/// One parsed word: surface form, character span, attachment.
#[derive(Debug, Clone)]
pub struct ParsedWord {
    pub text: String,
    /// Byte offset of the word in the prompt.
    pub start: usize,
    pub end: usize,
    /// Index of the head word in the parse (self for the root).
    pub head: usize,
    pub label: DepLabel,
    pub pos: PosTag,
}

/// Word-level dependency parse of a prompt.
pub trait ParseProvider {
    fn parse(&self, prompt: &str) -> Result<Vec<ParsedWord>, ParseError>;
    /// Provider identity + version; identical versions must produce
    /// identical parses for identical prompts.
    fn version(&self) -> &str;
}

const DETERMINERS: &[&str] = &["a", "an", "the", "one", "two", "three", "some", "its", "his", "her"];
const PREPOSITIONS: &[&str] = &["with", "of", "in", "on", "at", "under", "over", "beside", "near"];
const PARTICIPLES: &[&str] = &[
    "wearing", "holding", "carrying", "riding", "eating", "drinking", "reading", "playing",
    "sitting", "standing", "having",
];
const CONJUNCTIONS: &[&str] = &["and", "or"];
const ADJECTIVES: &[&str] = &[
    // colors
    "red", "blue", "green", "yellow", "purple", "orange", "pink", "black", "white", "brown",
    "gray", "grey", "golden", "silver",
    // size / shape
    "big", "small", "large", "tiny", "long", "short", "round", "square", "curved",
    // material / texture
    "wooden", "metal", "metallic", "plastic", "glass", "leather", "fluffy", "furry", "shiny",
    "soft", "rough", "smooth", "striped", "spotted", "checkered",
];

/// Deterministic rule-based dependency parse for entity/attribute prompts.
///
/// Closed-class words (determiners, prepositions, participles,
/// conjunctions) are recognized by lexicon; within each remaining run of
/// content words the last word is the noun head and the preceding ones its
/// modifiers. The first noun after sentence start or after a conjunction
/// is an entity noun; relation phrases ("wearing glasses", "with a hat")
/// attach to the nearest preceding entity noun.
#[derive(Debug, Default, Clone)]
pub struct HeuristicProvider;

impl HeuristicProvider {
    fn tag(word: &str) -> PosTag {
        if DETERMINERS.contains(&word) {
            PosTag::Determiner
        } else if PREPOSITIONS.contains(&word) || PARTICIPLES.contains(&word) {
            PosTag::Relation
        } else if CONJUNCTIONS.contains(&word) {
            PosTag::Conjunction
        } else if ADJECTIVES.contains(&word) {
            PosTag::Adjective
        } else {
            PosTag::Noun
        }
    }
}

impl ParseProvider for HeuristicProvider {
    fn parse(&self, prompt: &str) -> Result<Vec<ParsedWord>, ParseError> {
        let spans = split_words(prompt);
        if spans.is_empty() {
            return Err(ParseError::EmptyPrompt);
        }
        let words: Vec<String> = spans
            .iter()
            .map(|&(s, e)| prompt[s..e].to_lowercase())
            .collect();
        let tags: Vec<PosTag> = words.iter().map(|w| Self::tag(w)).collect();

        let mut out: Vec<ParsedWord> = words
            .iter()
            .zip(&spans)
            .zip(&tags)
            .map(|((text, &(start, end)), &pos)| ParsedWord {
                text: text.clone(),
                start,
                end,
                head: 0,
                label: DepLabel::Other,
                pos,
            })
            .collect();

        // Noun-chunk pass: in each run of content words (nouns/adjectives),
        // the last word heads the run.
        let mut chunk_head: Vec<Option<usize>> = vec![None; out.len()];
        let mut i = 0;
        while i < out.len() {
            if matches!(tags[i], PosTag::Noun | PosTag::Adjective) {
                let mut j = i;
                while j + 1 < out.len() && matches!(tags[j + 1], PosTag::Noun | PosTag::Adjective) {
                    j += 1;
                }
                for k in i..=j {
                    chunk_head[k] = Some(j);
                    if k != j {
                        out[k].head = j;
                        out[k].label = DepLabel::Modifier;
                    }
                }
                // Even if the lexicon tagged it Adjective, a run head acts
                // as the chunk's noun.
                out[j].pos = PosTag::Noun;
                i = j + 1;
            } else {
                i = i + 1;
            }
        }

        // Attachment pass, left to right.
        let mut current_entity: Option<usize> = None;
        let mut open_relation: Option<usize> = None;
        let mut entity_expected = true; // next chunk head becomes an entity
        for i in 0..out.len() {
            match tags[i] {
                PosTag::Conjunction => {
                    out[i].label = DepLabel::Cc;
                    out[i].head = current_entity.unwrap_or(i);
                    entity_expected = true;
                    open_relation = None;
                }
                PosTag::Determiner => {
                    // Attach to the next chunk head, if any.
                    let head = (i + 1..out.len()).find_map(|k| {
                        chunk_head[k].filter(|_| {
                            // stop at the first chunk after this determiner
                            (i + 1..k).all(|m| {
                                matches!(tags[m], PosTag::Noun | PosTag::Adjective)
                            })
                        })
                    });
                    out[i].label = DepLabel::Det;
                    out[i].head = head.unwrap_or(i);
                }
                PosTag::Relation => {
                    if let Some(entity) = current_entity {
                        out[i].label = DepLabel::Relation;
                        out[i].head = entity;
                        open_relation = Some(i);
                        entity_expected = false;
                    } else {
                        out[i].label = DepLabel::Other;
                        out[i].head = i;
                    }
                }
                PosTag::Noun | PosTag::Adjective => {
                    if chunk_head[i] == Some(i) {
                        if entity_expected || current_entity.is_none() {
                            out[i].label = DepLabel::Root;
                            out[i].head = i;
                            current_entity = Some(i);
                            entity_expected = false;
                        } else if let Some(rel) = open_relation {
                            out[i].label = DepLabel::RelObject;
                            out[i].head = rel;
                        } else {
                            // Content chunk with no attachment point; treat
                            // as a fresh entity rather than dropping it.
                            out[i].label = DepLabel::Root;
                            out[i].head = i;
                            current_entity = Some(i);
                        }
                    }
                }
                PosTag::Other => {
                    out[i].head = i;
                }
            }
        }
        Ok(out)
    }

    fn version(&self) -> &str {
        "heuristic/1"
    }
}

#[derive(Debug, Deserialize)]
struct ExternalWord {
    text: String,
    start: usize,
    end: usize,
    head: usize,
    label: String,
    pos: String,
}

/// Replays parses produced by an external dependency parser.
///
/// Expects one JSON document per prompt of the form
/// `[{"text","start","end","head","label","pos"}, ...]` with Universal
/// Dependencies style labels (`amod`, `compound`, `prep`/`acl`, `pobj`,
/// `det`, `cc`, `ROOT`, `conj`) and coarse POS tags (`NOUN`, `ADJ`,
/// `DET`, `ADP`, `VERB`, `CCONJ`). This lets a mainstream parser run once
/// offline and drive the grouper byte-for-byte reproducibly.
#[derive(Debug, Default)]
pub struct ExternalParseProvider {
    parses: HashMap<String, Vec<ParsedWord>>,
    version: String,
}

impl ExternalParseProvider {
    pub fn new(version: impl Into<String>) -> Self {
        Self {
            parses: HashMap::new(),
            version: version.into(),
        }
    }

    /// Registers the external parse JSON for `prompt`.
    pub fn insert_json(&mut self, prompt: &str, json: &str) -> Result<(), ParseError> {
        let words: Vec<ExternalWord> = serde_json::from_str(json)
            .map_err(|e| ParseError::Provider(format!("bad parse document: {e}")))?;
        let converted = words
            .into_iter()
            .map(|w| ParsedWord {
                head: w.head,
                label: match w.label.as_str() {
                    "ROOT" | "root" => DepLabel::Root,
                    "conj" => DepLabel::Root,
                    "amod" | "compound" | "nmod" => DepLabel::Modifier,
                    "prep" | "acl" | "case" => DepLabel::Relation,
                    "pobj" | "obj" | "dobj" => DepLabel::RelObject,
                    "det" => DepLabel::Det,
                    "cc" => DepLabel::Cc,
                    _ => DepLabel::Other,
                },
                pos: match w.pos.as_str() {
                    "NOUN" | "PROPN" => PosTag::Noun,
                    "ADJ" => PosTag::Adjective,
                    "DET" => PosTag::Determiner,
                    "ADP" | "VERB" => PosTag::Relation,
                    "CCONJ" => PosTag::Conjunction,
                    _ => PosTag::Other,
                },
                text: w.text,
                start: w.start,
                end: w.end,
            })
            .collect();
        self.parses.insert(prompt.to_string(), converted);
        Ok(())
    }
}

impl ParseProvider for ExternalParseProvider {
    fn parse(&self, prompt: &str) -> Result<Vec<ParsedWord>, ParseError> {
        self.parses
            .get(prompt)
            .cloned()
            .ok_or_else(|| ParseError::Provider(format!("no registered parse for {prompt:?}")))
    }

    fn version(&self) -> &str {
        &self.version
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(prompt: &str) -> Vec<(String, DepLabel)> {
        HeuristicProvider
            .parse(prompt)
            .unwrap()
            .into_iter()
            .map(|w| (w.text, w.label))
            .collect()
    }

    #[test]
    fn paper_example_attachment() {
        let words = HeuristicProvider
            .parse("a cat wearing glasses and a dog with a hat")
            .unwrap();
        let get = |t: &str| words.iter().find(|w| w.text == t).unwrap();
        assert_eq!(get("cat").label, DepLabel::Root);
        assert_eq!(get("dog").label, DepLabel::Root);
        assert_eq!(get("wearing").label, DepLabel::Relation);
        assert_eq!(words[get("wearing").head].text, "cat");
        assert_eq!(get("glasses").label, DepLabel::RelObject);
        assert_eq!(get("with").label, DepLabel::Relation);
        assert_eq!(words[get("with").head].text, "dog");
        assert_eq!(get("hat").label, DepLabel::RelObject);
        assert_eq!(get("and").label, DepLabel::Cc);
        // the second "a" belongs to dog, the third to hat
        assert_eq!(words[words[5].head].text, "dog");
        assert_eq!(words[words[8].head].text, "hat");
    }

    #[test]
    fn adjective_chunks() {
        let ws = labels("a red ball and a blue cube");
        assert_eq!(
            ws,
            vec![
                ("a".into(), DepLabel::Det),
                ("red".into(), DepLabel::Modifier),
                ("ball".into(), DepLabel::Root),
                ("and".into(), DepLabel::Cc),
                ("a".into(), DepLabel::Det),
                ("blue".into(), DepLabel::Modifier),
                ("cube".into(), DepLabel::Root),
            ]
        );
    }

    #[test]
    fn bare_noun() {
        let ws = labels("a dog");
        assert_eq!(
            ws,
            vec![("a".into(), DepLabel::Det), ("dog".into(), DepLabel::Root)]
        );
    }

    #[test]
    fn empty_prompt_is_error() {
        assert!(matches!(
            HeuristicProvider.parse("  "),
            Err(ParseError::EmptyPrompt)
        ));
    }

    #[test]
    fn external_provider_roundtrip() {
        let mut p = ExternalParseProvider::new("spacy/en_core_web_sm-3.7");
        p.insert_json(
            "a dog",
            r#"[{"text":"a","start":0,"end":1,"head":1,"label":"det","pos":"DET"},
                {"text":"dog","start":2,"end":5,"head":1,"label":"ROOT","pos":"NOUN"}]"#,
        )
        .unwrap();
        let words = p.parse("a dog").unwrap();
        assert_eq!(words[1].label, DepLabel::Root);
        assert!(p.parse("unknown").is_err());
    }
}
