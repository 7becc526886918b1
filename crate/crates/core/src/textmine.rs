//! Sentence tokenization, lemmatization, and whole-word lexicon matching.
//!
//! A bookmarked report sentence is tokenized, each token is reduced to its
//! base form, and maximal contiguous lemma sequences are matched against the
//! ontology's synonym index. Matched labels are expanded through the parent
//! hierarchy to produce the final label vector.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::ontology::{LabelId, LabelVector, Ontology};

/// Literal marker used in reports for the lesion hyperlink.
pub const BOOKMARK_TOKEN: &str = "BOOKMARK";

/// A report sentence plus the character spans of any bookmark markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub text: String,
    pub bookmark_spans: Vec<Range<usize>>,
}

impl Sentence {
    /// Wraps raw sentence text, locating literal `BOOKMARK` markers.
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let bookmark_spans = text
            .match_indices(BOOKMARK_TOKEN)
            .map(|(start, m)| start..start + m.len())
            .collect();
        Sentence {
            text,
            bookmark_spans,
        }
    }
}

/// One sentence token. `lemma` is empty until [`lemmatize_tokens`] has run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub lemma: String,
    pub char_span: Range<usize>,
}

/// Labels matched in a token sequence, with the token ranges that produced
/// them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub label_ids: BTreeSet<LabelId>,
    pub matches: Vec<(LabelId, Range<usize>)>,
}

/// Splits text into word tokens. Tokens are maximal alphanumeric runs; a `.`
/// is kept inside a token only when flanked by digits (so `2.1-cm` yields
/// `2.1` and `cm`). Punctuation produces no tokens. Lemmas are left unset.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut tokens = Vec::new();
    let mut start: Option<usize> = None;

    let flush = |tokens: &mut Vec<Token>, start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            tokens.push(Token {
                surface: text[s..end].to_string(),
                lemma: String::new(),
                char_span: s..end,
            });
        }
    };

    for (i, &(pos, c)) in chars.iter().enumerate() {
        let in_token = if c.is_alphanumeric() {
            true
        } else if c == '.' {
            // decimal point inside a number
            let prev_digit = i > 0 && chars[i - 1].1.is_ascii_digit();
            let next_digit = i + 1 < chars.len() && chars[i + 1].1.is_ascii_digit();
            start.is_some() && prev_digit && next_digit
        } else {
            false
        };
        if in_token {
            start.get_or_insert(pos);
        } else {
            flush(&mut tokens, &mut start, pos);
        }
    }
    flush(&mut tokens, &mut start, text.len());
    tokens
}

/// Irregular plurals looked up before the suffix rules. Every value is a
/// fixed point of `lemmatize`.
const LEMMA_EXCEPTIONS: &[(&str, &str)] = &[
    ("masses", "mass"),
    ("metastases", "metastasis"),
    ("calcifications", "calcification"),
    ("abscesses", "abscess"),
    ("diagnoses", "diagnosis"),
    ("foci", "focus"),
    ("vertebrae", "vertebra"),
    ("bronchi", "bronchus"),
    ("calculi", "calculus"),
    ("diverticula", "diverticulum"),
    ("ganglia", "ganglion"),
    ("pancreas", "pancreas"),
    ("series", "series"),
];

/// Reduces a word to its base form: lowercase, exception table, then ordered
/// suffix rules (`-ies` -> `-y`; `-es` after a sibilant; bare `-s`).
/// Deterministic and idempotent; tokens containing digits pass through
/// lowercased.
pub fn lemmatize(word: &str) -> String {
    let lower = word.to_lowercase();
    if lower.chars().any(|c| c.is_ascii_digit()) {
        return lower;
    }
    for &(surface, lemma) in LEMMA_EXCEPTIONS {
        if lower == surface {
            return lemma.to_string();
        }
    }
    let n = lower.len();
    if n > 4 && lower.ends_with("ies") {
        return format!("{}y", &lower[..n - 3]);
    }
    if n > 3 && lower.ends_with("es") {
        let stem = &lower[..n - 2];
        if stem.ends_with('s')
            || stem.ends_with('x')
            || stem.ends_with('z')
            || stem.ends_with("ch")
            || stem.ends_with("sh")
        {
            return stem.to_string();
        }
    }
    if n > 3
        && lower.ends_with('s')
        && !lower.ends_with("ss")
        && !lower.ends_with("us")
        && !lower.ends_with("is")
    {
        return lower[..n - 1].to_string();
    }
    lower
}

/// Fills in the lemma of every token.
pub fn lemmatize_tokens(mut tokens: Vec<Token>) -> Vec<Token> {
    for tok in &mut tokens {
        tok.lemma = lemmatize(&tok.surface);
    }
    tokens
}

/// Canonical form of a lexicon term: tokenize, lemmatize, join with single
/// spaces. Both lexicon entries and sentence token windows are reduced to
/// this form, so matching survives case, punctuation, and inflection.
pub fn canonical_term(term: &str) -> String {
    tokenize(term)
        .iter()
        .map(|t| lemmatize(&t.surface))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Matches lemmatized tokens against the ontology's synonym index.
///
/// Scans left to right; at each position the longest window equal to a
/// synonym wins and the scan resumes after it. Synonyms of one label merge
/// into a single id.
pub fn match_labels(tokens: &[Token], ontology: &Ontology) -> MatchResult {
    let lemmas: Vec<&str> = tokens.iter().map(|t| t.lemma.as_str()).collect();
    let mut result = MatchResult::default();
    let max_window = ontology.max_synonym_tokens().max(1);

    let mut pos = 0;
    while pos < lemmas.len() {
        let mut advanced = false;
        let longest = max_window.min(lemmas.len() - pos);
        for width in (1..=longest).rev() {
            let key = lemmas[pos..pos + width].join(" ");
            if let Some(id) = ontology.lookup_synonym(&key) {
                result.label_ids.insert(id);
                result.matches.push((id, pos..pos + width));
                pos += width;
                advanced = true;
                break;
            }
        }
        if !advanced {
            pos += 1;
        }
    }
    result
}

/// Mines a sentence into a K-dimensional binary label vector: tokenize,
/// lemmatize, match, then close the matched set under the parent hierarchy.
pub fn mine_sentence(sentence: &Sentence, ontology: &Ontology) -> LabelVector {
    let ids = mine_label_set(sentence, ontology);
    ontology.to_vector(&ids)
}

/// Same as [`mine_sentence`] but returns the expanded id set.
pub fn mine_label_set(sentence: &Sentence, ontology: &Ontology) -> BTreeSet<LabelId> {
    let tokens = lemmatize_tokens(tokenize(&sentence.text));
    let matched = match_labels(&tokens, ontology);
    ontology.expand(matched.label_ids.iter().copied())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::test_support::demo_ontology;

    fn surfaces(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    #[test]
    fn tokenize_empty_text() {
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn tokenize_bookmarked_sentence() {
        let toks = tokenize("Spiculated nodule, right lower lobe (BOOKMARK).");
        assert_eq!(
            surfaces(&toks),
            vec!["Spiculated", "nodule", "right", "lower", "lobe", "BOOKMARK"]
        );
    }

    #[test]
    fn tokenize_keeps_decimal_numbers_and_splits_hyphens() {
        let toks = tokenize("2.1-cm mass");
        assert_eq!(surfaces(&toks), vec!["2.1", "cm", "mass"]);
    }

    #[test]
    fn tokenize_spans_reconstruct_substrings() {
        let text = "Left upper lobe lung nodule (BOOKMARK).";
        for tok in tokenize(text) {
            assert_eq!(&text[tok.char_span.clone()], tok.surface);
        }
    }

    #[test]
    fn tokenize_trailing_period_not_part_of_number() {
        let toks = tokenize("measures 3. Stable.");
        assert_eq!(surfaces(&toks), vec!["measures", "3", "Stable"]);
    }

    #[test]
    fn lemmatize_plain_plural() {
        assert_eq!(lemmatize("nodules"), "nodule");
    }

    #[test]
    fn lemmatize_sibilant_es() {
        assert_eq!(lemmatize("masses"), "mass");
        assert_eq!(lemmatize("abscesses"), "abscess");
    }

    #[test]
    fn lemmatize_fixed_points() {
        assert_eq!(lemmatize("liver"), "liver");
        assert_eq!(lemmatize("pancreas"), "pancreas");
        assert_eq!(lemmatize("mass"), "mass");
    }

    #[test]
    fn lemmatize_ies_rule() {
        assert_eq!(lemmatize("opacities"), "opacity");
    }

    #[test]
    fn lemmatize_exception_table() {
        assert_eq!(lemmatize("metastases"), "metastasis");
        assert_eq!(lemmatize("calcifications"), "calcification");
    }

    #[test]
    fn lemmatize_is_idempotent() {
        for word in [
            "nodules",
            "masses",
            "opacities",
            "metastases",
            "lymph",
            "ggo",
            "2.1",
            "foci",
            "bronchi",
            "boxes",
        ] {
            let once = lemmatize(word);
            assert_eq!(lemmatize(&once), once, "not idempotent for {word:?}");
        }
    }

    #[test]
    fn sentence_records_bookmark_spans() {
        let s = Sentence::new("nodule (BOOKMARK) stable");
        assert_eq!(s.bookmark_spans.len(), 1);
        assert_eq!(&s.text[s.bookmark_spans[0].clone()], "BOOKMARK");
    }

    #[test]
    fn match_longest_wins_over_components() {
        // demo ontology: chest, lung(chest), nodule, lung nodule(lung,nodule), liver syn hepatic
        let o = demo_ontology();
        let toks = lemmatize_tokens(tokenize("lung nodule"));
        let m = match_labels(&toks, &o);
        let names: Vec<&str> = m.label_ids.iter().map(|&i| o.label(i).name.as_str()).collect();
        assert_eq!(names, vec!["lung nodule"]);
        assert_eq!(m.matches, vec![(3, 0..2)]);
    }

    #[test]
    fn match_later_standalone_token_still_matches() {
        let o = demo_ontology();
        let toks = lemmatize_tokens(tokenize("lung nodule with second nodule"));
        let m = match_labels(&toks, &o);
        let names: Vec<&str> = m.label_ids.iter().map(|&i| o.label(i).name.as_str()).collect();
        assert_eq!(names, vec!["nodule", "lung nodule"]);
    }

    #[test]
    fn match_nothing_in_plain_text() {
        let o = demo_ontology();
        let toks = lemmatize_tokens(tokenize("the patient is doing well"));
        assert!(match_labels(&toks, &o).label_ids.is_empty());
    }

    #[test]
    fn mine_paper_expansion_example() {
        let o = demo_ontology();
        let v = mine_sentence(&Sentence::new("Left upper lobe lung nodule (BOOKMARK)"), &o);
        let names: Vec<&str> = v
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(i, _)| o.label(i).name.as_str())
            .collect();
        assert_eq!(names, vec!["chest", "lung", "nodule", "lung nodule"]);
    }

    #[test]
    fn mine_empty_sentence_is_zero_vector() {
        let o = demo_ontology();
        let v = mine_sentence(&Sentence::new(""), &o);
        assert!(v.iter().all(|&b| !b));
    }

    #[test]
    fn mine_synonym_expands_like_name() {
        let o = demo_ontology();
        let via_syn = mine_label_set(&Sentence::new("hepatic lesion (BOOKMARK)"), &o);
        let via_name = mine_label_set(&Sentence::new("liver lesion (BOOKMARK)"), &o);
        assert_eq!(via_syn, via_name);
        assert!(!via_syn.is_empty());
    }

    #[test]
    fn mining_is_case_insensitive() {
        let o = demo_ontology();
        let lower = mine_sentence(&Sentence::new("lung nodule (BOOKMARK)"), &o);
        let upper = mine_sentence(&Sentence::new("LUNG NODULE (BOOKMARK)"), &o);
        assert_eq!(lower, upper);
    }
}
