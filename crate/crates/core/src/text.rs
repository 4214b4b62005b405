//! Whitespace/punctuation tokenizer with character offsets.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Digit,
    Capitalized,
    Lower,
    Punct,
}

impl Shape {
    pub fn of(word: &str) -> Shape {
        let mut chars = word.chars();
        match chars.next() {
            None => Shape::Punct,
            Some(c) if c.is_ascii_digit() => {
                if word.chars().all(|c| c.is_ascii_digit()) {
                    Shape::Digit
                } else {
                    Shape::Lower
                }
            }
            Some(c) if c.is_uppercase() => Shape::Capitalized,
            Some(c) if c.is_alphanumeric() => Shape::Lower,
            Some(_) => Shape::Punct,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Shape::Digit => "digit",
            Shape::Capitalized => "cap",
            Shape::Lower => "lower",
            Shape::Punct => "punct",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub lower: String,
    /// Character offsets `[start, end)` into the source text.
    pub start: usize,
    pub end: usize,
    pub shape: Shape,
}

/// Split into alphanumeric runs (apostrophes allowed inside) and single
/// punctuation characters; whitespace separates.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_alphanumeric() {
            i += 1;
            while i < chars.len()
                && (chars[i].is_alphanumeric()
                    || (chars[i] == '\'' && i + 1 < chars.len() && chars[i + 1].is_alphanumeric()))
            {
                i += 1;
            }
        } else {
            i += 1;
        }
        let word: String = chars[start..i].iter().collect();
        out.push(Token {
            lower: word.to_lowercase(),
            shape: Shape::of(&word),
            text: word,
            start,
            end: i,
        });
    }
    out
}

/// Token index range `[first, last]` covering a character span, if any
/// token overlaps it.
pub fn span_to_tokens(tokens: &[Token], char_start: usize, char_end: usize) -> Option<(usize, usize)> {
    let first = tokens.iter().position(|t| t.end > char_start && t.start < char_end)?;
    let last = tokens.iter().rposition(|t| t.end > char_start && t.start < char_end)?;
    Some((first, last))
}

pub fn is_sentence_end(tok: &Token) -> bool {
    matches!(tok.text.as_str(), "." | "?" | "!")
}

/// Token index range `[start, end)` of the sentence containing token `i`,
/// excluding its terminating punctuation.
pub fn sentence_bounds(tokens: &[Token], i: usize) -> (usize, usize) {
    let start = tokens[..i].iter().rposition(is_sentence_end).map_or(0, |p| p + 1);
    let end = tokens[i..].iter().position(is_sentence_end).map_or(tokens.len(), |p| i + p);
    (start, end)
}

/// Lowercased content tokens of a question (punctuation dropped, deduplicated,
/// first-occurrence order).
pub fn question_words(question: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in tokenize(question) {
        if t.shape != Shape::Punct && !out.contains(&t.lower) {
            out.push(t.lower);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_and_shapes() {
        let toks = tokenize("Marie was born in 1850, in Lyon's east.");
        let words: Vec<&str> = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(words, ["Marie", "was", "born", "in", "1850", ",", "in", "Lyon's", "east", "."]);
        assert_eq!((toks[4].start, toks[4].end), (18, 22));
        assert_eq!(toks[0].shape, Shape::Capitalized);
        assert_eq!(toks[4].shape, Shape::Digit);
        assert_eq!(toks[5].shape, Shape::Punct);
    }

    #[test]
    fn span_mapping() {
        let toks = tokenize("The Red River flows.");
        assert_eq!(span_to_tokens(&toks, 4, 13), Some((1, 2)));
        assert_eq!(span_to_tokens(&toks, 3, 4), None);
    }

    #[test]
    fn sentences() {
        let toks = tokenize("A b. C d e. F");
        assert_eq!(sentence_bounds(&toks, 4), (3, 6));
        assert_eq!(sentence_bounds(&toks, 0), (0, 2));
        assert_eq!(sentence_bounds(&toks, 7), (7, 8));
    }
}
