//! Shared text primitives: the deterministic tokenizer and term normalization.
//!
//! Every module that touches free text (lexicon matching, readability,
//! response-length metrics) goes through these two functions so that word
//! counts agree across the toolkit.

/// A token produced by [`tokenize`]: the lowercased text plus its byte span
/// in the original input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits text into lowercase alphanumeric runs.
///
/// Punctuation is dropped, so `"x-ray"` tokenizes to `["x", "ray"]` and
/// `"Don't"` to `["don", "t"]`. The rule is intentionally simple and frozen;
/// golden tests pin its behavior.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut start = 0usize;
    for (idx, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            if current.is_empty() {
                start = idx;
            }
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(Token {
                text: std::mem::take(&mut current),
                start,
                end: idx,
            });
        }
    }
    if !current.is_empty() {
        tokens.push(Token {
            text: current,
            start,
            end: text.len(),
        });
    }
    tokens
}

/// Counts words exactly as [`tokenize`] would without allocating spans.
pub fn word_count(text: &str) -> usize {
    let mut count = 0usize;
    let mut in_token = false;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if !in_token {
                count += 1;
                in_token = true;
            }
        } else {
            in_token = false;
        }
    }
    count
}

/// Normalizes a concept display name for lexicon keys: hyphens become
/// spaces, everything is lowercased, and whitespace collapses to single
/// spaces.
///
/// `"Post-Traumatic  Stress"` normalizes to `"post traumatic stress"`,
/// which matches what [`tokenize`] yields for the same surface form.
pub fn normalize_term(term: &str) -> String {
    let replaced: String = term
        .chars()
        .map(|c| if c == '-' || c == '–' { ' ' } else { c })
        .collect();
    let tokens: Vec<String> = tokenize(&replaced).into_iter().map(|t| t.text).collect();
    tokens.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_strips_punctuation_and_lowercases() {
        let toks = tokenize("I take Prozac, 20mg daily!");
        let texts: Vec<&str> = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, vec!["i", "take", "prozac", "20mg", "daily"]);
    }

    #[test]
    fn tokenize_records_byte_spans() {
        let toks = tokenize("a bc");
        assert_eq!(toks[0].start, 0);
        assert_eq!(toks[0].end, 1);
        assert_eq!(toks[1].start, 2);
        assert_eq!(toks[1].end, 4);
    }

    #[test]
    fn empty_text_yields_no_tokens() {
        assert!(tokenize("").is_empty());
        assert_eq!(word_count("  ...  "), 0);
    }

    #[test]
    fn word_count_agrees_with_tokenize() {
        for text in ["", "one", "two words", "x-ray done. next, item?", "a  b\tc\nd"] {
            assert_eq!(word_count(text), tokenize(text).len(), "text={text:?}");
        }
    }

    #[test]
    fn normalize_drops_hyphens_and_collapses_whitespace() {
        assert_eq!(
            normalize_term("Post-Traumatic  Stress Disorder"),
            "post traumatic stress disorder"
        );
        assert_eq!(normalize_term("X-Ray"), "x ray");
    }
}
