//! Tokenization shared by the rubric, detectors and repair templates.

use std::collections::BTreeSet;

/// Lower-cased alphanumeric word tokens.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .map(|w| w.trim_matches('\'').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    tokens(text).into_iter().collect()
}

/// Number of distinct tokens two texts share.
pub fn overlap(a: &str, b: &str) -> usize {
    let a = token_set(a);
    token_set(b).iter().filter(|t| a.contains(*t)).count()
}

pub fn contains_any(text: &str, lexicon: &[String]) -> bool {
    let toks = token_set(text);
    lexicon.iter().any(|w| toks.contains(&w.to_lowercase()))
}

/// Whitespace token count, used for text-length features and token counts.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Rewrites whitespace-separated words. `f` sees the lower-cased core of
/// each word (surrounding punctuation stripped) and may return a
/// replacement; an empty replacement drops the word. Capitalization of the
/// first letter is carried over.
pub fn rewrite_words(text: &str, f: impl Fn(&str) -> Option<String>) -> String {
    let mut out: Vec<String> = Vec::new();
    for word in text.split_whitespace() {
        let core = word.trim_matches(|c: char| !c.is_alphanumeric());
        let Some(replacement) = (!core.is_empty()).then(|| f(&core.to_lowercase())).flatten() else {
            out.push(word.to_string());
            continue;
        };
        let start = word.find(core).expect("core is a substring");
        let (prefix, suffix) = (&word[..start], &word[start + core.len()..]);
        let replacement = if core.starts_with(char::is_uppercase) {
            let mut cs = replacement.chars();
            cs.next()
                .map(|c| c.to_uppercase().chain(cs).collect())
                .unwrap_or_default()
        } else {
            replacement
        };
        let rebuilt = format!("{prefix}{replacement}{suffix}");
        if !rebuilt.is_empty() {
            out.push(rebuilt);
        }
    }
    out.join(" ")
}
