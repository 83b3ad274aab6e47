//! Closed word vocabulary for prompts and object labels.

use crate::error::{Error, Result};

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white",
];

pub const NULL_TOKEN: usize = 0;

/// `<null>`, the two function words, the shapes, then the colors.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v = vec!["<null>", "a", "and"];
    v.extend(SHAPES);
    v.extend(COLORS);
    v
}

pub fn vocab_size() -> usize {
    3 + SHAPES.len() + COLORS.len()
}

pub fn token_id(word: &str) -> Result<usize> {
    vocabulary()
        .iter()
        .position(|w| *w == word)
        .ok_or_else(|| Error::Vocabulary(word.to_string()))
}

pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let ids = text
        .split_whitespace()
        .map(token_id)
        .collect::<Result<Vec<_>>>()?;
    if ids.is_empty() {
        return Err(Error::Vocabulary(text.to_string()));
    }
    Ok(ids)
}

pub fn detokenize(ids: &[usize]) -> String {
    let v = vocabulary();
    ids.iter()
        .map(|&i| v.get(i).copied().unwrap_or("?"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// "a red circle and a blue square".
pub fn compose_prompt<S: AsRef<str>>(labels: &[S]) -> String {
    labels
        .iter()
        .map(|l| format!("a {}", l.as_ref()))
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Positions of `needle` inside `prompt`, searching from `from`; falls back to
/// `0..needle.len()` when it does not occur.
pub fn locate(prompt: &[usize], needle: &[usize], from: usize) -> Vec<usize> {
    if !needle.is_empty() && needle.len() <= prompt.len() {
        for start in from.min(prompt.len())..=prompt.len() - needle.len() {
            if prompt[start..start + needle.len()] == *needle {
                return (start..start + needle.len()).collect();
            }
        }
    }
    (0..needle.len()).collect()
}
