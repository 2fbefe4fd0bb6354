//! Closed vocabulary of the synthetic query templates.

pub const VOCAB: [&str; 36] = [
    "<unk>",
    "the",
    "a",
    "find",
    "locate",
    "show",
    "me",
    "track",
    "red",
    "green",
    "blue",
    "square",
    "box",
    "circle",
    "ball",
    "triangle",
    "that",
    "which",
    "appears",
    "shows",
    "up",
    "pops",
    "in",
    "changes",
    "direction",
    "turns",
    "around",
    "reverses",
    "overlaps",
    "touches",
    "crosses",
    "another",
    "shape",
    "object",
    "one",
    "briefly",
];

pub fn token_id(word: &str) -> Option<usize> {
    VOCAB.iter().position(|w| *w == word)
}

/// Whitespace tokenization; unknown words map to `<unk>`.
pub fn encode(text: &str) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| token_id(&w.to_ascii_lowercase()).unwrap_or(0))
        .collect()
}

pub fn decode(ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| VOCAB.get(i).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}
