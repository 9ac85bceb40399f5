//! Trainable toy instruction encoder: whitespace tokenization over the
//! generator vocabulary plus a learned embedding table.

/// Closed vocabulary. Index 0 is the reserved UNK id; the table is a fixed
/// constant so checkpoints need no vocabulary section.
pub const VOCAB: [&str; 29] = [
    "<unk>", "and", "back", "ball", "block", "blue", "both", "box", "can", "cube", "cup",
    "drawer", "green", "inside", "into", "lid", "off", "open", "orange", "pack", "pot", "pour",
    "pull", "purple", "put", "red", "take", "the", "yellow",
];

pub fn vocab_size() -> usize {
    VOCAB.len()
}

pub fn token_id(word: &str) -> usize {
    VOCAB.iter().position(|w| *w == word).unwrap_or(0)
}

/// Lowercased, punctuation-stripped whitespace tokens mapped to ids.
/// Unknown words map to UNK (0). Deterministic.
pub fn tokenize(instruction: &str) -> Vec<usize> {
    instruction
        .to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(token_id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_sorted_and_unique() {
        for w in VOCAB.windows(2).skip(1) {
            assert!(w[0] < w[1], "{} !< {}", w[0], w[1]);
        }
    }

    #[test]
    fn unknown_maps_to_unk() {
        let ids = tokenize("Pack the zorble!");
        assert_eq!(ids, vec![token_id("pack"), token_id("the"), 0]);
    }

    #[test]
    fn generator_instructions_have_no_unk() {
        use crate::scene::{generate_episode, TaskTemplate};
        for template in TaskTemplate::ALL {
            for seed in 0..5 {
                let ep = generate_episode(template, seed).unwrap();
                let ids = tokenize(&ep.instruction);
                assert!(!ids.contains(&0), "UNK in {:?}", ep.instruction);
            }
        }
    }
}
