//! Analytic instruction grounding: an exact lexicon matcher over the
//! generator vocabulary plus frame-0 projection, standing in for a learned
//! open-vocabulary detector. Ambiguity is an error, never a guess.

use super::{Bbox, EpisodeRecord, Result, SceneError};

const COLOR_WORDS: [&str; 8] =
    ["red", "green", "blue", "yellow", "purple", "orange", "white", "gray"];
const LABEL_WORDS: [&str; 10] =
    ["cube", "ball", "block", "can", "cup", "bowl", "lid", "pot", "box", "drawer"];

#[derive(Debug, Clone, PartialEq)]
struct Phrase {
    color: Option<String>,
    label: String,
}

impl Phrase {
    fn text(&self) -> String {
        match &self.color {
            Some(c) => format!("{c} {}", self.label),
            None => self.label.clone(),
        }
    }
}

/// Result of grounding: pixel boxes plus the matched object indices.
#[derive(Debug, Clone, Copy)]
pub struct Grounding {
    pub boxes: (Bbox, Bbox),
    pub objects: (usize, usize),
}

/// Ground an instruction against frame 0: the first two distinct noun
/// phrases that match graspable objects become streams 1 and 2.
pub fn ground_targets(ep: &EpisodeRecord, instruction: &str) -> Result<Grounding> {
    let phrases = parse_phrases(instruction);
    let mut targets: Vec<usize> = Vec::new();
    for phrase in &phrases {
        let matches: Vec<usize> = ep
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| {
                o.label == phrase.label
                    && phrase.color.as_ref().map_or(true, |c| &o.color == c)
            })
            .map(|(i, _)| i)
            .collect();
        if matches.is_empty() {
            return Err(SceneError::UnknownNoun(phrase.text()));
        }
        if matches.len() > 1 {
            return Err(SceneError::AmbiguousGrounding(phrase.text()));
        }
        let idx = matches[0];
        if ep.objects[idx].graspable && !targets.contains(&idx) {
            targets.push(idx);
        }
    }
    if targets.len() < 2 {
        return Err(SceneError::InsufficientTargets);
    }
    let (a, b) = (targets[0], targets[1]);
    let ba = ep.projected_bbox(0, a).ok_or(SceneError::DegenerateBbox)?;
    let bb = ep.projected_bbox(0, b).ok_or(SceneError::DegenerateBbox)?;
    Ok(Grounding { boxes: (ba, bb), objects: (a, b) })
}

/// Spec-shaped surface: the pair of target boxes only.
pub fn ground_instruction(ep: &EpisodeRecord, instruction: &str) -> Result<(Bbox, Bbox)> {
    ground_targets(ep, instruction).map(|g| g.boxes)
}

fn parse_phrases(instruction: &str) -> Vec<Phrase> {
    let tokens: Vec<String> = instruction
        .to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
        .filter(|t| !t.is_empty())
        .collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if COLOR_WORDS.contains(&tokens[i].as_str())
            && i + 1 < tokens.len()
            && LABEL_WORDS.contains(&tokens[i + 1].as_str())
        {
            out.push(Phrase { color: Some(tokens[i].clone()), label: tokens[i + 1].clone() });
            i += 2;
        } else if LABEL_WORDS.contains(&tokens[i].as_str()) {
            out.push(Phrase { color: None, label: tokens[i].clone() });
            i += 1;
        } else {
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phrase_parsing_orders_and_pairs() {
        let ps = parse_phrases("Pack the red cube and the blue ball into the box.");
        assert_eq!(ps.len(), 3);
        assert_eq!(ps[0].text(), "red cube");
        assert_eq!(ps[1].text(), "blue ball");
        assert_eq!(ps[2].text(), "box");
    }
}
