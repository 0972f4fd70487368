//! Fixed symbol vocabulary shared by captions and the knowledge table.

use serde::{Deserialize, Serialize};

pub type TokenId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Circle,
    Triangle,
    Square,
    Pentagon,
    Hexagon,
    Octagon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Color {
    Red,
    Orange,
    Yellow,
    Green,
    Blue,
    Purple,
    Pink,
    White,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Circle,
        Shape::Triangle,
        Shape::Square,
        Shape::Pentagon,
        Shape::Hexagon,
        Shape::Octagon,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Number of straight sides; a circle has none.
    pub fn sides(self) -> u8 {
        match self {
            Shape::Circle => 0,
            Shape::Triangle => 3,
            Shape::Square => 4,
            Shape::Pentagon => 5,
            Shape::Hexagon => 6,
            Shape::Octagon => 8,
        }
    }

    pub fn token(self) -> TokenId {
        SHAPE_BASE + self.index()
    }
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Orange,
        Color::Yellow,
        Color::Green,
        Color::Blue,
        Color::Purple,
        Color::Pink,
        Color::White,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn token(self) -> TokenId {
        COLOR_BASE + self.index()
    }
}

/// Digit tokens occupy ids `0..=9`.
pub fn digit(d: u8) -> TokenId {
    debug_assert!(d <= 9);
    d as TokenId
}

const SHAPE_BASE: TokenId = 10;
const COLOR_BASE: TokenId = 16;

/// Every word in the vocabulary, indexed by token id.
pub const WORDS: &[&str] = &[
    // 0..=9
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
    // 10..=15
    "circle", "triangle", "square", "pentagon", "hexagon", "octagon",
    // 16..=23
    "red", "orange", "yellow", "green", "blue", "purple", "pink", "white",
    // 24.. function words
    "and", "with", "plus", "sides", "shape", "shaped", "like", "a", "the", "of", "colored",
    "in", "color", "as", "many",
    // tools
    "wheel", "wedge", "tile", "shield", "nut", "umbrella",
    // landmarks
    "moon", "pyramid", "chessboard", "starfish", "honeycomb", "stopsign",
    // scenes
    "fire", "sunset", "sun", "grass", "sky", "lavender", "flamingo", "snow",
    // concepts
    "luck", "harvest", "joy", "nature", "calm", "royalty", "love", "peace",
    // counted things
    "unicycle", "bicycle", "tricycle", "car", "hand", "insect", "week", "spider", "cat",
];

pub fn vocab_len() -> usize {
    WORDS.len()
}

/// Token id for `word`; panics on words outside the fixed vocabulary.
pub fn tok(word: &str) -> TokenId {
    lookup(word).unwrap_or_else(|| panic!("'{word}' is not in the vocabulary"))
}

pub fn lookup(word: &str) -> Option<TokenId> {
    WORDS.iter().position(|w| *w == word)
}

pub fn word(id: TokenId) -> Option<&'static str> {
    WORDS.get(id).copied()
}

pub fn render(tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|&t| word(t).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attribute_tokens_line_up_with_words() {
        for s in Shape::ALL {
            assert_eq!(word(s.token()).unwrap(), format!("{s:?}").to_lowercase());
        }
        for c in Color::ALL {
            assert_eq!(word(c.token()).unwrap(), format!("{c:?}").to_lowercase());
        }
        assert_eq!(word(digit(7)), Some("seven"));
    }

    #[test]
    fn words_are_unique_and_fit_the_backbone() {
        let mut sorted = WORDS.to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), WORDS.len());
        assert!(vocab_len() <= 256);
    }
}
