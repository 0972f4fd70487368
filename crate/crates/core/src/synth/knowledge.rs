//! Built-in fact table behind the reasoning-tier templates.
//!
//! Each dimension draws its clues from one relation in the table. The table
//! is versioned; dataset files record the version they were built with.

use serde::{Deserialize, Serialize};

use super::vocab::{tok, Color, Shape, TokenId};

pub const KNOWLEDGE_VERSION: &str = "kt-1";

/// The six reasoning categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dimension {
    ToolUtility,
    ContextualSpatial,
    Functional,
    CulturalSymbolic,
    Encyclopedic,
    LogicalMathematical,
}

impl Dimension {
    pub const ALL: [Dimension; 6] = [
        Dimension::ToolUtility,
        Dimension::ContextualSpatial,
        Dimension::Functional,
        Dimension::CulturalSymbolic,
        Dimension::Encyclopedic,
        Dimension::LogicalMathematical,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Dimension::ToolUtility => "tool-utility",
            Dimension::ContextualSpatial => "contextual-spatial",
            Dimension::Functional => "functional",
            Dimension::CulturalSymbolic => "cultural-symbolic",
            Dimension::Encyclopedic => "encyclopedic",
            Dimension::LogicalMathematical => "logical-mathematical",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeTable {
    pub version: String,
    /// "shaped like a wheel" → circle
    pub tools: Vec<(TokenId, Shape)>,
    /// "shape of the honeycomb" → hexagon
    pub landmarks: Vec<(TokenId, Shape)>,
    /// "colored like the sky" → blue
    pub scenes: Vec<(TokenId, Color)>,
    /// "in the color of luck" → red
    pub concepts: Vec<(TokenId, Color)>,
    /// "as many as spider" → 8
    pub counted: Vec<(TokenId, u8)>,
}

impl Default for KnowledgeTable {
    fn default() -> Self {
        let t = tok;
        KnowledgeTable {
            version: KNOWLEDGE_VERSION.to_string(),
            tools: vec![
                (t("wheel"), Shape::Circle),
                (t("wedge"), Shape::Triangle),
                (t("tile"), Shape::Square),
                (t("shield"), Shape::Pentagon),
                (t("nut"), Shape::Hexagon),
                (t("umbrella"), Shape::Octagon),
            ],
            landmarks: vec![
                (t("moon"), Shape::Circle),
                (t("pyramid"), Shape::Triangle),
                (t("chessboard"), Shape::Square),
                (t("starfish"), Shape::Pentagon),
                (t("honeycomb"), Shape::Hexagon),
                (t("stopsign"), Shape::Octagon),
            ],
            scenes: vec![
                (t("fire"), Color::Red),
                (t("sunset"), Color::Orange),
                (t("sun"), Color::Yellow),
                (t("grass"), Color::Green),
                (t("sky"), Color::Blue),
                (t("lavender"), Color::Purple),
                (t("flamingo"), Color::Pink),
                (t("snow"), Color::White),
            ],
            concepts: vec![
                (t("luck"), Color::Red),
                (t("harvest"), Color::Orange),
                (t("joy"), Color::Yellow),
                (t("nature"), Color::Green),
                (t("calm"), Color::Blue),
                (t("royalty"), Color::Purple),
                (t("love"), Color::Pink),
                (t("peace"), Color::White),
            ],
            counted: vec![
                (t("unicycle"), 1),
                (t("bicycle"), 2),
                (t("tricycle"), 3),
                (t("car"), 4),
                (t("hand"), 5),
                (t("insect"), 6),
                (t("week"), 7),
                (t("spider"), 8),
                (t("cat"), 9),
            ],
        }
    }
}

impl KnowledgeTable {
    pub fn tool_for(&self, s: Shape) -> Option<TokenId> {
        self.tools.iter().find(|(_, v)| *v == s).map(|(k, _)| *k)
    }

    pub fn landmark_for(&self, s: Shape) -> Option<TokenId> {
        self.landmarks.iter().find(|(_, v)| *v == s).map(|(k, _)| *k)
    }

    pub fn scene_for(&self, c: Color) -> Option<TokenId> {
        self.scenes.iter().find(|(_, v)| *v == c).map(|(k, _)| *k)
    }

    pub fn concept_for(&self, c: Color) -> Option<TokenId> {
        self.concepts.iter().find(|(_, v)| *v == c).map(|(k, _)| *k)
    }

    pub fn counted_for(&self, n: u8) -> Option<TokenId> {
        self.counted.iter().find(|(_, v)| *v == n).map(|(k, _)| *k)
    }

    /// True when the relation behind `dim` has at least one entry.
    pub fn covers(&self, dim: Dimension) -> bool {
        match dim {
            Dimension::ToolUtility => !self.tools.is_empty(),
            Dimension::ContextualSpatial => !self.scenes.is_empty(),
            Dimension::Functional => !self.counted.is_empty(),
            Dimension::CulturalSymbolic => !self.concepts.is_empty(),
            Dimension::Encyclopedic => !self.landmarks.is_empty(),
            Dimension::LogicalMathematical => true,
        }
    }
}
