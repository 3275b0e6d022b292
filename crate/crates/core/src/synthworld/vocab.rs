//! Closed instruction vocabulary and the cell-class table.

use serde::{Deserialize, Serialize};

pub const N_SHAPES: usize = 4;
pub const N_COLORS: usize = 4;
pub const MAX_REFERENCES: usize = 4;

/// Background plus one class per (shape, color) pair.
pub const N_CELL_CLASSES: usize = 1 + N_SHAPES * N_COLORS;
pub const BACKGROUND_CLASS: usize = 0;

pub const SHAPE_NAMES: [&str; N_SHAPES] = ["dot", "hbar", "vbar", "block"];
pub const COLOR_NAMES: [&str; N_COLORS] = ["red", "green", "blue", "yellow"];

/// Cell offsets of each shape relative to its anchor.
pub fn shape_template(shape_id: u8) -> &'static [(usize, usize)] {
    match shape_id {
        0 => &[(0, 0)],
        1 => &[(0, 0), (0, 1)],
        2 => &[(0, 0), (1, 0)],
        _ => &[(0, 0), (0, 1), (1, 0), (1, 1)],
    }
}

pub fn cell_class(shape_id: u8, color_id: u8) -> usize {
    1 + shape_id as usize * N_COLORS + color_id as usize
}

pub fn class_attributes(class: usize) -> Option<(u8, u8)> {
    if class == BACKGROUND_CLASS || class >= N_CELL_CLASSES {
        return None;
    }
    let k = class - 1;
    Some(((k / N_COLORS) as u8, (k % N_COLORS) as u8))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelPos {
    Left,
    Right,
    Top,
    Bottom,
}

impl RelPos {
    pub const ALL: [RelPos; 4] = [RelPos::Left, RelPos::Right, RelPos::Top, RelPos::Bottom];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Bos,
    Eos,
    And,
    Image(u8),
    Color(u8),
    Shape(u8),
    Rel(RelPos),
}

const IMAGE_BASE: usize = 3;
const COLOR_BASE: usize = IMAGE_BASE + MAX_REFERENCES;
const SHAPE_BASE: usize = COLOR_BASE + N_COLORS;
const REL_BASE: usize = SHAPE_BASE + N_SHAPES;
pub const TEXT_VOCAB: usize = REL_BASE + 4;

impl Token {
    pub fn id(self) -> usize {
        match self {
            Token::Bos => 0,
            Token::Eos => 1,
            Token::And => 2,
            Token::Image(k) => IMAGE_BASE + k as usize,
            Token::Color(c) => COLOR_BASE + c as usize,
            Token::Shape(s) => SHAPE_BASE + s as usize,
            Token::Rel(r) => REL_BASE + r as usize,
        }
    }

    pub fn from_id(id: usize) -> Option<Token> {
        Some(match id {
            0 => Token::Bos,
            1 => Token::Eos,
            2 => Token::And,
            i if i < COLOR_BASE => Token::Image((i - IMAGE_BASE) as u8),
            i if i < SHAPE_BASE => Token::Color((i - COLOR_BASE) as u8),
            i if i < REL_BASE => Token::Shape((i - SHAPE_BASE) as u8),
            i if i < TEXT_VOCAB => Token::Rel(RelPos::ALL[i - REL_BASE]),
            _ => return None,
        })
    }

    /// Begin/end markers carry no instruction content.
    pub fn is_sentinel(self) -> bool {
        matches!(self, Token::Bos | Token::Eos)
    }

    pub fn word(self) -> String {
        match self {
            Token::Bos => "<s>".into(),
            Token::Eos => "</s>".into(),
            Token::And => "and".into(),
            Token::Image(k) => format!("image{}", k + 1),
            Token::Color(c) => COLOR_NAMES[c as usize].into(),
            Token::Shape(s) => SHAPE_NAMES[s as usize].into(),
            Token::Rel(r) => format!("{r:?}").to_lowercase(),
        }
    }
}

/// Token ids of a subject's attribute words, used by the understanding-side
/// cell embedder.
pub fn class_attribute_tokens(class: usize) -> Option<[usize; 2]> {
    class_attributes(class).map(|(s, c)| [Token::Shape(s).id(), Token::Color(c).id()])
}

pub fn render_instruction(ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| Token::from_id(i).map_or_else(|| format!("<{i}>"), Token::word))
        .collect::<Vec<_>>()
        .join(" ")
}
