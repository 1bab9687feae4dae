//! Class descriptions ("yellow car"), the word vocabulary, and bag-of-words
//! encoding for the text branch.

use std::fmt;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot build a vocabulary from no descriptions")]
    EmptyVocabulary,
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
    #[error("cannot parse {0:?} as a class description (expected \"<color> <vehicle>\")")]
    BadDescription(String),
}

/// Vehicle silhouette categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VehicleType {
    Car,
    Truck,
}

impl VehicleType {
    pub const ALL: [VehicleType; 2] = [VehicleType::Car, VehicleType::Truck];

    pub fn word(self) -> &'static str {
        match self {
            VehicleType::Car => "car",
            VehicleType::Truck => "truck",
        }
    }

    fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.word() == w)
    }
}

/// Body paint colors. Declaration order is the canonical palette order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Black,
    White,
    Gray,
    Yellow,
    Green,
    Blue,
    Red,
}

impl Color {
    pub const ALL: [Color; 7] = [
        Color::Black,
        Color::White,
        Color::Gray,
        Color::Yellow,
        Color::Green,
        Color::Blue,
        Color::Red,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Black => "black",
            Color::White => "white",
            Color::Gray => "gray",
            Color::Yellow => "yellow",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Red => "red",
        }
    }

    fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == w)
    }
}

/// A queryable class: one color paired with one vehicle type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassDescription {
    pub vehicle_type: VehicleType,
    pub color: Color,
}

impl ClassDescription {
    pub fn new(vehicle_type: VehicleType, color: Color) -> Self {
        ClassDescription {
            vehicle_type,
            color,
        }
    }

    /// The two words of the description, in utterance order.
    pub fn words(&self) -> [&'static str; 2] {
        [self.color.word(), self.vehicle_type.word()]
    }
}

impl fmt::Display for ClassDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color.word(), self.vehicle_type.word())
    }
}

impl FromStr for ClassDescription {
    type Err = TextError;

    fn from_str(s: &str) -> Result<Self, TextError> {
        let mut it = s.split_whitespace();
        let (Some(color), Some(vehicle), None) = (it.next(), it.next(), it.next()) else {
            return Err(TextError::BadDescription(s.to_string()));
        };
        let color = Color::from_word(color).ok_or_else(|| TextError::BadDescription(s.to_string()))?;
        let vehicle =
            VehicleType::from_word(vehicle).ok_or_else(|| TextError::BadDescription(s.to_string()))?;
        Ok(ClassDescription::new(vehicle, color))
    }
}

impl Serialize for ClassDescription {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ClassDescription {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// All 14 classes: vehicle types in declaration order, colors nested inside.
pub fn all_classes() -> Vec<ClassDescription> {
    let mut out = Vec::with_capacity(VehicleType::ALL.len() * Color::ALL.len());
    for t in VehicleType::ALL {
        for c in Color::ALL {
            out.push(ClassDescription::new(t, c));
        }
    }
    out
}

/// Sorted set of distinct words drawn from a class list. Word order (and so
/// bag-of-words component order) is lexicographic and independent of the
/// order or multiplicity of the input descriptions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub fn build(descriptions: &[ClassDescription]) -> Result<Self, TextError> {
        if descriptions.is_empty() {
            return Err(TextError::EmptyVocabulary);
        }
        let mut words: Vec<String> = descriptions
            .iter()
            .flat_map(|d| d.words())
            .map(str::to_string)
            .collect();
        words.sort();
        words.dedup();
        Ok(Vocabulary { words })
    }

    /// Vocabulary over all 14 classes; 9 words.
    pub fn full() -> Self {
        Self::build(&all_classes()).expect("the full class list is never empty")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        // The list is sorted and tiny; binary search keeps lookups honest.
        self.words.binary_search_by(|w| w.as_str().cmp(word)).ok()
    }
}

/// Bag-of-words encoding of a description: 1.0 at each of its words'
/// vocabulary positions, 0.0 elsewhere. Errors if a word is missing from the
/// vocabulary.
pub fn encode_bow(
    description: &ClassDescription,
    vocab: &Vocabulary,
) -> Result<Vec<f64>, TextError> {
    let mut v = vec![0.0; vocab.len()];
    for word in description.words() {
        let idx = vocab
            .index_of(word)
            .ok_or_else(|| TextError::UnknownWord(word.to_string()))?;
        v[idx] = 1.0;
    }
    Ok(v)
}
