use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The eight emotion categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionClass {
    Amusement,
    Awe,
    Contentment,
    Excitement,
    Fear,
    Sadness,
    Anger,
    Disgust,
}

impl EmotionClass {
    pub const ALL: [EmotionClass; 8] = [
        EmotionClass::Amusement,
        EmotionClass::Awe,
        EmotionClass::Contentment,
        EmotionClass::Excitement,
        EmotionClass::Fear,
        EmotionClass::Sadness,
        EmotionClass::Anger,
        EmotionClass::Disgust,
    ];

    pub const COUNT: usize = 8;

    pub fn name(self) -> &'static str {
        match self {
            EmotionClass::Amusement => "amusement",
            EmotionClass::Awe => "awe",
            EmotionClass::Contentment => "contentment",
            EmotionClass::Excitement => "excitement",
            EmotionClass::Fear => "fear",
            EmotionClass::Sadness => "sadness",
            EmotionClass::Anger => "anger",
            EmotionClass::Disgust => "disgust",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for EmotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let lower = s.trim().to_lowercase();
        Self::ALL
            .into_iter()
            .find(|c| c.name() == lower)
            .ok_or_else(|| Error::UnknownClass(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        for c in EmotionClass::ALL {
            assert_eq!(c.name().parse::<EmotionClass>().unwrap(), c);
            assert_eq!(EmotionClass::from_index(c.index()), Some(c));
        }
        assert!(matches!("joy".parse::<EmotionClass>(), Err(Error::UnknownClass(_))));
        assert_eq!(serde_json::to_string(&EmotionClass::Fear).unwrap(), "\"fear\"");
    }
}
