use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Every question offers exactly this many options.
pub const NUM_OPTIONS: usize = 5;

/// A 0-based option index, always in `0..5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OptionIndex(u8);

impl OptionIndex {
    pub const ALL: [OptionIndex; NUM_OPTIONS] = [
        OptionIndex(0),
        OptionIndex(1),
        OptionIndex(2),
        OptionIndex(3),
        OptionIndex(4),
    ];

    pub fn new(index: i64) -> Option<Self> {
        (0..NUM_OPTIONS as i64)
            .contains(&index)
            .then_some(OptionIndex(index as u8))
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for OptionIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for OptionIndex {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.0)
    }
}

impl<'de> Deserialize<'de> for OptionIndex {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = i64::deserialize(deserializer)?;
        OptionIndex::new(raw).ok_or_else(|| {
            serde::de::Error::custom(format!("option index {raw} outside 0..{NUM_OPTIONS}"))
        })
    }
}

/// Time range of one captioned clip, in seconds from the start of the video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipRange {
    pub start: f64,
    pub end: f64,
}

impl ClipRange {
    pub fn new(start: f64, end: f64) -> Self {
        ClipRange { start, end }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

impl fmt::Display for ClipRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}s-{}s", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub range: ClipRange,
    pub text: String,
}

/// Parsed model output. Only the fields requested by the mode's CoT field set
/// are populated; `answer` is always present and already 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredAnswer {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<Vec<Caption>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub answer: OptionIndex,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl StructuredAnswer {
    pub fn answer_only(answer: OptionIndex) -> Self {
        StructuredAnswer {
            captions: None,
            summary: None,
            reason: None,
            answer,
            confidence: None,
        }
    }
}

/// Clamp a reported confidence into `[0, 1]`. NaN is rejected by the caller.
pub fn clamp_confidence(value: f64) -> f64 {
    value.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn option_index_bounds() {
        assert!(OptionIndex::new(-1).is_none());
        assert!(OptionIndex::new(5).is_none());
        assert_eq!(OptionIndex::new(4).unwrap().get(), 4);
    }

    #[test]
    fn option_index_rejects_out_of_range_json() {
        assert!(serde_json::from_str::<OptionIndex>("7").is_err());
        assert_eq!(serde_json::from_str::<OptionIndex>("3").unwrap().get(), 3);
    }

    #[test]
    fn confidence_clamped() {
        assert_eq!(clamp_confidence(1.7), 1.0);
        assert_eq!(clamp_confidence(-0.2), 0.0);
        assert_eq!(clamp_confidence(0.42), 0.42);
    }
}
