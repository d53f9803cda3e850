use serde::{Deserialize, Serialize};

/// Semantic region of the head. Every face carries exactly one label and
/// every primitive inherits the label of its parent face.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Forehead,
    Nose,
    Eye,
    Teeth,
    Lip,
    Ear,
    Hair,
    Boundary,
    Neck,
    OtherFace,
    Other,
}

pub const NUM_PARTS: usize = 11;

impl Part {
    pub const ALL: [Part; NUM_PARTS] = [
        Part::Forehead,
        Part::Nose,
        Part::Eye,
        Part::Teeth,
        Part::Lip,
        Part::Ear,
        Part::Hair,
        Part::Boundary,
        Part::Neck,
        Part::OtherFace,
        Part::Other,
    ];

    /// Parts excluded from fine-tuning.
    pub const MOUTH: [Part; 2] = [Part::Lip, Part::Teeth];

    /// 1-based label.
    pub fn label(self) -> u8 {
        self.index() as u8 + 1
    }

    /// 0-based index, suitable for per-part tables.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_label(label: u8) -> Option<Part> {
        (1..=NUM_PARTS as u8)
            .contains(&label)
            .then(|| Part::ALL[label as usize - 1])
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Forehead => "forehead",
            Part::Nose => "nose",
            Part::Eye => "eye",
            Part::Teeth => "teeth",
            Part::Lip => "lip",
            Part::Ear => "ear",
            Part::Hair => "hair",
            Part::Boundary => "boundary",
            Part::Neck => "neck",
            Part::OtherFace => "other_face",
            Part::Other => "other",
        }
    }

    pub fn from_name(name: &str) -> Option<Part> {
        Part::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn is_mouth(self) -> bool {
        Part::MOUTH.contains(&self)
    }
}

impl std::fmt::Display for Part {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
