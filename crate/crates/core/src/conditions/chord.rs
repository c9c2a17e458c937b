//! Chord symbols, their pitch-class content, and the `ROOT[:QUALITY]` grammar.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ConditionError;

/// Root spellings used when formatting. Parsing accepts any letter with an
/// optional run of `#`/`b` accidentals.
const ROOT_NAMES: [&str; 12] = [
    "C", "C#", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B",
];

/// A set of pitch classes packed as a 12-bit mask, bit `i` = pitch class `i`
/// (C = 0, C# = 1, ..., B = 11).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PitchSet(pub u16);

impl PitchSet {
    pub const EMPTY: PitchSet = PitchSet(0);

    pub fn from_classes<I: IntoIterator<Item = u8>>(classes: I) -> Self {
        PitchSet(classes.into_iter().fold(0u16, |m, pc| m | (1 << (pc % 12))))
    }

    /// Reads a chromagram row; any entry above 0.5 counts as active.
    pub fn from_row(row: &[f32; 12]) -> Self {
        PitchSet::from_classes((0..12u8).filter(|&i| row[i as usize] > 0.5))
    }

    pub fn contains(self, pc: u8) -> bool {
        self.0 & (1 << pc) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn to_row(self) -> [f32; 12] {
        let mut row = [0.0; 12];
        for (i, v) in row.iter_mut().enumerate() {
            if self.contains(i as u8) {
                *v = 1.0;
            }
        }
        row
    }

    pub fn classes(self) -> impl Iterator<Item = u8> {
        (0..12u8).filter(move |&i| self.contains(i))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChordQuality {
    Maj,
    Min,
    Dim,
    Aug,
    Sus2,
    Sus4,
    Maj7,
    Min7,
    Dom7,
    Dim7,
    Hdim7,
    MinMaj7,
}

impl ChordQuality {
    pub const ALL: [ChordQuality; 12] = [
        ChordQuality::Maj,
        ChordQuality::Min,
        ChordQuality::Dim,
        ChordQuality::Aug,
        ChordQuality::Sus2,
        ChordQuality::Sus4,
        ChordQuality::Maj7,
        ChordQuality::Min7,
        ChordQuality::Dom7,
        ChordQuality::Dim7,
        ChordQuality::Hdim7,
        ChordQuality::MinMaj7,
    ];

    /// Semitone offsets of the chord tones above the root.
    pub fn intervals(self) -> &'static [u8] {
        use ChordQuality::*;
        match self {
            Maj => &[0, 4, 7],
            Min => &[0, 3, 7],
            Dim => &[0, 3, 6],
            Aug => &[0, 4, 8],
            Sus2 => &[0, 2, 7],
            Sus4 => &[0, 5, 7],
            Maj7 => &[0, 4, 7, 11],
            Min7 => &[0, 3, 7, 10],
            Dom7 => &[0, 4, 7, 10],
            Dim7 => &[0, 3, 6, 9],
            Hdim7 => &[0, 3, 6, 10],
            MinMaj7 => &[0, 3, 7, 11],
        }
    }

    pub fn label(self) -> &'static str {
        use ChordQuality::*;
        match self {
            Maj => "maj",
            Min => "min",
            Dim => "dim",
            Aug => "aug",
            Sus2 => "sus2",
            Sus4 => "sus4",
            Maj7 => "maj7",
            Min7 => "min7",
            Dom7 => "7",
            Dim7 => "dim7",
            Hdim7 => "hdim7",
            MinMaj7 => "minmaj7",
        }
    }

    fn from_label(s: &str) -> Option<Self> {
        use ChordQuality::*;
        Some(match s {
            "maj" => Maj,
            "min" => Min,
            "dim" => Dim,
            "aug" => Aug,
            "sus2" => Sus2,
            "sus4" => Sus4,
            "maj7" => Maj7,
            "min7" => Min7,
            "7" | "dom7" => Dom7,
            "dim7" => Dim7,
            "hdim7" => Hdim7,
            "minmaj7" => MinMaj7,
            _ => return None,
        })
    }

    /// The triad underneath a seventh chord; triads map to themselves.
    pub fn triad(self) -> Self {
        use ChordQuality::*;
        match self {
            Maj7 | Dom7 => Maj,
            Min7 | MinMaj7 => Min,
            Dim7 | Hdim7 => Dim,
            q => q,
        }
    }
}

/// A chord label: a root pitch class with a quality, or no chord.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChordSymbol {
    NoChord,
    Chord { root: u8, quality: ChordQuality },
}

impl ChordSymbol {
    /// Panics if `root` is not a pitch class.
    pub fn new(root: u8, quality: ChordQuality) -> Self {
        assert!(root < 12, "root {root} is not a pitch class");
        ChordSymbol::Chord { root, quality }
    }

    pub fn root(self) -> Option<u8> {
        match self {
            ChordSymbol::NoChord => None,
            ChordSymbol::Chord { root, .. } => Some(root),
        }
    }

    pub fn quality(self) -> Option<ChordQuality> {
        match self {
            ChordSymbol::NoChord => None,
            ChordSymbol::Chord { quality, .. } => Some(quality),
        }
    }

    pub fn pitch_set(self) -> PitchSet {
        match self {
            ChordSymbol::NoChord => PitchSet::EMPTY,
            ChordSymbol::Chord { root, quality } => {
                PitchSet::from_classes(quality.intervals().iter().map(|&i| (root + i) % 12))
            }
        }
    }

    /// Every root/quality pair, followed by `NoChord`.
    pub fn vocabulary() -> Vec<ChordSymbol> {
        let mut all: Vec<_> = (0..12u8)
            .flat_map(|root| ChordQuality::ALL.iter().map(move |&q| ChordSymbol::new(root, q)))
            .collect();
        all.push(ChordSymbol::NoChord);
        all
    }
}

/// 12-dimensional 0/1 indicator of the chord tones.
pub fn chord_to_pitch_classes(symbol: ChordSymbol) -> [f32; 12] {
    symbol.pitch_set().to_row()
}

/// Parses `ROOT[:QUALITY]` or the literal `N`.
pub fn parse_chord_symbol(text: &str) -> Result<ChordSymbol, ConditionError> {
    let malformed = |position: usize| ConditionError::MalformedChord {
        text: text.to_string(),
        position,
    };
    let s = text.trim();
    let lead = text.len() - text.trim_start().len();
    if s == "N" {
        return Ok(ChordSymbol::NoChord);
    }
    let bytes = s.as_bytes();
    let natural: i32 = match bytes.first() {
        Some(b'C') => 0,
        Some(b'D') => 2,
        Some(b'E') => 4,
        Some(b'F') => 5,
        Some(b'G') => 7,
        Some(b'A') => 9,
        Some(b'B') => 11,
        _ => return Err(malformed(lead)),
    };
    let mut pos = 1;
    let mut shift = 0i32;
    while pos < bytes.len() {
        match bytes[pos] {
            b'#' => shift += 1,
            b'b' => shift -= 1,
            _ => break,
        }
        pos += 1;
    }
    let root = (natural + shift).rem_euclid(12) as u8;
    let quality = match &s[pos..] {
        "" => ChordQuality::Maj,
        rest => {
            let Some(label) = rest.strip_prefix(':') else {
                return Err(malformed(lead + pos));
            };
            ChordQuality::from_label(label).ok_or_else(|| malformed(lead + pos + 1))?
        }
    };
    Ok(ChordSymbol::new(root, quality))
}

impl FromStr for ChordSymbol {
    type Err = ConditionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_chord_symbol(s)
    }
}

impl fmt::Display for ChordSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChordSymbol::NoChord => f.write_str("N"),
            ChordSymbol::Chord { root, quality } => {
                write!(f, "{}:{}", ROOT_NAMES[*root as usize], quality.label())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn classes(sym: &str) -> Vec<u8> {
        parse_chord_symbol(sym).unwrap().pitch_set().classes().collect()
    }

    #[test]
    fn parses_examples() {
        assert_eq!(
            parse_chord_symbol("C:maj").unwrap(),
            ChordSymbol::new(0, ChordQuality::Maj)
        );
        assert_eq!(
            parse_chord_symbol("Db:min7").unwrap(),
            ChordSymbol::new(1, ChordQuality::Min7)
        );
        assert_eq!(parse_chord_symbol("C#:min7").unwrap(), parse_chord_symbol("Db:min7").unwrap());
        assert_eq!(parse_chord_symbol("N").unwrap(), ChordSymbol::NoChord);
        assert_eq!(parse_chord_symbol("G").unwrap(), ChordSymbol::new(7, ChordQuality::Maj));
        assert_eq!(parse_chord_symbol("Cb:7").unwrap(), ChordSymbol::new(11, ChordQuality::Dom7));
    }

    #[test]
    fn rejects_malformed() {
        for (text, pos) in [("H:maj", 0), ("C:maj9", 2), ("Cmaj", 1), ("", 0), ("N:maj", 0), ("C:", 2)] {
            match parse_chord_symbol(text) {
                Err(ConditionError::MalformedChord { position, .. }) => {
                    assert_eq!(position, pos, "{text}")
                }
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn pitch_classes_examples() {
        assert_eq!(classes("C:maj"), vec![0, 4, 7]);
        assert_eq!(classes("A:min7"), vec![0, 4, 7, 9]);
        assert_eq!(chord_to_pitch_classes(ChordSymbol::NoChord), [0.0; 12]);
    }

    #[test]
    fn tone_counts_are_three_or_four() {
        for sym in ChordSymbol::vocabulary() {
            let n = sym.pitch_set().len();
            match sym {
                ChordSymbol::NoChord => assert_eq!(n, 0),
                _ => assert!(n == 3 || n == 4, "{sym}"),
            }
        }
    }

    proptest! {
        #[test]
        fn format_parse_roundtrip(idx in 0usize..145) {
            let sym = ChordSymbol::vocabulary()[idx];
            let text = sym.to_string();
            let back = parse_chord_symbol(&text).unwrap();
            prop_assert_eq!(back, sym);
            prop_assert_eq!(back.to_string(), text);
        }
    }
}
