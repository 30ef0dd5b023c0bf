//! Waveform ingestion, split-aware manifests and speaker-partitioned trimming.

mod corpus;
mod manifest;
mod synth;
mod wav;

pub use corpus::Corpus;
pub use manifest::{build_manifest, trim_by_speaker, DatasetManifest, ManifestEntry, Split};
pub use synth::{synth_dataset, write_synthetic_tree, SyntheticCorpus};
pub use wav::{load_wav, pad_or_trim, parse_clip_path, wav_duration_secs, write_wav, WavClip};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// One second at [`SAMPLE_RATE`].
pub const CLIP_SAMPLES: usize = 16_000;

/// The ten target words, in label-index order.
pub const KEYWORDS: [&str; 10] = [
    "up", "down", "left", "right", "yes", "no", "on", "off", "go", "stop",
];
pub const NUM_CLASSES: usize = KEYWORDS.len();

/// Keyword class index in `0..10`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeywordLabel(u8);

impl KeywordLabel {
    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_CLASSES {
            Ok(KeywordLabel(index as u8))
        } else {
            Err(Error::InvalidInput(format!(
                "label index {index} out of range 0..{NUM_CLASSES}"
            )))
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        KEYWORDS
            .iter()
            .position(|w| *w == name)
            .map(|i| KeywordLabel(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        KEYWORDS[self.index()]
    }

    pub fn one_hot(self) -> [f64; NUM_CLASSES] {
        let mut v = [0.0; NUM_CLASSES];
        v[self.index()] = 1.0;
        v
    }

    pub fn all() -> impl Iterator<Item = KeywordLabel> {
        (0..NUM_CLASSES).map(|i| KeywordLabel(i as u8))
    }
}

impl std::fmt::Display for KeywordLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn name_index_bijection() {
        for (i, word) in KEYWORDS.iter().enumerate() {
            let label = KeywordLabel::from_name(word).unwrap();
            assert_eq!(label.index(), i);
            assert_eq!(label.name(), *word);
        }
        assert!(KeywordLabel::from_name("marvin").is_none());
        assert!(KeywordLabel::new(10).is_err());
    }

    #[test]
    fn one_hot_has_single_unit_entry() {
        for label in KeywordLabel::all() {
            let v = label.one_hot();
            assert_eq!(v.iter().sum::<f64>(), 1.0);
            assert_eq!(v.iter().filter(|x| **x != 0.0).count(), 1);
            assert_eq!(v[label.index()], 1.0);
        }
    }
}
