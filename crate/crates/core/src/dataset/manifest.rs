use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::{parse_clip_path, KeywordLabel, KEYWORDS, NUM_CLASSES};
use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Data-root-joined path of the clip.
    pub path: String,
    pub label: KeywordLabel,
    pub speaker_id: String,
    pub split: Split,
}

/// Split-aware clip index. Entries are kept in lexicographic path order.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub trim_fraction: f64,
    pub seed: u64,
    /// Non-target directories encountered while scanning.
    pub skipped_dirs: usize,
}

impl DatasetManifest {
    pub fn new(mut entries: Vec<ManifestEntry>) -> Self {
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        DatasetManifest {
            entries,
            trim_fraction: 1.0,
            seed: 0,
            skipped_dirs: 0,
        }
    }

    /// Indices (into `entries`) of one split, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn per_keyword_counts(&self, split: Split) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for e in self.entries.iter().filter(|e| e.split == split) {
            counts[e.label.index()] += 1;
        }
        counts
    }

    /// `path<TAB>label_index<TAB>speaker_id<TAB>split` per line, LF terminated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.path,
                e.label.index(),
                e.speaker_id,
                e.split
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |why: &str| Error::Manifest(format!("line {}: {why}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, label, speaker, split] = fields[..] else {
                return Err(bad("expected 4 tab-separated fields"));
            };
            let label = label
                .parse::<usize>()
                .map_err(|_| bad("label is not an integer"))
                .and_then(|i| KeywordLabel::new(i).map_err(|_| bad("label out of range")))?;
            entries.push(ManifestEntry {
                path: path.to_string(),
                label,
                speaker_id: speaker.to_string(),
                split: split.parse().map_err(|_| bad("unknown split tag"))?,
            });
        }
        Ok(DatasetManifest::new(entries))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn read_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Scans `<root>/<word>/*.wav` for the ten target words and tags each file
/// with its official split.
pub fn build_manifest(
    root: impl AsRef<Path>,
    validation_list: impl AsRef<Path>,
    testing_list: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let validation: BTreeSet<String> = read_list(validation_list.as_ref())?.into_iter().collect();
    let testing: BTreeSet<String> = read_list(testing_list.as_ref())?.into_iter().collect();
    if let Some(both) = validation.intersection(&testing).next() {
        return Err(Error::Manifest(format!(
            "{both} is listed for both validation and test"
        )));
    }

    let read_dir = |dir: &Path| -> Result<Vec<PathBuf>> {
        let mut paths = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|d| d.map(|d| d.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<Vec<_>>>()?;
        paths.sort();
        Ok(paths)
    };

    let mut skipped_dirs = 0;
    let mut on_disk: HashSet<String> = HashSet::new();
    let mut entries = Vec::new();
    for dir in read_dir(root)? {
        if !dir.is_dir() {
            continue;
        }
        let word = dir.file_name().and_then(|w| w.to_str()).unwrap_or_default();
        if KeywordLabel::from_name(word).is_none() {
            skipped_dirs += 1;
            continue;
        }
        for file in read_dir(&dir)? {
            if file.extension().and_then(|e| e.to_str()) != Some("wav") {
                continue;
            }
            let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let rel = format!("{word}/{name}");
            let (label, speaker_id) = parse_clip_path(Path::new(&rel))?;
            let split = if validation.contains(&rel) {
                Split::Validation
            } else if testing.contains(&rel) {
                Split::Test
            } else {
                Split::Train
            };
            entries.push(ManifestEntry {
                path: root.join(&rel).to_string_lossy().into_owned(),
                label,
                speaker_id,
                split,
            });
            on_disk.insert(rel);
        }
    }

    // The official lists cover all 35 words; only target-word entries must exist here.
    for listed in validation.iter().chain(testing.iter()) {
        let word = listed.split('/').next().unwrap_or_default();
        if KEYWORDS.contains(&word) && !on_disk.contains(listed) {
            return Err(Error::Manifest(format!(
                "listed file {} is missing under {}",
                listed,
                root.display()
            )));
        }
    }

    let mut manifest = DatasetManifest::new(entries);
    manifest.skipped_dirs = skipped_dirs;
    if skipped_dirs > 0 {
        log::warn!("skipped {skipped_dirs} non-target directories under {}", root.display());
    }
    Ok(manifest)
}

/// Keeps whole speakers per keyword, in seeded shuffled order, until the
/// retained train count first reaches `ceil(fraction * count)`.
///
/// Validation and test entries pass through untouched.
pub fn trim_by_speaker(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "trim fraction {fraction} outside (0, 1]"
        )));
    }

    let mut retained: HashSet<(KeywordLabel, &str)> = HashSet::new();
    for label in KeywordLabel::all() {
        let mut per_speaker: BTreeMap<&str, usize> = BTreeMap::new();
        for e in manifest
            .entries
            .iter()
            .filter(|e| e.split == Split::Train && e.label == label)
        {
            *per_speaker.entry(e.speaker_id.as_str()).or_default() += 1;
        }
        let total: usize = per_speaker.values().sum();
        if total == 0 {
            return Err(Error::Dataset(format!(
                "keyword `{label}` has no train utterances"
            )));
        }
        let quota = (fraction * total as f64).ceil() as usize;

        let mut speakers: Vec<(&str, usize)> = per_speaker.into_iter().collect();
        speakers.shuffle(&mut rng::keyed(&[seed, label.index() as u64], 1));
        let mut kept = 0;
        for (speaker, n) in speakers {
            if kept >= quota {
                break;
            }
            retained.insert((label, speaker));
            kept += n;
        }
    }

    let entries = manifest
        .entries
        .iter()
        .filter(|e| e.split != Split::Train || retained.contains(&(e.label, e.speaker_id.as_str())))
        .cloned()
        .collect();
    Ok(DatasetManifest {
        entries,
        trim_fraction: manifest.trim_fraction * fraction,
        seed,
        skipped_dirs: manifest.skipped_dirs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(word: &str, speaker: &str, n: usize, split: Split) -> ManifestEntry {
        ManifestEntry {
            path: format!("{word}/{speaker}_nohash_{n}.wav"),
            label: KeywordLabel::from_name(word).unwrap(),
            speaker_id: speaker.into(),
            split,
        }
    }

    /// Every keyword gets `speakers` train speakers with 1..=4 clips each, plus
    /// one validation and one test clip.
    fn fixture(speakers: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for word in KEYWORDS {
            for s in 0..speakers {
                let n_clips = 1 + (s * 7 + word.len()) % 4;
                for n in 0..n_clips {
                    entries.push(entry(word, &format!("spk{s:02}"), n, Split::Train));
                }
            }
            entries.push(entry(word, "valspk", 0, Split::Validation));
            entries.push(entry(word, "testspk", 0, Split::Test));
        }
        DatasetManifest::new(entries)
    }

    #[test]
    fn text_round_trip() {
        let m = fixture(3);
        let text = m.to_text();
        assert!(text.ends_with('\n') && !text.contains('\r'));
        assert_eq!(DatasetManifest::from_text(&text).unwrap().entries, m.entries);
        assert!(DatasetManifest::from_text("a\t1\tb\n").is_err());
        assert!(DatasetManifest::from_text("a\t11\tb\ttrain\n").is_err());
        assert!(DatasetManifest::from_text("a\t1\tb\tdev\n").is_err());
    }

    #[test]
    fn full_fraction_is_identity() {
        let m = fixture(6);
        let t = trim_by_speaker(&m, 1.0, 3).unwrap();
        assert_eq!(t.entries, m.entries);
    }

    #[test]
    fn trim_reaches_quota_with_minimal_speaker_prefix() {
        let m = fixture(40);
        let fraction = 0.05;
        let t = trim_by_speaker(&m, fraction, 11).unwrap();
        let before = m.per_keyword_counts(Split::Train);
        let after = t.per_keyword_counts(Split::Train);
        for label in KeywordLabel::all() {
            let k = label.index();
            let quota = (fraction * before[k] as f64).ceil() as usize;
            assert!(after[k] >= quota, "{label}: {} < {quota}", after[k]);
            // Minimality: dropping any one retained speaker falls below quota only
            // for the last admitted one; at least, the overshoot is < the largest
            // speaker's clip count (4 in this fixture).
            assert!(after[k] < quota + 4);
        }
        assert_eq!(t.count(Split::Validation), m.count(Split::Validation));
        assert_eq!(t.count(Split::Test), m.count(Split::Test));
    }

    #[test]
    fn trim_is_deterministic() {
        let m = fixture(20);
        let a = trim_by_speaker(&m, 0.3, 5).unwrap();
        let b = trim_by_speaker(&m, 0.3, 5).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn trim_rejects_bad_fraction_and_empty_keyword() {
        let m = fixture(3);
        assert!(matches!(trim_by_speaker(&m, 0.0, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(trim_by_speaker(&m, 1.5, 0), Err(Error::InvalidArgument(_))));
        let mut sparse = m.clone();
        sparse
            .entries
            .retain(|e| !(e.label.name() == "up" && e.split == Split::Train));
        assert!(matches!(trim_by_speaker(&sparse, 0.5, 0), Err(Error::Dataset(_))));
    }

    proptest! {
        #[test]
        fn trim_idempotent_and_monotone(seed in 0u64..1000, lo in 0.01f64..1.0, hi in 0.01f64..1.0) {
            let m = fixture(15);
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let small = trim_by_speaker(&m, lo, seed).unwrap();
            let large = trim_by_speaker(&m, hi, seed).unwrap();
            let a = small.per_keyword_counts(Split::Train);
            let b = large.per_keyword_counts(Split::Train);
            for k in 0..NUM_CLASSES {
                prop_assert!(a[k] <= b[k]);
            }
            let again = trim_by_speaker(&small, 1.0, seed).unwrap();
            prop_assert_eq!(&again.entries, &small.entries);

            // Retained speakers are a subset of the original ones, per keyword.
            let orig: HashSet<(KeywordLabel, String)> =
                m.entries.iter().map(|e| (e.label, e.speaker_id.clone())).collect();
            for e in &small.entries {
                prop_assert!(orig.contains(&(e.label, e.speaker_id.clone())));
            }
        }
    }
}
