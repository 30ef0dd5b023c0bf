use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{
    write_wav, DatasetManifest, KeywordLabel, ManifestEntry, Split, WavClip, CLIP_SAMPLES,
    KEYWORDS, SAMPLE_RATE,
};
use crate::{rng, Error, Result};

const CLIPS_PER_SPEAKER: usize = 5;
const PARTIAL_AMPLITUDE: f64 = 0.3;

pub struct SyntheticCorpus {
    pub manifest: DatasetManifest,
    pub clips: Vec<WavClip>,
}

/// Per-speaker pitch and gain, shared by all of that speaker's words.
fn speaker_traits(seed: u64, speaker: usize) -> (f64, f64) {
    let mut r = rng::keyed(&[seed, speaker as u64], 3);
    (r.random_range(0.97..1.03), r.random_range(0.8..1.2))
}

/// Raised-cosine bump on `0..=1` with its peak at `skew`.
fn bump(rel: f64, skew: f64) -> f64 {
    use std::f64::consts::PI;
    if !(0.0..=1.0).contains(&rel) {
        0.0
    } else if rel < skew {
        0.5 - 0.5 * (PI * rel / skew).cos()
    } else {
        0.5 + 0.5 * (PI * (rel - skew) / (1.0 - skew)).cos()
    }
}

/// Amplitude envelope of class `class` at `rel` (0..1 across the word).
/// Odd classes are two syllables, even classes one, so classes adjacent in
/// pitch differ in a way speed perturbation cannot undo.
fn envelope(class: usize, rel: f64) -> f64 {
    let skew = 0.2 + 0.06 * class as f64;
    if class % 2 == 0 {
        bump(rel, skew)
    } else {
        bump(rel / 0.4, skew) + bump((rel - 0.6) / 0.4, 1.0 - skew)
    }
}

fn render(class: usize, speaker: usize, clip: usize, noise_level: f64, seed: u64) -> Vec<f32> {
    let (pitch, gain) = speaker_traits(seed, speaker);
    let mut r = rng::keyed(&[seed, class as u64, clip as u64], 2);
    // Class-specific duration; onset and level jitter per clip.
    let duration = 0.35 + 0.03 * class as f64;
    let onset = 0.05 + r.random_range(0.0..0.25);
    let level = gain * r.random_range(0.9..1.1);
    let freqs = [300.0, 450.0].map(|f| f * (class + 1) as f64 * pitch);
    let phase: f64 = r.random_range(0.0..TAU);
    let noise = Normal::new(0.0, noise_level.max(0.0)).expect("finite std");

    (0..CLIP_SAMPLES)
        .map(|n| {
            let t = n as f64 / f64::from(SAMPLE_RATE);
            let envelope = envelope(class, (t - onset) / duration);
            let tone: f64 = freqs
                .iter()
                .map(|f| (TAU * f * t + phase).sin())
                .sum::<f64>()
                * PARTIAL_AMPLITUDE
                * level
                * envelope;
            let n = if noise_level > 0.0 { noise.sample(&mut r) } else { 0.0 };
            (tone + n).clamp(-1.0, 1.0) as f32
        })
        .collect()
}

/// Ten harmonic keyword templates (class k has partials at (k+1)*300 and
/// (k+1)*450 Hz) with seeded Gaussian noise.
///
/// Clip `c` of every class is spoken by speaker `c / 5`; speakers are split
/// 60/20/20 into train, validation and test.
pub fn synth_dataset(n_per_class: usize, noise_level: f64, seed: u64) -> Result<SyntheticCorpus> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be at least 1".into()));
    }
    let n_speakers = n_per_class.div_ceil(CLIPS_PER_SPEAKER);
    let n_train = ((0.6 * n_speakers as f64).round() as usize).max(1);
    let n_val = ((0.2 * n_speakers as f64).round() as usize).min(n_speakers - n_train);
    let split_of = |speaker: usize| {
        if speaker < n_train {
            Split::Train
        } else if speaker < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        }
    };

    let mut entries = Vec::with_capacity(n_per_class * KEYWORDS.len());
    let mut clips = Vec::with_capacity(n_per_class * KEYWORDS.len());
    for (class, word) in KEYWORDS.iter().enumerate() {
        for c in 0..n_per_class {
            let speaker = c / CLIPS_PER_SPEAKER;
            let speaker_id = format!("synth{speaker:03}");
            let path = format!("synthetic/{word}/{speaker_id}_nohash_{}.wav", c % CLIPS_PER_SPEAKER);
            let label = KeywordLabel::new(class)?;
            clips.push(WavClip {
                samples: render(class, speaker, c, noise_level, seed),
                sample_rate: SAMPLE_RATE,
                label,
                speaker_id: speaker_id.clone(),
                source_path: path.clone(),
            });
            entries.push(ManifestEntry {
                path,
                label,
                speaker_id,
                split: split_of(speaker),
            });
        }
    }
    let mut manifest = DatasetManifest::new(entries);
    manifest.seed = seed;
    Ok(SyntheticCorpus { manifest, clips })
}

/// Writes a synthetic corpus as a Speech Commands style tree under `root`:
/// `<word>/<speaker>_nohash_<n>.wav` plus `validation_list.txt` and `testing_list.txt`.
pub fn write_synthetic_tree(corpus: &SyntheticCorpus, root: &Path) -> Result<()> {
    let mut validation = String::new();
    let mut testing = String::new();
    for (entry, clip) in corpus.manifest.entries.iter().zip(order_clips(corpus)) {
        let rel = entry
            .path
            .strip_prefix("synthetic/")
            .unwrap_or(&entry.path)
            .to_string();
        let dest = root.join(&rel);
        if let Some(parent) = dest.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_wav(&dest, &clip.samples)?;
        match entry.split {
            Split::Validation => validation.push_str(&format!("{rel}\n")),
            Split::Test => testing.push_str(&format!("{rel}\n")),
            Split::Train => {}
        }
    }
    for (name, body) in [("validation_list.txt", validation), ("testing_list.txt", testing)] {
        let p = root.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn order_clips(corpus: &SyntheticCorpus) -> Vec<&WavClip> {
    corpus
        .manifest
        .entries
        .iter()
        .map(|e| {
            corpus
                .clips
                .iter()
                .find(|c| c.source_path == e.path)
                .expect("every entry has a clip")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_splits() {
        let s = synth_dataset(20, 0.1, 1).unwrap();
        assert_eq!(s.manifest.entries.len(), 200);
        assert_eq!(s.clips.len(), 200);
        // 4 speakers: 2 train, 1 validation, 1 test.
        assert_eq!(s.manifest.count(Split::Train), 100);
        assert_eq!(s.manifest.count(Split::Validation), 50);
        assert_eq!(s.manifest.count(Split::Test), 50);

        let s = synth_dataset(35, 0.3, 1).unwrap();
        assert_eq!(s.manifest.per_keyword_counts(Split::Train), [20; 10]);
        assert_eq!(s.manifest.per_keyword_counts(Split::Validation), [5; 10]);
        assert_eq!(s.manifest.per_keyword_counts(Split::Test), [10; 10]);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = synth_dataset(5, 0.0, 9).unwrap();
        let b = synth_dataset(5, 0.0, 9).unwrap();
        assert_eq!(a.clips, b.clips);
        let c = synth_dataset(5, 0.3, 10).unwrap();
        assert_ne!(a.clips[0].samples, c.clips[0].samples);
        for (x, y) in a.clips.iter().zip(&c.clips) {
            assert_eq!(x.samples.len(), y.samples.len());
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn samples_bounded_and_one_second() {
        let s = synth_dataset(3, 0.5, 2).unwrap();
        for c in &s.clips {
            assert_eq!(c.samples.len(), CLIP_SAMPLES);
            assert!(c.samples.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
            assert!(c.samples.iter().any(|v| *v != 0.0));
        }
    }

    #[test]
    fn odd_classes_have_two_syllables() {
        let count_onsets = |class: usize| {
            let env: Vec<f64> = (0..=1000).map(|i| envelope(class, i as f64 / 1000.0)).collect();
            env.windows(2).filter(|w| w[0] < 0.5 && w[1] >= 0.5).count()
        };
        for class in 0..10 {
            assert_eq!(count_onsets(class), 1 + class % 2, "class {class}");
        }
        assert_eq!(envelope(3, -0.1), 0.0);
        assert_eq!(envelope(3, 1.1), 0.0);
    }

    #[test]
    fn zero_size_rejected() {
        assert!(synth_dataset(0, 0.1, 0).is_err());
    }
}
