use std::path::Path;

use super::{KeywordLabel, CLIP_SAMPLES, SAMPLE_RATE};
use crate::{Error, Result};

/// A mono 16 kHz waveform with its keyword label and speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct WavClip {
    /// Amplitudes in `[-1, 1]`.
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub label: KeywordLabel,
    pub speaker_id: String,
    pub source_path: String,
}

/// Splits `<word>/<speaker>_nohash_<n>.wav` into label and speaker id.
pub fn parse_clip_path(path: &Path) -> Result<(KeywordLabel, String)> {
    let bad = |why: &str| Error::InvalidInput(format!("{}: {why}", path.display()));
    let file = path
        .file_name()
        .and_then(|f| f.to_str())
        .ok_or_else(|| bad("no file name"))?;
    let word = path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|w| w.to_str())
        .ok_or_else(|| bad("no parent word directory"))?;
    let label = KeywordLabel::from_name(word).ok_or_else(|| bad("not a target keyword"))?;
    let speaker = file
        .split_once("_nohash_")
        .map(|(s, _)| s)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| bad("expected <speaker>_nohash_<n>.wav"))?;
    Ok((label, speaker.to_string()))
}

// hound reports short reads as `Other` with a fixed message.
fn is_short_read(e: &std::io::Error) -> bool {
    e.kind() == std::io::ErrorKind::UnexpectedEof
        || (e.kind() == std::io::ErrorKind::Other && e.to_string() == "Failed to read enough bytes.")
}

fn map_hound(path: &Path, err: hound::Error) -> Error {
    let path = path.to_path_buf();
    match err {
        hound::Error::IoError(e) if is_short_read(&e) => Error::Format {
            path,
            reason: "truncated file".into(),
        },
        hound::Error::IoError(e) => Error::Io { path, source: e },
        hound::Error::FormatError(reason) => Error::Format {
            path,
            reason: reason.into(),
        },
        hound::Error::UnfinishedSample => Error::Format {
            path,
            reason: "data chunk ends inside a sample".into(),
        },
        other => Error::UnsupportedFormat {
            path,
            reason: other.to_string(),
        },
    }
}

/// Reads a 16 kHz mono 16-bit PCM file. Other variants are rejected, never resampled.
pub fn load_wav(path: impl AsRef<Path>) -> Result<WavClip> {
    let path = path.as_ref();
    let (label, speaker_id) = parse_clip_path(path)?;
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let unsupported = |reason: String| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        reason,
    };
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!(
            "{:?} {}-bit samples, expected 16-bit PCM",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(unsupported(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(unsupported(format!(
            "{} Hz, expected {SAMPLE_RATE} Hz",
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f32::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| map_hound(path, e))?;
    Ok(WavClip {
        samples,
        sample_rate: SAMPLE_RATE,
        label,
        speaker_id,
        source_path: path.to_string_lossy().into_owned(),
    })
}

/// Duration in seconds from the header alone.
pub fn wav_duration_secs(path: impl AsRef<Path>) -> Result<f64> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    Ok(f64::from(reader.duration()) / f64::from(reader.spec().sample_rate))
}

/// Writes samples as 16 kHz mono 16-bit PCM, rounding `x * 32768` and clamping.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in samples {
        let v = (f64::from(s) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

/// Right-pads with zeros or drops the tail so the clip has exactly `target` samples.
pub fn pad_or_trim(mut clip: WavClip, target: usize) -> Result<WavClip> {
    if clip.samples.is_empty() {
        return Err(Error::InvalidInput(format!(
            "empty clip {}",
            clip.source_path
        )));
    }
    clip.samples.resize(target, 0.0);
    Ok(clip)
}

impl WavClip {
    /// Loads and pads/trims to one second.
    pub fn load_padded(path: impl AsRef<Path>) -> Result<WavClip> {
        pad_or_trim(load_wav(path)?, CLIP_SAMPLES)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(samples: Vec<f32>) -> WavClip {
        WavClip {
            samples,
            sample_rate: SAMPLE_RATE,
            label: KeywordLabel::new(0).unwrap(),
            speaker_id: "s".into(),
            source_path: "up/s_nohash_0.wav".into(),
        }
    }

    fn write_i16(path: &Path, spec: hound::WavSpec, values: &[i16]) {
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &v in values {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
    }

    fn pcm16(rate: u32, channels: u16) -> hound::WavSpec {
        hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        }
    }

    #[test]
    fn silence_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("yes")).unwrap();
        let path = dir.path().join("yes/abc123_nohash_0.wav");
        write_i16(&path, pcm16(16000, 1), &[0; 16000]);
        let clip = load_wav(&path).unwrap();
        assert_eq!(clip.samples.len(), 16000);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
        assert_eq!(clip.speaker_id, "abc123");
        assert_eq!(clip.label.name(), "yes");
    }

    #[test]
    fn full_scale_positive_maps_below_one() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("go")).unwrap();
        let path = dir.path().join("go/x_nohash_1.wav");
        write_i16(&path, pcm16(16000, 1), &[32767; 100]);
        let clip = load_wav(&path).unwrap();
        let expected = 32767.0f32 / 32768.0;
        assert!(clip.samples.iter().all(|&s| s == expected));
        assert!((expected - 0.99997).abs() < 1e-5);
    }

    #[test]
    fn rejects_wrong_rate_channels_and_depth() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("no")).unwrap();
        let rate = dir.path().join("no/a_nohash_0.wav");
        write_i16(&rate, pcm16(8000, 1), &[0; 10]);
        assert!(matches!(load_wav(&rate), Err(Error::UnsupportedFormat { .. })));

        let stereo = dir.path().join("no/b_nohash_0.wav");
        write_i16(&stereo, pcm16(16000, 2), &[0; 10]);
        assert!(matches!(load_wav(&stereo), Err(Error::UnsupportedFormat { .. })));

        let float = dir.path().join("no/c_nohash_0.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&float, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&float), Err(Error::UnsupportedFormat { .. })));
    }

    #[test]
    fn malformed_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("up")).unwrap();
        let path = dir.path().join("up/a_nohash_0.wav");
        std::fs::write(&path, b"RIFX\x00\x00\x00\x00WAVEjunk").unwrap();
        let r = load_wav(&path);
        assert!(matches!(r, Err(Error::Format { .. })), "{r:?}");
        std::fs::write(&path, b"RIFF").unwrap();
        let r = load_wav(&path);
        assert!(matches!(r, Err(Error::Format { .. })), "{r:?}");
    }

    #[test]
    fn path_convention() {
        let (label, speaker) = parse_clip_path(Path::new("yes/abc123_nohash_0.wav")).unwrap();
        assert_eq!(label.name(), "yes");
        assert_eq!(speaker, "abc123");
        assert!(parse_clip_path(Path::new("yes/abc123.wav")).is_err());
        assert!(parse_clip_path(Path::new("marvin/a_nohash_0.wav")).is_err());
    }

    #[test]
    fn pad_or_trim_rules() {
        let same: Vec<f32> = (0..16000).map(|i| i as f32 / 16000.0).collect();
        assert_eq!(pad_or_trim(clip(same.clone()), 16000).unwrap().samples, same);

        let short: Vec<f32> = vec![0.25; 12000];
        let out = pad_or_trim(clip(short), 16000).unwrap().samples;
        assert_eq!(out.len(), 16000);
        assert!(out[..12000].iter().all(|&s| s == 0.25));
        assert!(out[12000..].iter().all(|&s| s == 0.0));

        let long: Vec<f32> = (0..17000).map(|i| i as f32).collect();
        let out = pad_or_trim(clip(long.clone()), 16000).unwrap().samples;
        assert_eq!(out, long[..16000]);

        assert!(matches!(
            pad_or_trim(clip(vec![]), 16000),
            Err(Error::InvalidInput(_))
        ));
    }
}
