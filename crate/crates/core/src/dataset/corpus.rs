use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use super::{DatasetManifest, Split, WavClip, CLIP_SAMPLES};
use crate::{Error, Result};

/// A manifest together with the padded one-second waveforms of its entries.
///
/// Only the requested splits are held in memory; waveforms are immutable and
/// shared across worker threads.
#[derive(Clone, Debug)]
pub struct Corpus {
    manifest: DatasetManifest,
    waves: Vec<Option<Arc<[f32]>>>,
}

impl Corpus {
    /// Loads the waveforms of `splits` from disk in parallel.
    pub fn load(manifest: DatasetManifest, splits: &[Split]) -> Result<Self> {
        let waves = manifest
            .entries
            .par_iter()
            .map(|e| {
                if !splits.contains(&e.split) {
                    return Ok(None);
                }
                let clip = WavClip::load_padded(&e.path)?;
                Ok(Some(Arc::from(clip.samples)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { manifest, waves })
    }

    /// Pairs an in-memory clip set (e.g. a synthetic corpus) with its manifest by path.
    pub fn from_clips(manifest: DatasetManifest, clips: Vec<WavClip>) -> Result<Self> {
        let mut by_path: HashMap<String, WavClip> =
            clips.into_iter().map(|c| (c.source_path.clone(), c)).collect();
        let waves = manifest
            .entries
            .iter()
            .map(|e| {
                let clip = by_path
                    .remove(&e.path)
                    .ok_or_else(|| Error::Dataset(format!("no clip for manifest entry {}", e.path)))?;
                let clip = super::pad_or_trim(clip, CLIP_SAMPLES)?;
                Ok(Some(Arc::from(clip.samples)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { manifest, waves })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    /// Waveform of entry `index`; panics if its split was not loaded.
    pub fn wave(&self, index: usize) -> &[f32] {
        self.waves[index]
            .as_deref()
            .unwrap_or_else(|| panic!("split of entry {index} not loaded"))
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest.indices(split)
    }

    pub fn label(&self, index: usize) -> usize {
        self.manifest.entries[index].label.index()
    }
}
