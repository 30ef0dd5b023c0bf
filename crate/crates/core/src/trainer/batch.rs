use rand::Rng;
use rayon::prelude::*;

use super::TrainConfig;
use crate::augment::{augment_waveform, mixup_waveforms, sample_beta, spec_augment, AugmentConfig};
use crate::autodiff::{Real, Tensor};
use crate::dataset::{Corpus, NUM_CLASSES};
use crate::features::{standardize, FBank, Matrix, N_FRAMES, N_MELS};
use crate::{rng, Error, Result};

/// Counters that fully determine a batch's randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchKey {
    pub seed: u64,
    pub epoch: u32,
    pub batch: u32,
}

impl BatchKey {
    fn row_rng(&self, row: usize, stream: u64) -> rng::Rng {
        rng::keyed(&[self.seed, u64::from(self.epoch), u64::from(self.batch), row as u64], stream)
    }
}

/// Three parallel views per slot: the mixed clip and the two pre-mixed clips.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    /// `[B, 98, 64]` features of the augmented mixed clip.
    pub feats_mix: Tensor<f32>,
    /// Independently augmented views of `x_i` and `x_j`; absent when not requested.
    pub feats_i: Option<Tensor<f32>>,
    pub feats_j: Option<Tensor<f32>>,
    pub labels_i: Vec<usize>,
    pub labels_j: Vec<usize>,
    /// Mixing weight of `x_i`; exactly 1 for unmixed rows.
    pub lambdas: Vec<f64>,
    pub is_mixed: Vec<bool>,
    /// Corpus entry indices `(i, j)`; equal for unmixed rows.
    pub sources: Vec<(usize, usize)>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    fn one_hot<T: Real>(labels: &[usize]) -> Tensor<T> {
        let mut t = Tensor::zeros(&[labels.len(), NUM_CLASSES]);
        for (row, &k) in labels.iter().enumerate() {
            t.data_mut()[row * NUM_CLASSES + k] = T::one();
        }
        t
    }

    pub fn y_i<T: Real>(&self) -> Tensor<T> {
        Self::one_hot(&self.labels_i)
    }

    pub fn y_j<T: Real>(&self) -> Tensor<T> {
        Self::one_hot(&self.labels_j)
    }

    /// The label carrying the larger share of each row (ties go to `i`).
    pub fn dominant_labels(&self) -> Vec<usize> {
        self.lambdas
            .iter()
            .zip(self.labels_i.iter().zip(&self.labels_j))
            .map(|(&l, (&i, &j))| if l >= 0.5 { i } else { j })
            .collect()
    }
}

/// Log-Mel features standardized per utterance; the model input without augmentation.
pub(crate) fn clean_view(wave: &[f32]) -> Result<Matrix> {
    let mut feats = FBank::standard().log_fbank(wave)?;
    standardize(&mut feats);
    Ok(feats)
}

/// One augmented feature view: shift, stretch, standardized log-Mel, SpecAugment.
pub(crate) fn feature_view(wave: &[f32], aug: &AugmentConfig, rng: &mut rng::Rng) -> Result<Matrix> {
    let wave = augment_waveform(wave, aug, rng);
    spec_augment(&clean_view(&wave)?, aug, rng)
}

pub(crate) fn stack(mats: &[Matrix]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(mats.len() * N_FRAMES * N_MELS);
    for m in mats {
        data.extend(m.data.iter().map(|&v| v as f32));
    }
    Tensor::new(vec![mats.len(), N_FRAMES, N_MELS], data)
}

struct Row {
    i: usize,
    j: usize,
    lambda: f64,
    mixed: bool,
    mix: Matrix,
    view_i: Option<Matrix>,
    view_j: Option<Matrix>,
}

/// Builds one training batch from `sources` (corpus entry indices).
///
/// Each slot is mixed with probability `mix_ratio`: the partner `j` is drawn
/// uniformly from `pool` without `i` and `lambda ~ Beta(alpha, alpha)`.
/// Unmixed slots use `j = i`, `lambda = 1`. The three waveform views are
/// then augmented independently. Randomness is keyed by
/// `(seed, epoch, batch, row)`, so the result does not depend on threading.
pub fn compose_batch(
    corpus: &Corpus,
    sources: &[usize],
    pool: &[usize],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    key: BatchKey,
    with_targets: bool,
) -> Result<MixedBatch> {
    if pool.len() < 2 {
        return Err(Error::Dataset(format!(
            "need at least 2 training entries to compose a batch, have {}",
            pool.len()
        )));
    }
    debug_assert!(pool.windows(2).all(|w| w[0] < w[1]), "pool must be sorted");
    let params = &cfg.beta_params;

    let rows = sources
        .par_iter()
        .enumerate()
        .map(|(row, &i)| -> Result<Row> {
            let mut r = key.row_rng(row, 0);
            let u: f64 = r.random();
            let mixed = u < params.mix_ratio;
            let (j, lambda) = if mixed {
                let pos = pool.binary_search(&i).ok();
                let mut k = r.random_range(0..pool.len() - usize::from(pos.is_some()));
                if let Some(p) = pos {
                    if k >= p {
                        k += 1;
                    }
                }
                (pool[k], sample_beta(params, &mut r)?)
            } else {
                (i, 1.0)
            };
            let x_i = corpus.wave(i);
            let mixed_wave = if mixed {
                mixup_waveforms(x_i, corpus.wave(j), lambda)?
            } else {
                x_i.to_vec()
            };
            let mix = feature_view(&mixed_wave, aug, &mut key.row_rng(row, 1))?;
            let (view_i, view_j) = if with_targets {
                (
                    Some(feature_view(x_i, aug, &mut key.row_rng(row, 2))?),
                    Some(feature_view(corpus.wave(j), aug, &mut key.row_rng(row, 3))?),
                )
            } else {
                (None, None)
            };
            Ok(Row {
                i,
                j,
                lambda,
                mixed,
                mix,
                view_i,
                view_j,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mixes: Vec<Matrix> = rows.iter().map(|r| r.mix.clone()).collect();
    let (feats_i, feats_j) = if with_targets {
        let vi: Vec<Matrix> = rows.iter().filter_map(|r| r.view_i.clone()).collect();
        let vj: Vec<Matrix> = rows.iter().filter_map(|r| r.view_j.clone()).collect();
        (Some(stack(&vi)?), Some(stack(&vj)?))
    } else {
        (None, None)
    };
    Ok(MixedBatch {
        feats_mix: stack(&mixes)?,
        feats_i,
        feats_j,
        labels_i: rows.iter().map(|r| corpus.label(r.i)).collect(),
        labels_j: rows.iter().map(|r| corpus.label(r.j)).collect(),
        lambdas: rows.iter().map(|r| r.lambda).collect(),
        is_mixed: rows.iter().map(|r| r.mixed).collect(),
        sources: rows.iter().map(|r| (r.i, r.j)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_dataset, Split};

    fn corpus() -> Corpus {
        let s = synth_dataset(5, 0.3, 0).unwrap();
        Corpus::from_clips(s.manifest, s.clips).unwrap()
    }

    fn compose(corpus: &Corpus, cfg: &TrainConfig, batch: u32, rows: usize, targets: bool) -> MixedBatch {
        let pool = corpus.indices(Split::Train);
        let sources: Vec<usize> = (0..rows).map(|r| pool[r % pool.len()]).collect();
        let key = BatchKey { seed: 4, epoch: 1, batch };
        compose_batch(corpus, &sources, &pool, cfg, &AugmentConfig::default(), key, targets).unwrap()
    }

    #[test]
    fn about_half_the_rows_are_mixed() {
        let corpus = corpus();
        let cfg = TrainConfig::default();
        let mut mixed = 0;
        let mut total = 0;
        for b in 0..10 {
            let batch = compose(&corpus, &cfg, b, 128, false);
            mixed += batch.is_mixed.iter().filter(|&&m| m).count();
            total += batch.len();
            for ((&m, &l), &(i, j)) in batch.is_mixed.iter().zip(&batch.lambdas).zip(&batch.sources) {
                if m {
                    assert_ne!(i, j);
                    assert!((0.0..=1.0).contains(&l));
                } else {
                    assert_eq!((i, l), (j, 1.0));
                }
            }
        }
        let fraction = mixed as f64 / total as f64;
        assert!((0.45..=0.55).contains(&fraction), "{fraction}");
    }

    #[test]
    fn mix_ratio_extremes() {
        let corpus = corpus();
        let mut cfg = TrainConfig::default();
        cfg.beta_params.mix_ratio = 0.0;
        assert!(compose(&corpus, &cfg, 0, 64, false).is_mixed.iter().all(|&m| !m));
        cfg.beta_params.mix_ratio = 1.0;
        assert!(compose(&corpus, &cfg, 0, 64, false).is_mixed.iter().all(|&m| m));
    }

    #[test]
    fn same_key_same_batch() {
        let corpus = corpus();
        let cfg = TrainConfig::default();
        let a = compose(&corpus, &cfg, 3, 16, true);
        let b = compose(&corpus, &cfg, 3, 16, true);
        assert_eq!(a.feats_mix, b.feats_mix);
        assert_eq!(a.feats_j, b.feats_j);
        assert_eq!(a.lambdas, b.lambdas);
        assert_ne!(compose(&corpus, &cfg, 4, 16, false).lambdas, a.lambdas);
        assert_eq!(a.feats_i.as_ref().unwrap().shape(), &[16, N_FRAMES, N_MELS]);
    }

    #[test]
    fn dominant_label_follows_the_larger_share() {
        let corpus = corpus();
        let batch = compose(&corpus, &TrainConfig::default(), 0, 32, false);
        for (r, &d) in batch.dominant_labels().iter().enumerate() {
            let want = if batch.lambdas[r] >= 0.5 { batch.labels_i[r] } else { batch.labels_j[r] };
            assert_eq!(d, want);
        }
    }
}
