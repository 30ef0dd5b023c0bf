//! Log-Mel filterbank features: 25 ms periodic-Hann frames every 10 ms,
//! a 512-point FFT and 64 HTK-mel triangular filters between 20 Hz and 8 kHz.

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dataset::{CLIP_SAMPLES, SAMPLE_RATE};
use crate::{Error, Result};

pub const N_FRAMES: usize = 98;
pub const N_MELS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FBankSpec {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for FBankSpec {
    fn default() -> Self {
        FBankSpec {
            sample_rate: SAMPLE_RATE,
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            n_mels: N_MELS,
            f_min: 20.0,
            f_max: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl FBankSpec {
    pub fn validate(&self) -> Result<()> {
        if self.win_length == 0 || self.win_length > self.n_fft {
            return Err(Error::InvalidArgument(format!(
                "win_length {} must be in 1..={}",
                self.win_length, self.n_fft
            )));
        }
        if self.hop_length == 0 || self.hop_length > self.win_length {
            return Err(Error::InvalidArgument(format!(
                "hop_length {} must be in 1..={}",
                self.hop_length, self.win_length
            )));
        }
        if self.n_mels == 0 || !(self.log_floor > 0.0) {
            return Err(Error::InvalidArgument("n_mels and log_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.win_length {
            0
        } else {
            1 + (n_samples - self.win_length) / self.hop_length
        }
    }
}

/// Row-major `rows x cols` matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Log filterbank energies of one clip, `98 x 64`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub values: Matrix,
    pub provenance: String,
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window of length `n`.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
        .collect()
}

/// Center frequencies (Hz) of the filters, uniformly spaced in mel.
pub fn mel_centers(spec: &FBankSpec) -> Vec<f64> {
    let lo = hz_to_mel(spec.f_min);
    let hi = hz_to_mel(spec.f_max);
    let step = (hi - lo) / (spec.n_mels + 1) as f64;
    (1..=spec.n_mels).map(|i| mel_to_hz(lo + step * i as f64)).collect()
}

/// `n_mels x (n_fft/2 + 1)` triangular filter matrix.
pub fn mel_filterbank(spec: &FBankSpec) -> Result<Matrix> {
    spec.validate()?;
    if !(spec.f_min >= 0.0 && spec.f_min < spec.f_max) || spec.f_max > f64::from(spec.sample_rate) / 2.0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate band [{}, {}] Hz",
            spec.f_min, spec.f_max
        )));
    }
    let lo = hz_to_mel(spec.f_min);
    let hi = hz_to_mel(spec.f_max);
    let step = (hi - lo) / (spec.n_mels + 1) as f64;
    let edges: Vec<f64> = (0..spec.n_mels + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect();
    let bin_hz = f64::from(spec.sample_rate) / spec.n_fft as f64;

    let mut filters = Matrix::zeros(spec.n_mels, spec.n_bins());
    for m in 0..spec.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = filters.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mel filter {m} covers no FFT bin; use fewer filters or a larger n_fft"
            )));
        }
    }
    Ok(filters)
}

/// Precomputed window, FFT plan and filter matrix, shared read-only between threads.
pub struct FBank {
    spec: FBankSpec,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filters: Matrix,
    /// Nonzero bin range `[lo, hi)` of each filter.
    support: Vec<(usize, usize)>,
}

impl std::fmt::Debug for FBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FBank").field("spec", &self.spec).finish_non_exhaustive()
    }
}

impl FBank {
    pub fn new(spec: FBankSpec) -> Result<Self> {
        let filters = mel_filterbank(&spec)?;
        let fft = FftPlanner::new().plan_fft_forward(spec.n_fft);
        let support = (0..filters.rows)
            .map(|m| {
                let row = filters.row(m);
                let lo = row.iter().position(|&w| w != 0.0).unwrap_or(0);
                let hi = row.iter().rposition(|&w| w != 0.0).map_or(lo, |i| i + 1);
                (lo, hi)
            })
            .collect();
        Ok(FBank {
            window: hann_periodic(spec.win_length),
            spec,
            fft,
            filters,
            support,
        })
    }

    /// The default front end, built once per process.
    pub fn standard() -> &'static FBank {
        static CELL: OnceLock<FBank> = OnceLock::new();
        CELL.get_or_init(|| FBank::new(FBankSpec::default()).expect("default spec is valid"))
    }

    pub fn spec(&self) -> &FBankSpec {
        &self.spec
    }

    pub fn filters(&self) -> &Matrix {
        &self.filters
    }

    /// `98 x 257` power spectrogram of a one-second waveform.
    pub fn stft_power(&self, wave: &[f32]) -> Result<Matrix> {
        if wave.len() != CLIP_SAMPLES {
            return Err(Error::InvalidInput(format!(
                "expected {CLIP_SAMPLES} samples, got {}",
                wave.len()
            )));
        }
        let spec = &self.spec;
        let n_frames = spec.n_frames(wave.len());
        let mut out = Matrix::zeros(n_frames, spec.n_bins());
        let mut buf = vec![Complex64::default(); spec.n_fft];
        let mut scratch = vec![Complex64::default(); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let frame = &wave[t * spec.hop_length..t * spec.hop_length + spec.win_length];
            buf.fill(Complex64::default());
            for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                b.re = f64::from(x) * w;
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (o, c) in out.row_mut(t).iter_mut().zip(&buf) {
                *o = c.norm_sqr();
            }
        }
        Ok(out)
    }

    /// `log(max(power . filters^T, log_floor))`, shape `98 x 64`.
    pub fn log_fbank(&self, wave: &[f32]) -> Result<Matrix> {
        let power = self.stft_power(wave)?;
        let floor = self.spec.log_floor;
        let n_mels = self.filters.rows;
        let mut out = Matrix::zeros(power.rows, n_mels);
        for t in 0..power.rows {
            let p = power.row(t);
            for (m, &(lo, hi)) in self.support.iter().enumerate() {
                let energy: f64 = self.filters.row(m)[lo..hi].iter().zip(&p[lo..hi]).map(|(w, x)| w * x).sum();
                out.data[t * n_mels + m] = energy.max(floor).ln();
            }
        }
        Ok(out)
    }
}

/// Shifts and scales `m` in place to zero mean and unit variance over all
/// entries. A constant matrix becomes all zeros.
pub fn standardize(m: &mut Matrix) {
    let n = m.data.len() as f64;
    if n == 0.0 {
        return;
    }
    let mean = m.data.iter().sum::<f64>() / n;
    let var = m.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 1e-12 { var.sqrt().recip() } else { 0.0 };
    m.data.iter_mut().for_each(|v| *v = (*v - mean) * scale);
}

pub fn stft_power(wave: &[f32], spec: &FBankSpec) -> Result<Matrix> {
    FBank::new(spec.clone())?.stft_power(wave)
}

pub fn log_fbank(wave: &[f32], spec: &FBankSpec) -> Result<FeatureMatrix> {
    let bank = if *spec == FBankSpec::default() {
        FBank::standard()
    } else {
        &FBank::new(spec.clone())?
    };
    Ok(FeatureMatrix {
        values: bank.log_fbank(wave)?,
        provenance: String::new(),
    })
}

/// Writes `"FBNK", u32 rows, u32 cols, u32 0` then little-endian f32 values, row-major.
pub fn write_feature_dump(path: impl AsRef<Path>, features: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(16 + 4 * features.data.len());
    bytes.extend_from_slice(b"FBNK");
    bytes.extend_from_slice(&(features.rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(features.cols as u32).to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    for v in &features.data {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_dump(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::InvalidInput(format!("{}: {why}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != b"FBNK" {
        return Err(bad("missing FBNK header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (rows, cols) = (word(4), word(8));
    if bytes.len() != 16 + 4 * rows * cols {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(Matrix { rows, cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_is_98() {
        assert_eq!(FBankSpec::default().n_frames(16000), N_FRAMES);
    }

    #[test]
    fn zeros_give_zero_power_and_floor() {
        let bank = FBank::standard();
        let zeros = vec![0.0f32; 16000];
        let p = bank.stft_power(&zeros).unwrap();
        assert_eq!((p.rows, p.cols), (98, 257));
        assert!(p.data.iter().all(|&v| v == 0.0));
        let f = bank.log_fbank(&zeros).unwrap();
        assert_eq!((f.rows, f.cols), (98, 64));
        let floor = 1e-10f64.ln();
        assert!(f.data.iter().all(|&v| v == floor));
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(matches!(
            FBank::standard().stft_power(&[0.0; 15999]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn filter_rows_positive_and_centers_increasing() {
        let spec = FBankSpec::default();
        let filters = mel_filterbank(&spec).unwrap();
        assert_eq!((filters.rows, filters.cols), (64, 257));
        for m in 0..64 {
            let row = filters.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0);
        }
        let centers = mel_centers(&spec);
        assert!(centers.windows(2).all(|w| w[0] < w[1]));
        // HTK mel points evenly spaced between 20 Hz and 8 kHz, 66 edges.
        assert!((centers[0] - 48.137_671).abs() < 1e-5, "{}", centers[0]);
        assert!((centers[63] - 7672.790_519).abs() < 1e-5, "{}", centers[63]);
        assert!(centers[63] < 8000.0);
    }

    #[test]
    fn standardize_gives_zero_mean_unit_variance() {
        let mut m = Matrix::zeros(4, 3);
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = (i as f64).powi(2) - 5.0;
        }
        standardize(&mut m);
        let mean = m.data.iter().sum::<f64>() / 12.0;
        let var = m.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);

        let mut flat = Matrix::zeros(2, 2);
        flat.data.fill(-23.0);
        standardize(&mut flat);
        assert!(flat.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sparse_filter_product_matches_dense() {
        let fb = FBank::standard();
        let wave: Vec<f32> = (0..CLIP_SAMPLES).map(|i| ((i as f32) * 0.37).sin() * 0.2).collect();
        let power = fb.stft_power(&wave).unwrap();
        let fast = fb.log_fbank(&wave).unwrap();
        for t in [0, 50, 97] {
            for m in 0..64 {
                let e: f64 = fb.filters().row(m).iter().zip(power.row(t)).map(|(w, x)| w * x).sum();
                assert!((e.max(fb.spec().log_floor).ln() - fast.get(t, m)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_band_rejected() {
        let spec = FBankSpec {
            f_min: 8000.0,
            f_max: 8000.0,
            ..FBankSpec::default()
        };
        assert!(matches!(mel_filterbank(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn feature_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.fbnk");
        let mut m = Matrix::zeros(98, 64);
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = i as f64 * 0.5 - 7.0;
        }
        write_feature_dump(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"FBNK");
        assert_eq!(bytes.len(), 16 + 98 * 64 * 4);
        assert_eq!(read_feature_dump(&path).unwrap(), m);
    }
}
