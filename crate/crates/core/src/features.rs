//! MFCC + delta front end.
//!
//! Processing chain per segment:
//! 1. 25 ms frames (400 samples) every 10 ms (160 samples)
//! 2. per-frame pre-emphasis (0.97) and Hamming window
//! 3. 512-point FFT power spectrum
//! 4. 26 triangular mel filters over 0-8000 Hz, natural log floored at 1e-10
//! 5. orthonormal DCT-II, keep c0..c12
//! 6. regression deltas over +-2 frames, giving 26 values per frame
//! 7. drop frames whose raw energy is more than `drop_db` below the loudest frame

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::format::{read_file, write_file, ByteReader, ByteWriter};
use crate::wav::{SampleBuffer, SAMPLE_RATE};

pub const FRAME_LEN: usize = 400;
pub const HOP: usize = 160;
pub const FFT_LEN: usize = 512;
pub const N_MEL: usize = 26;
pub const N_CEPS: usize = 13;
pub const FEATURE_DIM: usize = 2 * N_CEPS;
pub const PRE_EMPHASIS: f64 = 0.97;
pub const LOG_FLOOR: f64 = 1e-10;
pub const DELTA_WINDOW: usize = 2;
pub const DEFAULT_DROP_DB: f64 = 30.0;
/// Seconds between consecutive frame starts.
pub const FRAME_STEP: f64 = HOP as f64 / SAMPLE_RATE as f64;

const FEATURE_MAGIC: &[u8; 8] = b"SPKFTR1\0";

/// Per-segment sequence of feature vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub segment_id: String,
    dim: usize,
    data: Vec<f64>,
    /// Start offset of each frame in seconds.
    pub frame_times: Vec<f64>,
}

impl FrameMatrix {
    /// Frame times default to the nominal 10 ms grid.
    pub fn new(segment_id: impl Into<String>, dim: usize, data: Vec<f64>) -> Result<Self> {
        let segment_id = segment_id.into();
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: data.len(),
            });
        }
        if data.is_empty() {
            return Err(Error::EmptySegment(segment_id));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "segment {segment_id} contains non-finite feature values"
            )));
        }
        let n = data.len() / dim;
        let frame_times = (0..n).map(|t| t as f64 * FRAME_STEP).collect();
        Ok(Self {
            segment_id,
            dim,
            data,
            frame_times,
        })
    }

    pub fn from_rows(segment_id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        Self::new(segment_id, dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Segment duration implied by its (post-gating) frame count.
    pub fn duration(&self) -> f64 {
        self.n_frames() as f64 * FRAME_STEP
    }

    /// Keeps only the listed frames, in the given order.
    pub fn select(&self, keep: &[usize]) -> FrameMatrix {
        let mut data = Vec::with_capacity(keep.len() * self.dim);
        let mut frame_times = Vec::with_capacity(keep.len());
        for &t in keep {
            data.extend_from_slice(self.row(t));
            frame_times.push(self.frame_times[t]);
        }
        FrameMatrix {
            segment_id: self.segment_id.clone(),
            dim: self.dim,
            data,
            frame_times,
        }
    }
}

/// Windowed analysis frames plus the log energy of each raw (unprocessed) frame.
#[derive(Debug, Clone)]
pub struct FramedSignal {
    pub windowed: Vec<Vec<f64>>,
    pub log_energies: Vec<f64>,
}

impl FramedSignal {
    pub fn len(&self) -> usize {
        self.windowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windowed.is_empty()
    }
}

pub fn frame_count(n_samples: usize) -> usize {
    if n_samples < FRAME_LEN {
        0
    } else {
        (n_samples - FRAME_LEN) / HOP + 1
    }
}

pub fn hamming(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

pub fn frame_signal(buf: &SampleBuffer) -> Result<FramedSignal> {
    let n_frames = frame_count(buf.len());
    if n_frames == 0 {
        return Err(Error::TooShort {
            samples: buf.len(),
            needed: FRAME_LEN,
        });
    }
    let window = hamming(FRAME_LEN);
    let mut windowed = Vec::with_capacity(n_frames);
    let mut log_energies = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let raw: Vec<f64> = buf.samples[f * HOP..f * HOP + FRAME_LEN]
            .iter()
            .map(|&s| f64::from(s) / 32768.0)
            .collect();
        let energy: f64 = raw.iter().map(|x| x * x).sum();
        log_energies.push(energy.max(LOG_FLOOR).ln());

        let mut out = Vec::with_capacity(FRAME_LEN);
        out.push(raw[0] * window[0]);
        for n in 1..FRAME_LEN {
            out.push((raw[n] - PRE_EMPHASIS * raw[n - 1]) * window[n]);
        }
        windowed.push(out);
    }
    Ok(FramedSignal {
        windowed,
        log_energies,
    })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// One triangular filter: first nonzero FFT bin and its weights.
#[derive(Debug, Clone)]
struct MelFilter {
    start: usize,
    weights: Vec<f64>,
}

/// Precomputed filterbank, DCT basis and FFT plan. Cheap to share across threads.
pub struct MfccExtractor {
    fft: Arc<dyn Fft<f64>>,
    filters: Vec<MelFilter>,
    dct: Vec<[f64; N_MEL]>,
}

impl std::fmt::Debug for MfccExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccExtractor").finish_non_exhaustive()
    }
}

impl Default for MfccExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl MfccExtractor {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_LEN);

        let lo = hz_to_mel(0.0);
        let hi = hz_to_mel(f64::from(SAMPLE_RATE) / 2.0);
        let edges: Vec<f64> = (0..N_MEL + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MEL + 1) as f64))
            .collect();
        let bin_hz = f64::from(SAMPLE_RATE) / FFT_LEN as f64;
        let filters = (0..N_MEL)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                let mut start = None;
                let mut weights = Vec::new();
                for k in 0..=FFT_LEN / 2 {
                    let f = k as f64 * bin_hz;
                    let w = if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        start.get_or_insert(k);
                        weights.push(w);
                    } else if start.is_some() {
                        break;
                    }
                }
                MelFilter {
                    start: start.unwrap_or(0),
                    weights,
                }
            })
            .collect();

        let dct = (0..N_CEPS)
            .map(|k| {
                let scale = if k == 0 {
                    (1.0 / N_MEL as f64).sqrt()
                } else {
                    (2.0 / N_MEL as f64).sqrt()
                };
                let mut row = [0.0; N_MEL];
                for (m, v) in row.iter_mut().enumerate() {
                    *v = scale
                        * (PI * k as f64 * (2 * m + 1) as f64 / (2 * N_MEL) as f64).cos();
                }
                row
            })
            .collect();

        Self { fft, filters, dct }
    }

    /// Log mel filterbank energies of one windowed frame.
    pub fn log_mel(&self, frame: &[f64]) -> [f64; N_MEL] {
        let mut spec: Vec<Complex<f64>> = frame
            .iter()
            .map(|&x| Complex::new(x, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(FFT_LEN)
            .collect();
        self.fft.process(&mut spec);
        let power: Vec<f64> = spec[..=FFT_LEN / 2].iter().map(|c| c.norm_sqr()).collect();

        let mut out = [0.0; N_MEL];
        for (o, filt) in out.iter_mut().zip(&self.filters) {
            let e: f64 = filt
                .weights
                .iter()
                .zip(&power[filt.start..])
                .map(|(w, p)| w * p)
                .sum();
            *o = e.max(LOG_FLOOR).ln();
        }
        out
    }

    pub fn cepstrum(&self, log_mel: &[f64; N_MEL]) -> [f64; N_CEPS] {
        let mut out = [0.0; N_CEPS];
        for (o, basis) in out.iter_mut().zip(&self.dct) {
            *o = basis.iter().zip(log_mel).map(|(b, x)| b * x).sum();
        }
        out
    }

    pub fn mfcc_sequence(&self, frames: &FramedSignal) -> Vec<[f64; N_CEPS]> {
        frames
            .windowed
            .iter()
            .map(|f| self.cepstrum(&self.log_mel(f)))
            .collect()
    }
}

/// Appends regression deltas over +-2 frames, replicating the edge rows.
pub fn append_deltas(mfcc: &[[f64; N_CEPS]]) -> Vec<[f64; FEATURE_DIM]> {
    let n = mfcc.len();
    let denom = 2.0 * (1..=DELTA_WINDOW).map(|k| (k * k) as f64).sum::<f64>();
    (0..n)
        .map(|t| {
            let mut row = [0.0; FEATURE_DIM];
            row[..N_CEPS].copy_from_slice(&mfcc[t]);
            for j in 0..N_CEPS {
                let mut acc = 0.0;
                for k in 1..=DELTA_WINDOW {
                    let ahead = mfcc[(t + k).min(n - 1)][j];
                    let behind = mfcc[t.saturating_sub(k)][j];
                    acc += k as f64 * (ahead - behind);
                }
                row[N_CEPS + j] = acc / denom;
            }
            row
        })
        .collect()
}

/// Drops frames more than `drop_db` below the loudest frame. Always keeps at least one frame.
pub fn filter_low_energy(frames: &FrameMatrix, log_energies: &[f64], drop_db: f64) -> FrameMatrix {
    assert_eq!(frames.n_frames(), log_energies.len());
    let max = log_energies
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let to_db = 10.0 / std::f64::consts::LN_10;
    let keep: Vec<usize> = (0..log_energies.len())
        .filter(|&t| (max - log_energies[t]) * to_db <= drop_db)
        .collect();
    // the loudest frame always satisfies the rule, so `keep` is never empty
    frames.select(&keep)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub drop_db: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            drop_db: DEFAULT_DROP_DB,
        }
    }
}

/// Full front end: PCM in, gated 26-dimensional frames out.
pub fn extract_features(
    extractor: &MfccExtractor,
    segment_id: &str,
    buf: &SampleBuffer,
    config: &FeatureConfig,
) -> Result<FrameMatrix> {
    let framed = frame_signal(buf)?;
    let rows = append_deltas(&extractor.mfcc_sequence(&framed));
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let full = FrameMatrix::new(segment_id, FEATURE_DIM, data)?;
    Ok(filter_low_energy(&full, &framed.log_energies, config.drop_db))
}

pub fn features_to_bytes(m: &FrameMatrix) -> Result<Vec<u8>> {
    let mut w = ByteWriter::with_magic(FEATURE_MAGIC);
    w.len_u32(m.n_frames())?;
    w.len_u32(m.dim())?;
    for &v in m.as_slice() {
        w.f32(v as f32);
    }
    w.str(&m.segment_id)?;
    Ok(w.into_bytes())
}

pub fn write_features(path: impl AsRef<Path>, m: &FrameMatrix) -> Result<()> {
    let path = path.as_ref();
    write_file(path, &features_to_bytes(m)?)
}

pub fn features_from_bytes(bytes: &[u8], path: &Path) -> Result<FrameMatrix> {
    let mut r = ByteReader::new(bytes, path, FEATURE_MAGIC)?;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    if n == 0 || d == 0 {
        return Err(r.corrupt(format!("degenerate shape {n}x{d}")));
    }
    r.expect_remaining(n.saturating_mul(d).saturating_mul(4))?;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        data.push(f64::from(r.f32()?));
    }
    let id = r.str()?;
    r.finish()?;
    FrameMatrix::new(id, d, data).map_err(|e| Error::corrupt(path, e.to_string()))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FrameMatrix> {
    let path = path.as_ref();
    features_from_bytes(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn buf(n: usize) -> SampleBuffer {
        SampleBuffer::new((0..n).map(|i| ((i * 37) % 2000) as i16 - 1000).collect())
    }

    #[test]
    fn frame_counts() {
        assert_eq!(frame_signal(&buf(16000)).unwrap().len(), 98);
        assert_eq!(frame_signal(&buf(400)).unwrap().len(), 1);
        assert!(matches!(
            frame_signal(&buf(399)),
            Err(Error::TooShort { samples: 399, .. })
        ));
        assert_eq!(frame_count(559), 1);
        assert_eq!(frame_count(560), 2);
    }

    #[test]
    fn frames_are_pre_emphasized_then_windowed() {
        let b = buf(400);
        let f = frame_signal(&b).unwrap();
        let w = hamming(FRAME_LEN);
        let x = |n: usize| f64::from(b.samples[n]) / 32768.0;
        assert_eq!(f.windowed[0][0], x(0) * w[0]);
        let expect = (x(200) - 0.97 * x(199)) * w[200];
        assert!((f.windowed[0][200] - expect).abs() < 1e-15);
    }

    #[test]
    fn silent_frame_gives_flat_cepstrum() {
        let ex = MfccExtractor::new();
        let c = ex.cepstrum(&ex.log_mel(&[0.0; FRAME_LEN]));
        let expected_c0 = (N_MEL as f64).sqrt() * LOG_FLOOR.ln();
        assert!((c[0] - expected_c0).abs() < 1e-9);
        for v in &c[1..] {
            assert!(v.abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn every_filter_has_support() {
        let ex = MfccExtractor::new();
        for f in &ex.filters {
            assert!(!f.weights.is_empty());
            assert!(f.weights.iter().all(|&w| w > 0.0 && w <= 1.0));
        }
    }

    #[test]
    fn delta_of_constant_and_ramp() {
        let constant = vec![[1.5; N_CEPS]; 7];
        for row in append_deltas(&constant) {
            assert!(row[N_CEPS..].iter().all(|&d| d == 0.0));
        }
        let ramp: Vec<[f64; N_CEPS]> = (0..10).map(|t| [t as f64; N_CEPS]).collect();
        let d = append_deltas(&ramp);
        for row in &d[2..8] {
            for &v in &row[N_CEPS..] {
                assert!((v - 1.0).abs() < 1e-15);
            }
        }
        // edge replication: at t=0 neighbours are (1,2) ahead and (0,0) behind
        assert!((d[0][N_CEPS] - (1.0 + 2.0 * 2.0) / 10.0).abs() < 1e-15);
        let single = append_deltas(&[[3.0; N_CEPS]]);
        assert!(single[0][N_CEPS..].iter().all(|&v| v == 0.0));
    }

    fn flat_matrix(n: usize) -> FrameMatrix {
        FrameMatrix::new("s", 2, (0..2 * n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn gate_keeps_equal_energy() {
        let m = flat_matrix(5);
        assert_eq!(filter_low_energy(&m, &[1.0; 5], 30.0).n_frames(), 5);
    }

    #[test]
    fn gate_drops_silent_half() {
        let samples: Vec<i16> = (0..160 * 40 + 240)
            .map(|i| {
                if i < 160 * 20 {
                    ((i as f64 * 0.3).sin() * 8000.0) as i16
                } else {
                    0
                }
            })
            .collect();
        let f = extract_features(
            &MfccExtractor::new(),
            "half",
            &SampleBuffer::new(samples),
            &FeatureConfig::default(),
        )
        .unwrap();
        // frames 0..18 lie entirely inside the tone; later ones overlap silence
        assert!(f.n_frames() >= 18 && f.n_frames() <= 20, "{}", f.n_frames());
        assert!(f.frame_times.iter().all(|&t| t < 20.0 * FRAME_STEP));
    }

    #[test]
    fn gate_keeps_loudest_when_everything_is_quiet() {
        let m = flat_matrix(3);
        let out = filter_low_energy(&m, &[-100.0, -20.0, -100.0], 0.5);
        assert_eq!(out.n_frames(), 1);
        assert_eq!(out.row(0), m.row(1));
    }

    #[test]
    fn feature_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ftr");
        let m = FrameMatrix::new("seg-é", 3, vec![0.5, -1.25, 2.0, 4.0, 8.0, 1e-3]).unwrap();
        write_features(&p, &m).unwrap();
        let back = read_features(&p).unwrap();
        assert_eq!(back.segment_id, "seg-é");
        assert_eq!(back.n_frames(), 2);
        assert_eq!(back.row(0), &[0.5, -1.25, 2.0]);
        assert_eq!(back.row(1)[2], f64::from(1e-3f32));

        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"SPKFTR1\0");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 8 + 6 * 4 + 4 + "seg-é".len());
        assert!(features_from_bytes(&bytes[..bytes.len() - 1], &p).is_err());
    }
}
