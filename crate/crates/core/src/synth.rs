//! Labeled synthetic corpora of Gaussian "speakers" and an unpruned
//! second-order search used as a reference.
//!
//! Generation uses `ChaCha8Rng::seed_from_u64(seed)` and always draws in this
//! order:
//!
//! 1. for each speaker: `dim` mean components, `dim * dim` entries of the
//!    basis matrix (row-major), then `dim` log-eigenvalue exponents;
//! 2. for each speaker, for each of its segments: the frame count, then
//!    `frames * dim` standard normals, frame-major.
//!
//! Frame values are rounded to `f32` so that writing and re-reading feature
//! files reproduces them exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FrameMatrix;
use crate::linalg::{Cholesky, Matrix};
use crate::pipeline::Labels;
use crate::ranking::{self, Candidate, CandidateList};
use crate::stats::{segment_stats, PreparedStats, SoMetric};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_speakers: usize,
    pub segments_per_speaker: usize,
    /// Inclusive frame-count range per segment.
    pub frames: (usize, usize),
    pub dim: usize,
    /// Standard deviation of each speaker-mean component.
    pub mean_spread: f64,
    /// Within-speaker standard deviation scale. Eigenvalues of each speaker
    /// covariance are `cov_scale^2 * 10^u`, `u` uniform in `[-1, 1]`.
    pub cov_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_speakers: 20,
            segments_per_speaker: 10,
            frames: (150, 400),
            dim: 26,
            mean_spread: 4.0,
            cov_scale: 1.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_speakers == 0 || self.segments_per_speaker == 0 || self.dim == 0 {
            return bad("speaker, segment and dimension counts must be at least 1".into());
        }
        let (lo, hi) = self.frames;
        if lo == 0 || lo > hi {
            return bad(format!("frame range [{lo}, {hi}] is empty or starts at 0"));
        }
        if !(self.mean_spread > 0.0 && self.mean_spread.is_finite()) {
            return bad(format!("mean_spread must be positive, got {}", self.mean_spread));
        }
        if !(self.cov_scale > 0.0 && self.cov_scale.is_finite()) {
            return bad(format!("cov_scale must be positive, got {}", self.cov_scale));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerModel {
    pub speaker_id: String,
    pub mean: Vec<f64>,
    pub cov: Matrix,
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors, stored as the columns of a row-major matrix.
    pub basis: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub segments: Vec<FrameMatrix>,
    pub labels: Labels,
    pub speakers: Vec<SpeakerModel>,
}

impl SynthCorpus {
    pub fn speaker_of(&self, segment: usize) -> &SpeakerModel {
        &self.speakers[segment / self.spec.segments_per_speaker]
    }

    /// Smallest distance between two speaker means, in units of the largest
    /// within-speaker standard deviation of either speaker. Infinite for a
    /// single speaker.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.speakers.iter().enumerate() {
            for b in &self.speakers[i + 1..] {
                let dist = a
                    .mean
                    .iter()
                    .zip(&b.mean)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                let spread = a
                    .eigenvalues
                    .iter()
                    .chain(&b.eigenvalues)
                    .fold(0.0f64, |m, &e| m.max(e))
                    .sqrt();
                best = best.min(dist / spread);
            }
        }
        best
    }
}

pub fn speaker_id(s: usize) -> String {
    format!("spk{s:04}")
}

pub fn segment_id(s: usize, j: usize) -> String {
    format!("spk{s:04}_seg{j:04}")
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Modified Gram-Schmidt on the columns of a square row-major matrix.
fn orthonormal_columns(a: &mut Matrix) {
    let d = a.dim();
    for j in 0..d {
        for p in 0..j {
            let dot: f64 = (0..d).map(|i| a[(i, j)] * a[(i, p)]).sum();
            for i in 0..d {
                a[(i, j)] -= dot * a[(i, p)];
            }
        }
        let norm = (0..d).map(|i| a[(i, j)] * a[(i, j)]).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "degenerate random basis");
        for i in 0..d {
            a[(i, j)] /= norm;
        }
    }
}

fn draw_speaker(s: usize, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> SpeakerModel {
    let d = spec.dim;
    let mean = (0..d).map(|_| spec.mean_spread * normal(rng)).collect();
    let mut basis = Matrix::from_row_major(d, (0..d * d).map(|_| normal(rng)).collect())
        .expect("square by construction");
    orthonormal_columns(&mut basis);
    let var = spec.cov_scale * spec.cov_scale;
    let eigenvalues: Vec<f64> = (0..d)
        .map(|_| var * 10f64.powf(rng.random_range(-1.0..=1.0)))
        .collect();
    let mut cov = Matrix::zeros(d);
    for i in 0..d {
        for j in 0..=i {
            let v: f64 = (0..d)
                .map(|k| basis[(i, k)] * eigenvalues[k] * basis[(j, k)])
                .sum();
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    assert!(
        eigenvalues.iter().all(|&e| e > 0.0) && Cholesky::new(&cov).is_ok(),
        "generated covariance is not positive definite"
    );
    SpeakerModel {
        speaker_id: speaker_id(s),
        mean,
        cov,
        eigenvalues,
        basis,
    }
}

fn draw_segment(id: String, m: &SpeakerModel, frames: (usize, usize), rng: &mut ChaCha8Rng) -> FrameMatrix {
    let d = m.mean.len();
    let n = rng.random_range(frames.0..=frames.1);
    let scale: Vec<f64> = m.eigenvalues.iter().map(|e| e.sqrt()).collect();
    let mut data = Vec::with_capacity(n * d);
    let mut z = vec![0.0; d];
    for _ in 0..n {
        for (zi, s) in z.iter_mut().zip(&scale) {
            *zi = s * normal(rng);
        }
        for i in 0..d {
            let x = m.mean[i] + (0..d).map(|k| m.basis[(i, k)] * z[k]).sum::<f64>();
            data.push(x as f32 as f64);
        }
    }
    FrameMatrix::new(id, d, data).expect("shape is consistent")
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let speakers: Vec<SpeakerModel> = (0..spec.num_speakers)
        .map(|s| draw_speaker(s, spec, &mut rng))
        .collect();
    let mut segments = Vec::with_capacity(spec.num_speakers * spec.segments_per_speaker);
    let mut labels = Labels::new();
    for (s, model) in speakers.iter().enumerate() {
        for j in 0..spec.segments_per_speaker {
            let id = segment_id(s, j);
            labels.insert(id.clone(), model.speaker_id.clone());
            segments.push(draw_segment(id, model, spec.frames, &mut rng));
        }
    }
    Ok(SynthCorpus {
        spec: spec.clone(),
        segments,
        labels,
        speakers,
    })
}

/// Scores `query` against every other segment of `corpus` with `metric` and
/// returns the `n` best. No codebook, no first level.
///
/// Segments sharing the query's id are skipped; segments whose statistics or
/// score cannot be computed come last, flagged.
pub fn brute_force_retrieve(
    query: &FrameMatrix,
    corpus: &[FrameMatrix],
    metric: SoMetric,
    n: usize,
    ridge: f64,
) -> Result<CandidateList> {
    let q_stats = segment_stats(query)?;
    let q = PreparedStats::new(&q_stats, ridge);
    let mut scored: Vec<Candidate> = corpus
        .par_iter()
        .filter(|seg| seg.segment_id != query.segment_id)
        .map(|seg| {
            let score = segment_stats(seg)
                .and_then(|st| metric.score(&q, &PreparedStats::new(&st, ridge)));
            match score {
                Ok(s) if !s.is_nan() => Candidate::new(seg.segment_id.clone(), s),
                _ => Candidate::failed(seg.segment_id.clone(), metric.orientation()),
            }
        })
        .collect();
    if scored.is_empty() {
        return Err(Error::EmptyIndex);
    }
    scored.sort_by(|a, b| ranking::compare(metric.orientation(), a, b));
    scored.truncate(n);
    Ok(scored)
}
