//! Universal bag-of-frames codebook: frame sampling, k-means training,
//! nearest-centroid quantization and per-segment occupancy histograms.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FrameMatrix;
use crate::format::{read_file, write_file, ByteReader, ByteWriter};

pub const DEFAULT_K: usize = 2048;
pub const DEFAULT_PER_SEGMENT: usize = 100;
pub const DEFAULT_MAX_ITERS: usize = 50;
pub const DEFAULT_TOL: f64 = 1e-4;

const CODEBOOK_MAGIC: &[u8; 8] = b"SPKCBK1\0";

/// Flat row-major set of training frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FrameSet {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Draws up to `per_segment` frames from each segment without replacement.
pub fn sample_frames(segments: &[FrameMatrix], per_segment: usize, seed: u64) -> Result<FrameSet> {
    let first = segments.first().ok_or(Error::EmptyCorpus)?;
    let dim = first.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    for seg in segments {
        if seg.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: seg.dim(),
            });
        }
        let n = seg.n_frames();
        if n <= per_segment {
            data.extend_from_slice(seg.as_slice());
        } else {
            for t in index::sample(&mut rng, n, per_segment) {
                data.extend_from_slice(seg.row(t));
            }
        }
    }
    Ok(FrameSet { dim, data })
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMeta {
    pub iterations: usize,
    pub converged: bool,
    /// Inertia of the final centroids.
    pub inertia: f64,
    /// Inertia after each assignment step, including the final one.
    pub inertia_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    centroids: Vec<f64>,
    pub train_seed: u64,
    pub train_meta: Option<TrainMeta>,
}

impl Codebook {
    /// Validates `K >= 2`, finiteness and pairwise-distinct centroids.
    ///
    /// Centroids are rounded to `f32`, the precision of the codebook file, so
    /// a codebook quantizes identically before and after a write/read cycle.
    pub fn from_centroids(dim: usize, mut centroids: Vec<f64>, train_seed: u64) -> Result<Self> {
        if dim == 0 || !centroids.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: centroids.len(),
            });
        }
        let k = centroids.len() / dim;
        if k < 2 {
            return Err(Error::InvalidArgument(format!(
                "codebook needs at least 2 centroids, got {k}"
            )));
        }
        for v in &mut centroids {
            *v = f64::from(*v as f32);
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "codebook contains non-finite values".into(),
            ));
        }
        let mut order: Vec<&[f64]> = centroids.chunks_exact(dim).collect();
        order.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        if order.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(
                "codebook contains duplicate centroids".into(),
            ));
        }
        Ok(Self {
            k,
            dim,
            centroids,
            train_seed,
            train_meta: None,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    /// Nearest centroid and its squared distance; ties go to the lowest index.
    fn nearest(&self, frame: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (j, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(frame, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_magic(CODEBOOK_MAGIC);
        w.len_u32(self.k)?;
        w.len_u32(self.dim)?;
        w.u64(self.train_seed);
        for &v in &self.centroids {
            w.f32(v as f32);
        }
        Ok(w.into_bytes())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_file(path, &self.to_bytes()?)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path, CODEBOOK_MAGIC)?;
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let seed = r.u64()?;
        r.expect_remaining(k.saturating_mul(d).saturating_mul(4))?;
        let mut centroids = Vec::with_capacity(k * d);
        for _ in 0..k * d {
            centroids.push(f64::from(r.f32()?));
        }
        r.finish()?;
        Self::from_centroids(d, centroids, seed).map_err(|e| Error::corrupt(path, e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_file(path)?, path)
    }
}

fn assign(frames: &FrameSet, cb: &Codebook) -> (Vec<usize>, Vec<f64>) {
    (0..frames.len())
        .into_par_iter()
        .map(|i| cb.nearest(frames.row(i)))
        .unzip()
}

fn kmeans_pp(frames: &FrameSet, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let n = frames.len();
    let dim = frames.dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(frames.row(first));
    let mut d2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(frames.row(i), frames.row(first)))
        .collect();
    for chosen in 1..k {
        let total: f64 = d2.iter().sum();
        if total.is_nan() || total <= 0.0 {
            return Err(Error::TooFewDistinctFrames { distinct: chosen, k });
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                pick = Some(i);
                acc += w;
                if acc > target {
                    break;
                }
            }
        }
        // `pick` is the last positive-weight point if rounding left acc <= target
        let pick = pick.expect("total > 0 implies a positive weight");
        let c = frames.row(pick).to_vec();
        d2.par_iter_mut().enumerate().for_each(|(i, w)| {
            let d = sq_dist(frames.row(i), &c);
            if d < *w {
                *w = d;
            }
        });
        centroids.extend_from_slice(&c);
    }
    Ok(centroids)
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Centroid sums are accumulated in frame order, so the result depends only on
/// the frames and the seed, never on the thread count.
pub fn train_kmeans(frames: &FrameSet, params: &KMeansParams) -> Result<Codebook> {
    let KMeansParams {
        k,
        max_iters,
        tol,
        seed,
    } = *params;
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if frames.len() < k {
        return Err(Error::TooFewFrames {
            segment: None,
            got: frames.len(),
            needed: k,
        });
    }
    let dim = frames.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cb = Codebook {
        k,
        dim,
        centroids: kmeans_pp(frames, k, &mut rng)?,
        train_seed: seed,
        train_meta: None,
    };

    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        let (labels, dists) = assign(frames, &cb);
        history.push(dists.iter().sum::<f64>());
        iterations += 1;

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &j) in labels.iter().enumerate() {
            counts[j] += 1;
            for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(frames.row(i)) {
                *s += v;
            }
        }
        let mut next = sums;
        for j in 0..k {
            if counts[j] > 0 {
                for v in &mut next[j * dim..(j + 1) * dim] {
                    *v /= counts[j] as f64;
                }
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        if !empty.is_empty() {
            // reseed each empty cluster with the point currently farthest from its centroid
            let mut by_dist: Vec<usize> = (0..frames.len()).collect();
            by_dist.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
            for (&j, &i) in empty.iter().zip(&by_dist) {
                next[j * dim..(j + 1) * dim].copy_from_slice(frames.row(i));
            }
        }
        let shift = (0..k)
            .map(|j| sq_dist(&next[j * dim..(j + 1) * dim], cb.centroid(j)).sqrt())
            .fold(0.0, f64::max);
        cb.centroids = next;
        if shift < tol {
            converged = true;
            break;
        }
    }
    let (_, dists) = assign(frames, &cb);
    let inertia = dists.iter().sum::<f64>();
    history.push(inertia);

    let mut out = Codebook::from_centroids(dim, cb.centroids, seed)?;
    out.train_meta = Some(TrainMeta {
        iterations,
        converged,
        inertia,
        inertia_history: history,
    });
    Ok(out)
}

pub fn quantize(frame: &[f64], cb: &Codebook) -> Result<usize> {
    if frame.len() != cb.dim {
        return Err(Error::DimensionMismatch {
            expected: cb.dim,
            got: frame.len(),
        });
    }
    Ok(cb.nearest(frame).0)
}

/// Normalized codebook occupancy of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentHistogram {
    pub segment_id: String,
    bins: Vec<f64>,
    nonzero: Vec<(u32, f64)>,
    l1: f64,
    l2: f64,
}

impl SegmentHistogram {
    pub fn new(segment_id: impl Into<String>, bins: Vec<f64>) -> Result<Self> {
        if bins.iter().any(|&b| !(b.is_finite() && b >= 0.0)) {
            return Err(Error::InvalidArgument(
                "histogram bins must be finite and non-negative".into(),
            ));
        }
        let nonzero: Vec<(u32, f64)> = bins
            .iter()
            .enumerate()
            .filter(|(_, &b)| b > 0.0)
            .map(|(j, &b)| (j as u32, b))
            .collect();
        let l1 = nonzero.iter().map(|&(_, b)| b).sum();
        let l2 = nonzero.iter().map(|&(_, b)| b * b).sum::<f64>().sqrt();
        Ok(Self {
            segment_id: segment_id.into(),
            bins,
            nonzero,
            l1,
            l2,
        })
    }

    /// `bins[j] = counts[j] / sum(counts)`.
    pub fn from_counts(segment_id: impl Into<String>, counts: &[u64]) -> Result<Self> {
        let segment_id = segment_id.into();
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptySegment(segment_id));
        }
        let bins = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Self::new(segment_id, bins)
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn k(&self) -> usize {
        self.bins.len()
    }

    /// `(bin, value)` pairs for the nonzero bins, ascending by bin.
    pub fn nonzero(&self) -> &[(u32, f64)] {
        &self.nonzero
    }

    pub fn l1_norm(&self) -> f64 {
        self.l1
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2
    }
}

pub fn histogram(seg: &FrameMatrix, cb: &Codebook) -> Result<SegmentHistogram> {
    if seg.n_frames() == 0 {
        return Err(Error::EmptySegment(seg.segment_id.clone()));
    }
    let mut counts = vec![0u64; cb.k()];
    for row in seg.rows() {
        counts[quantize(row, cb)?] += 1;
    }
    SegmentHistogram::from_counts(seg.segment_id.clone(), &counts)
}
