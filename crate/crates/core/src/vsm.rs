//! First-level retrieval over codebook histograms.
//!
//! All four measures walk the sparse nonzero bins of both histograms in bin
//! order, so each is exactly symmetric in its arguments. Cosine and normalized
//! L2 use L2 norms; histogram intersection divides by the smaller L1 norm.

use rayon::prelude::*;

use crate::codebook::SegmentHistogram;
use crate::error::{Error, Result};
use crate::ranking::{self, Candidate, CandidateList, Orientation};

pub const DEFAULT_K1: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VsmMetric {
    Cosine,
    NormalizedL2,
    Bhattacharyya,
    HistogramIntersection,
}

impl VsmMetric {
    pub const ALL: [VsmMetric; 4] = [
        VsmMetric::Cosine,
        VsmMetric::NormalizedL2,
        VsmMetric::Bhattacharyya,
        VsmMetric::HistogramIntersection,
    ];

    pub fn orientation(self) -> Orientation {
        match self {
            VsmMetric::NormalizedL2 => Orientation::Dissimilarity,
            _ => Orientation::Similarity,
        }
    }

    /// Short name as used on the command line.
    pub fn name(self) -> &'static str {
        match self {
            VsmMetric::Cosine => "cosine",
            VsmMetric::NormalizedL2 => "l2",
            VsmMetric::Bhattacharyya => "bhat",
            VsmMetric::HistogramIntersection => "intersect",
        }
    }

    pub fn score(self, f: &SegmentHistogram, g: &SegmentHistogram) -> Result<f64> {
        match self {
            VsmMetric::Cosine => cosine(f, g),
            VsmMetric::NormalizedL2 => normalized_l2(f, g),
            VsmMetric::Bhattacharyya => bhattacharyya(f, g),
            VsmMetric::HistogramIntersection => histogram_intersection(f, g),
        }
    }
}

impl std::str::FromStr for VsmMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VsmMetric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown first-level metric {s:?}")))
    }
}

fn check_k(f: &SegmentHistogram, g: &SegmentHistogram) -> Result<()> {
    if f.k() != g.k() {
        return Err(Error::DimensionMismatch {
            expected: f.k(),
            got: g.k(),
        });
    }
    Ok(())
}

fn check_nonzero(f: &SegmentHistogram, g: &SegmentHistogram) -> Result<()> {
    check_k(f, g)?;
    if f.l2_norm() == 0.0 || g.l2_norm() == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(())
}

/// Merge-walks the nonzero bins of both histograms; `pair(a, b)` is called for
/// every bin nonzero in either, with 0 for the missing side.
fn merge(f: &SegmentHistogram, g: &SegmentHistogram, mut pair: impl FnMut(f64, f64)) {
    let (a, b) = (f.nonzero(), g.nonzero());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        match (a.get(i), b.get(j)) {
            (Some(&(ba, va)), Some(&(bb, vb))) if ba == bb => {
                pair(va, vb);
                i += 1;
                j += 1;
            }
            (Some(&(ba, va)), Some(&(bb, _))) if ba < bb => {
                pair(va, 0.0);
                i += 1;
            }
            (Some(&(_, va)), None) => {
                pair(va, 0.0);
                i += 1;
            }
            (_, Some(&(_, vb))) => {
                pair(0.0, vb);
                j += 1;
            }
            (None, None) => unreachable!(),
        }
    }
}

/// Sum over bins where both histograms are nonzero.
fn overlap(f: &SegmentHistogram, g: &SegmentHistogram, op: impl Fn(f64, f64) -> f64) -> f64 {
    let (a, b) = (f.nonzero(), g.nonzero());
    let (mut i, mut j) = (0, 0);
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        let (ba, va) = a[i];
        let (bb, vb) = b[j];
        if ba == bb {
            acc += op(va, vb);
            i += 1;
            j += 1;
        } else if ba < bb {
            i += 1;
        } else {
            j += 1;
        }
    }
    acc
}

/// `sum f g / (|f|_2 |g|_2)`, clamped to `[0, 1]`.
pub fn cosine(f: &SegmentHistogram, g: &SegmentHistogram) -> Result<f64> {
    check_nonzero(f, g)?;
    let dot = overlap(f, g, |a, b| a * b);
    Ok((dot / (f.l2_norm() * g.l2_norm())).clamp(0.0, 1.0))
}

/// `sum (f/|f|_2 - g/|g|_2)^2`, clamped to `[0, 2]`.
pub fn normalized_l2(f: &SegmentHistogram, g: &SegmentHistogram) -> Result<f64> {
    check_nonzero(f, g)?;
    let (nf, ng) = (f.l2_norm(), g.l2_norm());
    let mut acc = 0.0;
    merge(f, g, |a, b| {
        let d = a / nf - b / ng;
        acc += d * d;
    });
    Ok(acc.clamp(0.0, 2.0))
}

/// `sum sqrt(f g)`, clamped to `[0, 1]`.
pub fn bhattacharyya(f: &SegmentHistogram, g: &SegmentHistogram) -> Result<f64> {
    check_k(f, g)?;
    Ok(overlap(f, g, |a, b| (a * b).sqrt()).clamp(0.0, 1.0))
}

/// `sum min(f, g) / min(|f|_1, |g|_1)`, clamped to `[0, 1]`.
pub fn histogram_intersection(f: &SegmentHistogram, g: &SegmentHistogram) -> Result<f64> {
    check_k(f, g)?;
    let denom = f.l1_norm().min(g.l1_norm());
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((overlap(f, g, f64::min) / denom).clamp(0.0, 1.0))
}

/// Exhaustive first-level ranking. Entries whose id equals the query's are
/// skipped, so a query taken from the index never retrieves itself.
pub fn top_k<'a, I>(
    query: &SegmentHistogram,
    index: I,
    k: usize,
    metric: VsmMetric,
) -> Result<CandidateList>
where
    I: IntoParallelIterator<Item = &'a SegmentHistogram>,
{
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let scored: Vec<Candidate> = index
        .into_par_iter()
        .filter(|h| h.segment_id != query.segment_id)
        .map(|h| {
            metric
                .score(query, h)
                .map(|s| Candidate::new(h.segment_id.clone(), s))
        })
        .collect::<Result<_>>()?;
    if scored.is_empty() {
        return Err(Error::EmptyIndex);
    }
    Ok(ranking::rank(scored, metric.orientation(), k))
}
