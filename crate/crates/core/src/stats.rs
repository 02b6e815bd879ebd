//! Gaussian segment statistics and the second-level measures: delta-BIC,
//! divergence shape, arithmetic-harmonic sphericity and Hotelling's T^2.
//!
//! Every inversion or log-determinant goes through a Cholesky factor of the
//! ridge-regularized matrix `C + eps * (tr C / d) * I`.

use crate::error::{Error, Result};
use crate::features::FrameMatrix;
use crate::linalg::{Cholesky, Matrix};
use crate::ranking::{self, Candidate, CandidateList, Orientation};

pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Frame count, mean and unbiased covariance of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentStats {
    pub segment_id: String,
    pub n: usize,
    pub mean: Vec<f64>,
    /// `1/(n-1)` scaled, exactly symmetric.
    pub cov: Matrix,
}

impl SegmentStats {
    pub fn from_parts(
        segment_id: impl Into<String>,
        n: usize,
        mean: Vec<f64>,
        cov: Matrix,
    ) -> Result<Self> {
        let segment_id = segment_id.into();
        if n < 2 {
            return Err(Error::TooFewFrames {
                segment: Some(segment_id),
                got: n,
                needed: 2,
            });
        }
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch {
                expected: cov.dim(),
                got: mean.len(),
            });
        }
        Ok(Self {
            segment_id,
            n,
            mean,
            cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Centered scatter `sum (x - mu)(x - mu)^t`, i.e. `(n-1) * cov`.
    pub fn scatter(&self) -> Matrix {
        self.cov.scaled((self.n - 1) as f64)
    }

    /// Sum of the frames, `n * mu`.
    pub fn sum(&self) -> Vec<f64> {
        self.mean.iter().map(|m| m * self.n as f64).collect()
    }

    /// True when the sample covariance is necessarily singular (n <= d) and the
    /// measures rely on regularization.
    pub fn rank_deficient(&self) -> bool {
        self.n < self.dim() + 1
    }
}

pub fn segment_stats(seg: &FrameMatrix) -> Result<SegmentStats> {
    let n = seg.n_frames();
    let d = seg.dim();
    if n < 2 {
        return Err(Error::TooFewFrames {
            segment: Some(seg.segment_id.clone()),
            got: n,
            needed: 2,
        });
    }
    let mut mean = vec![0.0; d];
    for row in seg.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = Matrix::zeros(d);
    let mut centered = vec![0.0; d];
    for row in seg.rows() {
        for (c, (v, m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
            *c = v - m;
        }
        for i in 0..d {
            for j in 0..=i {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    SegmentStats::from_parts(seg.segment_id.clone(), n, mean, cov)
}

fn check_dims(a: &SegmentStats, b: &SegmentStats) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

/// Scatter matrix of the union of both segments' frames.
fn pooled_scatter(a: &SegmentStats, b: &SegmentStats) -> Matrix {
    let d = a.dim();
    let n = (a.n + b.n) as f64;
    let w = a.n as f64 * b.n as f64 / n;
    let diff: Vec<f64> = a.mean.iter().zip(&b.mean).map(|(x, y)| x - y).collect();
    let mut s = a.scatter().add(&b.scatter());
    for i in 0..d {
        for j in 0..d {
            s[(i, j)] += w * diff[i] * diff[j];
        }
    }
    s
}

/// Exact unbiased covariance of the union of both segments, from their
/// retained statistics.
pub fn pooled_cov(a: &SegmentStats, b: &SegmentStats) -> Result<(usize, Matrix)> {
    check_dims(a, b)?;
    let n = a.n + b.n;
    Ok((n, pooled_scatter(a, b).scaled(1.0 / (n - 1) as f64)))
}

/// Maximum-likelihood covariance `scatter / n`, the estimate the BIC likelihood uses.
fn ml_cov(scatter: &Matrix, n: usize) -> Matrix {
    let n = n as f64;
    Matrix::from_row_major(scatter.dim(), scatter.as_slice().iter().map(|v| v / n).collect())
        .expect("square")
}

/// BIC penalty for one full-covariance Gaussian in `d` dimensions over `n` frames.
pub fn bic_penalty(d: usize, n: usize) -> f64 {
    let d = d as f64;
    0.5 * (d + 0.5 * d * (d + 1.0)) * (n as f64).ln()
}

/// Precomputed per-segment factors for repeated scoring.
#[derive(Debug, Clone)]
pub struct PreparedStats<'a> {
    pub stats: &'a SegmentStats,
    ridge: f64,
    cov_factor: Option<Cholesky>,
    ml_log_det: Option<f64>,
}

impl<'a> PreparedStats<'a> {
    pub fn new(stats: &'a SegmentStats, ridge: f64) -> Self {
        let cov_factor = Cholesky::new(&stats.cov.ridge(ridge)).ok();
        let ml_log_det = Cholesky::new(&ml_cov(&stats.scatter(), stats.n).ridge(ridge))
            .ok()
            .map(|c| c.log_det());
        Self {
            stats,
            ridge,
            cov_factor,
            ml_log_det,
        }
    }

    fn factor(&self) -> Result<&Cholesky> {
        self.cov_factor.as_ref().ok_or(Error::SingularCovariance)
    }

    fn log_det(&self) -> Result<f64> {
        self.ml_log_det.ok_or(Error::SingularCovariance)
    }
}

fn prepared_delta_bic(a: &PreparedStats, b: &PreparedStats, lambda: f64) -> Result<f64> {
    check_dims(a.stats, b.stats)?;
    let n = a.stats.n + b.stats.n;
    let joint = Cholesky::new(&ml_cov(&pooled_scatter(a.stats, b.stats), n).ridge(a.ridge))?;
    let data = 0.5 * a.stats.n as f64 * a.log_det()? + 0.5 * b.stats.n as f64 * b.log_det()?
        - 0.5 * n as f64 * joint.log_det();
    Ok(data + lambda * bic_penalty(a.stats.dim(), n))
}

/// `(tr(C2 C1^-1), tr(C1 C2^-1))`
fn trace_pair(c1: &Cholesky, c2: &Cholesky) -> Result<(f64, f64)> {
    if c1.dim() != c2.dim() {
        return Err(Error::DimensionMismatch {
            expected: c1.dim(),
            got: c2.dim(),
        });
    }
    Ok((
        c1.trace_of_other_times_inverse(c2),
        c2.trace_of_other_times_inverse(c1),
    ))
}

fn ds_from_factors(c1: &Cholesky, c2: &Cholesky) -> Result<f64> {
    let (t21, t12) = trace_pair(c1, c2)?;
    Ok(0.5 * (t12 + t21 - 2.0 * c1.dim() as f64))
}

fn ahs_from_factors(c1: &Cholesky, c2: &Cholesky) -> Result<f64> {
    let (t21, t12) = trace_pair(c1, c2)?;
    let d = c1.dim() as f64;
    Ok((t12 * t21 / (d * d)).ln())
}

fn prepared_t2(a: &PreparedStats, b: &PreparedStats) -> Result<f64> {
    check_dims(a.stats, b.stats)?;
    let (n, m) = (a.stats.n as f64, b.stats.n as f64);
    let pooled = a.stats.scatter().add(&b.stats.scatter()).scaled(1.0 / (n + m - 2.0));
    let factor = Cholesky::new(&pooled.ridge(a.ridge))?;
    let diff: Vec<f64> = a.stats.mean.iter().zip(&b.stats.mean).map(|(x, y)| x - y).collect();
    Ok(n * m / (n + m) * factor.inv_quad_form(&diff))
}

/// Delta-BIC between two segments; positive values mean the two segments are
/// better explained by one shared Gaussian.
pub fn delta_bic(a: &SegmentStats, b: &SegmentStats, lambda: f64, ridge: f64) -> Result<f64> {
    prepared_delta_bic(
        &PreparedStats::new(a, ridge),
        &PreparedStats::new(b, ridge),
        lambda,
    )
}

/// Divergence shape `0.5 tr[(C1 - C2)(C2^-1 - C1^-1)]`.
pub fn divergence_shape(c1: &Matrix, c2: &Matrix, ridge: f64) -> Result<f64> {
    ds_from_factors(
        &Cholesky::new(&c1.ridge(ridge))?,
        &Cholesky::new(&c2.ridge(ridge))?,
    )
}

/// Arithmetic-harmonic sphericity `ln(tr(C1 C2^-1) tr(C2 C1^-1) / d^2)`.
pub fn ahs(c1: &Matrix, c2: &Matrix, ridge: f64) -> Result<f64> {
    ahs_from_factors(
        &Cholesky::new(&c1.ridge(ridge))?,
        &Cholesky::new(&c2.ridge(ridge))?,
    )
}

fn inverse(factor: &Cholesky) -> Matrix {
    let n = factor.dim();
    // L^-1 column by column, then A^-1 = L^-t L^-1
    let mut linv = Matrix::zeros(n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = factor.solve_lower(&e);
        for i in 0..n {
            linv[(i, j)] = col[i];
        }
    }
    let mut inv = Matrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            inv[(i, j)] = (0..n).map(|k| linv[(k, i)] * linv[(k, j)]).sum();
        }
    }
    inv
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.dim();
    let mut out = Matrix::zeros(n);
    for i in 0..n {
        for k in 0..n {
            let aik = a[(i, k)];
            for j in 0..n {
                out[(i, j)] += aik * b[(k, j)];
            }
        }
    }
    out
}

/// The sphericity expression taken literally as `0.5 tr[(C1 C2^-1)(C2 C1^-1)]`.
///
/// The product inside the trace is the identity, so this is `d/2` for every
/// input pair; it exists only to demonstrate that degeneracy.
pub fn ahs_literal(c1: &Matrix, c2: &Matrix, ridge: f64) -> Result<f64> {
    let r1 = c1.ridge(ridge);
    let r2 = c2.ridge(ridge);
    let inv1 = inverse(&Cholesky::new(&r1)?);
    let inv2 = inverse(&Cholesky::new(&r2)?);
    let product = matmul(&matmul(&r1, &inv2), &matmul(&r2, &inv1));
    Ok(0.5 * product.trace())
}

/// Two-sample Hotelling T^2 with the pooled covariance
/// `((N-1) C1 + (M-1) C2) / (N + M - 2)`.
pub fn hotelling_t2(a: &SegmentStats, b: &SegmentStats, ridge: f64) -> Result<f64> {
    prepared_t2(&PreparedStats::new(a, ridge), &PreparedStats::new(b, ridge))
}

/// Second-level measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SoMetric {
    DeltaBic { lambda: f64 },
    DivergenceShape,
    Ahs,
    /// Literal, degenerate sphericity formula; see [`ahs_literal`].
    AhsLiteral,
    HotellingT2,
}

impl SoMetric {
    pub fn bic(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        Ok(SoMetric::DeltaBic { lambda })
    }

    pub fn orientation(self) -> Orientation {
        match self {
            SoMetric::DeltaBic { .. } => Orientation::Similarity,
            _ => Orientation::Dissimilarity,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SoMetric::DeltaBic { .. } => "bic",
            SoMetric::DivergenceShape => "ds",
            SoMetric::Ahs => "ahs",
            SoMetric::AhsLiteral => "ahs-literal",
            SoMetric::HotellingT2 => "t2",
        }
    }

    /// All four measures, BIC at the given lambda.
    pub fn all(lambda: f64) -> [SoMetric; 4] {
        [
            SoMetric::HotellingT2,
            SoMetric::DivergenceShape,
            SoMetric::Ahs,
            SoMetric::DeltaBic { lambda },
        ]
    }

    pub fn score(self, a: &PreparedStats, b: &PreparedStats) -> Result<f64> {
        match self {
            SoMetric::DeltaBic { lambda } => prepared_delta_bic(a, b, lambda),
            SoMetric::DivergenceShape => ds_from_factors(a.factor()?, b.factor()?),
            SoMetric::Ahs => ahs_from_factors(a.factor()?, b.factor()?),
            SoMetric::AhsLiteral => {
                check_dims(a.stats, b.stats)?;
                ahs_literal(&a.stats.cov, &b.stats.cov, a.ridge)
            }
            SoMetric::HotellingT2 => prepared_t2(a, b),
        }
    }

    pub fn score_stats(self, a: &SegmentStats, b: &SegmentStats, ridge: f64) -> Result<f64> {
        self.score(&PreparedStats::new(a, ridge), &PreparedStats::new(b, ridge))
    }

    /// Scores into a candidate; failures become flagged, worst-ranked entries.
    pub fn candidate(self, query: &PreparedStats, other: &PreparedStats) -> Candidate {
        match self.score(query, other) {
            Ok(s) if !s.is_nan() => Candidate::new(other.stats.segment_id.clone(), s),
            _ => Candidate::failed(other.stats.segment_id.clone(), self.orientation()),
        }
    }
}

impl std::str::FromStr for SoMetric {
    type Err = Error;

    /// Parses `bic|ds|ahs|ahs-literal|t2`; BIC gets the default lambda.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bic" => Ok(SoMetric::DeltaBic {
                lambda: DEFAULT_LAMBDA,
            }),
            "ds" => Ok(SoMetric::DivergenceShape),
            "ahs" => Ok(SoMetric::Ahs),
            "ahs-literal" => Ok(SoMetric::AhsLiteral),
            "t2" => Ok(SoMetric::HotellingT2),
            other => Err(Error::InvalidArgument(format!(
                "unknown second-level metric {other:?}"
            ))),
        }
    }
}

/// Orders already-prepared candidates against a prepared query.
pub fn rerank_prepared(
    query: &PreparedStats,
    candidates: &[&PreparedStats],
    metric: SoMetric,
) -> Result<CandidateList> {
    if candidates.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let scored = candidates.iter().map(|c| metric.candidate(query, c)).collect();
    Ok(ranking::rank(scored, metric.orientation(), candidates.len()))
}

pub fn rerank(
    query: &SegmentStats,
    candidates: &[&SegmentStats],
    metric: SoMetric,
    ridge: f64,
) -> Result<CandidateList> {
    let q = PreparedStats::new(query, ridge);
    let prepared: Vec<_> = candidates
        .iter()
        .map(|c| PreparedStats::new(c, ridge))
        .collect();
    let refs: Vec<&PreparedStats> = prepared.iter().collect();
    rerank_prepared(&q, &refs, metric)
}
