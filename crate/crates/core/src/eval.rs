//! n-best evaluation protocol: every indexed segment is used once as a query
//! against all the others, and a query scores a hit at `n` when any of its
//! `n` best results shares its speaker label.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pipeline::RetrievalIndex;
use crate::ranking::{self, CandidateList};
use crate::stats::{rerank_prepared, PreparedStats, SoMetric, DEFAULT_LAMBDA, DEFAULT_RIDGE};
use crate::vsm::{top_k, VsmMetric, DEFAULT_K1};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub k1: usize,
    pub metrics1: Vec<VsmMetric>,
    pub metrics2: Vec<SoMetric>,
    /// Cut-offs, ascending, e.g. `[1, 3, 5]`.
    pub ns: Vec<usize>,
    pub ridge: f64,
    /// Also time the unpruned second-order-only search.
    pub baseline: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k1: DEFAULT_K1,
            metrics1: vec![VsmMetric::HistogramIntersection],
            metrics2: vec![SoMetric::DeltaBic {
                lambda: DEFAULT_LAMBDA,
            }],
            ns: vec![1, 3, 5],
            ridge: DEFAULT_RIDGE,
            baseline: false,
        }
    }
}

impl EvalConfig {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.k1 == 0 {
            return bad("k1 must be at least 1".into());
        }
        if self.ns.is_empty() || self.ns.contains(&0) || !self.ns.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!("n values must be positive and ascending, got {:?}", self.ns));
        }
        if self.ns.iter().any(|&n| n > self.k1) {
            return bad(format!("n values {:?} exceed k1={}", self.ns, self.k1));
        }
        if self.metrics1.is_empty() || self.metrics2.is_empty() {
            return bad("at least one metric per level is required".into());
        }
        if self.ridge.is_nan() || self.ridge < 0.0 {
            return bad(format!("ridge must be non-negative, got {}", self.ridge));
        }
        Ok(())
    }

    fn max_n(&self) -> usize {
        *self.ns.last().expect("validated non-empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Level1Result {
    pub metric1: VsmMetric,
    /// Queries with at least one same-speaker segment among the `k1` candidates.
    pub recall_hits: usize,
    pub secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub metric1: VsmMetric,
    pub metric2: SoMetric,
    /// Hit counts, parallel to [`EvalReport::ns`].
    pub hits: Vec<usize>,
    pub level1_secs: f64,
    pub level2_secs: f64,
}

impl PairResult {
    pub fn total_secs(&self) -> f64 {
        self.level1_secs + self.level2_secs
    }
}

/// Unpruned search: every query scored against every other segment.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub metric2: SoMetric,
    pub hits: Vec<usize>,
    pub secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub queries: usize,
    pub k1: usize,
    pub ns: Vec<usize>,
    pub audio_secs: f64,
    pub threads: usize,
    /// Time spent factoring per-segment covariances; included in every level-2
    /// and baseline time.
    pub prepare_secs: f64,
    pub level1: Vec<Level1Result>,
    pub pairs: Vec<PairResult>,
    pub baseline: Vec<BaselineResult>,
}

/// `audio / retrieval` seconds; absent when either side is zero.
pub fn speed_ratio(audio_secs: f64, retrieval_secs: f64) -> Option<f64> {
    (audio_secs > 0.0 && retrieval_secs > 0.0).then(|| audio_secs / retrieval_secs)
}

impl EvalReport {
    pub fn fraction(&self, hits: usize) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            hits as f64 / self.queries as f64
        }
    }

    pub fn accuracy(&self, pair: &PairResult, n: usize) -> Option<f64> {
        let i = self.ns.iter().position(|&x| x == n)?;
        Some(self.fraction(pair.hits[i]))
    }

    pub fn recall(&self, l1: &Level1Result) -> f64 {
        self.fraction(l1.recall_hits)
    }

    pub fn pair(&self, metric1: VsmMetric, metric2: SoMetric) -> Option<&PairResult> {
        self.pairs
            .iter()
            .find(|p| p.metric1 == metric1 && p.metric2 == metric2)
    }

    /// Equality of everything except wall-clock fields and thread count.
    pub fn same_results(&self, other: &EvalReport) -> bool {
        let l1 = |r: &EvalReport| -> Vec<_> {
            r.level1.iter().map(|l| (l.metric1, l.recall_hits)).collect()
        };
        let l2 = |r: &EvalReport| -> Vec<_> {
            r.pairs
                .iter()
                .map(|p| (p.metric1, p.metric2, p.hits.clone()))
                .collect()
        };
        let bl = |r: &EvalReport| -> Vec<_> {
            r.baseline.iter().map(|b| (b.metric2, b.hits.clone())).collect()
        };
        self.queries == other.queries
            && self.k1 == other.k1
            && self.ns == other.ns
            && self.audio_secs == other.audio_secs
            && l1(self) == l1(other)
            && l2(self) == l2(other)
            && bl(self) == bl(other)
    }

    pub fn timing(&self) -> Vec<TimingRow> {
        self.pairs
            .iter()
            .map(|p| {
                let baseline_secs = self
                    .baseline
                    .iter()
                    .find(|b| b.metric2 == p.metric2)
                    .map(|b| b.secs);
                TimingRow {
                    metric1: p.metric1,
                    metric2: p.metric2,
                    level1_secs: p.level1_secs,
                    level2_secs: p.level2_secs,
                    total_secs: p.total_secs(),
                    speed_ratio: speed_ratio(self.audio_secs, p.total_secs()),
                    baseline_secs,
                    speedup: baseline_secs.and_then(|b| {
                        (p.total_secs() > 0.0).then(|| b / p.total_secs())
                    }),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub metric1: VsmMetric,
    pub metric2: SoMetric,
    pub level1_secs: f64,
    pub level2_secs: f64,
    pub total_secs: f64,
    pub speed_ratio: Option<f64>,
    pub baseline_secs: Option<f64>,
    /// Baseline time over two-level time.
    pub speedup: Option<f64>,
}

fn hit_counts(ranked: &[CandidateList], speakers: &[&str], index: &RetrievalIndex, ns: &[usize]) -> Vec<usize> {
    let mut hits = vec![0usize; ns.len()];
    for (q, list) in ranked.iter().enumerate() {
        let first_hit = list.iter().position(|c| {
            index.get(&c.segment_id).and_then(|r| r.speaker.as_deref()) == Some(speakers[q])
        });
        if let Some(rank) = first_hit {
            for (h, &n) in hits.iter_mut().zip(ns) {
                if rank < n {
                    *h += 1;
                }
            }
        }
    }
    hits
}

/// Runs the protocol for every requested metric pair.
pub fn evaluate(index: &RetrievalIndex, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let records = index.records();
    let speakers: Vec<&str> = records
        .iter()
        .map(|r| {
            r.speaker
                .as_deref()
                .ok_or_else(|| Error::MissingLabels(r.segment_id().to_string()))
        })
        .collect::<Result<_>>()?;
    let mut report = EvalReport {
        queries: records.len(),
        k1: cfg.k1,
        ns: cfg.ns.clone(),
        audio_secs: index.total_duration(),
        threads: rayon::current_num_threads(),
        prepare_secs: 0.0,
        level1: Vec::new(),
        pairs: Vec::new(),
        baseline: Vec::new(),
    };
    if records.len() < 2 {
        // no query has a candidate; every count stays zero
        for &m1 in &cfg.metrics1 {
            report.level1.push(Level1Result {
                metric1: m1,
                recall_hits: 0,
                secs: 0.0,
            });
            for &m2 in &cfg.metrics2 {
                report.pairs.push(PairResult {
                    metric1: m1,
                    metric2: m2,
                    hits: vec![0; cfg.ns.len()],
                    level1_secs: 0.0,
                    level2_secs: 0.0,
                });
            }
        }
        return Ok(report);
    }

    let t = Instant::now();
    let prepared: Vec<PreparedStats> = records
        .par_iter()
        .map(|r| PreparedStats::new(&r.stats, cfg.ridge))
        .collect();
    report.prepare_secs = t.elapsed().as_secs_f64();

    for &m1 in &cfg.metrics1 {
        let t = Instant::now();
        let level1: Vec<CandidateList> = records
            .par_iter()
            .map(|r| top_k(&r.histogram, index.histograms(), cfg.k1, m1))
            .collect::<Result<_>>()?;
        let level1_secs = t.elapsed().as_secs_f64();
        let positions: Vec<Vec<usize>> = level1
            .iter()
            .map(|list| {
                list.iter()
                    .map(|c| index.position(&c.segment_id).expect("ids come from the index"))
                    .collect()
            })
            .collect();
        let recall_hits = positions
            .iter()
            .enumerate()
            .filter(|(q, cands)| cands.iter().any(|&i| speakers[i] == speakers[*q]))
            .count();
        report.level1.push(Level1Result {
            metric1: m1,
            recall_hits,
            secs: level1_secs,
        });

        for &m2 in &cfg.metrics2 {
            let t = Instant::now();
            let ranked: Vec<CandidateList> = positions
                .par_iter()
                .enumerate()
                .map(|(q, cands)| {
                    let refs: Vec<&PreparedStats> = cands.iter().map(|&i| &prepared[i]).collect();
                    let mut out = rerank_prepared(&prepared[q], &refs, m2)?;
                    out.truncate(cfg.max_n());
                    Ok(out)
                })
                .collect::<Result<_>>()?;
            let level2_secs = t.elapsed().as_secs_f64() + report.prepare_secs;
            report.pairs.push(PairResult {
                metric1: m1,
                metric2: m2,
                hits: hit_counts(&ranked, &speakers, index, &cfg.ns),
                level1_secs,
                level2_secs,
            });
        }
    }

    if cfg.baseline {
        for &m2 in &cfg.metrics2 {
            let t = Instant::now();
            let ranked: Vec<CandidateList> = (0..records.len())
                .into_par_iter()
                .map(|q| {
                    let scored = prepared
                        .iter()
                        .enumerate()
                        .filter(|&(i, _)| i != q)
                        .map(|(_, other)| m2.candidate(&prepared[q], other))
                        .collect();
                    ranking::rank(scored, m2.orientation(), cfg.max_n())
                })
                .collect();
            let secs = t.elapsed().as_secs_f64() + report.prepare_secs;
            report.baseline.push(BaselineResult {
                metric2: m2,
                hits: hit_counts(&ranked, &speakers, index, &cfg.ns),
                secs,
            });
        }
    }
    Ok(report)
}

/// Evaluates with the unpruned baseline enabled and returns the timing rows.
pub fn timing_report(index: &RetrievalIndex, cfg: &EvalConfig) -> Result<Vec<TimingRow>> {
    let cfg = EvalConfig {
        baseline: true,
        ..cfg.clone()
    };
    Ok(evaluate(index, &cfg)?.timing())
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

/// Aligned text tables: level-1 recall, then n-best accuracy with timings.
pub fn render_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "queries: {}  audio: {:.1} s  threads: {}  k1: {}",
        r.queries, r.audio_secs, r.threads, r.k1
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<12} {:>12} {:>10}", "metric1", format!("{} best", r.k1), "time (s)");
    for l in &r.level1 {
        let _ = writeln!(
            s,
            "{:<12} {:>11.1}% {:>10.3}",
            l.metric1.name(),
            100.0 * r.recall(l),
            l.secs
        );
    }
    let _ = writeln!(s);
    let mut head = format!("{:<12} {:<12}", "metric1", "metric2");
    for n in &r.ns {
        let _ = write!(head, " {:>8}", format!("{n} best"));
    }
    let _ = write!(head, " {:>14} {:>11}", "full time (s)", "speed ratio");
    let _ = writeln!(s, "{head}");
    for p in &r.pairs {
        let _ = write!(s, "{:<12} {:<12}", p.metric1.name(), p.metric2.name());
        for &h in &p.hits {
            let _ = write!(s, " {:>7.1}%", 100.0 * r.fraction(h));
        }
        let _ = writeln!(
            s,
            " {:>14.3} {:>11}",
            p.total_secs(),
            fmt_opt(speed_ratio(r.audio_secs, p.total_secs()), 1)
        );
    }
    for b in &r.baseline {
        let _ = write!(s, "{:<12} {:<12}", "(none)", b.metric2.name());
        for &h in &b.hits {
            let _ = write!(s, " {:>7.1}%", 100.0 * r.fraction(h));
        }
        let _ = writeln!(
            s,
            " {:>14.3} {:>11}",
            b.secs,
            fmt_opt(speed_ratio(r.audio_secs, b.secs), 1)
        );
    }
    s
}

/// Comma-separated rows: one `level1` row per first-level metric, one `pair`
/// row per metric pair and one `baseline` row per unpruned run.
pub fn render_csv(r: &EvalReport) -> String {
    let mut s = String::from("kind,metric1,metric2,k1,queries,recall_at_k1");
    for n in &r.ns {
        let _ = write!(s, ",acc_{n}");
    }
    s.push_str(",level1_s,level2_s,total_s,speed_ratio,threads\n");
    let blanks = ",".repeat(r.ns.len());
    for l in &r.level1 {
        let _ = writeln!(
            s,
            "level1,{},,{},{},{:.6}{blanks},{:.6},,{:.6},{},{}",
            l.metric1.name(),
            r.k1,
            r.queries,
            r.recall(l),
            l.secs,
            l.secs,
            fmt_opt(speed_ratio(r.audio_secs, l.secs), 3),
            r.threads
        );
    }
    for p in &r.pairs {
        let recall = r
            .level1
            .iter()
            .find(|l| l.metric1 == p.metric1)
            .map(|l| r.recall(l))
            .unwrap_or(0.0);
        let _ = write!(
            s,
            "pair,{},{},{},{},{:.6}",
            p.metric1.name(),
            p.metric2.name(),
            r.k1,
            r.queries,
            recall
        );
        for &h in &p.hits {
            let _ = write!(s, ",{:.6}", r.fraction(h));
        }
        let _ = writeln!(
            s,
            ",{:.6},{:.6},{:.6},{},{}",
            p.level1_secs,
            p.level2_secs,
            p.total_secs(),
            fmt_opt(speed_ratio(r.audio_secs, p.total_secs()), 3),
            r.threads
        );
    }
    for b in &r.baseline {
        let _ = write!(s, "baseline,,{},,{},", b.metric2.name(), r.queries);
        for &h in &b.hits {
            let _ = write!(s, ",{:.6}", r.fraction(h));
        }
        let _ = writeln!(
            s,
            ",,{:.6},{:.6},{},{}",
            b.secs,
            b.secs,
            fmt_opt(speed_ratio(r.audio_secs, b.secs), 3),
            r.threads
        );
    }
    s
}
