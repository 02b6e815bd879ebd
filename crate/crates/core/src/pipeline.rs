//! Index construction and the two-level query path.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;

use crate::codebook::{histogram, Codebook, SegmentHistogram};
use crate::error::{Error, Result};
use crate::features::{FrameMatrix, FRAME_STEP};
use crate::format::{read_file, write_file, ByteReader, ByteWriter};
use crate::ranking::CandidateList;
use crate::stats::{
    rerank_prepared, segment_stats, PreparedStats, SegmentStats, SoMetric, DEFAULT_LAMBDA,
    DEFAULT_RIDGE,
};
use crate::vsm::{top_k, VsmMetric, DEFAULT_K1};

const INDEX_MAGIC: &[u8; 8] = b"SPKIDX1\0";

pub type Labels = HashMap<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexRecord {
    pub histogram: SegmentHistogram,
    pub stats: SegmentStats,
    pub speaker: Option<String>,
}

impl IndexRecord {
    pub fn segment_id(&self) -> &str {
        &self.stats.segment_id
    }

    /// Duration of the frames that survived energy gating.
    pub fn duration(&self) -> f64 {
        self.stats.n as f64 * FRAME_STEP
    }
}

/// Parameters that produced an index. Not persisted in the index file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BuildConfig {
    pub codebook_k: usize,
    pub codebook_seed: u64,
    pub per_segment: Option<usize>,
    pub drop_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedSegment {
    pub segment_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    k: usize,
    dim: usize,
    records: Vec<IndexRecord>,
    by_id: HashMap<String, usize>,
    pub build_config: Option<BuildConfig>,
    /// Segments left out at build time, with the reason.
    pub skipped: Vec<SkippedSegment>,
}

impl RetrievalIndex {
    pub fn from_records(k: usize, dim: usize, records: Vec<IndexRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.histogram.k() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    got: r.histogram.k(),
                });
            }
            if r.stats.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.stats.dim(),
                });
            }
            if by_id.insert(r.segment_id().to_string(), i).is_some() {
                return Err(Error::DuplicateSegmentId(r.segment_id().to_string()));
            }
        }
        Ok(Self {
            k,
            dim,
            records,
            by_id,
            build_config: None,
            skipped: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[IndexRecord] {
        &self.records
    }

    pub fn get(&self, segment_id: &str) -> Option<&IndexRecord> {
        self.by_id.get(segment_id).map(|&i| &self.records[i])
    }

    pub fn position(&self, segment_id: &str) -> Option<usize> {
        self.by_id.get(segment_id).copied()
    }

    pub fn total_duration(&self) -> f64 {
        self.records.iter().map(IndexRecord::duration).sum()
    }

    pub fn histograms(&self) -> impl IndexedParallelIterator<Item = &SegmentHistogram> {
        self.records.par_iter().map(|r| &r.histogram)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_magic(INDEX_MAGIC);
        w.len_u32(self.records.len())?;
        w.len_u32(self.k)?;
        w.len_u32(self.dim)?;
        for r in &self.records {
            w.str(r.segment_id())?;
            w.str(r.speaker.as_deref().unwrap_or(""))?;
            let nz = r.histogram.nonzero();
            w.len_u32(nz.len())?;
            for &(bin, v) in nz {
                w.u32(bin);
                w.f32(v as f32);
            }
            w.u64(r.stats.n as u64);
            for &m in &r.stats.mean {
                w.f64(m);
            }
            for &c in r.stats.cov.as_slice() {
                w.f64(c);
            }
        }
        Ok(w.into_bytes())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_file(path, &self.to_bytes()?)
    }

    /// Histograms are rebuilt exactly from the stored values and the frame count.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path, INDEX_MAGIC)?;
        let count = r.u32()? as usize;
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        r.expect_remaining(count.saturating_mul(20))?;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let id = r.str()?;
            let label = r.str()?;
            let nnz = r.u32()? as usize;
            r.expect_remaining(nnz.saturating_mul(8))?;
            let mut sparse = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                let bin = r.u32()? as usize;
                let v = r.f32()?;
                if bin >= k {
                    return Err(r.corrupt(format!("segment {id}: bin {bin} out of range")));
                }
                sparse.push((bin, v));
            }
            let n = r.u64()? as usize;
            let mut mean = Vec::with_capacity(d);
            for _ in 0..d {
                mean.push(r.f64()?);
            }
            r.expect_remaining(d.saturating_mul(d).saturating_mul(8))?;
            let mut cov = Vec::with_capacity(d * d);
            for _ in 0..d * d {
                cov.push(r.f64()?);
            }
            let mut counts = vec![0u64; k];
            for (bin, v) in sparse {
                counts[bin] = (f64::from(v) * n as f64).round() as u64;
            }
            if counts.iter().sum::<u64>() != n as u64 {
                return Err(r.corrupt(format!(
                    "segment {id}: histogram does not match frame count {n}"
                )));
            }
            let cov = crate::linalg::Matrix::from_row_major(d, cov)?;
            let stats = SegmentStats::from_parts(id.clone(), n, mean, cov)
                .map_err(|e| r.corrupt(e.to_string()))?;
            records.push(IndexRecord {
                histogram: SegmentHistogram::from_counts(id, &counts)?,
                stats,
                speaker: (!label.is_empty()).then_some(label),
            });
        }
        r.finish()?;
        Self::from_records(k, d, records)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_file(path)?, path)
    }
}

/// Computes histogram and statistics for every segment.
///
/// Duplicate ids abort the build. Segments with fewer than two frames are left
/// out and listed in [`RetrievalIndex::skipped`].
pub fn build_index(
    segments: &[FrameMatrix],
    cb: &Codebook,
    labels: Option<&Labels>,
) -> Result<RetrievalIndex> {
    let mut seen = HashMap::with_capacity(segments.len());
    for s in segments {
        if seen.insert(s.segment_id.as_str(), ()).is_some() {
            return Err(Error::DuplicateSegmentId(s.segment_id.clone()));
        }
        if s.dim() != cb.dim() {
            return Err(Error::DimensionMismatch {
                expected: cb.dim(),
                got: s.dim(),
            });
        }
    }
    let built: Vec<Result<IndexRecord>> = segments
        .par_iter()
        .map(|seg| {
            let stats = segment_stats(seg)?;
            Ok(IndexRecord {
                histogram: histogram(seg, cb)?,
                stats,
                speaker: labels.and_then(|l| l.get(&seg.segment_id).cloned()),
            })
        })
        .collect();
    let mut records = Vec::with_capacity(segments.len());
    let mut skipped = Vec::new();
    for (seg, r) in segments.iter().zip(built) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e @ Error::TooFewFrames { .. }) => skipped.push(SkippedSegment {
                segment_id: seg.segment_id.clone(),
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    let mut index = RetrievalIndex::from_records(cb.k(), cb.dim(), records)?;
    index.build_config = Some(BuildConfig {
        codebook_k: cb.k(),
        codebook_seed: cb.train_seed,
        ..Default::default()
    });
    index.skipped = skipped;
    Ok(index)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrieveConfig {
    pub k1: usize,
    pub metric1: VsmMetric,
    pub metric2: SoMetric,
    pub n: usize,
    pub ridge: f64,
}

impl Default for RetrieveConfig {
    fn default() -> Self {
        Self {
            k1: DEFAULT_K1,
            metric1: VsmMetric::HistogramIntersection,
            metric2: SoMetric::DeltaBic {
                lambda: DEFAULT_LAMBDA,
            },
            n: 5,
            ridge: DEFAULT_RIDGE,
        }
    }
}

impl RetrieveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.n == 0 || self.n > self.k1 {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= n <= k1, got n={} k1={}",
                self.n, self.k1
            )));
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ridge must be non-negative, got {}",
                self.ridge
            )));
        }
        Ok(())
    }
}

/// A query segment not necessarily present in the index.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalQuery {
    pub histogram: SegmentHistogram,
    pub stats: SegmentStats,
}

impl ExternalQuery {
    pub fn from_frames(seg: &FrameMatrix, cb: &Codebook) -> Result<Self> {
        Ok(Self {
            histogram: histogram(seg, cb)?,
            stats: segment_stats(seg)?,
        })
    }
}

pub enum Query<'a> {
    /// A segment already in the index; it is excluded from its own results.
    Id(&'a str),
    External(&'a ExternalQuery),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    /// First-level candidates, closest first.
    pub level1: CandidateList,
    /// Second-level ranking of the first-level candidates, truncated to `n`.
    pub ranked: CandidateList,
}

pub fn retrieve(query: Query<'_>, index: &RetrievalIndex, cfg: &RetrieveConfig) -> Result<Retrieval> {
    cfg.validate()?;
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let (hist, stats) = match query {
        Query::Id(id) => {
            let rec = index
                .get(id)
                .ok_or_else(|| Error::UnknownSegmentId(id.to_string()))?;
            (&rec.histogram, &rec.stats)
        }
        Query::External(q) => (&q.histogram, &q.stats),
    };
    let level1 = top_k(hist, index.histograms(), cfg.k1, cfg.metric1)?;
    let q = PreparedStats::new(stats, cfg.ridge);
    let candidates: Vec<PreparedStats> = level1
        .iter()
        .map(|c| {
            let rec = index.get(&c.segment_id).expect("level-1 ids come from the index");
            PreparedStats::new(&rec.stats, cfg.ridge)
        })
        .collect();
    let refs: Vec<&PreparedStats> = candidates.iter().collect();
    let mut ranked = rerank_prepared(&q, &refs, cfg.metric2)?;
    ranked.truncate(cfg.n);
    Ok(Retrieval { level1, ranked })
}

/// Reads `segment_id<TAB>speaker_id` lines. Blank lines are ignored.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Labels> {
    let path = path.as_ref();
    let text = String::from_utf8(read_file(path)?)
        .map_err(|_| Error::corrupt(path, "labels file is not valid UTF-8"))?;
    parse_labels(&text).map_err(|reason| Error::corrupt(path, reason))
}

pub fn parse_labels(text: &str) -> std::result::Result<Labels, String> {
    let mut out = Labels::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, speaker) = line
            .split_once('\t')
            .ok_or_else(|| format!("line {}: expected segment_id<TAB>speaker_id", no + 1))?;
        if id.is_empty() || speaker.is_empty() || speaker.contains('\t') {
            return Err(format!("line {}: malformed label line", no + 1));
        }
        if out.insert(id.to_string(), speaker.to_string()).is_some() {
            return Err(format!("line {}: segment {id} labelled twice", no + 1));
        }
    }
    Ok(out)
}

/// Writes labels sorted by segment id.
pub fn write_labels(path: impl AsRef<Path>, labels: &Labels) -> Result<()> {
    let path = path.as_ref();
    let sorted: BTreeMap<_, _> = labels.iter().collect();
    let mut text = String::new();
    for (id, spk) in sorted {
        text.push_str(id);
        text.push('\t');
        text.push_str(spk);
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{train_kmeans, FrameSet, KMeansParams};

    fn seg(id: &str, offset: f64, n: usize) -> FrameMatrix {
        let data = (0..n)
            .flat_map(|t| {
                let t = t as f64;
                [offset + (t * 0.7).sin(), offset * 0.5 + (t * 1.3).cos()]
            })
            .collect();
        FrameMatrix::new(id, 2, data).unwrap()
    }

    fn corpus() -> (Vec<FrameMatrix>, Codebook) {
        let segs: Vec<_> = (0..10)
            .map(|i| seg(&format!("s{i}"), (i / 2) as f64 * 3.0, 20 + i))
            .collect();
        let frames = FrameSet {
            dim: 2,
            data: segs.iter().flat_map(|s| s.as_slice().to_vec()).collect(),
        };
        let cb = train_kmeans(
            &frames,
            &KMeansParams {
                k: 8,
                seed: 5,
                ..Default::default()
            },
        )
        .unwrap();
        (segs, cb)
    }

    #[test]
    fn build_counts_and_duplicates() {
        let (mut segs, cb) = corpus();
        let idx = build_index(&segs, &cb, None).unwrap();
        assert_eq!(idx.len(), 10);
        assert!(idx.skipped.is_empty());
        segs.push(seg("s3", 0.0, 5));
        assert!(matches!(
            build_index(&segs, &cb, None),
            Err(Error::DuplicateSegmentId(id)) if id == "s3"
        ));
    }

    #[test]
    fn short_segments_are_skipped() {
        let (mut segs, cb) = corpus();
        segs.push(FrameMatrix::new("tiny", 2, vec![0.0, 0.0]).unwrap());
        let idx = build_index(&segs, &cb, None).unwrap();
        assert_eq!(idx.len(), 10);
        assert_eq!(idx.skipped.len(), 1);
        assert_eq!(idx.skipped[0].segment_id, "tiny");
    }

    #[test]
    fn index_file_roundtrip_is_exact() {
        let (segs, cb) = corpus();
        let labels: Labels = segs
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 3 != 0)
            .map(|(i, s)| (s.segment_id.clone(), format!("spk{}", i / 2)))
            .collect();
        let idx = build_index(&segs, &cb, Some(&labels)).unwrap();
        let bytes = idx.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"SPKIDX1\0");
        let back = RetrievalIndex::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.records(), idx.records());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(back.get("s0").unwrap().speaker.is_none());
        assert_eq!(back.get("s1").unwrap().speaker.as_deref(), Some("spk0"));
        assert!(RetrievalIndex::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
    }

    #[test]
    fn retrieve_duplicate_first_and_errors() {
        let (mut segs, cb) = corpus();
        let mut dup = segs[4].clone();
        dup.segment_id = "copy".into();
        segs.push(dup);
        let idx = build_index(&segs, &cb, None).unwrap();
        let cfg = RetrieveConfig {
            k1: 5,
            n: 3,
            ..Default::default()
        };
        let r = retrieve(Query::Id("s4"), &idx, &cfg).unwrap();
        assert_eq!(r.ranked.len(), 3);
        assert_eq!(r.ranked[0].segment_id, "copy");
        assert!(r.ranked.iter().all(|c| c.segment_id != "s4"));
        assert!(r
            .ranked
            .iter()
            .all(|c| r.level1.iter().any(|l| l.segment_id == c.segment_id)));
        assert!(matches!(
            retrieve(Query::Id("missing"), &idx, &cfg),
            Err(Error::UnknownSegmentId(_))
        ));
        let bad = RetrieveConfig { n: 6, ..cfg };
        assert!(retrieve(Query::Id("s4"), &idx, &bad).is_err());

        let mut outside = segs[4].clone();
        outside.segment_id = "ext".into();
        let ext = ExternalQuery::from_frames(&outside, &cb).unwrap();
        let r = retrieve(Query::External(&ext), &idx, &cfg).unwrap();
        // an external copy is not excluded: both s4 and its copy tie at the top
        let top: Vec<_> = r.ranked[..2].iter().map(|c| c.segment_id.as_str()).collect();
        assert_eq!(top, ["copy", "s4"]);
    }

    #[test]
    fn single_segment_index_has_no_candidates() {
        let (segs, cb) = corpus();
        let idx = build_index(&segs[..1], &cb, None).unwrap();
        let cfg = RetrieveConfig {
            k1: 5,
            n: 5,
            ..Default::default()
        };
        assert!(matches!(
            retrieve(Query::Id("s0"), &idx, &cfg),
            Err(Error::EmptyIndex)
        ));
    }

    #[test]
    fn labels_parse() {
        let l = parse_labels("a\tx\n\nb\ty\r\n").unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!(l["b"], "y");
        assert!(parse_labels("a x\n").is_err());
        assert!(parse_labels("a\tx\na\ty\n").is_err());
    }
}
