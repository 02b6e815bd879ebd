use std::cmp::Ordering;

/// Which direction of a score means "closer".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Higher is closer.
    Similarity,
    /// Lower is closer.
    Dissimilarity,
}

impl Orientation {
    /// Score assigned to candidates that could not be scored.
    pub fn worst(self) -> f64 {
        match self {
            Orientation::Similarity => f64::NEG_INFINITY,
            Orientation::Dissimilarity => f64::INFINITY,
        }
    }

    /// Closest-first comparison of two scores.
    pub fn cmp_scores(self, a: f64, b: f64) -> Ordering {
        match self {
            Orientation::Similarity => b.total_cmp(&a),
            Orientation::Dissimilarity => a.total_cmp(&b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub segment_id: String,
    pub score: f64,
    /// Set when the measure could not be evaluated; such candidates rank last.
    pub flagged: bool,
}

impl Candidate {
    pub fn new(segment_id: impl Into<String>, score: f64) -> Self {
        Self {
            segment_id: segment_id.into(),
            score,
            flagged: false,
        }
    }

    pub fn failed(segment_id: impl Into<String>, orientation: Orientation) -> Self {
        Self {
            segment_id: segment_id.into(),
            score: orientation.worst(),
            flagged: true,
        }
    }
}

/// Ordered candidates, closest first.
pub type CandidateList = Vec<Candidate>;

/// Total order used everywhere: unflagged first, then by score, then ascending id.
pub fn compare(orientation: Orientation, a: &Candidate, b: &Candidate) -> Ordering {
    a.flagged
        .cmp(&b.flagged)
        .then_with(|| orientation.cmp_scores(a.score, b.score))
        .then_with(|| a.segment_id.cmp(&b.segment_id))
}

/// Sorts closest-first and keeps at most `k` entries.
pub fn rank(mut items: Vec<Candidate>, orientation: Orientation, k: usize) -> CandidateList {
    if k == 0 {
        return Vec::new();
    }
    if items.len() > k {
        items.select_nth_unstable_by(k - 1, |a, b| compare(orientation, a, b));
        items.truncate(k);
    }
    items.sort_unstable_by(|a, b| compare(orientation, a, b));
    items
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_id_and_flagged_last() {
        let items = vec![
            Candidate::new("b", 1.0),
            Candidate::failed("a", Orientation::Similarity),
            Candidate::new("c", 2.0),
            Candidate::new("a2", 1.0),
        ];
        let ids: Vec<_> = rank(items, Orientation::Similarity, 10)
            .into_iter()
            .map(|c| c.segment_id)
            .collect();
        assert_eq!(ids, ["c", "a2", "b", "a"]);
    }

    #[test]
    fn truncation_keeps_closest() {
        let items: Vec<_> = (0..20)
            .map(|i| Candidate::new(format!("{i:02}"), (i % 7) as f64))
            .collect();
        let top = rank(items.clone(), Orientation::Dissimilarity, 5);
        let mut all = items;
        all.sort_by(|a, b| compare(Orientation::Dissimilarity, a, b));
        assert_eq!(top, all[..5]);
    }
}
