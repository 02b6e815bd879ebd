//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use spkret::codebook::{sample_frames, train_kmeans, Codebook, KMeansParams};
use spkret::eval::{evaluate, EvalConfig, EvalReport};
use spkret::linalg::Matrix;
use spkret::pipeline::{build_index, retrieve, Query, RetrievalIndex, RetrieveConfig};
use spkret::ranking::{compare, Candidate};
use spkret::stats::{
    ahs, ahs_literal, bic_penalty, delta_bic, divergence_shape, hotelling_t2, SegmentStats,
    SoMetric,
};
use spkret::synth::{brute_force_retrieve, generate, SynthCorpus, SynthSpec};
use spkret::vsm::{self, top_k, VsmMetric};
use spkret::SegmentHistogram;

const RIDGE: f64 = 1e-6;

// pinned tolerances
const DS_NONNEG: f64 = 1e-12;
const DS_SELF: f64 = 1e-12;
const DS_SYMMETRY: f64 = 1e-9;
const AHS_NONNEG: f64 = 1e-12;
const AHS_SCALED: f64 = 1e-9;
const AHS_LITERAL: f64 = 1e-12;
const T2_EQUAL_MEANS: f64 = 1e-12;
const BIC_SELF: f64 = 1e-9;
const L2_VS_COSINE: f64 = 1e-12;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_secs as f64, || {
        format!("took {:.1} s, limit {limit_secs} s", elapsed.as_secs_f64())
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `Q diag(10^u) Q^t` with `u` uniform in `[0, 2]`, so the condition number is
/// at most 100.
fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = DMatrix::from_fn(d, d, |_, _| normal(rng));
    let q = g.qr().q();
    let eig: Vec<f64> = (0..d).map(|_| 10f64.powf(rng.random_range(0.0..=2.0))).collect();
    let scale = 10f64.powf(rng.random_range(-2.0..=2.0));
    let c = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig)) * q.transpose() * scale;
    let mut m = Matrix::zeros(d);
    for i in 0..d {
        for j in 0..=i {
            let v = 0.5 * (c[(i, j)] + c[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

fn criterion_metric_properties() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = [2usize, 4, 8, 26];
    let (mut worst_self, mut worst_sym, mut worst_scaled, mut worst_literal, mut worst_t2, mut worst_bic) =
        (0f64, 0f64, 0f64, 0f64, 0f64, 0f64);
    for pair in 0..200 {
        let d = dims[pair % dims.len()];
        let c1 = random_spd(d, &mut rng);
        let c2 = random_spd(d, &mut rng);
        let ctx = || format!("pair {pair}, d={d}");

        let ds12 = divergence_shape(&c1, &c2, RIDGE).map_err(|e| e.to_string())?;
        let ds21 = divergence_shape(&c2, &c1, RIDGE).map_err(|e| e.to_string())?;
        let ds11 = divergence_shape(&c1, &c1, RIDGE).map_err(|e| e.to_string())?;
        check(ds12 >= -DS_NONNEG, || format!("{}: DS = {ds12}", ctx()))?;
        check(ds11.abs() <= DS_SELF, || format!("{}: DS(C,C) = {ds11}", ctx()))?;
        check((ds12 - ds21).abs() <= DS_SYMMETRY, || format!("{}: DS asymmetry", ctx()))?;
        worst_self = worst_self.max(ds11.abs());
        worst_sym = worst_sym.max((ds12 - ds21).abs());

        let a12 = ahs(&c1, &c2, RIDGE).map_err(|e| e.to_string())?;
        let a_scaled = ahs(&c1, &c1.scaled(3.0), RIDGE).map_err(|e| e.to_string())?;
        check(a12 >= -AHS_NONNEG, || format!("{}: AHS = {a12}", ctx()))?;
        check(a_scaled.abs() <= AHS_SCALED, || format!("{}: AHS(C,3C) = {a_scaled}", ctx()))?;
        worst_scaled = worst_scaled.max(a_scaled.abs());

        let lit = ahs_literal(&c1, &c2, RIDGE).map_err(|e| e.to_string())?;
        let lit_err = (lit - d as f64 / 2.0).abs();
        worst_literal = worst_literal.max(lit_err);
        check(lit_err <= AHS_LITERAL, || {
            format!("{}: literal sphericity {lit} vs d/2, off by {lit_err:.3e}", ctx())
        })?;

        let n = rng.random_range(50..=400);
        let m = rng.random_range(50..=400);
        let mean: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let sa = SegmentStats::from_parts("a", n, mean.clone(), c1.clone()).unwrap();
        let sb = SegmentStats::from_parts("b", m, mean.clone(), c2.clone()).unwrap();
        let t2 = hotelling_t2(&sa, &sb, RIDGE).map_err(|e| e.to_string())?;
        check((0.0..=T2_EQUAL_MEANS).contains(&t2), || format!("{}: T2 equal means = {t2}", ctx()))?;
        worst_t2 = worst_t2.max(t2);
        let shifted: Vec<f64> = mean.iter().map(|x| x + normal(&mut rng)).collect();
        let sc = SegmentStats::from_parts("c", m, shifted, c2.clone()).unwrap();
        let t2s = hotelling_t2(&sa, &sc, RIDGE).map_err(|e| e.to_string())?;
        check(t2s >= 0.0, || format!("{}: T2 = {t2s}", ctx()))?;

        let lambda = rng.random_range(0.5..=2.0);
        let bic = delta_bic(&sa, &sa, lambda, RIDGE).map_err(|e| e.to_string())?;
        let want = lambda * bic_penalty(d, 2 * n);
        check((bic - want).abs() <= BIC_SELF, || {
            format!("{}: self-pair BIC {bic} vs {want}", ctx())
        })?;
        worst_bic = worst_bic.max((bic - want).abs());
    }
    let s2 = SegmentStats::from_parts("x", 100, vec![0.3, -1.0], Matrix::from_diag(&[2.0, 0.5])).unwrap();
    let ex = delta_bic(&s2, &s2, 1.0, RIDGE).unwrap();
    check((ex - 2.5 * 200f64.ln()).abs() <= BIC_SELF && (ex - 13.2458).abs() < 5e-5, || {
        format!("d=2 self-pair BIC = {ex}")
    })?;
    within(t.elapsed(), 10)?;
    Ok(format!(
        "max |DS(C,C)| {worst_self:.1e}, DS asym {worst_sym:.1e}, |AHS(C,3C)| {worst_scaled:.1e}, \
         literal err {worst_literal:.1e}, T2 equal means {worst_t2:.1e}, BIC self err {worst_bic:.1e}; \
         d=2 self-pair {ex:.4}; {:.2} s",
        t.elapsed().as_secs_f64()
    ))
}

fn random_histogram(id: String, k: usize, rng: &mut ChaCha8Rng) -> SegmentHistogram {
    // a mix of sparse count histograms and dense ones
    if rng.random_bool(0.5) {
        let frames = rng.random_range(1..=600);
        let spread = rng.random_range(1..=k);
        let mut counts = vec![0u64; k];
        for _ in 0..frames {
            counts[rng.random_range(0..spread)] += 1;
        }
        SegmentHistogram::from_counts(id, &counts).unwrap()
    } else {
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        SegmentHistogram::new(id, raw.into_iter().map(|x| x / total).collect()).unwrap()
    }
}

fn full_sort_oracle(q: &SegmentHistogram, index: &[SegmentHistogram], k: usize, m: VsmMetric) -> Vec<Candidate> {
    let mut all: Vec<Candidate> = index
        .iter()
        .filter(|h| h.segment_id != q.segment_id)
        .map(|h| Candidate::new(h.segment_id.clone(), m.score(q, h).unwrap()))
        .collect();
    all.sort_by(|a, b| compare(m.orientation(), a, b));
    all.truncate(k);
    all
}

fn criterion_vsm() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = 2048;
    let mut worst = 0f64;
    for i in 0..1000 {
        let f = random_histogram(format!("f{i}"), k, &mut rng);
        let g = random_histogram(format!("g{i}"), k, &mut rng);
        for m in VsmMetric::ALL {
            let a = m.score(&f, &g).map_err(|e| e.to_string())?;
            let b = m.score(&g, &f).map_err(|e| e.to_string())?;
            let hi = if m == VsmMetric::NormalizedL2 { 2.0 } else { 1.0 };
            check((0.0..=hi).contains(&a), || format!("pair {i}: {} = {a}", m.name()))?;
            check(a.to_bits() == b.to_bits(), || format!("pair {i}: {} asymmetric", m.name()))?;
        }
        let cos = vsm::cosine(&f, &g).unwrap();
        let l2 = vsm::normalized_l2(&f, &g).unwrap();
        let err = (l2 - 2.0 * (1.0 - cos)).abs();
        worst = worst.max(err);
        check(err <= L2_VS_COSINE, || format!("pair {i}: l2 {l2} vs 2(1-cos) {}", 2.0 * (1.0 - cos)))?;
    }
    for trial in 0..100 {
        let index: Vec<SegmentHistogram> = (0..200)
            .map(|i| random_histogram(format!("t{trial}_{i:03}"), k, &mut rng))
            .collect();
        // a duplicate pair forces at least one exact tie
        let mut index = index;
        let mut dup = index[3].clone();
        dup.segment_id = format!("t{trial}_dup");
        index[199] = dup;
        let q = &index[rng.random_range(0..200)];
        let depth = rng.random_range(1..=199);
        for m in VsmMetric::ALL {
            let got = top_k(q, &index, depth, m).map_err(|e| e.to_string())?;
            let want = full_sort_oracle(q, &index, depth, m);
            check(got == want, || format!("index {trial}, {}: top_k differs from full sort", m.name()))?;
        }
    }
    within(t.elapsed(), 30)?;
    Ok(format!(
        "1000 pairs x 4 metrics in range and bit-symmetric, max |l2 - 2(1-cos)| {worst:.1e}; \
         top_k = full sort on 100 indexes; {:.2} s",
        t.elapsed().as_secs_f64()
    ))
}

fn small_codebook(corpus: &SynthCorpus, k: usize, seed: u64) -> Codebook {
    let frames = sample_frames(&corpus.segments, 40, seed).unwrap();
    train_kmeans(
        &frames,
        &KMeansParams {
            k,
            max_iters: 15,
            seed,
            ..Default::default()
        },
    )
    .unwrap()
}

fn criterion_oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let corpus = generate(&SynthSpec {
        seed: 11,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let cb = small_codebook(&corpus, 64, 11);
    let index = build_index(&corpus.segments, &cb, Some(&corpus.labels)).map_err(|e| e.to_string())?;
    check(index.len() == 200, || format!("index has {} records", index.len()))?;
    let metrics = SoMetric::all(1.0);
    for m2 in metrics {
        let cfg = RetrieveConfig {
            k1: 199,
            metric1: VsmMetric::HistogramIntersection,
            metric2: m2,
            n: 199,
            ridge: RIDGE,
        };
        let mismatches: Vec<String> = corpus
            .segments
            .par_iter()
            .filter_map(|seg| {
                let got = retrieve(Query::Id(&seg.segment_id), &index, &cfg).unwrap().ranked;
                let want = brute_force_retrieve(seg, &corpus.segments, m2, 199, RIDGE).unwrap();
                (got != want).then(|| seg.segment_id.clone())
            })
            .collect();
        check(mismatches.is_empty(), || {
            format!("{}: {} queries differ, first {}", m2.name(), mismatches.len(), mismatches[0])
        })?;
    }
    within(t.elapsed(), 120)?;
    Ok(format!(
        "200 queries x 4 metrics identical to brute force at k1=199; {:.1} s",
        t.elapsed().as_secs_f64()
    ))
}

fn assert_monotone(r: &EvalReport) -> Result<(), String> {
    for p in r.pairs.iter() {
        check(p.hits.windows(2).all(|w| w[0] <= w[1]), || {
            format!("{}+{}: hits {:?} not monotone", p.metric1.name(), p.metric2.name(), p.hits)
        })?;
    }
    for b in &r.baseline {
        check(b.hits.windows(2).all(|w| w[0] <= w[1]), || {
            format!("baseline {}: hits {:?} not monotone", b.metric2.name(), b.hits)
        })?;
    }
    Ok(())
}

fn criterion_end_to_end() -> Outcome {
    let t = Instant::now();
    let bic = SoMetric::DeltaBic { lambda: 1.0 };
    let separated = SynthSpec {
        mean_spread: 4.0,
        cov_scale: 1.0,
        seed: 21,
        ..Default::default()
    };
    let corpus = generate(&separated).map_err(|e| e.to_string())?;
    let sep = corpus.min_separation();
    check(sep >= 5.0, || format!("separated corpus only {sep:.2} std apart"))?;
    let cb = small_codebook(&corpus, 256, 21);
    let index = build_index(&corpus.segments, &cb, Some(&corpus.labels)).map_err(|e| e.to_string())?;
    let cfg = EvalConfig {
        k1: 50,
        metrics1: vec![VsmMetric::HistogramIntersection],
        metrics2: vec![bic],
        ..Default::default()
    };
    let r = evaluate(&index, &cfg).map_err(|e| e.to_string())?;
    assert_monotone(&r)?;
    let acc1 = r.accuracy(&r.pairs[0], 1).unwrap();
    let recall = r.recall(&r.level1[0]);
    check(acc1 >= 0.99, || format!("separated 1-best accuracy {acc1:.3} < 0.99"))?;
    check(recall == 1.0, || format!("separated recall@50 {recall:.3} < 1"))?;

    let mut overlap = Vec::new();
    for seed in 0..5u64 {
        let spec = SynthSpec {
            mean_spread: 1.0,
            cov_scale: 1.0,
            seed: 100 + seed,
            ..Default::default()
        };
        let corpus = generate(&spec).map_err(|e| e.to_string())?;
        let cb = small_codebook(&corpus, 256, 100 + seed);
        let index = build_index(&corpus.segments, &cb, Some(&corpus.labels)).map_err(|e| e.to_string())?;
        let cfg = EvalConfig {
            k1: 50,
            metrics1: vec![VsmMetric::HistogramIntersection],
            metrics2: vec![bic, SoMetric::HotellingT2],
            ..Default::default()
        };
        let r = evaluate(&index, &cfg).map_err(|e| e.to_string())?;
        assert_monotone(&r)?;
        let b = r.accuracy(&r.pairs[0], 1).unwrap();
        let h = r.accuracy(&r.pairs[1], 1).unwrap();
        overlap.push(format!("{b:.3}/{h:.3}"));
        check(b >= h, || format!("overlapping seed {}: BIC 1-best {b:.3} < T2 {h:.3}", 100 + seed))?;
    }
    within(t.elapsed(), 300)?;
    Ok(format!(
        "separated (min separation {sep:.1} std): 1-best {acc1:.3}, recall@50 {recall:.3}; \
         overlapping BIC/T2 1-best per seed {}; {:.1} s",
        overlap.join(" "),
        t.elapsed().as_secs_f64()
    ))
}

fn write_and_read(cb: &Codebook, index: &RetrievalIndex, dir: &std::path::Path, tag: &str) -> (Vec<u8>, Vec<u8>) {
    let cp = dir.join(format!("{tag}.cbk"));
    let ip = dir.join(format!("{tag}.idx"));
    cb.write(&cp).unwrap();
    index.write(&ip).unwrap();
    (std::fs::read(cp).unwrap(), std::fs::read(ip).unwrap())
}

fn criterion_determinism() -> Outcome {
    let t = Instant::now();
    let spec = SynthSpec {
        num_speakers: 12,
        segments_per_speaker: 6,
        mean_spread: 1.0,
        seed: 31,
        ..Default::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let build = |tag: &str| {
        let corpus = generate(&spec).unwrap();
        let cb = small_codebook(&corpus, 128, 31);
        let index = build_index(&corpus.segments, &cb, Some(&corpus.labels)).unwrap();
        let bytes = write_and_read(&cb, &index, dir.path(), tag);
        (index, bytes)
    };
    let (index, first) = build("a");
    let (_, second) = build("b");
    check(first.0 == second.0, || "codebook files differ between identical runs".into())?;
    check(first.1 == second.1, || "index files differ between identical runs".into())?;

    let cfg = EvalConfig {
        k1: 20,
        metrics1: VsmMetric::ALL.to_vec(),
        metrics2: SoMetric::all(1.0).to_vec(),
        baseline: true,
        ..Default::default()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| evaluate(&index, &cfg))
            .unwrap()
    };
    let one = run(1);
    let four = run(4);
    check(one.threads == 1 && four.threads == 4, || "thread count not recorded".into())?;
    check(one.same_results(&four), || "1-thread and 4-thread reports differ".into())?;
    assert_monotone(&one)?;
    assert_monotone(&four)?;
    Ok(format!(
        "codebook and index bytes identical across rebuilds; 1 vs 4 threads identical over {} metric pairs; \
         1<=3<=5-best on every run; {:.1} s",
        one.pairs.len(),
        t.elapsed().as_secs_f64()
    ))
}

fn criterion_speed() -> Outcome {
    let t = Instant::now();
    let spec = SynthSpec {
        num_speakers: 300,
        segments_per_speaker: 10,
        frames: (60, 120),
        mean_spread: 1.0,
        seed: 41,
        ..Default::default()
    };
    let corpus = generate(&spec).map_err(|e| e.to_string())?;
    let frames = sample_frames(&corpus.segments, 10, 41).unwrap();
    let cb = train_kmeans(
        &frames,
        &KMeansParams {
            k: 256,
            max_iters: 10,
            seed: 41,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let index = build_index(&corpus.segments, &cb, Some(&corpus.labels)).map_err(|e| e.to_string())?;
    check(index.len() == 3000, || format!("index has {} records", index.len()))?;
    let cfg = EvalConfig {
        k1: 50,
        metrics1: vec![VsmMetric::HistogramIntersection],
        metrics2: vec![SoMetric::DeltaBic { lambda: 1.0 }],
        baseline: true,
        ..Default::default()
    };
    let r = evaluate(&index, &cfg).map_err(|e| e.to_string())?;
    assert_monotone(&r)?;
    let row = &r.timing()[0];
    let two_level = row.total_secs;
    let brute = row.baseline_secs.unwrap();
    check(two_level < brute, || {
        format!("two-level {two_level:.2} s not faster than brute force {brute:.2} s")
    })?;
    Ok(format!(
        "3000 segments, {:.0} s audio: two-level {two_level:.2} s vs brute force {brute:.2} s \
         (speedup {:.1}x), speed ratio {:.1}x real time; {:.1} s",
        r.audio_secs,
        row.speedup.unwrap_or(f64::NAN),
        row.speed_ratio.unwrap_or(f64::NAN),
        t.elapsed().as_secs_f64()
    ))
}

fn main() {
    let criteria: [Criterion; 6] = [
        ("1 metric properties", criterion_metric_properties),
        ("2 vsm measures and top-k", criterion_vsm),
        ("3 oracle equivalence", criterion_oracle_equivalence),
        ("4 synthetic accuracy", criterion_end_to_end),
        ("5 monotonicity and determinism", criterion_determinism),
        ("6 speed structure", criterion_speed),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>())));
        match outcome {
            Ok(msg) => println!("criterion {name}: PASS ({msg})"),
            Err(msg) => {
                failed += 1;
                println!("criterion {name}: FAIL ({msg})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
