//! Naive reference implementations used to cross-check the engine, plus a
//! random corpus generator. Shared with the CLI acceptance suite.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use concept_audit::metrics::conditional_frequencies;
use concept_audit::model::{Provenance, RunMetadata};
use concept_audit::{
    concept_frequency, concept_stability, cooccurrence, normalize_label, AuditCorpus, BoundingBox, ConceptLabel,
    Detection, ImageRecord, PromptRecord,
};
use num_bigint::BigInt;
use rand::Rng;

/// Shape of a generated corpus.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub max_images: usize,
    pub max_concepts: usize,
    pub max_prompts: usize,
    /// Every prompt gets the same number of images.
    pub equal_k: bool,
}

impl Default for Shape {
    fn default() -> Self {
        Self { max_images: 100, max_concepts: 20, max_prompts: 8, equal_k: false }
    }
}

pub fn label(s: &str) -> ConceptLabel {
    normalize_label(s).unwrap()
}

/// A random corpus with unit prompt weights and every prompt non-empty.
pub fn random_corpus(rng: &mut impl Rng, shape: Shape) -> AuditCorpus {
    let n_prompts = rng.random_range(1..=shape.max_prompts);
    let per_prompt_cap = (shape.max_images / n_prompts).max(1);
    let n_concepts = rng.random_range(1..=shape.max_concepts);
    // Per-concept base rates, with some prompt-specific boosts so that
    // conditionals vary across prompts.
    let base: Vec<f64> = (0..n_concepts).map(|_| rng.random::<f64>() * 0.6).collect();
    let fixed_k = rng.random_range(1..=per_prompt_cap);

    let mut prompts = Vec::new();
    let mut images = Vec::new();
    let mut k_max = 1;
    for t in 0..n_prompts {
        let prompt_id = format!("t{t:02}");
        prompts.push(PromptRecord::new(&prompt_id, format!("prompt number {t}"), 1.0, Provenance::Template).unwrap());
        let k = if shape.equal_k { fixed_k } else { rng.random_range(1..=per_prompt_cap) };
        k_max = k_max.max(k);
        let boost: Vec<f64> = (0..n_concepts).map(|_| if rng.random_bool(0.3) { 0.4 } else { 0.0 }).collect();
        for s in 0..k {
            let mut detections = Vec::new();
            for c in 0..n_concepts {
                if rng.random_bool((base[c] + boost[c]).min(1.0)) {
                    let copies = if rng.random_bool(0.2) { 2 } else { 1 };
                    for _ in 0..copies {
                        let bbox = BoundingBox::new(0.1, 0.1, 0.5, 0.6).unwrap();
                        detections.push(Detection::new(label(&format!("c{c:02}")), bbox, Some(0.9)).unwrap());
                    }
                }
            }
            images.push(ImageRecord {
                image_id: format!("{prompt_id}-{s:03}"),
                prompt_id: prompt_id.clone(),
                sample_index: s as u32,
                detections,
                image_uri: None,
                detector_id: "oracle".into(),
            });
        }
    }
    let metadata = RunMetadata {
        generator_id: "oracle-gen".into(),
        detector_id: "oracle".into(),
        k_nominal: k_max as u32,
        created_at: None,
        config_digest: String::new(),
    };
    AuditCorpus::new("random", metadata, prompts, images).unwrap()
}

fn labels_of(image: &ImageRecord) -> Vec<&ConceptLabel> {
    image.detections.iter().map(|d| &d.label).collect()
}

fn has(image: &ImageRecord, c: &ConceptLabel) -> bool {
    labels_of(image).into_iter().any(|l| l == c)
}

pub fn vocabulary(corpus: &AuditCorpus) -> Vec<ConceptLabel> {
    let mut set = BTreeSet::new();
    for image in corpus.images().values() {
        for d in &image.detections {
            set.insert(d.label.clone());
        }
    }
    set.into_iter().collect()
}

/// `(count, P(c))` per concept by scanning every image.
pub fn frequency(corpus: &AuditCorpus) -> BTreeMap<ConceptLabel, (u64, f64)> {
    let n = corpus.images().len();
    vocabulary(corpus)
        .into_iter()
        .map(|c| {
            let mut count = 0u64;
            for image in corpus.images().values() {
                if has(image, &c) {
                    count += 1;
                }
            }
            let p = count as f64 / n as f64;
            (c, (count, p))
        })
        .collect()
}

/// `P(c | t)` for every prompt and every vocabulary concept (0 when absent).
pub fn conditionals(corpus: &AuditCorpus) -> BTreeMap<String, BTreeMap<ConceptLabel, (u64, f64)>> {
    let vocab = vocabulary(corpus);
    corpus
        .prompts()
        .keys()
        .map(|t| {
            let own: Vec<&ImageRecord> = corpus.images().values().filter(|i| &i.prompt_id == t).collect();
            let rows = vocab
                .iter()
                .map(|c| {
                    let count = own.iter().filter(|i| has(i, c)).count() as u64;
                    (c.clone(), (count, count as f64 / own.len() as f64))
                })
                .collect();
            (t.clone(), rows)
        })
        .collect()
}

/// `(sigma, cv)` per concept with `P(c) > tau`, summing the squared
/// deviations exactly and rounding once.
pub fn stability(corpus: &AuditCorpus, tau: f64) -> BTreeMap<ConceptLabel, (f64, f64)> {
    let freq = frequency(corpus);
    let cond = conditionals(corpus);
    let n_prompts = corpus.prompts().len() as f64;
    let mut out = BTreeMap::new();
    for (c, &(_, p)) in &freq {
        if p <= tau {
            continue;
        }
        let terms: Vec<f64> = cond
            .values()
            .map(|rows| {
                let d = rows[c].1 - p;
                d * d
            })
            .collect();
        let sigma = (exact_sum(&terms) / n_prompts).sqrt();
        out.insert(c.clone(), (sigma, sigma / p));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OraclePair {
    pub joint: u64,
    pub support: f64,
    pub conf_ab: f64,
    pub conf_ba: f64,
    pub lift: f64,
}

/// Every unordered pair `(a < b)` of vocabulary concepts.
pub fn cooccurrence_table(corpus: &AuditCorpus) -> BTreeMap<(ConceptLabel, ConceptLabel), OraclePair> {
    let freq = frequency(corpus);
    let vocab = vocabulary(corpus);
    let n = corpus.images().len() as f64;
    let mut out = BTreeMap::new();
    for (i, a) in vocab.iter().enumerate() {
        for b in &vocab[i + 1..] {
            let mut joint = 0u64;
            for image in corpus.images().values() {
                if has(image, a) && has(image, b) {
                    joint += 1;
                }
            }
            let support = joint as f64 / n;
            let (pa, pb) = (freq[a].1, freq[b].1);
            out.insert(
                (a.clone(), b.clone()),
                OraclePair { joint, support, conf_ab: support / pa, conf_ba: support / pb, lift: support / (pa * pb) },
            );
        }
    }
    out
}

/// Correctly rounded sum of `terms`, computed with arbitrary-precision
/// integers: every finite double is an integer multiple of 2^-1074.
pub fn exact_sum(terms: &[f64]) -> f64 {
    let mut acc = BigInt::from(0);
    for &t in terms {
        assert!(t.is_finite());
        let bits = t.to_bits();
        let negative = bits >> 63 == 1;
        let exponent = ((bits >> 52) & 0x7ff) as i64;
        let fraction = bits & ((1u64 << 52) - 1);
        let (mantissa, shift) = if exponent == 0 { (fraction, 0) } else { (fraction | (1u64 << 52), exponent - 1) };
        let scaled = BigInt::from(mantissa) << shift as usize;
        if negative {
            acc -= scaled;
        } else {
            acc += scaled;
        }
    }
    // acc * 2^-1074 == acc * 5^1074 * 10^-1074, and decimal parsing rounds correctly.
    let decimal = acc * BigInt::from(5).pow(1074);
    format!("{decimal}e-1074").parse().unwrap()
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn same(x: f64, y: f64) -> bool {
    x.to_bits() == y.to_bits()
}

/// Bit-for-bit comparison of the engine's frequency, conditional, stability
/// (tau = 0) and full co-occurrence tables against the naive oracle.
pub fn compare_with_engine(corpus: &AuditCorpus) -> Result<(), String> {
    let freq = concept_frequency(corpus).map_err(|e| e.to_string())?;
    let expected = frequency(corpus);
    ensure!(freq.rows.len() == expected.len(), "vocabulary size {} != {}", freq.rows.len(), expected.len());
    for row in &freq.rows {
        let (count, p) = expected[&row.concept];
        ensure!(row.count == count && same(row.p, p), "P({}) = {} != {}", row.concept, row.p, p);
    }

    let cond = conditionals(corpus);
    for table in conditional_frequencies(corpus).map_err(|e| e.to_string())? {
        let want: Vec<_> = cond[&table.prompt_id].iter().filter(|(_, (n, _))| *n > 0).collect();
        ensure!(table.rows.len() == want.len(), "conditional rows of {}", table.prompt_id);
        for (row, (concept, (count, p))) in table.rows.iter().zip(want) {
            ensure!(
                &row.concept == concept && row.count == *count && same(row.p, *p),
                "P({} | {}) = {} != {}",
                concept,
                table.prompt_id,
                row.p,
                p
            );
        }
    }

    let stab = concept_stability(corpus, 0.0, 1.0).map_err(|e| e.to_string())?;
    let want = stability(corpus, 0.0);
    ensure!(stab.rows.len() == want.len(), "stability rows {} != {}", stab.rows.len(), want.len());
    for row in &stab.rows {
        let (sigma, cv) = want[&row.concept];
        ensure!(same(row.sigma, sigma), "sigma({}) = {:e} != {:e}", row.concept, row.sigma, sigma);
        ensure!(same(row.cv, cv), "CV({}) = {:e} != {:e}", row.concept, row.cv, cv);
    }

    let table = cooccurrence(corpus, 0.0).map_err(|e| e.to_string())?;
    let want = cooccurrence_table(corpus);
    ensure!(table.rows.len() == want.len(), "pair rows {} != {}", table.rows.len(), want.len());
    for row in &table.rows {
        let o = &want[&(row.a.clone(), row.b.clone())];
        ensure!(
            row.joint_count == o.joint
                && same(row.support, o.support)
                && same(row.confidence_a_to_b, o.conf_ab)
                && same(row.confidence_b_to_a, o.conf_ba)
                && same(row.lift, o.lift),
            "pair ({}, {}) differs: {:?} vs {:?}",
            row.a,
            row.b,
            row,
            o
        );
    }
    Ok(())
}

/// Checks the metric laws on one corpus. `equal_k` additionally checks that
/// the marginal equals the mean of the conditionals.
pub fn check_laws(corpus: &AuditCorpus, equal_k: bool) -> Result<(), String> {
    let err = |e: concept_audit::MetricsError| e.to_string();
    let freq = concept_frequency(corpus).map_err(err)?;
    for row in &freq.rows {
        ensure!((0.0..=1.0).contains(&row.p), "P({}) = {} outside [0,1]", row.concept, row.p);
    }

    let table = cooccurrence(corpus, 0.0).map_err(err)?;
    for row in &table.rows {
        let (pa, pb) = (freq.get(&row.a).unwrap().p, freq.get(&row.b).unwrap().p);
        ensure!(row.support <= pa.min(pb), "P({},{}) exceeds a marginal", row.a, row.b);
        ensure!(same(row.lift, row.support / (pb * pa)), "lift({},{}) not symmetric", row.a, row.b);
        ensure!((row.confidence_a_to_b * pa - row.support).abs() <= 1e-15, "confidence law for {}->{}", row.a, row.b);
        ensure!((row.confidence_b_to_a * pb - row.support).abs() <= 1e-15, "confidence law for {}->{}", row.b, row.a);
    }

    let mut previous: Option<Vec<_>> = None;
    for s in [0.0, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0] {
        let filtered = cooccurrence(corpus, s).map_err(err)?;
        let expected: Vec<_> = table.rows.iter().filter(|r| r.support >= s).cloned().collect();
        ensure!(filtered.rows == expected, "min_support {s} does not filter the full table");
        if let Some(prev) = &previous {
            ensure!(filtered.rows.iter().all(|r| prev.contains(r)), "min_support {s} not monotone");
        }
        previous = Some(filtered.rows);
    }

    let tables = conditional_frequencies(corpus).map_err(err)?;
    let stab = concept_stability(corpus, 0.0, 1.0).map_err(err)?;
    for row in &stab.rows {
        let shares: Vec<f64> = tables.iter().map(|t| t.p(&row.concept)).collect();
        let constant = shares.windows(2).all(|w| w[0] == w[1]);
        ensure!((row.cv == 0.0) == constant, "CV({}) = {} but constant = {constant}", row.concept, row.cv);
    }

    if equal_k {
        for row in &freq.rows {
            let sum: f64 = tables.iter().map(|t| t.p(&row.concept)).sum();
            let mean = sum / tables.len() as f64;
            ensure!((mean - row.p).abs() <= 1e-12, "mean conditional of {} = {mean} != {}", row.concept, row.p);
        }
    }
    Ok(())
}
