//! Pairwise co-occurrence with market-basket rule metrics (each image's
//! presence set is a transaction), partner rankings, the concept → prompt
//! reverse index and watchlist scans.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{check_unit_interval, Marginal, MetricsError};
use crate::model::{normalize_text, AuditCorpus, BoundingBox, ConceptLabel};

pub const DEFAULT_EVIDENCE_LIMIT: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    /// Lexicographically smaller label of the pair.
    pub a: ConceptLabel,
    pub b: ConceptLabel,
    pub joint_count: u64,
    pub support: f64,
    pub confidence_a_to_b: f64,
    pub confidence_b_to_a: f64,
    pub lift: f64,
}

impl PairRow {
    pub fn p_joint(&self) -> f64 {
        self.support
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoocTable {
    pub total_images: u64,
    pub min_support: f64,
    /// Pairs ordered by `(a, b)`.
    pub rows: Vec<PairRow>,
}

impl CoocTable {
    pub fn get(&self, x: &ConceptLabel, y: &ConceptLabel) -> Option<&PairRow> {
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        self.rows
            .binary_search_by(|r| (&r.a, &r.b).cmp(&(a, b)))
            .ok()
            .map(|i| &self.rows[i])
    }

    /// Rows with support at or above `min_support`.
    pub fn filtered(&self, min_support: f64) -> CoocTable {
        CoocTable {
            total_images: self.total_images,
            min_support,
            rows: self.rows.iter().filter(|r| r.support >= min_support).cloned().collect(),
        }
    }
}

/// Joint image counts for every co-occurring pair of concept ids `(lo, hi)`.
fn pair_counts(corpus: &AuditCorpus) -> HashMap<(u32, u32), u64> {
    corpus
        .index()
        .image_concepts
        .par_chunks(4096)
        .fold(HashMap::new, |mut acc: HashMap<(u32, u32), u64>, chunk| {
            for concepts in chunk {
                for (i, &x) in concepts.iter().enumerate() {
                    for &y in &concepts[i + 1..] {
                        *acc.entry((x, y)).or_default() += 1;
                    }
                }
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
            a
        })
}

/// Positions of the images containing both concepts (postings intersection).
fn joint_positions<'a>(post_a: &'a [u32], post_b: &'a [u32]) -> impl Iterator<Item = u32> + 'a {
    let mut j = 0;
    post_a.iter().copied().filter(move |&x| {
        while j < post_b.len() && post_b[j] < x {
            j += 1;
        }
        j < post_b.len() && post_b[j] == x
    })
}

struct PairMetrics<'c> {
    corpus: &'c AuditCorpus,
    marginal: Marginal,
    p: Vec<f64>,
}

impl<'c> PairMetrics<'c> {
    fn new(corpus: &'c AuditCorpus) -> Result<Self, MetricsError> {
        let marginal = Marginal::new(corpus)?;
        let idx = corpus.index();
        let p = idx
            .postings
            .iter()
            .map(|post| marginal.share(post.len() as u64, post.iter().copied()))
            .collect();
        Ok(Self { corpus, marginal, p })
    }

    fn row(&self, a: u32, b: u32, joint: u64) -> PairRow {
        let idx = self.corpus.index();
        let support = if joint == 0 {
            0.0
        } else {
            let (pa, pb) = (&idx.postings[a as usize], &idx.postings[b as usize]);
            self.marginal.share(joint, joint_positions(pa, pb))
        };
        let (pa, pb) = (self.p[a as usize], self.p[b as usize]);
        PairRow {
            a: idx.vocab[a as usize].clone(),
            b: idx.vocab[b as usize].clone(),
            joint_count: joint,
            support,
            confidence_a_to_b: support / pa,
            confidence_b_to_a: support / pb,
            lift: support / (pa * pb),
        }
    }
}

/// All unordered concept pairs with `support >= min_support`. With
/// `min_support == 0` pairs that never co-occur are included (support 0).
pub fn cooccurrence(corpus: &AuditCorpus, min_support: f64) -> Result<CoocTable, MetricsError> {
    check_unit_interval("min_support", min_support)?;
    let metrics = PairMetrics::new(corpus)?;
    let counts = pair_counts(corpus);
    let v = corpus.vocabulary().len() as u32;
    let rows: Vec<PairRow> = if min_support == 0.0 {
        (0..v)
            .into_par_iter()
            .flat_map_iter(|a| {
                let counts = &counts;
                let metrics = &metrics;
                (a + 1..v).map(move |b| metrics.row(a, b, counts.get(&(a, b)).copied().unwrap_or(0)))
            })
            .collect()
    } else {
        let mut keys: Vec<(u32, u32)> = counts.keys().copied().collect();
        keys.sort_unstable();
        keys.into_par_iter()
            .map(|(a, b)| metrics.row(a, b, counts[&(a, b)]))
            .filter(|r| r.support >= min_support)
            .collect()
    };
    Ok(CoocTable { total_images: corpus.image_count() as u64, min_support, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMetric {
    Support,
    Confidence,
    Lift,
}

impl FromStr for RankMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "support" => Ok(Self::Support),
            "confidence" => Ok(Self::Confidence),
            "lift" => Ok(Self::Lift),
            other => Err(format!("unknown metric `{other}` (expected support, confidence or lift)")),
        }
    }
}

impl fmt::Display for RankMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Support => "support",
            Self::Confidence => "confidence",
            Self::Lift => "lift",
        })
    }
}

/// A co-occurring partner seen from a focus concept; `confidence` is
/// focus → partner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partner {
    pub concept: ConceptLabel,
    pub joint_count: u64,
    pub support: f64,
    pub confidence: f64,
    pub lift: f64,
}

impl Partner {
    pub fn metric(&self, metric: RankMetric) -> f64 {
        match metric {
            RankMetric::Support => self.support,
            RankMetric::Confidence => self.confidence,
            RankMetric::Lift => self.lift,
        }
    }
}

/// Every concept that co-occurs with `concept` in at least one image,
/// ranked by `metric`, then joint count, then label.
pub fn partners(corpus: &AuditCorpus, concept: &ConceptLabel, metric: RankMetric) -> Result<Vec<Partner>, MetricsError> {
    let idx = corpus.index();
    let &focus = idx
        .concept_ids
        .get(concept)
        .ok_or_else(|| MetricsError::UnknownConcept(concept.to_string()))?;
    let metrics = PairMetrics::new(corpus)?;
    let mut joint: BTreeMap<u32, u64> = BTreeMap::new();
    for &img in &idx.postings[focus as usize] {
        for &other in &idx.image_concepts[img as usize] {
            if other != focus {
                *joint.entry(other).or_default() += 1;
            }
        }
    }
    let mut out: Vec<Partner> = joint
        .into_iter()
        .map(|(other, count)| {
            let (a, b) = if focus < other { (focus, other) } else { (other, focus) };
            let row = metrics.row(a, b, count);
            let confidence = if focus == a { row.confidence_a_to_b } else { row.confidence_b_to_a };
            Partner {
                concept: idx.vocab[other as usize].clone(),
                joint_count: count,
                support: row.support,
                confidence,
                lift: row.lift,
            }
        })
        .collect();
    out.sort_by(|x, y| {
        y.metric(metric)
            .total_cmp(&x.metric(metric))
            .then(y.joint_count.cmp(&x.joint_count))
            .then_with(|| x.concept.cmp(&y.concept))
    });
    Ok(out)
}

/// The `k` best partners of `concept` (fewer if it has fewer partners).
pub fn top_cooccurring(
    corpus: &AuditCorpus,
    concept: &ConceptLabel,
    k: usize,
    metric: RankMetric,
) -> Result<Vec<Partner>, MetricsError> {
    if k < 1 {
        return Err(MetricsError::InvalidParameter { name: "k", value: 0.0, range: "[1,inf)" });
    }
    let mut ranked = partners(corpus, concept, metric)?;
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptHit {
    pub prompt_id: String,
    pub image_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_uri: Option<String>,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseIndexEntry {
    pub concept: ConceptLabel,
    /// Prompts by descending image count, then prompt id.
    pub prompt_hits: Vec<PromptHit>,
    /// Images containing the concept, lowest image id first, capped.
    pub evidence: Vec<Evidence>,
    /// Number of images containing the concept before capping.
    pub evidence_total: u64,
}

pub fn reverse_index(
    corpus: &AuditCorpus,
    concept: &ConceptLabel,
    evidence_limit: usize,
) -> Result<ReverseIndexEntry, MetricsError> {
    let idx = corpus.index();
    let &cid = idx
        .concept_ids
        .get(concept)
        .ok_or_else(|| MetricsError::UnknownConcept(concept.to_string()))?;
    let post = &idx.postings[cid as usize];
    let mut per_prompt: BTreeMap<u32, u64> = BTreeMap::new();
    for &img in post {
        *per_prompt.entry(idx.image_prompt[img as usize]).or_default() += 1;
    }
    let mut prompt_hits: Vec<PromptHit> = per_prompt
        .into_iter()
        .map(|(p, n)| PromptHit { prompt_id: idx.prompt_ids[p as usize].clone(), image_count: n })
        .collect();
    prompt_hits.sort_by(|a, b| b.image_count.cmp(&a.image_count).then_with(|| a.prompt_id.cmp(&b.prompt_id)));

    let evidence = post
        .iter()
        .take(evidence_limit)
        .map(|&img| {
            let image = &corpus.images()[&idx.image_ids[img as usize]];
            Evidence {
                image_id: image.image_id.clone(),
                image_uri: image.image_uri.clone(),
                boxes: image.detections.iter().filter(|d| &d.label == concept).map(|d| d.bbox).collect(),
            }
        })
        .collect();
    Ok(ReverseIndexEntry { concept: concept.clone(), prompt_hits, evidence, evidence_total: post.len() as u64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatchlistHit {
    pub prompt_id: String,
    pub prompt_text: String,
    pub image_count: u64,
    /// True when the concept's words literally occur in the prompt.
    pub explicit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatchlistFinding {
    pub concept: ConceptLabel,
    pub count: u64,
    pub p: f64,
    pub hits: Vec<WatchlistHit>,
    pub implicit_hits: u64,
    pub evidence: Vec<Evidence>,
}

/// Case-insensitive whole-word containment of `term` in `text`, both
/// compared after label normalization.
pub fn mentions(text: &str, term: &ConceptLabel) -> bool {
    let haystack = normalize_text(text);
    let needle = term.as_str();
    let is_word = |c: Option<char>| c.is_some_and(char::is_alphanumeric);
    let mut from = 0;
    while let Some(off) = haystack[from..].find(needle) {
        let start = from + off;
        let end = start + needle.len();
        let before = haystack[..start].chars().next_back();
        let after = haystack[end..].chars().next();
        if !is_word(before) && !is_word(after) {
            return true;
        }
        from = start + haystack[start..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

/// Scans detected concepts (not prompt text) for each watchlist entry and
/// flags prompt hits whose text does not mention the concept.
pub fn watchlist_scan(
    corpus: &AuditCorpus,
    watchlist: &[ConceptLabel],
    evidence_limit: usize,
) -> Result<Vec<WatchlistFinding>, MetricsError> {
    let freq = crate::metrics::concept_frequency(corpus)?;
    let mut labels: Vec<&ConceptLabel> = watchlist.iter().collect();
    labels.sort();
    labels.dedup();
    labels
        .into_iter()
        .map(|concept| {
            let Some(row) = freq.get(concept) else {
                return Ok(WatchlistFinding {
                    concept: concept.clone(),
                    count: 0,
                    p: 0.0,
                    hits: Vec::new(),
                    implicit_hits: 0,
                    evidence: Vec::new(),
                });
            };
            let entry = reverse_index(corpus, concept, evidence_limit)?;
            let hits: Vec<WatchlistHit> = entry
                .prompt_hits
                .into_iter()
                .map(|hit| {
                    let text = corpus.prompts()[&hit.prompt_id].text.clone();
                    WatchlistHit {
                        explicit: mentions(&text, concept),
                        prompt_id: hit.prompt_id,
                        prompt_text: text,
                        image_count: hit.image_count,
                    }
                })
                .collect();
            Ok(WatchlistFinding {
                concept: concept.clone(),
                count: row.count,
                p: row.p,
                implicit_hits: hits.iter().filter(|h| !h.explicit).count() as u64,
                hits,
                evidence: entry.evidence,
            })
        })
        .collect()
}
