//! Concept frequency, per-prompt conditional frequency, stability (coefficient
//! of variation across prompts) and subsample confidence intervals.
//!
//! Marginals count images: `P(c) = #images containing c / #images`. When the
//! corpus carries non-uniform prompt weights, each image counts with its
//! prompt's weight instead. Conditionals are always plain shares within one
//! prompt's images.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AuditCorpus, ConceptLabel};
use crate::numeric::ExactSum;

pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_CV_CUTOFF: f64 = 1.0;
pub const DEFAULT_CI_GROUPS: usize = 10;
pub const DEFAULT_CI_GROUP_SIZE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("corpus has no images")]
    EmptyCorpus,
    #[error("unknown prompt `{0}`")]
    UnknownPrompt(String),
    #[error("prompt `{0}` has no images")]
    EmptyPrompt(String),
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),
    #[error("{name} must be in {range} (got {value})")]
    InvalidParameter { name: &'static str, value: f64, range: &'static str },
    #[error("subsample of {needed} images requested but corpus has {available}")]
    NotEnoughImages { needed: usize, available: usize },
    #[error("prompt weights of all imaged prompts are zero")]
    ZeroTotalWeight,
}

pub fn check_tau(tau: f64) -> Result<(), MetricsError> {
    if (0.0..1.0).contains(&tau) {
        Ok(())
    } else {
        Err(MetricsError::InvalidParameter { name: "tau", value: tau, range: "[0,1)" })
    }
}

pub fn check_cv_cutoff(cv_cutoff: f64) -> Result<(), MetricsError> {
    if cv_cutoff > 0.0 && cv_cutoff.is_finite() {
        Ok(())
    } else {
        Err(MetricsError::InvalidParameter { name: "cv_cutoff", value: cv_cutoff, range: "(0,inf)" })
    }
}

pub fn check_unit_interval(name: &'static str, value: f64) -> Result<(), MetricsError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(MetricsError::InvalidParameter { name, value, range: "[0,1]" })
    }
}

/// Per-prompt weights, or `None` when every prompt has the same weight
/// (plain counting).
pub(crate) fn prompt_weights(corpus: &AuditCorpus) -> Option<Vec<f64>> {
    let weights: Vec<f64> = corpus.prompts().values().map(|p| p.weight).collect();
    let first = *weights.first()?;
    if weights.iter().all(|&w| w == first) {
        None
    } else {
        Some(weights)
    }
}

/// Image-level marginal model shared by the frequency and co-occurrence code.
pub(crate) enum Marginal {
    Counting { total: u64 },
    Weighted { image_weights: Vec<f64>, total: f64 },
}

impl Marginal {
    pub(crate) fn new(corpus: &AuditCorpus) -> Result<Self, MetricsError> {
        if corpus.is_empty() {
            return Err(MetricsError::EmptyCorpus);
        }
        let idx = corpus.index();
        match prompt_weights(corpus) {
            None => Ok(Self::Counting { total: idx.image_ids.len() as u64 }),
            Some(weights) => {
                let image_weights: Vec<f64> = idx.image_prompt.iter().map(|&p| weights[p as usize]).collect();
                let total = image_weights.iter().copied().collect::<ExactSum>().value();
                if total == 0.0 {
                    return Err(MetricsError::ZeroTotalWeight);
                }
                Ok(Self::Weighted { image_weights, total })
            }
        }
    }

    pub(crate) fn is_weighted(&self) -> bool {
        matches!(self, Self::Weighted { .. })
    }

    /// Share of the corpus held by the images at `positions` (`count` of them).
    pub(crate) fn share(&self, count: u64, positions: impl Iterator<Item = u32>) -> f64 {
        match self {
            Self::Counting { total } => count as f64 / *total as f64,
            Self::Weighted { image_weights, total } => {
                positions.map(|i| image_weights[i as usize]).collect::<ExactSum>().value() / total
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub concept: ConceptLabel,
    pub count: u64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub total_images: u64,
    /// True when `p` uses non-uniform prompt weights rather than plain counts.
    pub prompt_weighted: bool,
    /// Rows in label order.
    pub rows: Vec<FrequencyRow>,
}

impl FrequencyTable {
    pub fn get(&self, concept: &ConceptLabel) -> Option<&FrequencyRow> {
        self.rows
            .binary_search_by(|r| r.concept.cmp(concept))
            .ok()
            .map(|i| &self.rows[i])
    }

    /// Rows by descending `p`, then descending count, then label.
    pub fn ranked(&self) -> Vec<&FrequencyRow> {
        let mut rows: Vec<&FrequencyRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| {
            b.p.total_cmp(&a.p)
                .then(b.count.cmp(&a.count))
                .then_with(|| a.concept.cmp(&b.concept))
        });
        rows
    }
}

pub fn concept_frequency(corpus: &AuditCorpus) -> Result<FrequencyTable, MetricsError> {
    let marginal = Marginal::new(corpus)?;
    let idx = corpus.index();
    let rows = idx
        .vocab
        .par_iter()
        .zip(&idx.postings)
        .map(|(concept, post)| {
            let count = post.len() as u64;
            FrequencyRow { concept: concept.clone(), count, p: marginal.share(count, post.iter().copied()) }
        })
        .collect();
    Ok(FrequencyTable { total_images: idx.image_ids.len() as u64, prompt_weighted: marginal.is_weighted(), rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalRow {
    pub concept: ConceptLabel,
    pub count: u64,
    pub p: f64,
}

/// `p(c | t)` for one prompt: rows in label order, only concepts that appear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalTable {
    pub prompt_id: String,
    pub images: u64,
    pub rows: Vec<ConditionalRow>,
}

impl ConditionalTable {
    pub fn p(&self, concept: &ConceptLabel) -> f64 {
        self.rows
            .binary_search_by(|r| r.concept.cmp(concept))
            .map_or(0.0, |i| self.rows[i].p)
    }
}

pub fn conditional_frequency(corpus: &AuditCorpus, prompt_id: &str) -> Result<ConditionalTable, MetricsError> {
    let idx = corpus.index();
    let pos = idx
        .prompt_ids
        .binary_search_by(|p| p.as_str().cmp(prompt_id))
        .map_err(|_| MetricsError::UnknownPrompt(prompt_id.to_owned()))?;
    let images = idx.prompt_image_counts[pos];
    if images == 0 {
        return Err(MetricsError::EmptyPrompt(prompt_id.to_owned()));
    }
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for (concepts, &p) in idx.image_concepts.iter().zip(&idx.image_prompt) {
        if p as usize == pos {
            for &c in concepts {
                *counts.entry(c).or_default() += 1;
            }
        }
    }
    let rows = counts
        .into_iter()
        .map(|(c, count)| ConditionalRow {
            concept: idx.vocab[c as usize].clone(),
            count,
            p: count as f64 / images as f64,
        })
        .collect();
    Ok(ConditionalTable { prompt_id: prompt_id.to_owned(), images, rows })
}

/// Conditional tables for every prompt, in prompt-id order.
pub fn conditional_frequencies(corpus: &AuditCorpus) -> Result<Vec<ConditionalTable>, MetricsError> {
    corpus
        .prompts()
        .keys()
        .map(|id| conditional_frequency(corpus, id))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    /// Appears at a similar rate whatever the prompt (CV below the cutoff).
    Persistent,
    /// Rate depends strongly on the prompt.
    Triggered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub concept: ConceptLabel,
    pub p: f64,
    pub sigma: f64,
    pub cv: f64,
    pub classification: Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityTable {
    pub tau: f64,
    pub cv_cutoff: f64,
    pub prompts: usize,
    /// Concepts with `P(c) > tau`, in label order.
    pub rows: Vec<StabilityRow>,
}

impl StabilityTable {
    pub fn get(&self, concept: &ConceptLabel) -> Option<&StabilityRow> {
        self.rows
            .binary_search_by(|r| r.concept.cmp(concept))
            .ok()
            .map(|i| &self.rows[i])
    }
}

/// Stability of each concept in `C_tau = {c : P(c) > tau}`:
/// `sigma_c = sqrt(sum_i w_i (P(c|t_i) - P(c))^2 / sum_i w_i)` over prompts
/// (unit weights give the plain `1/N` mean) and `CV = sigma_c / P(c)`.
pub fn concept_stability(corpus: &AuditCorpus, tau: f64, cv_cutoff: f64) -> Result<StabilityTable, MetricsError> {
    check_tau(tau)?;
    check_cv_cutoff(cv_cutoff)?;
    let freq = concept_frequency(corpus)?;
    let idx = corpus.index();
    if let Some(pos) = idx.prompt_image_counts.iter().position(|&n| n == 0) {
        return Err(MetricsError::EmptyPrompt(idx.prompt_ids[pos].clone()));
    }
    let weights = prompt_weights(corpus);
    let prompt_total: ExactSum = match &weights {
        None => std::iter::once(idx.prompt_ids.len() as f64).collect(),
        Some(w) => w.iter().copied().collect(),
    };
    let denominator = prompt_total.value();

    let rows = idx
        .vocab
        .par_iter()
        .enumerate()
        .filter_map(|(cid, concept)| {
            let marginal = freq.rows[cid].p;
            if marginal <= tau || marginal == 0.0 {
                return None;
            }
            let mut per_prompt: BTreeMap<u32, u64> = BTreeMap::new();
            for &img in &idx.postings[cid] {
                *per_prompt.entry(idx.image_prompt[img as usize]).or_default() += 1;
            }
            let zero_dev = marginal * marginal;
            let mut numerator = ExactSum::new();
            let mut covered = ExactSum::new();
            for (&prompt, &count) in &per_prompt {
                let share = count as f64 / idx.prompt_image_counts[prompt as usize] as f64;
                let dev = share - marginal;
                let w = weights.as_ref().map_or(1.0, |w| w[prompt as usize]);
                numerator.add_product(w, dev * dev);
                covered.add(w);
            }
            // Prompts where the concept never appears deviate by exactly -P(c).
            let mut absent = prompt_total.clone();
            absent.add_scaled(&covered, -1.0);
            numerator.add_scaled(&absent, zero_dev);

            let sigma = (numerator.value() / denominator).sqrt();
            let cv = sigma / marginal;
            let classification = if cv < cv_cutoff { Classification::Persistent } else { Classification::Triggered };
            Some(StabilityRow { concept: concept.clone(), p: marginal, sigma, cv, classification })
        })
        .collect();
    Ok(StabilityTable { tau, cv_cutoff, prompts: idx.prompt_ids.len(), rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    SubsamplePercentile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub method: CiMethod,
    pub groups: usize,
    pub group_size: usize,
    pub seed: u64,
}

/// Default subsample size: `min(1000, images / 2)`.
pub fn default_group_size(images: usize) -> usize {
    DEFAULT_CI_GROUP_SIZE.min(images / 2)
}

/// Draws `groups` seeded subsamples of `group_size` images (without
/// replacement within a group), estimates `P(c)` in each, and reports the
/// mean with the 2.5/97.5 percentiles (linear interpolation).
pub fn subsample_ci(
    corpus: &AuditCorpus,
    concept: &ConceptLabel,
    groups: usize,
    group_size: usize,
    seed: u64,
) -> Result<IntervalEstimate, MetricsError> {
    if groups < 2 {
        return Err(MetricsError::InvalidParameter { name: "groups", value: groups as f64, range: "[2,inf)" });
    }
    if group_size < 1 {
        return Err(MetricsError::InvalidParameter { name: "group_size", value: 0.0, range: "[1,inf)" });
    }
    let n = corpus.image_count();
    if n < group_size {
        return Err(MetricsError::NotEnoughImages { needed: group_size, available: n });
    }
    let make = |point, lo, hi| IntervalEstimate {
        point,
        lo,
        hi,
        method: CiMethod::SubsamplePercentile,
        groups,
        group_size,
        seed,
    };
    let idx = corpus.index();
    let Some(&cid) = idx.concept_ids.get(concept) else {
        return Ok(make(0.0, 0.0, 0.0));
    };
    let mut present = vec![false; n];
    for &i in &idx.postings[cid as usize] {
        present[i as usize] = true;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut estimates: Vec<f64> = (0..groups)
        .map(|_| {
            let hits = index::sample(&mut rng, n, group_size).into_iter().filter(|&i| present[i]).count();
            hits as f64 / group_size as f64
        })
        .collect();
    estimates.sort_by(f64::total_cmp);
    let point = mean(&estimates);
    Ok(make(point, percentile(&estimates, 0.025), percentile(&estimates, 0.975)))
}

fn mean(values: &[f64]) -> f64 {
    if values.windows(2).all(|w| w[0] == w[1]) {
        return values[0];
    }
    values.iter().copied().collect::<ExactSum>().value() / values.len() as f64
}

/// Linear-interpolation percentile of sorted data (`q` in [0,1]).
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    if sorted[lo] == sorted[hi] {
        return sorted[lo];
    }
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::f1;
    use crate::model::normalize_label;

    fn c(s: &str) -> ConceptLabel {
        normalize_label(s).unwrap()
    }

    #[test]
    fn f1_marginals() {
        let t = concept_frequency(&f1()).unwrap();
        assert_eq!(t.total_images, 4);
        assert!(!t.prompt_weighted);
        assert_eq!(t.get(&c("man")).unwrap().p, 0.75);
        assert_eq!(t.get(&c("shoes")).unwrap().p, 0.75);
        assert_eq!(t.get(&c("woman")).unwrap().p, 0.25);
        assert_eq!(t.get(&c("dog")).unwrap().p, 0.25);
        assert_eq!(t.get(&c("man")).unwrap().count, 3);
        let ranked: Vec<_> = t.ranked().iter().map(|r| r.concept.to_string()).collect();
        assert_eq!(ranked, ["man", "shoes", "dog", "woman"]);
    }

    #[test]
    fn f1_conditionals() {
        let corpus = f1();
        let t1 = conditional_frequency(&corpus, "t1").unwrap();
        assert_eq!((t1.p(&c("man")), t1.p(&c("dog")), t1.p(&c("shoes"))), (1.0, 0.5, 0.5));
        assert_eq!(t1.p(&c("woman")), 0.0);
        let t2 = conditional_frequency(&corpus, "t2").unwrap();
        assert_eq!((t2.p(&c("man")), t2.p(&c("woman")), t2.p(&c("shoes"))), (0.5, 0.5, 1.0));
        assert_eq!(conditional_frequency(&corpus, "t9"), Err(MetricsError::UnknownPrompt("t9".into())));
    }

    #[test]
    fn f1_stability() {
        let table = concept_stability(&f1(), 0.0, 1.0).unwrap();
        let man = table.get(&c("man")).unwrap();
        assert_eq!(man.sigma, 0.25);
        assert!((man.cv - 1.0 / 3.0).abs() <= 1e-12);
        assert_eq!(man.classification, Classification::Persistent);

        let filtered = concept_stability(&f1(), 0.3, 1.0).unwrap();
        assert!(filtered.get(&c("dog")).is_none());
        assert!(filtered.get(&c("woman")).is_none());
        assert_eq!(filtered.rows.len(), 2);

        // dog: P(dog|t)=(0.5,0), P=0.25 -> sigma 0.25, CV 1 -> triggered at cutoff 1.
        let dog = table.get(&c("dog")).unwrap();
        assert_eq!((dog.sigma, dog.cv, dog.classification), (0.25, 1.0, Classification::Triggered));
    }

    #[test]
    fn parameter_validation() {
        assert!(matches!(concept_stability(&f1(), 1.5, 1.0), Err(MetricsError::InvalidParameter { name: "tau", .. })));
        assert!(matches!(concept_stability(&f1(), 0.1, 0.0), Err(MetricsError::InvalidParameter { .. })));
        assert_eq!(check_tau(1.5).unwrap_err().to_string(), "tau must be in [0,1) (got 1.5)");
    }

    #[test]
    fn empty_corpus_errors() {
        let empty = crate::model::AuditCorpus::new(
            "e",
            crate::model::fixtures::metadata(),
            Vec::new(),
            Vec::new(),
        )
        .unwrap();
        assert_eq!(concept_frequency(&empty), Err(MetricsError::EmptyCorpus));
        assert_eq!(concept_stability(&empty, 0.1, 1.0), Err(MetricsError::EmptyCorpus));
    }

    #[test]
    fn weighted_marginal_scales_prompts() {
        let corpus = f1();
        let mut prompts: Vec<_> = corpus.prompts().values().cloned().collect();
        prompts[0].weight = 3.0; // t1
        let weighted = crate::model::AuditCorpus::new(
            "w",
            corpus.metadata().clone(),
            prompts,
            corpus.images().values().cloned(),
        )
        .unwrap();
        let t = concept_frequency(&weighted).unwrap();
        assert!(t.prompt_weighted);
        // man: (3*2 + 1*1) / (3*2 + 1*2) = 7/8
        assert_eq!(t.get(&c("man")).unwrap().p, 0.875);
        // P(man|t) = (1, 0.5), weights (3,1): sigma^2 = (3*(1/8)^2 + (3/8)^2)/4
        let s = concept_stability(&weighted, 0.0, 1.0).unwrap();
        let expected = ((3.0 * (0.125f64).powi(2) + (0.375f64).powi(2)) / 4.0).sqrt();
        assert!((s.get(&c("man")).unwrap().sigma - expected).abs() < 1e-15);
    }

    #[test]
    fn ci_degenerate_cases() {
        let corpus = f1();
        let all = subsample_ci(&corpus, &c("man"), 5, 4, 1).unwrap();
        assert_eq!((all.point, all.lo, all.hi), (0.75, 0.75, 0.75));
        let none = subsample_ci(&corpus, &c("unicorn"), 5, 2, 1).unwrap();
        assert_eq!((none.point, none.lo, none.hi), (0.0, 0.0, 0.0));
        assert!(matches!(subsample_ci(&corpus, &c("man"), 5, 5, 1), Err(MetricsError::NotEnoughImages { .. })));
        assert!(subsample_ci(&corpus, &c("man"), 1, 2, 1).is_err());
        let a = subsample_ci(&corpus, &c("shoes"), 10, 2, 99).unwrap();
        assert_eq!(a, subsample_ci(&corpus, &c("shoes"), 10, 2, 99).unwrap());
        assert!(a.lo <= a.point && a.point <= a.hi);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.5), 2.0);
        assert_eq!(percentile(&v, 0.025), 0.1);
        assert_eq!(percentile(&v, 1.0), 4.0);
    }

    #[test]
    fn default_group_size_halves_small_corpora() {
        assert_eq!(default_group_size(4), 2);
        assert_eq!(default_group_size(100_000), 1000);
    }
}
