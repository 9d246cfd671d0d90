//! Audit reports, run-vs-run diffs and negative-prompt directives.
//!
//! Reports are plain data: the JSON form is canonical (struct field order,
//! shortest round-trip floats) and the Markdown form is rendered from the
//! same structure.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{
    check_cv_cutoff, check_tau, check_unit_interval, concept_frequency, concept_stability,
    conditional_frequencies, default_group_size, subsample_ci, ConditionalRow, FrequencyTable,
    IntervalEstimate, MetricsError, StabilityTable, DEFAULT_CI_GROUPS, DEFAULT_CV_CUTOFF, DEFAULT_TAU,
};
use crate::mining::{top_cooccurring, watchlist_scan, Partner, RankMetric, WatchlistFinding, DEFAULT_EVIDENCE_LIMIT};
use crate::model::{AuditCorpus, ConceptLabel, RunMetadata};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TOP_M: usize = 30;
pub const DEFAULT_PARTNERS_K: usize = 10;
pub const DEFAULT_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("concepts both attenuated and amplified: {}", .0.join(", "))]
    OverlappingSets(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiParams {
    pub groups: usize,
    /// `None` means `min(1000, images / 2)`.
    pub group_size: Option<usize>,
    pub seed: u64,
}

impl Default for CiParams {
    fn default() -> Self {
        Self { groups: DEFAULT_CI_GROUPS, group_size: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportParams {
    pub tau: f64,
    pub cv_cutoff: f64,
    pub top_m: usize,
    pub partners_k: usize,
    pub partner_metric: RankMetric,
    pub ci: Option<CiParams>,
    pub watchlist: Vec<ConceptLabel>,
    pub evidence_limit: usize,
}

impl Default for ReportParams {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            cv_cutoff: DEFAULT_CV_CUTOFF,
            top_m: DEFAULT_TOP_M,
            partners_k: DEFAULT_PARTNERS_K,
            partner_metric: RankMetric::Lift,
            ci: Some(CiParams::default()),
            watchlist: Vec::new(),
            evidence_limit: DEFAULT_EVIDENCE_LIMIT,
        }
    }
}

/// Parameters as actually used, embedded in the report so every number can
/// be recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedParams {
    pub tau: f64,
    pub cv_cutoff: f64,
    pub top_m: usize,
    pub partners_k: usize,
    pub partner_metric: RankMetric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<ResolvedCi>,
    pub evidence_limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedCi {
    pub groups: usize,
    pub group_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub metadata: RunMetadata,
    pub prompts: usize,
    pub images: usize,
    pub concepts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopConcept {
    pub concept: ConceptLabel,
    pub count: u64,
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<IntervalEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoocHighlight {
    pub concept: ConceptLabel,
    pub partners: Vec<Partner>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDrilldown {
    pub prompt_id: String,
    pub text: String,
    pub weight: f64,
    pub images: u64,
    pub concepts: Vec<ConditionalRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub run: RunSummary,
    pub params: ResolvedParams,
    pub frequency: FrequencyTable,
    pub top_concepts: Vec<TopConcept>,
    pub stability: StabilityTable,
    pub cooccurrence: Vec<CoocHighlight>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flags: Option<Vec<WatchlistFinding>>,
    pub prompts: Vec<PromptDrilldown>,
}

pub fn build_report(corpus: &AuditCorpus, params: &ReportParams) -> Result<AuditReport, ReportError> {
    check_tau(params.tau)?;
    check_cv_cutoff(params.cv_cutoff)?;
    if params.partners_k < 1 {
        return Err(MetricsError::InvalidParameter { name: "k", value: 0.0, range: "[1,inf)" }.into());
    }
    let frequency = concept_frequency(corpus)?;
    let stability = concept_stability(corpus, params.tau, params.cv_cutoff)?;

    let ci = params.ci.as_ref().and_then(|ci| {
        let group_size = ci.group_size.unwrap_or_else(|| default_group_size(corpus.image_count()));
        (group_size >= 1).then_some(ResolvedCi { groups: ci.groups, group_size, seed: ci.seed })
    });

    let ranked = frequency.ranked();
    let mut top_concepts = Vec::new();
    let mut cooccurrence = Vec::new();
    for row in ranked.into_iter().take(params.top_m) {
        let interval = match &ci {
            Some(ci) => Some(subsample_ci(corpus, &row.concept, ci.groups, ci.group_size, ci.seed)?),
            None => None,
        };
        top_concepts.push(TopConcept { concept: row.concept.clone(), count: row.count, p: row.p, ci: interval });
        cooccurrence.push(CoocHighlight {
            concept: row.concept.clone(),
            partners: top_cooccurring(corpus, &row.concept, params.partners_k, params.partner_metric)?,
        });
    }

    let flags = if params.watchlist.is_empty() {
        None
    } else {
        Some(watchlist_scan(corpus, &params.watchlist, params.evidence_limit)?)
    };

    let prompts = conditional_frequencies(corpus)?
        .into_iter()
        .map(|t| {
            let prompt = &corpus.prompts()[&t.prompt_id];
            PromptDrilldown {
                text: prompt.text.clone(),
                weight: prompt.weight,
                prompt_id: t.prompt_id,
                images: t.images,
                concepts: t.rows,
            }
        })
        .collect();

    Ok(AuditReport {
        schema_version: REPORT_SCHEMA_VERSION,
        run: RunSummary {
            run_id: corpus.run_id().to_owned(),
            metadata: corpus.metadata().clone(),
            prompts: corpus.prompts().len(),
            images: corpus.image_count(),
            concepts: corpus.vocabulary().len(),
        },
        params: ResolvedParams {
            tau: params.tau,
            cv_cutoff: params.cv_cutoff,
            top_m: params.top_m,
            partners_k: params.partners_k,
            partner_metric: params.partner_metric,
            ci,
            evidence_limit: params.evidence_limit,
        },
        frequency,
        top_concepts,
        stability,
        cooccurrence,
        flags,
        prompts,
    })
}

/// Canonical JSON encoding used for every artifact: pretty-printed with a
/// trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("report types always serialize");
    text.push('\n');
    text
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub concept: ConceptLabel,
    pub p_a: f64,
    pub p_b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDiff {
    pub schema_version: u32,
    pub run_a: String,
    pub run_b: String,
    pub floor: f64,
    /// Union vocabulary in label order; `delta = p_b - p_a`.
    pub rows: Vec<DiffRow>,
    /// Concepts with `p >= floor` in A and absent from B.
    pub exclusive_a: Vec<ConceptLabel>,
    pub exclusive_b: Vec<ConceptLabel>,
}

impl RunDiff {
    pub fn get(&self, concept: &ConceptLabel) -> Option<&DiffRow> {
        self.rows
            .binary_search_by(|r| r.concept.cmp(concept))
            .ok()
            .map(|i| &self.rows[i])
    }

    /// Rows by descending `|delta|`, then label.
    pub fn largest_changes(&self) -> Vec<&DiffRow> {
        let mut rows: Vec<&DiffRow> = self.rows.iter().collect();
        rows.sort_by(|x, y| y.delta.abs().total_cmp(&x.delta.abs()).then_with(|| x.concept.cmp(&y.concept)));
        rows
    }
}

pub fn compare_runs(a: &AuditCorpus, b: &AuditCorpus, floor: f64) -> Result<RunDiff, ReportError> {
    check_unit_interval("floor", floor)?;
    let fa = concept_frequency(a)?;
    let fb = concept_frequency(b)?;
    let vocab: BTreeSet<&ConceptLabel> = fa.rows.iter().chain(&fb.rows).map(|r| &r.concept).collect();
    let mut rows = Vec::with_capacity(vocab.len());
    let mut exclusive_a = Vec::new();
    let mut exclusive_b = Vec::new();
    for concept in vocab {
        let p_a = fa.get(concept).map_or(0.0, |r| r.p);
        let p_b = fb.get(concept).map_or(0.0, |r| r.p);
        if p_b == 0.0 && p_a >= floor && p_a > 0.0 {
            exclusive_a.push(concept.clone());
        }
        if p_a == 0.0 && p_b >= floor && p_b > 0.0 {
            exclusive_b.push(concept.clone());
        }
        rows.push(DiffRow { concept: concept.clone(), p_a, p_b, delta: p_b - p_a });
    }
    Ok(RunDiff {
        schema_version: REPORT_SCHEMA_VERSION,
        run_a: a.run_id().to_owned(),
        run_b: b.run_id().to_owned(),
        floor,
        rows,
        exclusive_a,
        exclusive_b,
    })
}

/// Conditioning text for a generation backend: `negative_text` replaces the
/// empty unconditional prompt, `positive_suffix` is appended to the prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeDirective {
    pub negative_text: String,
    pub positive_suffix: String,
}

impl NegativeDirective {
    pub fn is_identity(&self) -> bool {
        self.negative_text.is_empty() && self.positive_suffix.is_empty()
    }
}

pub fn suggest_negative_prompts(
    attenuate: &[ConceptLabel],
    amplify: &[ConceptLabel],
) -> Result<NegativeDirective, ReportError> {
    let amplified: BTreeSet<&ConceptLabel> = amplify.iter().collect();
    let mut overlap: Vec<String> = attenuate
        .iter()
        .filter(|c| amplified.contains(c))
        .map(|c| c.to_string())
        .collect();
    if !overlap.is_empty() {
        overlap.sort();
        overlap.dedup();
        return Err(ReportError::OverlappingSets(overlap));
    }
    let join = |labels: &[ConceptLabel]| {
        let mut seen = BTreeSet::new();
        labels
            .iter()
            .filter(|c| seen.insert(*c))
            .map(ConceptLabel::as_str)
            .collect::<Vec<_>>()
            .join(", ")
    };
    Ok(NegativeDirective { negative_text: join(attenuate), positive_suffix: join(amplify) })
}

fn pct(p: f64) -> String {
    format!("{:.2}%", p * 100.0)
}

pub fn report_to_markdown(report: &AuditReport) -> String {
    let mut md = String::new();
    let run = &report.run;
    let _ = writeln!(md, "# Concept audit: {}\n", run.run_id);
    let _ = writeln!(
        md,
        "Generator `{}`, detector `{}`, {} prompts, {} images, {} concepts.\n",
        run.metadata.generator_id, run.metadata.detector_id, run.prompts, run.images, run.concepts
    );
    let _ = writeln!(
        md,
        "Parameters: tau = {}, CV cutoff = {}, top {} concepts, partners ranked by {}.\n",
        report.params.tau, report.params.cv_cutoff, report.params.top_m, report.params.partner_metric
    );

    md.push_str("## Top concepts\n\n| concept | images | P(c) | 95% interval |\n|---|---:|---:|---|\n");
    for top in &report.top_concepts {
        let ci = top.ci.as_ref().map_or("-".to_owned(), |ci| format!("{} to {}", pct(ci.lo), pct(ci.hi)));
        let _ = writeln!(md, "| {} | {} | {} | {} |", top.concept, top.count, pct(top.p), ci);
    }

    md.push_str("\n## Stability\n\n| concept | P(c) | sigma | CV | class |\n|---|---:|---:|---:|---|\n");
    for row in &report.stability.rows {
        let class = match row.classification {
            crate::metrics::Classification::Persistent => "persistent",
            crate::metrics::Classification::Triggered => "triggered",
        };
        let _ = writeln!(md, "| {} | {} | {:.4} | {:.4} | {} |", row.concept, pct(row.p), row.sigma, row.cv, class);
    }

    md.push_str("\n## Co-occurrence\n\n");
    for highlight in &report.cooccurrence {
        if highlight.partners.is_empty() {
            continue;
        }
        let partners: Vec<String> = highlight
            .partners
            .iter()
            .map(|p| format!("{} ({} {:.3})", p.concept, report.params.partner_metric, p.metric(report.params.partner_metric)))
            .collect();
        let _ = writeln!(md, "- **{}**: {}", highlight.concept, partners.join(", "));
    }

    if let Some(flags) = &report.flags {
        md.push_str("\n## Watchlist\n\n");
        for finding in flags {
            let _ = writeln!(
                md,
                "- **{}**: {} images ({}), {} of {} prompts do not mention it",
                finding.concept,
                finding.count,
                pct(finding.p),
                finding.implicit_hits,
                finding.hits.len()
            );
            for hit in finding.hits.iter().filter(|h| !h.explicit) {
                let _ = writeln!(md, "  - `{}` \"{}\" ({} images)", hit.prompt_id, hit.prompt_text, hit.image_count);
            }
        }
    }
    md
}

pub fn diff_to_markdown(diff: &RunDiff) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Run comparison: {} vs {}\n", diff.run_a, diff.run_b);
    let list = |v: &[ConceptLabel]| {
        if v.is_empty() {
            "none".to_owned()
        } else {
            v.iter().map(ConceptLabel::as_str).collect::<Vec<_>>().join(", ")
        }
    };
    let _ = writeln!(md, "Only in {} (P >= {}): {}\n", diff.run_a, diff.floor, list(&diff.exclusive_a));
    let _ = writeln!(md, "Only in {} (P >= {}): {}\n", diff.run_b, diff.floor, list(&diff.exclusive_b));
    md.push_str("| concept | P(A) | P(B) | delta |\n|---|---:|---:|---:|\n");
    for row in diff.largest_changes() {
        let _ = writeln!(md, "| {} | {} | {} | {:+.2} pp |", row.concept, pct(row.p_a), pct(row.p_b), row.delta * 100.0);
    }
    md
}
