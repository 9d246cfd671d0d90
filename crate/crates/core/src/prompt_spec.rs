//! Prompt distributions: bracket-placeholder templates expanded over value
//! grids, and weighted empirical prompt lists.
//!
//! Template grammar: `[name]` is a placeholder where `name` matches
//! `[a-z0-9_]+`; `[[` is a literal `[`. Any other character (including a
//! lone `]`) is literal. A name used twice binds to the same value.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{PromptRecord, Provenance};

/// Name of the sampling generator, recorded in run digests.
pub const SAMPLER_RNG: &str = "chacha20";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptSpecError {
    #[error("unclosed placeholder starting at byte {0}")]
    UnclosedPlaceholder(usize),
    #[error("empty placeholder name at byte {0}")]
    EmptyPlaceholderName(usize),
    #[error("invalid placeholder name `{name}` at byte {offset}; names match [a-z0-9_]+")]
    InvalidPlaceholderName { name: String, offset: usize },
    #[error("placeholder `{name}` in template `{template}` has no values")]
    EmptyValueSet { template: String, name: String },
    #[error("prompt distribution yields no prompts")]
    NoPrompts,
    #[error("empirical prompt weight {0} must be finite and non-negative")]
    InvalidWeight(f64),
    #[error("all empirical prompt weights are zero")]
    ZeroTotalWeight,
    #[error("mode {mode} does not accept a non-empty `{section}` section")]
    ModeMismatch { mode: &'static str, section: &'static str },
    #[error("sample size must be at least 1")]
    ZeroSampleSize,
    #[error("cannot read prompt spec: {0}")]
    Io(String),
    #[error("cannot parse prompt spec: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Placeholder(String),
}

/// A parsed template. Segments alternate literal / placeholder and always
/// start and end with a (possibly empty) literal, so a template with `n`
/// placeholder slots has `n + 1` literal segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    raw: String,
    segments: Vec<Segment>,
    placeholder_names: Vec<String>,
}

impl PromptTemplate {
    pub fn parse(raw: &str) -> Result<Self, PromptSpecError> {
        let mut segments = Vec::new();
        let mut names: Vec<String> = Vec::new();
        let mut literal = String::new();
        let mut chars = raw.char_indices().peekable();
        while let Some((pos, ch)) = chars.next() {
            if ch != '[' {
                literal.push(ch);
                continue;
            }
            if chars.peek().map(|&(_, c)| c) == Some('[') {
                chars.next();
                literal.push('[');
                continue;
            }
            let mut name = String::new();
            let mut closed = false;
            for (_, c) in chars.by_ref() {
                if c == ']' {
                    closed = true;
                    break;
                }
                name.push(c);
            }
            if !closed {
                return Err(PromptSpecError::UnclosedPlaceholder(pos));
            }
            if name.is_empty() {
                return Err(PromptSpecError::EmptyPlaceholderName(pos));
            }
            if !name.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_') {
                return Err(PromptSpecError::InvalidPlaceholderName { name, offset: pos });
            }
            segments.push(Segment::Literal(std::mem::take(&mut literal)));
            if !names.contains(&name) {
                names.push(name.clone());
            }
            segments.push(Segment::Placeholder(name));
        }
        segments.push(Segment::Literal(literal));
        Ok(Self { raw: raw.to_owned(), segments, placeholder_names: names })
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Distinct placeholder names in order of first appearance.
    pub fn placeholder_names(&self) -> &[String] {
        &self.placeholder_names
    }

    /// Renders with `binding`; unbound placeholders are left in bracket form.
    pub fn render(&self, binding: &HashMap<&str, &str>) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(text) => out.push_str(text),
                Segment::Placeholder(name) => match binding.get(name.as_str()) {
                    Some(value) => out.push_str(value),
                    None => {
                        out.push('[');
                        out.push_str(name);
                        out.push(']');
                    }
                },
            }
        }
        out
    }

    /// Re-encodes the segments in template syntax; equal to `raw()`.
    pub fn to_source(&self) -> String {
        let mut out = String::with_capacity(self.raw.len());
        for seg in &self.segments {
            match seg {
                Segment::Literal(text) => out.push_str(&text.replace('[', "[[")),
                Segment::Placeholder(name) => {
                    out.push('[');
                    out.push_str(name);
                    out.push(']');
                }
            }
        }
        out
    }
}

impl Serialize for PromptTemplate {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.raw)
    }
}

impl<'de> Deserialize<'de> for PromptTemplate {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        PromptTemplate::parse(&raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionMode {
    CartesianUniform,
    WeightedEmpirical,
}

impl DistributionMode {
    fn name(self) -> &'static str {
        match self {
            Self::CartesianUniform => "cartesian_uniform",
            Self::WeightedEmpirical => "weighted_empirical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub template: PromptTemplate,
    #[serde(default)]
    pub values: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalPrompt {
    pub text: String,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

/// A declarative prompt distribution, as read from a prompt-spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDistributionSpec {
    pub mode: DistributionMode,
    #[serde(default)]
    pub templates: Vec<TemplateSpec>,
    #[serde(default)]
    pub empirical: Vec<EmpiricalPrompt>,
}

impl PromptDistributionSpec {
    /// Parses a spec document; `.toml` files are read as TOML, anything else as JSON.
    pub fn from_path(path: &Path) -> Result<Self, PromptSpecError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptSpecError::Io(e.to_string()))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml")) {
            Self::from_toml(&text)
        } else {
            Self::from_json(&text)
        }
    }

    pub fn from_json(text: &str) -> Result<Self, PromptSpecError> {
        serde_json::from_str(text).map_err(|e| PromptSpecError::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, PromptSpecError> {
        toml::from_str(text).map_err(|e| PromptSpecError::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PromptSpecError> {
        match self.mode {
            DistributionMode::CartesianUniform => {
                if !self.empirical.is_empty() {
                    return Err(PromptSpecError::ModeMismatch { mode: self.mode.name(), section: "empirical" });
                }
                if self.templates.is_empty() {
                    return Err(PromptSpecError::NoPrompts);
                }
                for spec in &self.templates {
                    for name in spec.template.placeholder_names() {
                        if spec.values.get(name).is_none_or(Vec::is_empty) {
                            return Err(PromptSpecError::EmptyValueSet {
                                template: spec.template.raw().to_owned(),
                                name: name.clone(),
                            });
                        }
                    }
                }
            }
            DistributionMode::WeightedEmpirical => {
                if !self.templates.is_empty() {
                    return Err(PromptSpecError::ModeMismatch { mode: self.mode.name(), section: "templates" });
                }
                if self.empirical.is_empty() {
                    return Err(PromptSpecError::NoPrompts);
                }
                if let Some(bad) = self.empirical.iter().find(|p| !p.weight.is_finite() || p.weight < 0.0) {
                    return Err(PromptSpecError::InvalidWeight(bad.weight));
                }
                if self.empirical.iter().all(|p| p.weight == 0.0) {
                    return Err(PromptSpecError::ZeroTotalWeight);
                }
            }
        }
        Ok(())
    }
}

/// Stable prompt id: a truncated SHA-256 of the provenance and text.
pub fn prompt_digest(provenance: Provenance, text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(match provenance {
        Provenance::Template => b"template\0".as_slice(),
        Provenance::Empirical => b"empirical\0".as_slice(),
    });
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    format!("p{}", hex::encode(&digest[..8]))
}

/// Expands a distribution into prompt records. Cartesian mode iterates
/// templates in order, and within a template the value grid with the last
/// placeholder varying fastest.
pub fn expand_distribution(spec: &PromptDistributionSpec) -> Result<Vec<PromptRecord>, PromptSpecError> {
    spec.validate()?;
    let mut entries: Vec<(String, f64, Provenance)> = Vec::new();
    match spec.mode {
        DistributionMode::CartesianUniform => {
            for tspec in &spec.templates {
                let names = tspec.template.placeholder_names();
                let lists: Vec<&Vec<String>> = names.iter().map(|n| &tspec.values[n]).collect();
                let mut odometer = vec![0usize; names.len()];
                loop {
                    let binding: HashMap<&str, &str> = names
                        .iter()
                        .zip(&lists)
                        .zip(&odometer)
                        .map(|((n, vals), &i)| (n.as_str(), vals[i].as_str()))
                        .collect();
                    entries.push((tspec.template.render(&binding), 1.0, Provenance::Template));
                    if !advance(&mut odometer, &lists) {
                        break;
                    }
                }
            }
        }
        DistributionMode::WeightedEmpirical => {
            entries.extend(spec.empirical.iter().map(|p| (p.text.clone(), p.weight, Provenance::Empirical)));
        }
    }
    if entries.is_empty() {
        return Err(PromptSpecError::NoPrompts);
    }

    let mut seen: HashMap<String, usize> = HashMap::new();
    let records = entries
        .into_iter()
        .map(|(text, weight, provenance)| {
            let base = prompt_digest(provenance, &text);
            let n = seen.entry(base.clone()).or_insert(0);
            *n += 1;
            let id = if *n == 1 { base } else { format!("{base}-{n}") };
            PromptRecord { prompt_id: id, text, weight, provenance }
        })
        .collect();
    Ok(records)
}

fn advance(odometer: &mut [usize], lists: &[&Vec<String>]) -> bool {
    for pos in (0..odometer.len()).rev() {
        odometer[pos] += 1;
        if odometer[pos] < lists[pos].len() {
            return true;
        }
        odometer[pos] = 0;
    }
    false
}

/// Draws `n` prompts with replacement, proportional to weight.
pub fn sample_prompts(
    spec: &PromptDistributionSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<PromptRecord>, PromptSpecError> {
    if n == 0 {
        return Err(PromptSpecError::ZeroSampleSize);
    }
    let expanded = expand_distribution(spec)?;
    let dist = WeightedIndex::new(expanded.iter().map(|p| p.weight)).map_err(|_| PromptSpecError::ZeroTotalWeight)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| expanded[dist.sample(&mut rng)].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_spec() -> PromptDistributionSpec {
        PromptDistributionSpec::from_json(
            r#"{"mode":"cartesian_uniform","templates":[{"template":"A photo of a [age] person [action]",
            "values":{"age":["young","middle-aged","old"],"action":["jogging","sprinting","running"]}}]}"#,
        )
        .unwrap()
    }

    fn literals(t: &PromptTemplate) -> usize {
        t.segments().iter().filter(|s| matches!(s, Segment::Literal(_))).count()
    }

    #[test]
    fn parses_age_action_template() {
        let t = PromptTemplate::parse("A photo of a [age] person [action]").unwrap();
        assert_eq!(t.placeholder_names(), ["age", "action"]);
        assert_eq!(literals(&t), 3);
    }

    #[test]
    fn plain_text_is_one_literal() {
        let t = PromptTemplate::parse("hello").unwrap();
        assert_eq!(t.segments(), [Segment::Literal("hello".into())]);
        assert!(t.placeholder_names().is_empty());
    }

    #[test]
    fn repeated_names_bind_jointly() {
        let t = PromptTemplate::parse("x [a] y [a]").unwrap();
        assert_eq!(t.placeholder_names(), ["a"]);
        let binding = HashMap::from([("a", "Q")]);
        assert_eq!(t.render(&binding), "x Q y Q");
    }

    #[test]
    fn escapes_and_errors() {
        let t = PromptTemplate::parse("[[not] a [slot]]").unwrap();
        assert_eq!(t.placeholder_names(), ["slot"]);
        assert_eq!(t.render(&HashMap::from([("slot", "S")])), "[not] a S]");
        assert_eq!(t.to_source(), "[[not] a [slot]]");

        assert_eq!(PromptTemplate::parse("a [b"), Err(PromptSpecError::UnclosedPlaceholder(2)));
        assert_eq!(PromptTemplate::parse("a [] b"), Err(PromptSpecError::EmptyPlaceholderName(2)));
        assert!(matches!(
            PromptTemplate::parse("[Age]"),
            Err(PromptSpecError::InvalidPlaceholderName { .. })
        ));
    }

    #[test]
    fn grid_expands_in_documented_order() {
        let prompts = expand_distribution(&grid_spec()).unwrap();
        let texts: Vec<_> = prompts.iter().map(|p| p.text.as_str()).collect();
        assert_eq!(
            texts,
            [
                "A photo of a young person jogging",
                "A photo of a young person sprinting",
                "A photo of a young person running",
                "A photo of a middle-aged person jogging",
                "A photo of a middle-aged person sprinting",
                "A photo of a middle-aged person running",
                "A photo of a old person jogging",
                "A photo of a old person sprinting",
                "A photo of a old person running",
            ]
        );
        assert!(prompts.iter().all(|p| p.weight == 1.0 && p.provenance == Provenance::Template));
        let again = expand_distribution(&grid_spec()).unwrap();
        assert_eq!(prompts, again);
    }

    #[test]
    fn two_by_two_grid_order() {
        let spec = PromptDistributionSpec::from_json(
            r#"{"mode":"cartesian_uniform","templates":[{"template":"[a]-[b]","values":{"a":["p","q"],"b":["r","s"]}}]}"#,
        )
        .unwrap();
        let texts: Vec<_> = expand_distribution(&spec).unwrap().into_iter().map(|p| p.text).collect();
        assert_eq!(texts, ["p-r", "p-s", "q-r", "q-s"]);
    }

    #[test]
    fn constant_template_yields_one_prompt() {
        let spec = PromptDistributionSpec::from_json(
            r#"{"mode":"cartesian_uniform","templates":[{"template":"a person with a disability"}]}"#,
        )
        .unwrap();
        assert_eq!(expand_distribution(&spec).unwrap().len(), 1);
    }

    #[test]
    fn missing_values_is_empty_value_set() {
        let spec = PromptDistributionSpec::from_json(
            r#"{"mode":"cartesian_uniform","templates":[{"template":"[a] [b]","values":{"a":["x"],"b":[]}}]}"#,
        )
        .unwrap();
        assert!(matches!(expand_distribution(&spec), Err(PromptSpecError::EmptyValueSet { .. })));
    }

    #[test]
    fn toml_spec_parses() {
        let spec = PromptDistributionSpec::from_toml(
            r#"
mode = "weighted_empirical"
[[empirical]]
text = "Japanese redhead woman"
weight = 2.0
[[empirical]]
text = "a cat"
"#,
        )
        .unwrap();
        let prompts = expand_distribution(&spec).unwrap();
        assert_eq!(prompts.len(), 2);
        assert_eq!(prompts[0].weight, 2.0);
        assert_eq!(prompts[1].weight, 1.0);
        assert_eq!(prompts[0].provenance, Provenance::Empirical);
    }

    #[test]
    fn duplicate_texts_get_distinct_ids() {
        let spec = PromptDistributionSpec::from_json(
            r#"{"mode":"weighted_empirical","empirical":[{"text":"a"},{"text":"a"}]}"#,
        )
        .unwrap();
        let prompts = expand_distribution(&spec).unwrap();
        assert_ne!(prompts[0].prompt_id, prompts[1].prompt_id);
        assert!(prompts[1].prompt_id.starts_with(&prompts[0].prompt_id));
    }

    #[test]
    fn single_prompt_sampling() {
        let spec = PromptDistributionSpec::from_json(
            r#"{"mode":"weighted_empirical","empirical":[{"text":"only"}]}"#,
        )
        .unwrap();
        let drawn = sample_prompts(&spec, 5, 3).unwrap();
        assert_eq!(drawn.len(), 5);
        assert!(drawn.iter().all(|p| p.text == "only"));
    }

    #[test]
    fn zero_weight_prompt_never_drawn() {
        let spec = PromptDistributionSpec::from_json(
            r#"{"mode":"weighted_empirical","empirical":[{"text":"a","weight":1},{"text":"b","weight":0}]}"#,
        )
        .unwrap();
        let drawn = sample_prompts(&spec, 2000, 11).unwrap();
        assert!(drawn.iter().all(|p| p.text == "a"));
    }

    #[test]
    fn uniform_sampling_shares_and_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let spec = grid_spec();
        let n = 9000;
        let drawn = sample_prompts(&spec, n, 20240611).unwrap();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for p in &drawn {
            *counts.entry(p.prompt_id.clone()).or_default() += 1;
        }
        assert_eq!(counts.len(), 9);
        let tol = 9.0 / (n as f64).sqrt();
        let expected = n as f64 / 9.0;
        let mut chi2 = 0.0;
        for &c in counts.values() {
            let share = c as f64 / n as f64;
            assert!((share - 1.0 / 9.0).abs() <= tol, "share {share}");
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        let p_value = 1.0 - ChiSquared::new(8.0).unwrap().cdf(chi2);
        assert!(p_value > 0.01, "chi2 {chi2} p {p_value}");
        assert_eq!(drawn, sample_prompts(&spec, n, 20240611).unwrap());
    }

    fn template_source() -> impl Strategy<Value = String> {
        let piece = prop_oneof![
            "[a-zA-Z ,.!é\\]-]{0,6}".prop_map(|s| s),
            Just("[[".to_string()),
            "[a-z0-9_]{1,5}".prop_map(|n| format!("[{n}]")),
        ];
        proptest::collection::vec(piece, 0..8).prop_map(|v| v.concat())
    }

    proptest! {
        #[test]
        fn source_round_trips(raw in template_source()) {
            let t = PromptTemplate::parse(&raw).unwrap();
            prop_assert_eq!(t.to_source(), raw.clone());
            let identity: Vec<(String, String)> =
                t.placeholder_names().iter().map(|n| (n.clone(), format!("[{n}]"))).collect();
            let binding: HashMap<&str, &str> =
                identity.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
            prop_assert_eq!(t.render(&binding), raw.replace("[[", "["));
        }

        #[test]
        fn expansion_size_is_product(sizes in proptest::collection::vec(1usize..4, 0..4)) {
            let names: Vec<String> = (0..sizes.len()).map(|i| format!("p{i}")).collect();
            let raw = names.iter().map(|n| format!("[{n}]")).collect::<Vec<_>>().join(" ");
            let values = names
                .iter()
                .zip(&sizes)
                .map(|(n, &s)| (n.clone(), (0..s).map(|v| format!("{n}v{v}")).collect()))
                .collect();
            let spec = PromptDistributionSpec {
                mode: DistributionMode::CartesianUniform,
                templates: vec![TemplateSpec { template: PromptTemplate::parse(&raw).unwrap(), values }],
                empirical: vec![],
            };
            prop_assert_eq!(expand_distribution(&spec).unwrap().len(), sizes.iter().product::<usize>());
        }
    }
}
