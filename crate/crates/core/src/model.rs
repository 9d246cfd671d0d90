//! Shared domain types: concept labels, boxes, detections, prompts, images
//! and the indexed [`AuditCorpus`] that every statistic is computed from.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("concept label is empty after normalization")]
    EmptyLabel,
    #[error("bounding box {0:?} is outside [0,1] or has non-positive extent")]
    BoxOutOfRange([f64; 4]),
    #[error("detection score {0} is outside [0,1]")]
    ScoreOutOfRange(f64),
    #[error("prompt weight {0} must be a finite non-negative number")]
    InvalidWeight(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusError {
    #[error("duplicate prompt id `{0}`")]
    DuplicatePromptId(String),
    #[error("duplicate image id `{0}`")]
    DuplicateImageId(String),
    #[error("image `{image_id}` references unknown prompt `{prompt_id}`")]
    UnknownPromptId { image_id: String, prompt_id: String },
    #[error("prompt `{prompt_id}` already has an image with sample index {sample_index}")]
    DuplicateSample { prompt_id: String, sample_index: u32 },
    #[error("K_nominal must be at least 1")]
    InvalidK,
}

/// A detector label after case folding, NFC normalization and whitespace
/// collapsing. Construct with [`normalize_label`] or `ConceptLabel::new`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConceptLabel(String);

impl ConceptLabel {
    pub fn new(raw: &str) -> Result<Self, ModelError> {
        normalize_label(raw)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ConceptLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for ConceptLabel {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl Serialize for ConceptLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for ConceptLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        normalize_label(&raw).map_err(serde::de::Error::custom)
    }
}

/// Lowercases, NFC-normalizes, trims and collapses internal whitespace runs
/// to a single ASCII space.
pub fn normalize_label(raw: &str) -> Result<ConceptLabel, ModelError> {
    let text = normalize_text(raw);
    if text.is_empty() {
        return Err(ModelError::EmptyLabel);
    }
    Ok(ConceptLabel(text))
}

/// The label normalization applied to arbitrary text (prompt texts use it
/// for watchlist matching). May return an empty string.
pub fn normalize_text(raw: &str) -> String {
    // Lowercasing can produce decomposed sequences, so compose afterwards.
    let lowered: String = raw.nfc().flat_map(char::to_lowercase).collect();
    let composed: String = lowered.nfc().collect();
    let mut out = String::with_capacity(composed.len());
    for word in composed.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, ModelError> {
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi && hi <= 1.0;
        if ok(x0, x1) && ok(y0, y1) {
            Ok(Self { x0, y0, x1, y1 })
        } else {
            Err(ModelError::BoxOutOfRange([x0, y0, x1, y1]))
        }
    }

    /// Converts a pixel-space box using the declared image dimensions.
    pub fn from_pixels(coords: [f64; 4], width: u32, height: u32) -> Result<Self, ModelError> {
        if width == 0 || height == 0 {
            return Err(ModelError::BoxOutOfRange(coords));
        }
        let (w, h) = (f64::from(width), f64::from(height));
        Self::new(coords[0] / w, coords[1] / h, coords[2] / w, coords[3] / h)
    }

    /// The whole image.
    pub fn full() -> Self {
        Self { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x0, y0, x1, y1] = <[f64; 4]>::deserialize(deserializer)?;
        BoundingBox::new(x0, y0, x1, y1).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: ConceptLabel,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

impl Detection {
    /// `score` defaults to 1.0 when the detector does not report one.
    pub fn new(label: ConceptLabel, bbox: BoundingBox, score: Option<f64>) -> Result<Self, ModelError> {
        let score = score.unwrap_or(1.0);
        if !(0.0..=1.0).contains(&score) {
            return Err(ModelError::ScoreOutOfRange(score));
        }
        Ok(Self { label, bbox, score })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub prompt_id: String,
    pub sample_index: u32,
    pub detections: Vec<Detection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_uri: Option<String>,
    pub detector_id: String,
}

/// Deduplicated labels of one image. Several boxes with the same label count once.
pub fn presence_set(image: &ImageRecord) -> BTreeSet<ConceptLabel> {
    image.detections.iter().map(|d| d.label.clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Template,
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub text: String,
    pub weight: f64,
    pub provenance: Provenance,
}

impl PromptRecord {
    pub fn new(
        prompt_id: impl Into<String>,
        text: impl Into<String>,
        weight: f64,
        provenance: Provenance,
    ) -> Result<Self, ModelError> {
        if !weight.is_finite() || weight < 0.0 {
            return Err(ModelError::InvalidWeight(weight));
        }
        Ok(Self { prompt_id: prompt_id.into(), text: text.into(), weight, provenance })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub generator_id: String,
    pub detector_id: String,
    #[serde(rename = "K_nominal")]
    pub k_nominal: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
    #[serde(default)]
    pub config_digest: String,
}

/// Dense, derived view of a corpus used by the statistics code. Images and
/// prompts are addressed by their position in id order; concepts by their
/// position in label order.
#[derive(Debug, Clone, Default)]
pub(crate) struct CorpusIndex {
    pub vocab: Vec<ConceptLabel>,
    pub concept_ids: HashMap<ConceptLabel, u32>,
    pub image_ids: Vec<String>,
    pub image_prompt: Vec<u32>,
    /// Sorted, deduplicated concept ids per image.
    pub image_concepts: Vec<Vec<u32>>,
    pub prompt_ids: Vec<String>,
    pub prompt_image_counts: Vec<u64>,
    /// Image positions (ascending) per concept.
    pub postings: Vec<Vec<u32>>,
}

/// An indexed, validated collection of prompts, images and detections for
/// one run. Immutable once built.
#[derive(Debug, Clone)]
pub struct AuditCorpus {
    run_id: String,
    prompts: BTreeMap<String, PromptRecord>,
    images: BTreeMap<String, ImageRecord>,
    metadata: RunMetadata,
    index: CorpusIndex,
}

impl PartialEq for AuditCorpus {
    fn eq(&self, other: &Self) -> bool {
        // The index is a pure function of the records.
        self.run_id == other.run_id
            && self.metadata == other.metadata
            && self.prompts == other.prompts
            && self.images == other.images
    }
}

impl AuditCorpus {
    pub fn new(
        run_id: impl Into<String>,
        metadata: RunMetadata,
        prompts: impl IntoIterator<Item = PromptRecord>,
        images: impl IntoIterator<Item = ImageRecord>,
    ) -> Result<Self, CorpusError> {
        if metadata.k_nominal < 1 {
            return Err(CorpusError::InvalidK);
        }
        let mut prompt_map = BTreeMap::new();
        for prompt in prompts {
            if prompt_map.contains_key(&prompt.prompt_id) {
                return Err(CorpusError::DuplicatePromptId(prompt.prompt_id));
            }
            prompt_map.insert(prompt.prompt_id.clone(), prompt);
        }
        let mut image_map = BTreeMap::new();
        let mut samples = BTreeSet::new();
        for image in images {
            if !prompt_map.contains_key(&image.prompt_id) {
                return Err(CorpusError::UnknownPromptId {
                    image_id: image.image_id,
                    prompt_id: image.prompt_id,
                });
            }
            if image_map.contains_key(&image.image_id) {
                return Err(CorpusError::DuplicateImageId(image.image_id));
            }
            if !samples.insert((image.prompt_id.clone(), image.sample_index)) {
                return Err(CorpusError::DuplicateSample {
                    prompt_id: image.prompt_id,
                    sample_index: image.sample_index,
                });
            }
            image_map.insert(image.image_id.clone(), image);
        }
        Ok(Self::from_validated(run_id.into(), metadata, prompt_map, image_map))
    }

    fn from_validated(
        run_id: String,
        metadata: RunMetadata,
        prompts: BTreeMap<String, PromptRecord>,
        images: BTreeMap<String, ImageRecord>,
    ) -> Self {
        let index = build_index(&prompts, &images);
        Self { run_id, prompts, images, metadata, index }
    }

    /// Returns a copy with every detection label passed through `rewrite`.
    pub(crate) fn map_labels(&self, rewrite: impl Fn(&ConceptLabel) -> ConceptLabel) -> Self {
        let images = self
            .images
            .iter()
            .map(|(id, image)| {
                let mut image = image.clone();
                for det in &mut image.detections {
                    det.label = rewrite(&det.label);
                }
                (id.clone(), image)
            })
            .collect();
        Self::from_validated(self.run_id.clone(), self.metadata.clone(), self.prompts.clone(), images)
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn metadata(&self) -> &RunMetadata {
        &self.metadata
    }

    pub fn prompts(&self) -> &BTreeMap<String, PromptRecord> {
        &self.prompts
    }

    pub fn images(&self) -> &BTreeMap<String, ImageRecord> {
        &self.images
    }

    pub fn prompt(&self, prompt_id: &str) -> Option<&PromptRecord> {
        self.prompts.get(prompt_id)
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.get(image_id)
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// All concepts present in at least one image, in label order.
    pub fn vocabulary(&self) -> &[ConceptLabel] {
        &self.index.vocab
    }

    pub fn contains_concept(&self, concept: &ConceptLabel) -> bool {
        self.index.concept_ids.contains_key(concept)
    }

    /// Ids of the images whose presence set contains `concept`, in id order.
    pub fn images_with(&self, concept: &ConceptLabel) -> Vec<&str> {
        match self.index.concept_ids.get(concept) {
            Some(&cid) => self.index.postings[cid as usize]
                .iter()
                .map(|&i| self.index.image_ids[i as usize].as_str())
                .collect(),
            None => Vec::new(),
        }
    }

    /// The concept → image ids presence index.
    pub fn presence_index(&self) -> BTreeMap<ConceptLabel, BTreeSet<String>> {
        self.index
            .vocab
            .iter()
            .zip(&self.index.postings)
            .map(|(label, post)| {
                let ids = post.iter().map(|&i| self.index.image_ids[i as usize].clone()).collect();
                (label.clone(), ids)
            })
            .collect()
    }

    pub(crate) fn index(&self) -> &CorpusIndex {
        &self.index
    }
}

fn build_index(
    prompts: &BTreeMap<String, PromptRecord>,
    images: &BTreeMap<String, ImageRecord>,
) -> CorpusIndex {
    let vocab: Vec<ConceptLabel> = images
        .values()
        .flat_map(|img| img.detections.iter().map(|d| d.label.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let concept_ids: HashMap<ConceptLabel, u32> =
        vocab.iter().enumerate().map(|(i, c)| (c.clone(), i as u32)).collect();
    let prompt_ids: Vec<String> = prompts.keys().cloned().collect();
    let prompt_pos: HashMap<&str, u32> =
        prompt_ids.iter().enumerate().map(|(i, p)| (p.as_str(), i as u32)).collect();

    let mut image_ids = Vec::with_capacity(images.len());
    let mut image_prompt = Vec::with_capacity(images.len());
    let mut image_concepts = Vec::with_capacity(images.len());
    let mut prompt_image_counts = vec![0u64; prompt_ids.len()];
    let mut postings = vec![Vec::new(); vocab.len()];
    for (pos, (id, image)) in images.iter().enumerate() {
        let pidx = prompt_pos[image.prompt_id.as_str()];
        prompt_image_counts[pidx as usize] += 1;
        let mut cids: Vec<u32> = image.detections.iter().map(|d| concept_ids[&d.label]).collect();
        cids.sort_unstable();
        cids.dedup();
        for &c in &cids {
            postings[c as usize].push(pos as u32);
        }
        image_ids.push(id.clone());
        image_prompt.push(pidx);
        image_concepts.push(cids);
    }
    CorpusIndex {
        vocab,
        concept_ids,
        image_ids,
        image_prompt,
        image_concepts,
        prompt_ids,
        prompt_image_counts,
        postings,
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn folds_case_and_whitespace() {
        assert_eq!(normalize_label("  Wheelchair ").unwrap().as_str(), "wheelchair");
        assert_eq!(normalize_label("Ski   Mask").unwrap().as_str(), "ski mask");
        assert_eq!(normalize_label("a\t\nb").unwrap().as_str(), "a b");
    }

    #[test]
    fn composes_decomposed_characters() {
        let decomposed = "cafe\u{0301}";
        let composed = "caf\u{00e9}";
        let label = normalize_label(decomposed).unwrap();
        assert_eq!(label, normalize_label(composed).unwrap());
        let code_points: Vec<u32> = label.as_str().chars().map(u32::from).collect();
        assert_eq!(code_points, vec![0x63, 0x61, 0x66, 0xE9]);
    }

    #[test]
    fn uppercase_decomposed_is_composed_after_lowering() {
        assert_eq!(normalize_label("CAFE\u{0301}").unwrap().as_str(), "caf\u{00e9}");
    }

    #[test]
    fn rejects_blank_labels() {
        assert_eq!(normalize_label("   "), Err(ModelError::EmptyLabel));
        assert_eq!(normalize_label(""), Err(ModelError::EmptyLabel));
    }

    #[test]
    fn box_invariants() {
        assert!(BoundingBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
        assert!(BoundingBox::new(0.5, 0.0, 0.4, 1.0).is_err());
        assert!(BoundingBox::new(0.5, 0.5, 0.5, 0.6).is_err());
        assert!(BoundingBox::new(-0.1, 0.0, 0.4, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 0.4, 1.1).is_err());
        assert!(BoundingBox::new(0.0, f64::NAN, 0.4, 1.0).is_err());
        let px = BoundingBox::from_pixels([64.0, 0.0, 128.0, 256.0], 256, 512).unwrap();
        assert_eq!(px.to_array(), [0.25, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn missing_score_defaults_to_one() {
        let d = Detection::new(normalize_label("x").unwrap(), BoundingBox::full(), None).unwrap();
        assert_eq!(d.score, 1.0);
        assert!(Detection::new(normalize_label("x").unwrap(), BoundingBox::full(), Some(1.5)).is_err());
    }

    #[test]
    fn presence_set_dedupes() {
        let corpus = fixtures::f1();
        let i1 = corpus.image("i1").unwrap();
        let labels: Vec<_> = presence_set(i1).into_iter().map(|c| c.to_string()).collect();
        assert_eq!(labels, ["man", "shoes"]);

        let mut doubled = i1.clone();
        doubled.detections.push(doubled.detections[0].clone());
        assert_eq!(presence_set(&doubled).len(), 2);

        doubled.detections.clear();
        assert!(presence_set(&doubled).is_empty());
    }

    #[test]
    fn f1_presence_index() {
        let corpus = fixtures::f1();
        let index = corpus.presence_index();
        let ids = |c: &str| -> Vec<String> {
            index[&normalize_label(c).unwrap()].iter().cloned().collect()
        };
        assert_eq!(ids("man"), ["i1", "i2", "i4"]);
        assert_eq!(ids("shoes"), ["i1", "i3", "i4"]);
        assert_eq!(ids("dog"), ["i2"]);
        assert_eq!(ids("woman"), ["i3"]);
    }

    #[test]
    fn referential_integrity_is_enforced() {
        let prompts = [PromptRecord::new("t1", "x", 1.0, Provenance::Template).unwrap()];
        let mut image = fixtures::f1().image("i1").unwrap().clone();
        image.prompt_id = "missing".into();
        let err = AuditCorpus::new("r", fixtures::metadata(), prompts.clone(), [image.clone()]);
        assert!(matches!(err, Err(CorpusError::UnknownPromptId { .. })));

        image.prompt_id = "t1".into();
        let mut twin = image.clone();
        twin.image_id = "other".into();
        let err = AuditCorpus::new("r", fixtures::metadata(), prompts, [image, twin]);
        assert!(matches!(err, Err(CorpusError::DuplicateSample { .. })));
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(raw in "\\PC{0,24}") {
            if let Ok(once) = normalize_label(&raw) {
                let twice = normalize_label(once.as_str()).unwrap();
                prop_assert_eq!(&once, &twice);
                prop_assert_eq!(once.as_str().trim(), once.as_str());
            }
        }
    }
}
