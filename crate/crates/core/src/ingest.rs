//! Line-oriented detection records: parsing, validation, alias folding and
//! corpus persistence.
//!
//! A record stream is one JSON document per line. The first line of the
//! first stream is the run header; every other line is a `prompt` or an
//! `image` line. Persisted corpora use the same format, so a corpus file is
//! itself a valid record stream.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    normalize_label, AuditCorpus, BoundingBox, ConceptLabel, CorpusError, Detection, ImageRecord,
    ModelError, PromptRecord, Provenance, RunMetadata,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LineErrorKind {
    #[error("malformed line: {0}")]
    MalformedLine(String),
    #[error("image references unknown prompt `{0}`")]
    UnknownPromptId(String),
    #[error("duplicate image id `{0}`")]
    DuplicateImageId(String),
    #[error("duplicate prompt id `{0}`")]
    DuplicatePromptId(String),
    #[error("prompt `{0}` already has an image with sample index {1}")]
    DuplicateSample(String, u32),
    #[error("box {0:?} is out of range")]
    BoxOutOfRange([f64; 4]),
    #[error("empty concept label")]
    EmptyLabel,
    #[error("detection score {0} is outside [0,1]")]
    ScoreOutOfRange(f64),
    #[error("invalid prompt weight {0}")]
    InvalidWeight(f64),
}

impl From<ModelError> for LineErrorKind {
    fn from(err: ModelError) -> Self {
        match err {
            ModelError::EmptyLabel => Self::EmptyLabel,
            ModelError::BoxOutOfRange(b) => Self::BoxOutOfRange(b),
            ModelError::ScoreOutOfRange(s) => Self::ScoreOutOfRange(s),
            ModelError::InvalidWeight(w) => Self::InvalidWeight(w),
        }
    }
}

/// A rejected line with its position (1-based) in its source.
#[derive(Debug, Clone, PartialEq)]
pub struct LineError {
    pub source: String,
    pub line: usize,
    pub kind: LineErrorKind,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.source, self.line, self.kind)
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("record stream has no header line")]
    MissingHeader,
    #[error("unsupported schema version {found} (this reader supports {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("{source_name}: header conflicts with the first header ({field} differs)")]
    HeaderConflict { source_name: String, field: &'static str },
    #[error("{source_name}:{line}: malformed header: {message}")]
    MalformedHeader { source_name: String, line: usize, message: String },
    #[error("{} invalid line(s); first: {}", errors.len(), errors[0])]
    InvalidLines { errors: Vec<LineError>, records: usize, body_lines: usize },
    #[error("alias map is invalid: {0}")]
    Alias(#[from] AliasError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AliasError {
    #[error("alias chain `{from}` -> `{via}` -> `{to}`; aliases must resolve in one step")]
    AliasCycle { from: String, via: String, to: String },
    #[error("alias entry `{0}` normalizes to an empty label")]
    EmptyLabel(String),
    #[error("cannot read alias map: {0}")]
    Format(String),
}

/// One-step label rewrites, validated so that no target is itself aliased.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AliasMap(BTreeMap<ConceptLabel, ConceptLabel>);

impl AliasMap {
    pub fn new(entries: BTreeMap<ConceptLabel, ConceptLabel>) -> Result<Self, AliasError> {
        let entries: BTreeMap<_, _> = entries.into_iter().filter(|(k, v)| k != v).collect();
        for (from, via) in &entries {
            if let Some(to) = entries.get(via) {
                return Err(AliasError::AliasCycle {
                    from: from.to_string(),
                    via: via.to_string(),
                    to: to.to_string(),
                });
            }
        }
        Ok(Self(entries))
    }

    /// Reads a JSON object mapping raw labels to raw labels.
    pub fn from_json(text: &str) -> Result<Self, AliasError> {
        let raw: BTreeMap<String, String> =
            serde_json::from_str(text).map_err(|e| AliasError::Format(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for (k, v) in raw {
            let from = normalize_label(&k).map_err(|_| AliasError::EmptyLabel(k.clone()))?;
            let to = normalize_label(&v).map_err(|_| AliasError::EmptyLabel(v.clone()))?;
            entries.insert(from, to);
        }
        Self::new(entries)
    }

    pub fn from_path(path: &Path) -> Result<Self, AliasError> {
        let text = std::fs::read_to_string(path).map_err(|e| AliasError::Format(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn resolve<'a>(&'a self, label: &'a ConceptLabel) -> &'a ConceptLabel {
        self.0.get(label).unwrap_or(label)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Rewrites labels through `aliases`; presence sets are re-deduplicated.
/// The input corpus is untouched.
pub fn apply_alias_map(
    corpus: &AuditCorpus,
    aliases: &BTreeMap<ConceptLabel, ConceptLabel>,
) -> Result<AuditCorpus, AliasError> {
    let map = AliasMap::new(aliases.clone())?;
    Ok(apply_aliases(corpus, &map))
}

pub fn apply_aliases(corpus: &AuditCorpus, aliases: &AliasMap) -> AuditCorpus {
    if aliases.is_empty() {
        return corpus.clone();
    }
    corpus.map_labels(|label| aliases.resolve(label).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WireHeader {
    schema_version: u32,
    run_id: String,
    generator_id: String,
    detector_id: String,
    #[serde(rename = "K_nominal")]
    k_nominal: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    created_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
}

impl WireHeader {
    fn digest(&self) -> String {
        let canonical = serde_json::json!({
            "schema_version": self.schema_version,
            "run_id": self.run_id,
            "generator_id": self.generator_id,
            "detector_id": self.detector_id,
            "K_nominal": self.k_nominal,
        });
        let hash = Sha256::digest(canonical.to_string().as_bytes());
        format!("sha256:{}", hex::encode(hash))
    }

    fn metadata(&self) -> RunMetadata {
        RunMetadata {
            generator_id: self.generator_id.clone(),
            detector_id: self.detector_id.clone(),
            k_nominal: self.k_nominal,
            created_at: self.created_at.clone(),
            config_digest: self.config_digest.clone().unwrap_or_else(|| self.digest()),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum WireLine {
    Prompt(WirePrompt),
    Image(WireImage),
}

#[derive(Debug, Serialize, Deserialize)]
struct WirePrompt {
    prompt_id: String,
    text: String,
    #[serde(default = "one")]
    weight: f64,
    #[serde(default = "default_provenance")]
    provenance: Provenance,
}

fn one() -> f64 {
    1.0
}

fn default_provenance() -> Provenance {
    Provenance::Empirical
}

#[derive(Debug, Deserialize)]
struct WireImage {
    image_id: String,
    prompt_id: String,
    sample_index: u32,
    #[serde(default)]
    image_uri: Option<String>,
    #[serde(default)]
    image_width: Option<u32>,
    #[serde(default)]
    image_height: Option<u32>,
    #[serde(default)]
    detector_id: Option<String>,
    detections: Vec<WireDetection>,
}

#[derive(Debug, Deserialize)]
struct WireDetection {
    label: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default)]
    score: Option<f64>,
}

enum ParsedLine {
    Header(Box<WireHeader>),
    Prompt(PromptRecord),
    Image(WireImage),
}

fn parse_line(text: &str) -> Result<ParsedLine, LineErrorKind> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| LineErrorKind::MalformedLine(e.to_string()))?;
    let malformed = |e: serde_json::Error| LineErrorKind::MalformedLine(e.to_string());
    if value.get("kind").is_none() && value.get("schema_version").is_some() {
        return serde_json::from_value(value).map(|h| ParsedLine::Header(Box::new(h))).map_err(malformed);
    }
    match serde_json::from_value(value).map_err(malformed)? {
        WireLine::Prompt(p) => Ok(ParsedLine::Prompt(PromptRecord::new(p.prompt_id, p.text, p.weight, p.provenance)?)),
        WireLine::Image(img) => Ok(ParsedLine::Image(img)),
    }
}

fn convert_image(wire: WireImage, default_detector: &str, aliases: &AliasMap) -> Result<ImageRecord, LineErrorKind> {
    let dims = match (wire.image_width, wire.image_height) {
        (Some(w), Some(h)) => Some((w, h)),
        (None, None) => None,
        _ => {
            return Err(LineErrorKind::MalformedLine(
                "image_width and image_height must be given together".into(),
            ))
        }
    };
    let mut detections = Vec::with_capacity(wire.detections.len());
    for det in wire.detections {
        let label = normalize_label(&det.label)?;
        let label = aliases.resolve(&label).clone();
        let bbox = match dims {
            Some((w, h)) => BoundingBox::from_pixels(det.bbox, w, h)?,
            None => BoundingBox::new(det.bbox[0], det.bbox[1], det.bbox[2], det.bbox[3])?,
        };
        detections.push(Detection::new(label, bbox, det.score)?);
    }
    Ok(ImageRecord {
        image_id: wire.image_id,
        prompt_id: wire.prompt_id,
        sample_index: wire.sample_index,
        detections,
        image_uri: wire.image_uri,
        detector_id: wire.detector_id.unwrap_or_else(|| default_detector.to_owned()),
    })
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Skip invalid lines (reporting them) instead of failing.
    pub lenient: bool,
    pub aliases: AliasMap,
}

/// Outcome of a successful ingest. In lenient mode `skipped` lists the
/// rejected lines; `records + skipped.len() == body_lines` always holds.
#[derive(Debug)]
pub struct IngestReport {
    pub corpus: AuditCorpus,
    pub body_lines: usize,
    pub records: usize,
    pub skipped: Vec<LineError>,
}

struct Located<T> {
    source: usize,
    line: usize,
    item: T,
}

/// Accumulates one or more record streams into a corpus.
pub struct RecordIngester {
    options: IngestOptions,
    sources: Vec<String>,
    header: Option<WireHeader>,
    prompts: Vec<Located<PromptRecord>>,
    images: Vec<Located<WireImage>>,
    errors: Vec<LineError>,
    body_lines: usize,
}

impl RecordIngester {
    pub fn new(options: IngestOptions) -> Self {
        Self {
            options,
            sources: Vec::new(),
            header: None,
            prompts: Vec::new(),
            images: Vec::new(),
            errors: Vec::new(),
            body_lines: 0,
        }
    }

    pub fn add_reader(&mut self, source: &str, reader: impl BufRead) -> Result<(), IngestError> {
        let lines: Vec<(usize, String)> = reader
            .lines()
            .enumerate()
            .map(|(i, l)| l.map(|l| (i + 1, l)))
            .collect::<Result<_, _>>()?;
        self.add_lines(source, lines)
    }

    pub fn add_str(&mut self, source: &str, text: &str) -> Result<(), IngestError> {
        let lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.to_owned())).collect();
        self.add_lines(source, lines)
    }

    fn add_lines(&mut self, source: &str, lines: Vec<(usize, String)>) -> Result<(), IngestError> {
        let src = self.sources.len();
        self.sources.push(source.to_owned());
        let mut lines: Vec<(usize, String)> = lines.into_iter().filter(|(_, l)| !l.trim().is_empty()).collect();

        // A header is only recognized as the first non-blank line of a stream.
        let first_is_header = lines
            .first()
            .is_some_and(|(_, l)| matches!(parse_line(l), Ok(ParsedLine::Header(_))));
        if first_is_header {
            let (line, text) = lines.remove(0);
            let Ok(ParsedLine::Header(header)) = parse_line(&text) else { unreachable!() };
            self.accept_header(source, line, *header)?;
        } else if self.header.is_none() {
            if let Some((line, text)) = lines.first() {
                if let Ok(value) = serde_json::from_str::<serde_json::Value>(text) {
                    if value.get("schema_version").is_some() && value.get("kind").is_none() {
                        let message = match parse_line(text) {
                            Err(e) => e.to_string(),
                            Ok(_) => "unparseable header".into(),
                        };
                        return Err(IngestError::MalformedHeader { source_name: source.into(), line: *line, message });
                    }
                }
            }
            return Err(IngestError::MissingHeader);
        }

        self.body_lines += lines.len();
        let parsed: Vec<(usize, Result<ParsedLine, LineErrorKind>)> =
            lines.into_par_iter().map(|(line, text)| (line, parse_line(&text))).collect();
        for (line, result) in parsed {
            match result {
                Ok(ParsedLine::Prompt(item)) => self.prompts.push(Located { source: src, line, item }),
                Ok(ParsedLine::Image(item)) => self.images.push(Located { source: src, line, item }),
                Ok(ParsedLine::Header(_)) => self.errors.push(LineError {
                    source: source.to_owned(),
                    line,
                    kind: LineErrorKind::MalformedLine("header line after body lines".into()),
                }),
                Err(kind) => self.errors.push(LineError { source: source.to_owned(), line, kind }),
            }
        }
        Ok(())
    }

    fn accept_header(&mut self, source: &str, line: usize, header: WireHeader) -> Result<(), IngestError> {
        if header.schema_version != SCHEMA_VERSION {
            return Err(IngestError::VersionMismatch { found: header.schema_version, supported: SCHEMA_VERSION });
        }
        if header.k_nominal < 1 {
            return Err(IngestError::MalformedHeader {
                source_name: source.into(),
                line,
                message: "K_nominal must be at least 1".into(),
            });
        }
        match &self.header {
            None => self.header = Some(header),
            Some(first) => {
                let conflict = if first.run_id != header.run_id {
                    Some("run_id")
                } else if first.generator_id != header.generator_id {
                    Some("generator_id")
                } else if first.detector_id != header.detector_id {
                    Some("detector_id")
                } else if first.k_nominal != header.k_nominal {
                    Some("K_nominal")
                } else {
                    None
                };
                if let Some(field) = conflict {
                    return Err(IngestError::HeaderConflict { source_name: source.into(), field });
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<IngestReport, IngestError> {
        let header = self.header.ok_or(IngestError::MissingHeader)?;
        let mut errors = self.errors;
        let sources = self.sources;
        let err = |src: usize, line: usize, kind| LineError { source: sources[src].clone(), line, kind };

        let mut prompts = Vec::with_capacity(self.prompts.len());
        let mut prompt_ids = HashSet::new();
        for Located { source, line, item } in self.prompts {
            if prompt_ids.insert(item.prompt_id.clone()) {
                prompts.push(item);
            } else {
                errors.push(err(source, line, LineErrorKind::DuplicatePromptId(item.prompt_id)));
            }
        }

        let converted: Vec<(usize, usize, Result<ImageRecord, LineErrorKind>)> = self
            .images
            .into_par_iter()
            .map(|Located { source, line, item }| {
                (source, line, convert_image(item, &header.detector_id, &self.options.aliases))
            })
            .collect();
        let mut images = Vec::with_capacity(converted.len());
        let mut image_ids = HashSet::new();
        let mut samples: HashMap<String, HashSet<u32>> = HashMap::new();
        for (source, line, result) in converted {
            let image = match result {
                Ok(image) => image,
                Err(kind) => {
                    errors.push(err(source, line, kind));
                    continue;
                }
            };
            let kind = if !prompt_ids.contains(&image.prompt_id) {
                Some(LineErrorKind::UnknownPromptId(image.prompt_id.clone()))
            } else if image_ids.contains(&image.image_id) {
                Some(LineErrorKind::DuplicateImageId(image.image_id.clone()))
            } else if samples.get(&image.prompt_id).is_some_and(|s| s.contains(&image.sample_index)) {
                Some(LineErrorKind::DuplicateSample(image.prompt_id.clone(), image.sample_index))
            } else {
                None
            };
            match kind {
                Some(kind) => errors.push(err(source, line, kind)),
                None => {
                    image_ids.insert(image.image_id.clone());
                    samples.entry(image.prompt_id.clone()).or_default().insert(image.sample_index);
                    images.push(image);
                }
            }
        }

        errors.sort_by(|a, b| (&a.source, a.line).cmp(&(&b.source, b.line)));
        let records = prompts.len() + images.len();
        debug_assert_eq!(records + errors.len(), self.body_lines);
        if !errors.is_empty() && !self.options.lenient {
            return Err(IngestError::InvalidLines { errors, records, body_lines: self.body_lines });
        }
        let corpus = AuditCorpus::new(header.run_id.clone(), header.metadata(), prompts, images)?;
        Ok(IngestReport { corpus, body_lines: self.body_lines, records, skipped: errors })
    }
}

/// Strictly parses a single record stream.
pub fn parse_records(text: &str) -> Result<AuditCorpus, IngestError> {
    let mut ingester = RecordIngester::new(IngestOptions::default());
    ingester.add_str("<input>", text)?;
    Ok(ingester.finish()?.corpus)
}

/// Serializes a corpus as a record stream: header, prompts, then images,
/// each in id order.
pub fn write_records(corpus: &AuditCorpus, mut out: impl Write) -> std::io::Result<()> {
    let meta = corpus.metadata();
    let header = WireHeader {
        schema_version: SCHEMA_VERSION,
        run_id: corpus.run_id().to_owned(),
        generator_id: meta.generator_id.clone(),
        detector_id: meta.detector_id.clone(),
        k_nominal: meta.k_nominal,
        created_at: meta.created_at.clone(),
        config_digest: Some(meta.config_digest.clone()),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for prompt in corpus.prompts().values() {
        write_prompt_line(prompt, &mut out)?;
    }
    for image in corpus.images().values() {
        let mut value = serde_json::to_value(image)?;
        value["kind"] = "image".into();
        serde_json::to_writer(&mut out, &value)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes one `prompt` wire line.
pub fn write_prompt_line(prompt: &PromptRecord, mut out: impl Write) -> std::io::Result<()> {
    let mut value = serde_json::to_value(WirePrompt {
        prompt_id: prompt.prompt_id.clone(),
        text: prompt.text.clone(),
        weight: prompt.weight,
        provenance: prompt.provenance,
    })?;
    value["kind"] = "prompt".into();
    serde_json::to_writer(&mut out, &value)?;
    out.write_all(b"\n")
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory followed by a rename.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        write(&mut buf)?;
        buf.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_corpus(corpus: &AuditCorpus, destination: &Path) -> Result<(), IngestError> {
    write_atomic(destination, |out| write_records(corpus, out))?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<AuditCorpus, IngestError> {
    let file = std::fs::File::open(path)?;
    let mut ingester = RecordIngester::new(IngestOptions::default());
    ingester.add_reader(&path.display().to_string(), std::io::BufReader::new(file))?;
    Ok(ingester.finish()?.corpus)
}
