use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use concept_audit::ingest::{write_atomic, write_prompt_line, write_records, IngestReport};
use concept_audit::metrics::{check_cv_cutoff, check_tau, check_unit_interval};
use concept_audit::mining::{partners, WatchlistFinding};
use concept_audit::prompt_spec::{expand_distribution, sample_prompts, PromptDistributionSpec, PromptSpecError};
use concept_audit::report::{diff_to_markdown, report_to_markdown, to_canonical_json, CiParams, ReportError};
use concept_audit::{
    build_report, compare_runs, cooccurrence, load_corpus, normalize_label, suggest_negative_prompts, watchlist_scan,
    AliasMap, AuditCorpus, ConceptLabel, IngestError, IngestOptions, MetricsError, RecordIngester, ReportParams,
};
use concept_audit_server::{PartnerList, ServerState};
use serde::Serialize;

use crate::render;
use crate::{
    AuditArgs, CoocArgs, Command, DiffArgs, ExpandArgs, FlagArgs, Failure, Format, IngestArgs, NegativeArgs,
    OutputArgs, ServeArgs,
};

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::ExpandPrompts(args) => expand(args),
        Command::Ingest(args) => ingest(args),
        Command::Audit(args) => audit(args),
        Command::Cooc(args) => cooc(args),
        Command::Flag(args) => flag(args),
        Command::Diff(args) => diff(args),
        Command::Negative(args) => negative(args),
        Command::Serve(args) => serve(args),
    }
}

impl From<MetricsError> for Failure {
    fn from(err: MetricsError) -> Self {
        match err {
            MetricsError::InvalidParameter { .. } | MetricsError::UnknownConcept(_) => Failure::Validation(err.to_string()),
            _ => Failure::Data(err.to_string()),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(err: ReportError) -> Self {
        match err {
            ReportError::Metrics(e) => e.into(),
            ReportError::OverlappingSets(_) => Failure::Validation(err.to_string()),
        }
    }
}

fn is_stdio(path: &Path) -> bool {
    path.as_os_str() == "-"
}

/// Writes an artifact to `out` atomically, or to stdout.
fn emit(out: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), Failure> {
    match out {
        Some(path) if !is_stdio(path) => {
            write_atomic(path, write).map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
        }
        _ => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)
                .and_then(|()| lock.flush())
                .map_err(|e| Failure::Data(format!("cannot write to stdout: {e}")))
        }
    }
}

fn emit_text(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    emit(out, |w| w.write_all(text.as_bytes()))
}

fn emit_formatted<T: Serialize>(output: &OutputArgs, value: &T, markdown: impl FnOnce(&T) -> String) -> Result<(), Failure> {
    let text = match output.format {
        Format::Json => to_canonical_json(value),
        Format::Md => markdown(value),
    };
    emit_text(output.out.as_deref(), &text)
}

fn ingest_failure(path: &Path, err: IngestError) -> Failure {
    if let IngestError::InvalidLines { errors, .. } = &err {
        for e in errors {
            eprintln!("{e}");
        }
    }
    Failure::Data(format!("{}: {err}", path.display()))
}

/// Loads a persisted corpus, or reads a record stream from stdin for `-`.
pub fn read_corpus(path: &Path) -> Result<AuditCorpus, Failure> {
    if is_stdio(path) {
        let mut text = String::new();
        std::io::stdin()
            .read_to_string(&mut text)
            .map_err(|e| Failure::Data(format!("cannot read stdin: {e}")))?;
        let mut ingester = RecordIngester::new(IngestOptions::default());
        return ingester
            .add_str("<stdin>", &text)
            .and_then(|()| ingester.finish())
            .map(|r| r.corpus)
            .map_err(|e| ingest_failure(path, e));
    }
    load_corpus(path).map_err(|e| ingest_failure(path, e))
}

fn label_arg(flag: &str, raw: &str) -> Result<ConceptLabel, Failure> {
    normalize_label(raw).map_err(|_| Failure::Validation(format!("--{flag} `{raw}` is empty after normalization")))
}

fn check_k(k: usize) -> Result<(), Failure> {
    if k < 1 {
        return Err(MetricsError::InvalidParameter { name: "k", value: 0.0, range: "[1,inf)" }.into());
    }
    Ok(())
}

fn expand(args: ExpandArgs) -> Result<(), Failure> {
    if args.sample == Some(0) {
        return Err(Failure::Validation(PromptSpecError::ZeroSampleSize.to_string()));
    }
    let spec_failure = |e: PromptSpecError| Failure::Data(format!("{}: {e}", args.prompt_spec.display()));
    let spec = PromptDistributionSpec::from_path(&args.prompt_spec).map_err(spec_failure)?;
    let prompts = match args.sample {
        Some(n) => sample_prompts(&spec, n, args.seed),
        None => expand_distribution(&spec),
    }
    .map_err(spec_failure)?;
    emit(args.out.as_deref(), |w| prompts.iter().try_for_each(|p| write_prompt_line(p, &mut *w)))
}

fn ingest(args: IngestArgs) -> Result<(), Failure> {
    let aliases = match &args.aliases {
        Some(path) => AliasMap::from_path(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?,
        None => AliasMap::default(),
    };
    let mut ingester = RecordIngester::new(IngestOptions { lenient: args.lenient, aliases });
    for path in &args.records {
        let added = if is_stdio(path) {
            ingester.add_reader("<stdin>", std::io::stdin().lock())
        } else {
            let file = std::fs::File::open(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
            ingester.add_reader(&path.display().to_string(), BufReader::new(file))
        };
        added.map_err(|e| ingest_failure(path, e))?;
    }
    let first = args.records[0].clone();
    let IngestReport { corpus, body_lines, records, skipped } =
        ingester.finish().map_err(|e| ingest_failure(&first, e))?;
    for e in &skipped {
        eprintln!("skipped {e}");
    }
    eprintln!(
        "ingested {records} of {body_lines} lines ({} skipped): {} prompts, {} images",
        skipped.len(),
        corpus.prompts().len(),
        corpus.image_count()
    );
    emit(args.out.as_deref(), |w| write_records(&corpus, w))
}

fn read_watchlist(path: &PathBuf) -> Result<Vec<ConceptLabel>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| normalize_label(l).ok())
        .collect())
}

fn audit(args: AuditArgs) -> Result<(), Failure> {
    check_tau(args.tau)?;
    check_cv_cutoff(args.cv_cutoff)?;
    check_k(args.k)?;
    let ci = if args.no_ci {
        None
    } else {
        if args.ci_groups < 2 {
            let value = args.ci_groups as f64;
            return Err(MetricsError::InvalidParameter { name: "ci-groups", value, range: "[2,inf)" }.into());
        }
        if args.ci_size == Some(0) {
            return Err(MetricsError::InvalidParameter { name: "ci-size", value: 0.0, range: "[1,inf)" }.into());
        }
        Some(CiParams { groups: args.ci_groups, group_size: args.ci_size, seed: args.seed })
    };
    let watchlist = match &args.watchlist {
        Some(path) => read_watchlist(path)?,
        None => Vec::new(),
    };
    let corpus = read_corpus(&args.corpus)?;
    let params = ReportParams {
        tau: args.tau,
        cv_cutoff: args.cv_cutoff,
        top_m: args.top,
        partners_k: args.k,
        partner_metric: args.metric,
        ci,
        watchlist,
        evidence_limit: args.evidence_limit,
    };
    let report = build_report(&corpus, &params)?;
    emit_formatted(&args.output, &report, report_to_markdown)
}

fn cooc(args: CoocArgs) -> Result<(), Failure> {
    check_k(args.k)?;
    check_unit_interval("min_support", args.min_support)?;
    let concept = args.concept.as_deref().map(|c| label_arg("concept", c)).transpose()?;
    let corpus = read_corpus(&args.corpus)?;
    match concept {
        Some(concept) => {
            let ranked = partners(&corpus, &concept, args.metric)?;
            let list = PartnerList {
                run_id: corpus.run_id().to_owned(),
                concept,
                metric: args.metric,
                k: args.k,
                min_support: args.min_support,
                partners: ranked.into_iter().filter(|p| p.support >= args.min_support).take(args.k).collect(),
            };
            emit_formatted(&args.output, &list, render::partners_markdown)
        }
        None => {
            let table = cooccurrence(&corpus, args.min_support)?;
            emit_formatted(&args.output, &table, render::pairs_markdown)
        }
    }
}

/// Output of `flag`.
#[derive(Debug, Serialize)]
pub struct FlagReport {
    pub schema_version: u32,
    pub run_id: String,
    pub findings: Vec<WatchlistFinding>,
}

fn flag(args: FlagArgs) -> Result<(), Failure> {
    let watchlist = read_watchlist(&args.watchlist)?;
    let corpus = read_corpus(&args.corpus)?;
    let findings = watchlist_scan(&corpus, &watchlist, args.evidence_limit)?;
    let report = FlagReport {
        schema_version: concept_audit::report::REPORT_SCHEMA_VERSION,
        run_id: corpus.run_id().to_owned(),
        findings,
    };
    emit_formatted(&args.output, &report, render::flags_markdown)
}

fn diff(args: DiffArgs) -> Result<(), Failure> {
    check_unit_interval("floor", args.floor)?;
    let a = read_corpus(&args.a)?;
    let b = read_corpus(&args.b)?;
    let diff = compare_runs(&a, &b, args.floor)?;
    emit_formatted(&args.output, &diff, diff_to_markdown)
}

fn negative(args: NegativeArgs) -> Result<(), Failure> {
    let parse = |flag: &str, raw: &[String]| -> Result<Vec<ConceptLabel>, Failure> {
        raw.iter().filter(|r| !r.trim().is_empty()).map(|r| label_arg(flag, r)).collect()
    };
    let directive = suggest_negative_prompts(&parse("attenuate", &args.attenuate)?, &parse("amplify", &args.amplify)?)?;
    emit_text(args.out.as_deref(), &to_canonical_json(&directive))
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    if let Err(e) = concept_audit_server::cors_layer(args.cors_origin.as_deref()) {
        return Err(Failure::Validation(e.to_string()));
    }
    if let Some(root) = &args.media_root {
        if !root.is_dir() {
            return Err(Failure::Validation(format!("--media-root {} is not a directory", root.display())));
        }
    }
    let corpora = args.corpus.iter().map(|p| read_corpus(p)).collect::<Result<Vec<_>, _>>()?;
    let state = ServerState::new(corpora, args.media_root.clone()).map_err(|e| Failure::Data(e.to_string()))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Data(e.to_string()))?;
    let addr = std::net::SocketAddr::new(args.host, args.port);
    runtime
        .block_on(concept_audit_server::serve(Arc::new(state), addr, args.cors_origin.as_deref()))
        .map_err(|e| Failure::Data(e.to_string()))
}
