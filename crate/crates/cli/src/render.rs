use std::fmt::Write;

use concept_audit::CoocTable;
use concept_audit_server::PartnerList;

use crate::commands::FlagReport;

fn pct(p: f64) -> String {
    format!("{:.2}%", p * 100.0)
}

pub fn partners_markdown(list: &PartnerList) -> String {
    let mut md = format!(
        "# Co-occurrence partners of `{}` ({})\n\nRanked by {}.\n\n",
        list.concept, list.run_id, list.metric
    );
    md.push_str("| partner | images | support | confidence | lift |\n|---|---:|---:|---:|---:|\n");
    for p in &list.partners {
        let _ = writeln!(md, "| {} | {} | {} | {:.4} | {:.4} |", p.concept, p.joint_count, pct(p.support), p.confidence, p.lift);
    }
    md
}

pub fn pairs_markdown(table: &CoocTable) -> String {
    let mut md = format!(
        "# Concept pairs\n\n{} images, minimum support {}.\n\n",
        table.total_images,
        pct(table.min_support)
    );
    md.push_str("| a | b | images | support | conf a→b | conf b→a | lift |\n|---|---|---:|---:|---:|---:|---:|\n");
    for r in &table.rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {:.4} | {:.4} | {:.4} |",
            r.a,
            r.b,
            r.joint_count,
            pct(r.support),
            r.confidence_a_to_b,
            r.confidence_b_to_a,
            r.lift
        );
    }
    md
}

pub fn flags_markdown(report: &FlagReport) -> String {
    let mut md = format!("# Watchlist scan: {}\n\n", report.run_id);
    if report.findings.is_empty() {
        md.push_str("Watchlist is empty.\n");
        return md;
    }
    for f in &report.findings {
        let _ = writeln!(md, "## {}\n\n{} images ({}).", f.concept, f.count, pct(f.p));
        if f.hits.is_empty() {
            md.push('\n');
            continue;
        }
        let _ = writeln!(md, "{} of {} prompts do not mention it.\n", f.implicit_hits, f.hits.len());
        md.push_str("| prompt | images | mentioned |\n|---|---:|---|\n");
        for h in &f.hits {
            let mentioned = if h.explicit { "yes" } else { "no" };
            let _ = writeln!(md, "| {} | {} | {} |", h.prompt_text, h.image_count, mentioned);
        }
        md.push('\n');
    }
    md
}
