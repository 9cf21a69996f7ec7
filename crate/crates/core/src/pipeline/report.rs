use std::fmt::Write;

use super::PipelineReport;

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

/// Markdown tables of the run: rule precision on the test set, the label
/// ratio of each refined program against its baseline, and the share of
/// the feature space each best rule covers.
pub fn summary_markdown(r: &PipelineReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Debugging summary: {}\n", r.scenario);
    let _ = writeln!(
        s,
        "Seed {}; {} train / {} test / {} validation samples.\n",
        r.seed, r.train_size, r.test_size, r.validate_size
    );
    let _ = writeln!(
        s,
        "Baseline incorrect ratio: train {}, test {}.\n",
        pct(r.baseline.train_incorrect_ratio),
        pct(r.baseline.test_incorrect_ratio)
    );

    let _ = writeln!(s, "## Best rules\n");
    let _ = writeln!(
        s,
        "| method | target | rule | test precision | test coverage | status |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for m in &r.results {
        let (rule, prec, cov) = match &m.best {
            Some(b) => (b.to_string(), pct(b.precision), pct(b.coverage)),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let status = match &m.note {
            Some(n) => format!("{} ({n})", m.status),
            None => m.status.clone(),
        };
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            m.method,
            m.target.as_str(),
            rule,
            prec,
            cov,
            status
        );
    }

    let _ = writeln!(s, "\n## Refined programs\n");
    let _ = writeln!(
        s,
        "| method | target | baseline | refined | stabilization | feature-space coverage |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for m in &r.results {
        let Some(v) = &m.validation else { continue };
        let (base, refined) = match m.target.binary() {
            crate::evaluator::Label::Correct => (v.baseline_correct_ratio, v.correct_ratio),
            crate::evaluator::Label::Incorrect => (v.baseline_incorrect_ratio, v.incorrect_ratio),
        };
        let cov = m
            .coverage
            .map(|c| format!("{} ± {}", pct(c.estimate), pct(c.std_error)))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.3} | {} |",
            m.method,
            m.target.as_str(),
            pct(base),
            pct(refined),
            v.stabilization,
            cov
        );
    }

    if r.results.iter().any(|m| m.pattern_support.is_some()) {
        let _ = writeln!(s, "\n## Decision patterns\n");
        let _ = writeln!(s, "| label | support |");
        let _ = writeln!(s, "|---|---|");
        let mut seen = Vec::new();
        for m in &r.results {
            if let Some(sup) = m.pattern_support {
                if !seen.contains(&m.target) {
                    seen.push(m.target);
                    let _ = writeln!(s, "| {} | {:.3} |", m.target.as_str(), sup);
                }
            }
        }
    }
    s
}
