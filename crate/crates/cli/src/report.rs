//! Human-readable summary over emitted artifacts: confirmed vs
//! fail-to-reject counts per method, and the causal-tree baseline's
//! held-up leaf count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::CliError;

/// Confirmation counts parsed back from a `confirmations.json` artifact.
fn confirmation_counts(path: &Path) -> Result<(usize, usize), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("missing artifact `{}`: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("artifact `{}`: {e}", path.display())))?;
    let confirmed = value["confirmed"].as_u64().unwrap_or(0) as usize;
    let total = value["total"].as_u64().unwrap_or(0) as usize;
    Ok((confirmed, total))
}

/// Held-up (stable-high) leaves out of all leaves in a verdict CSV.
fn verdict_counts(path: &Path) -> Result<(usize, usize), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("missing artifact `{}`: {e}", path.display())))?;
    let mut held = 0usize;
    let mut total = 0usize;
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        total += 1;
        if line.split(',').nth(1) == Some("stable-high") {
            held += 1;
        }
    }
    Ok((held, total))
}

/// Builds the summary text for a pipeline (or single-stage) output
/// directory.
pub fn render(dir: &Path) -> Result<String, CliError> {
    let mut out = String::new();
    let _ = writeln!(out, "two-study results");
    let _ = writeln!(out, "=================");

    let mut any = false;
    for (label, sub) in [
        ("parametric", "study2_param"),
        ("non-parametric", "study2_nonparam"),
    ] {
        let path = dir.join(sub).join("confirmations.json");
        if path.exists() {
            let (confirmed, total) = confirmation_counts(&path)?;
            any = true;
            if total == 0 {
                let _ = writeln!(out, "{label}: no stable hypotheses transported to study 2");
            } else {
                let _ = writeln!(
                    out,
                    "{label}: confirmed {confirmed}/{total}, fail-to-reject {}/{total}",
                    total - confirmed
                );
            }
        }
    }
    // Standalone study2 runs put artifacts at the top level.
    let flat = dir.join("confirmations.json");
    if flat.exists() {
        let (confirmed, total) = confirmation_counts(&flat)?;
        any = true;
        if total == 0 {
            let _ = writeln!(out, "study 2: no stable hypotheses transported");
        } else {
            let _ = writeln!(
                out,
                "study 2: confirmed {confirmed}/{total}, fail-to-reject {}/{total}",
                total - confirmed
            );
        }
    }

    for (label, path) in [
        ("study 1 parametric", dir.join("study1_param/verdicts.csv")),
        (
            "study 1 non-parametric",
            dir.join("study1_nonparam/verdicts.csv"),
        ),
    ] {
        if path.exists() {
            let (high, total) = verdict_counts(&path)?;
            any = true;
            let _ = writeln!(out, "{label}: {high}/{total} leaves stable high-impact");
        }
    }

    let ct = dir.join("causal_tree/verdicts.csv");
    if ct.exists() {
        let (held, total) = verdict_counts(&ct)?;
        any = true;
        let _ = writeln!(
            out,
            "causal-tree baseline: {held}/{total} leaves hold on validation"
        );
    }

    if !any {
        return Err(CliError::Data(format!(
            "no report artifacts found under `{}`",
            dir.display()
        )));
    }
    Ok(out)
}

/// Writes `report.txt` into the directory and echoes it to stdout.
pub fn report(dir: &Path) -> Result<(), CliError> {
    let text = render(dir)?;
    fs::write(dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
