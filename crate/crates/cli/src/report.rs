//! Reads the JSON summary of a finished run and prints it as a table.

use std::path::Path;

use crate::run::{EstimatorSummary, Summary};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn load_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("missing run artifacts: {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn removal_line(name: &str, s: &EstimatorSummary) -> String {
    if s.removals == 0 {
        format!("{name} removals: none")
    } else {
        format!(
            "{name} removals: {} ({})",
            s.removals,
            s.removed_channels.join(", ")
        )
    }
}

/// Renders the summary the way `report` prints it.
pub fn render(summary: &Summary) -> String {
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };

    line(format!(
        "scenario {}  seed {}  estimator {}  horizon {}  lnr {}",
        summary.scenario,
        summary.seed,
        summary.estimator,
        summary.horizon,
        if summary.lnr { "on" } else { "off" }
    ));
    line(format!(
        "{} samples at {:.6} s spacing; estimates compared from sample {}",
        summary.samples, summary.sample_dt, summary.first_compared_instant
    ));
    line(format!("window dimension {}", summary.window_dim));
    line(String::new());

    let mut header = format!("{:>4}", "node");
    if summary.mhe.is_some() {
        header.push_str(&format!("  {:>13}", "mse_mhe"));
    }
    if summary.sse.is_some() {
        header.push_str(&format!("  {:>13}", "mse_sse"));
    }
    line(header);
    for i in 0..summary.nodes {
        let mut row = format!("{:>4}", i + 1);
        if let Some(m) = &summary.mhe {
            row.push_str(&format!("  {:>13.6e}", m.mse[i]));
        }
        if let Some(s) = &summary.sse {
            row.push_str(&format!("  {:>13.6e}", s.mse[i]));
        }
        line(row);
    }
    line(String::new());

    let mut iters = String::from("mean gauss-newton iterations:");
    if let Some(m) = &summary.mhe {
        iters.push_str(&format!(" mhe {:.2}", m.mean_iterations));
    }
    if let Some(s) = &summary.sse {
        iters.push_str(&format!(" sse {:.2}", s.mean_iterations));
    }
    line(iters);

    if let Some(m) = &summary.mhe {
        line(removal_line("mhe", m));
    }
    if let Some(s) = &summary.sse {
        line(removal_line("sse", s));
    }
    if let Some(msg) = &summary.sse_unobservable {
        line(format!("sse: unobservable ({msg})"));
    }
    out
}

/// Prints the run summary; with `json` the raw document instead of the table.
pub fn print_report(dir: &Path, json: bool) -> Result<()> {
    if json {
        let path = dir.join("summary.json");
        let text = std::fs::read_to_string(&path).map_err(|e| {
            CliError::Config(format!("missing run artifacts: {}: {e}", path.display()))
        })?;
        print!("{text}");
        return Ok(());
    }
    let summary = load_summary(dir)?;
    print!("{}", render(&summary));
    Ok(())
}
