//! Report assembly: aggregates every evaluation report in an artifact
//! directory into comparison tables. Rows are keyed by label and config
//! hash; reports whose hashes conflict under one label stay separate rows
//! and missing cells render as absent.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;

use attnlab_core::eval::{self, EvalReport, PositionalBias};

pub fn cmd_report(dir: &Path) -> Result<()> {
    let mut reports: Vec<EvalReport> = Vec::new();
    if dir.is_dir() {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .map(|n| n.to_string_lossy().ends_with(".report.jsonl"))
                    .unwrap_or(false)
            })
            .collect();
        paths.sort();
        for p in paths {
            match eval::read_report(&p) {
                Ok(r) => reports.push(r),
                Err(e) => eprintln!("warning: skipping {}: {e}", p.display()),
            }
        }
    }
    if reports.is_empty() {
        eprintln!(
            "warning: no reports found under {}; nothing to tabulate",
            dir.display()
        );
        return Ok(());
    }

    let text = render_tables(&reports);
    print!("{text}");
    std::fs::write(dir.join("summary.txt"), &text)?;
    Ok(())
}

/// Base label: anything before the first '/' (temperature sweeps and
/// transfer runs suffix their labels).
fn base_label(label: &str) -> &str {
    label.split('/').next().unwrap_or(label)
}

fn render_tables(reports: &[EvalReport]) -> String {
    let mut out = String::new();

    // rows keyed by (base label, config hash); conflicting hashes under one
    // label surface as separate rows rather than being merged
    let mut groups: BTreeMap<(String, String), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((base_label(&r.label).to_string(), r.config_hash.clone()))
            .or_default()
            .push(r);
    }

    out.push_str("== selection success rate ==\n");
    out.push_str(&format!(
        "{:<28} {:>10} {:>8} {:>10} {:>12} {:>10}\n",
        "label", "hash", "targets", "mean SSR", "valid rate", "grids"
    ));
    for ((label, hash), rs) in &groups {
        let successes: usize = rs.iter().map(|r| r.successes).sum();
        let valid: usize = rs.iter().map(|r| r.valid).sum();
        let total: usize = rs.iter().map(|r| r.total).sum();
        let mut targets: Vec<u32> = rs.iter().map(|r| r.target_id).collect();
        targets.sort_unstable();
        targets.dedup();
        let ssr = if valid > 0 {
            format!("{:9.1}%", successes as f64 / valid as f64 * 100.0)
        } else {
            "        --".into()
        };
        let valid_rate = if total > 0 {
            format!("{:11.1}%", valid as f64 / total as f64 * 100.0)
        } else {
            "         --".into()
        };
        out.push_str(&format!(
            "{:<28} {:>10} {:>8} {ssr} {valid_rate} {:>10}\n",
            truncate(label, 28),
            &hash[..8.min(hash.len())],
            targets.len(),
            total
        ));
    }

    // SSR by grid position, per label group
    out.push_str("\n== SSR by grid position ==\n");
    for ((label, hash), rs) in &groups {
        let bias = eval::positional_bias(&rs.iter().copied().collect::<Vec<_>>());
        out.push_str(&format!("{} [{}]\n", label, &hash[..8.min(hash.len())]));
        out.push_str(&render_positional(&bias));
    }

    // temperature rows, when any sweep reports are present
    let sweeps: Vec<&EvalReport> = reports
        .iter()
        .filter(|r| r.label.contains("/temp-"))
        .collect();
    if !sweeps.is_empty() {
        out.push_str("\n== SSR by temperature ==\n");
        let mut by_temp: BTreeMap<(String, String), Vec<&EvalReport>> = BTreeMap::new();
        for r in &sweeps {
            by_temp
                .entry((base_label(&r.label).to_string(), format!("{}", r.temperature)))
                .or_default()
                .push(r);
        }
        for ((label, temp), rs) in &by_temp {
            let successes: usize = rs.iter().map(|r| r.successes).sum();
            let valid: usize = rs.iter().map(|r| r.valid).sum();
            let ssr = if valid > 0 {
                format!("{:6.1}%", successes as f64 / valid as f64 * 100.0)
            } else {
                "    --".into()
            };
            out.push_str(&format!("{label:<28} T={temp:<5} {ssr}\n"));
        }
    }
    out
}

pub fn render_positional(bias: &PositionalBias) -> String {
    let mut out = String::new();
    out.push_str("  position |   SSR   |  CI95          | valid\n");
    for p in &bias.per_position {
        let ssr = p
            .ssr
            .map(|v| format!("{:6.1}%", v * 100.0))
            .unwrap_or_else(|| "    --".into());
        out.push_str(&format!(
            "      {}    | {} | [{:.3}, {:.3}] | {}\n",
            p.position + 1,
            ssr,
            p.ci95.0,
            p.ci95.1,
            p.valid
        ));
    }
    out
}

fn truncate(s: &str, n: usize) -> String {
    if s.len() <= n {
        s.to_string()
    } else {
        format!("{}…", &s[..n - 1])
    }
}
