//! The selection-success evaluation protocol: grid sampling, output
//! parsing, matching scores with invalid-run exclusion, SSR aggregation
//! with Wilson intervals, positional-bias tables, temperature sweeps, and
//! transfer comparisons.

mod parse;
mod score;

pub use parse::{levenshtein, parse_tokens, parse_transcript, words_of, ParsedOutput};
pub use score::{
    coord_match, match_score, name_match, success_score, wilson_interval, MatchScore,
    SuccessOutcome,
};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{labels, RngState};
use crate::scene::{self, compose_pixels, sample_eval_grids, Catalog, GridLayout, GridScene};
use crate::vlm::{DecodeResult, OutputFormat, SelectionQuery, Selector};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Vlm(#[from] crate::vlm::VlmError),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed report at {path} line {line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Matching-score threshold tau.
    pub tau: f64,
    pub temperature: f32,
    /// Repetitions of each grid position.
    pub reps: usize,
    pub seed: u64,
    pub format: OutputFormat,
    pub use_trajectory: bool,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tau: 0.6,
            temperature: 0.7,
            reps: 5,
            seed: 0,
            format: OutputFormat::Name,
            use_trajectory: true,
            threads: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(format!("tau {} outside (0,1]", self.tau));
        }
        if self.temperature < 0.0 {
            return Err(format!("negative temperature {}", self.temperature));
        }
        if self.reps == 0 {
            return Err("reps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionStats {
    pub position: usize,
    pub successes: usize,
    pub valid: usize,
    pub invalid: usize,
    pub ssr: Option<f64>,
    pub ci95: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTranscript {
    pub grid_index: usize,
    pub position: usize,
    pub tokens: Vec<u32>,
    pub parsed: ParsedOutput,
    pub outcome: SuccessOutcome,
}

/// The artifact's headline output: SSR over valid runs plus everything
/// needed to audit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub target_id: u32,
    pub format: OutputFormat,
    pub temperature: f32,
    pub seed: u64,
    pub config_hash: String,
    /// None when every run was invalid.
    pub ssr: Option<f64>,
    pub successes: usize,
    pub valid: usize,
    pub invalid: usize,
    pub total: usize,
    pub ci95: (f64, f64),
    pub per_position: Vec<PositionStats>,
    #[serde(skip)]
    pub transcripts: Vec<GridTranscript>,
}

impl EvalReport {
    pub fn valid_rate(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.valid as f64 / self.total as f64
    }
}

/// Scores one grid: composes the patch into the target slot, decodes,
/// parses, and applies the uniqueness-and-threshold success rule against
/// every displayed product.
pub fn score_grid<M: Selector + ?Sized>(
    selector: &M,
    catalog: &Catalog,
    scene: &GridScene,
    target_id: u32,
    patch: &[f32],
    query: &SelectionQuery,
    temperature: f32,
    tau: f64,
    rng: &mut RngState,
) -> Result<(SuccessOutcome, DecodeResult, ParsedOutput)> {
    let (canvas, _) = compose_pixels(patch, scene.target_slot, scene);
    let decoded = selector.decode(query, &canvas, temperature, rng)?;
    let parsed = parse_tokens(decoded.tokens(), selector.config(), catalog);
    let outcome = score_parsed(catalog, scene, target_id, &parsed, tau)?;
    Ok((outcome, decoded, parsed))
}

/// Success rule applied to an already-parsed output.
pub fn score_parsed(
    catalog: &Catalog,
    scene: &GridScene,
    target_id: u32,
    parsed: &ParsedOutput,
    tau: f64,
) -> Result<SuccessOutcome> {
    let layout = &scene.layout;
    let mut scores = Vec::with_capacity(layout.n_slots());
    let mut target_index = None;
    for slot in 0..layout.n_slots() {
        let pid = if slot == scene.target_slot {
            target_index = Some(scores.len());
            target_id
        } else {
            match scene.assignment[slot] {
                Some(id) => id,
                None => continue, // empty slot displays nothing
            }
        };
        let product = catalog.product(pid)?;
        scores.push(match_score(parsed, product, &layout.slot_box(slot)));
    }
    let target_index = target_index.expect("target slot scored");
    Ok(success_score(parsed, &scores, target_index, tau))
}

/// The full protocol: reps-per-position grids, sampling decode, SSR over
/// valid runs with per-position breakdown and Wilson intervals.
pub fn evaluate_ssr<M: Selector + Sync + ?Sized>(
    selector: &M,
    catalog: &Catalog,
    layout: &GridLayout,
    target_id: u32,
    patch: &[f32],
    cfg: &EvalConfig,
    label: &str,
    config_hash: &str,
) -> Result<EvalReport> {
    let target = catalog.product(target_id)?;
    let stream = format!("eval/{label}/{target_id}/{}", cfg.temperature);
    let mut grid_rng = RngState::new(cfg.seed, labels::SAMPLING).substream(&stream);
    let scenes = sample_eval_grids(catalog, layout, target_id, cfg.reps, &mut grid_rng)?;
    let query = SelectionQuery {
        category_index: scene::category_index(&target.category).expect("known category"),
        format: cfg.format,
        use_trajectory: cfg.use_trajectory,
    };

    let worker = |gi: usize, scene: &GridScene| -> Result<GridTranscript> {
        let mut rng =
            RngState::new(cfg.seed, labels::SAMPLING).substream(&format!("{stream}/decode/{gi}"));
        let (outcome, decoded, parsed) = score_grid(
            selector,
            catalog,
            scene,
            target_id,
            patch,
            &query,
            cfg.temperature,
            cfg.tau,
            &mut rng,
        )?;
        Ok(GridTranscript {
            grid_index: gi,
            position: scene.target_slot,
            tokens: decoded.tokens().to_vec(),
            parsed,
            outcome,
        })
    };

    let transcripts: Vec<GridTranscript> = if cfg.threads <= 1 {
        let mut out = Vec::with_capacity(scenes.len());
        for (gi, scene) in scenes.iter().enumerate() {
            out.push(worker(gi, scene)?);
        }
        out
    } else {
        let chunk = scenes.len().div_ceil(cfg.threads);
        let mut slots: Vec<Option<Result<GridTranscript>>> = Vec::new();
        slots.resize_with(scenes.len(), || None);
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (wi, part) in scenes.chunks(chunk).enumerate() {
                let worker = &worker;
                handles.push((
                    wi,
                    scope.spawn(move || {
                        part.iter()
                            .enumerate()
                            .map(|(j, scene)| worker(wi * chunk + j, scene))
                            .collect::<Vec<_>>()
                    }),
                ));
            }
            for (wi, h) in handles {
                for (j, r) in h.join().expect("eval worker").into_iter().enumerate() {
                    slots[wi * chunk + j] = Some(r);
                }
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("slot filled"))
            .collect::<Result<Vec<_>>>()?
    };

    Ok(aggregate(
        transcripts,
        layout.n_slots(),
        label,
        target_id,
        cfg,
        config_hash,
    ))
}

fn aggregate(
    transcripts: Vec<GridTranscript>,
    n_slots: usize,
    label: &str,
    target_id: u32,
    cfg: &EvalConfig,
    config_hash: &str,
) -> EvalReport {
    let mut successes = 0usize;
    let mut valid = 0usize;
    let mut invalid = 0usize;
    let mut per_pos = vec![(0usize, 0usize, 0usize); n_slots];
    for t in &transcripts {
        let slot = &mut per_pos[t.position];
        match t.outcome {
            SuccessOutcome::Success => {
                successes += 1;
                valid += 1;
                slot.0 += 1;
                slot.1 += 1;
            }
            SuccessOutcome::Failure => {
                valid += 1;
                slot.1 += 1;
            }
            SuccessOutcome::Invalid => {
                invalid += 1;
                slot.2 += 1;
            }
        }
    }
    let per_position = per_pos
        .into_iter()
        .enumerate()
        .map(|(position, (s, v, i))| PositionStats {
            position,
            successes: s,
            valid: v,
            invalid: i,
            ssr: (v > 0).then(|| s as f64 / v as f64),
            ci95: wilson_interval(s, v),
        })
        .collect();
    EvalReport {
        label: label.to_string(),
        target_id,
        format: cfg.format,
        temperature: cfg.temperature,
        seed: cfg.seed,
        config_hash: config_hash.to_string(),
        ssr: (valid > 0).then(|| successes as f64 / valid as f64),
        successes,
        valid,
        invalid,
        total: transcripts.len(),
        ci95: wilson_interval(successes, valid),
        per_position,
        transcripts,
    }
}

/// SSR-by-position table aggregated over a set of reports sharing a layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionalBias {
    pub per_position: Vec<PositionStats>,
}

pub fn positional_bias(reports: &[&EvalReport]) -> PositionalBias {
    let n_slots = reports
        .iter()
        .map(|r| r.per_position.len())
        .max()
        .unwrap_or(0);
    let mut acc = vec![(0usize, 0usize, 0usize); n_slots];
    for r in reports {
        for p in &r.per_position {
            acc[p.position].0 += p.successes;
            acc[p.position].1 += p.valid;
            acc[p.position].2 += p.invalid;
        }
    }
    PositionalBias {
        per_position: acc
            .into_iter()
            .enumerate()
            .map(|(position, (s, v, i))| PositionStats {
                position,
                successes: s,
                valid: v,
                invalid: i,
                ssr: (v > 0).then(|| s as f64 / v as f64),
                ci95: wilson_interval(s, v),
            })
            .collect(),
    }
}

/// Runs the protocol once per temperature; decode seeds are re-derived per
/// temperature through the stream label.
pub fn temperature_sweep<M: Selector + Sync + ?Sized>(
    selector: &M,
    catalog: &Catalog,
    layout: &GridLayout,
    target_id: u32,
    patch: &[f32],
    temps: &[f32],
    base: &EvalConfig,
    label: &str,
    config_hash: &str,
) -> Result<Vec<EvalReport>> {
    temps
        .iter()
        .map(|&t| {
            let cfg = EvalConfig {
                temperature: t,
                ..base.clone()
            };
            evaluate_ssr(
                selector,
                catalog,
                layout,
                target_id,
                patch,
                &cfg,
                &format!("{label}/temp-{t}"),
                config_hash,
            )
        })
        .collect()
}

/// Table 2's default temperature grid.
pub const TEMPERATURE_GRID: [f32; 5] = [0.0, 0.2, 0.5, 0.7, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub source: EvalReport,
    pub transfer: EvalReport,
    /// SSR(source) - SSR(transfer): the performance drop.
    pub drop: Option<f64>,
}

/// Evaluates the same patch on the optimization model and a fine-tuned
/// clone, reporting both SSRs and the drop. Both evaluations share the same
/// grids and decode streams so the comparison is paired; identical models
/// yield a drop of exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn transfer_eval<A: Selector + Sync + ?Sized, B: Selector + Sync + ?Sized>(
    source: &A,
    transfer: &B,
    catalog: &Catalog,
    layout: &GridLayout,
    target_id: u32,
    patch: &[f32],
    cfg: &EvalConfig,
    label: &str,
    config_hash: &str,
) -> Result<TransferReport> {
    let mut source_report =
        evaluate_ssr(source, catalog, layout, target_id, patch, cfg, label, config_hash)?;
    let mut transfer_report =
        evaluate_ssr(transfer, catalog, layout, target_id, patch, cfg, label, config_hash)?;
    source_report.label = format!("{label}/source");
    transfer_report.label = format!("{label}/transfer");
    let drop = match (source_report.ssr, transfer_report.ssr) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    Ok(TransferReport {
        source: source_report,
        transfer: transfer_report,
        drop,
    })
}

// ---- persistence -----------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine {
    Summary(EvalReport),
    Transcript(GridTranscript),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Line-delimited records: one summary line, then one line per grid
/// transcript so every run stays auditable.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let summary = serde_json::to_string(&ReportLine::Summary(report.clone())).expect("serializes");
    writeln!(w, "{summary}").map_err(io_err(path))?;
    for t in &report.transcripts {
        let line =
            serde_json::to_string(&ReportLine::Transcript(t.clone())).expect("serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut summary: Option<EvalReport> = None;
    let mut transcripts = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ReportLine =
            serde_json::from_str(&line).map_err(|e| EvalError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        match parsed {
            ReportLine::Summary(r) => summary = Some(r),
            ReportLine::Transcript(t) => transcripts.push(t),
        }
    }
    let mut report = summary.ok_or_else(|| EvalError::Malformed {
        path: path.display().to_string(),
        line: 0,
        msg: "missing summary record".into(),
    })?;
    report.transcripts = transcripts;
    Ok(report)
}

/// Human-readable summary table.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let ssr = report
        .ssr
        .map(|v| format!("{:.1}%", v * 100.0))
        .unwrap_or_else(|| "undefined (no valid runs)".into());
    out.push_str(&format!(
        "{} target={} format={:?} temp={} | SSR {} ({} / {} valid, {} invalid) CI95 [{:.3}, {:.3}]\n",
        report.label,
        report.target_id,
        report.format,
        report.temperature,
        ssr,
        report.successes,
        report.valid,
        report.invalid,
        report.ci95.0,
        report.ci95.1,
    ));
    out.push_str("  position |   SSR   | success/valid | invalid\n");
    for p in &report.per_position {
        let ssr = p
            .ssr
            .map(|v| format!("{:6.1}%", v * 100.0))
            .unwrap_or_else(|| "   --  ".into());
        out.push_str(&format!(
            "      {}    | {} | {:4}/{:<4}     | {}\n",
            p.position + 1,
            ssr,
            p.successes,
            p.valid,
            p.invalid
        ));
    }
    out
}
