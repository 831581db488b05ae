//! The end-to-end attack loop: reference-output query, warm start, the
//! multi-position main optimization with distractor swaps and candidate
//! tracking, held-out validation, and quantized output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::apgd::{apgd_step, project_patch, StepSizeState};
use super::objective::{
    adv_loss, ce_loss, psi_visual_per_token, select_active_heads, select_tokens_timg,
};
use super::pcgrad::pcgrad;
use super::quantize::{quantize_patch, QuantizedPatch};
use super::tracker::{Candidate, CandidateTracker};
use super::{AttackConfig, AttackError, Result};
use crate::autodiff::Tape;
use crate::rng::{labels, RngState};
use crate::scene::{
    self, build_scene, compose, compose_pixels, empty_scene, render_tile,
    sample_validation_grids, swap_distractor, Catalog, GridLayout, GridScene,
};
use crate::vlm::{
    greedy_decode, tok, ImageSource, Model, OutputFormat, PrefixCache, SelectionQuery,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    /// Attention-concentration objective.
    Prac,
    /// Cross-entropy toward the reference output.
    Ce,
}

impl AttackMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Prac => "prac",
            AttackMethod::Ce => "ce",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warm,
    Main,
}

/// One optimization step, as persisted to the run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub per_position_loss: Vec<f32>,
    pub mean_loss: f32,
    pub eta: f32,
    pub swapped: bool,
    /// Background version m in effect.
    pub version: u64,
    /// Mean attention ratio Psi(T_img,P)/Psi(T_img,V) over positions.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub iteration: usize,
    pub window: u64,
    pub mean_loss: f32,
    pub validation_ssr: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLog {
    pub method: AttackMethod,
    pub target_id: u32,
    pub seed: u64,
    pub epsilon: f32,
    pub ablation: Vec<String>,
    pub t_ref: Vec<u32>,
    pub warm_steps: usize,
    pub warm_position: Option<usize>,
    /// Prior images cached in the prefix (0 under the no-trajectory mode).
    pub prefix_images: usize,
    pub prefix_len: usize,
    pub pcgrad_bypassed: bool,
    pub swap_iterations: Vec<usize>,
    pub halvings_warm: Vec<usize>,
    pub halvings_main: Vec<usize>,
    pub candidates: Vec<CandidateSummary>,
    pub chosen_iteration: Option<usize>,
    pub validation_ssr: Option<f64>,
    pub warnings: Vec<String>,
    pub records: Vec<LogRecord>,
}

pub struct RunArtifacts {
    pub final_patch: QuantizedPatch,
    pub clean_patch: Vec<f32>,
    pub log: RunLog,
}

struct PositionEval {
    loss: f32,
    grad: Vec<f32>,
    ratio: Option<f64>,
    warning: Option<String>,
}

/// Per-position scenes sharing one distractor assignment: the same ordered
/// distractors fill every slot except the target position.
fn position_scenes(
    catalog: &Catalog,
    layout: &GridLayout,
    distractors: &[u32],
    version: u64,
) -> Result<Vec<GridScene>> {
    (0..layout.n_slots())
        .map(|n| {
            let mut s = build_scene(catalog, layout, n, distractors)?;
            s.version = version;
            Ok(s)
        })
        .collect()
}

fn ordered_distractors(canonical: &GridScene) -> Vec<u32> {
    canonical.assignment.iter().flatten().copied().collect()
}

/// Loss and patch gradient at one grid position.
#[allow(clippy::too_many_arguments)]
fn eval_position(
    model: &Model,
    prefix: &PrefixCache,
    query: &SelectionQuery,
    t_ref: &[u32],
    scene: &GridScene,
    x_adv: &[f32],
    config: &AttackConfig,
    method: AttackMethod,
) -> Result<PositionEval> {
    let mut tape = Tape::new();
    let tile = scene.layout.tile;
    let patch_id = tape.leaf(x_adv.to_vec(), &[tile, tile, 3])?;
    let (canvas, mask) = compose(&mut tape, patch_id, scene.target_slot, scene)?;
    let capture = matches!(method, AttackMethod::Prac);
    let out = model.forward_suffix(
        &mut tape,
        prefix,
        query,
        &ImageSource::Node {
            canvas,
            mask: Some(&mask),
        },
        t_ref,
        capture,
    )?;

    let mut warning = None;
    let mut ratio = None;
    let loss_node = match method {
        AttackMethod::Prac => {
            let record = out.record.as_ref().expect("captured");
            let psi = psi_visual_per_token(&tape, record)?;
            let (t_img, zero_fallback) =
                select_tokens_timg(&psi, config.p_img, config.ablation.no_timg);
            if zero_fallback {
                warning = Some("all-zero visual attention; T_img fell back to T_ref".into());
            }
            let rows: Vec<usize> = t_img.iter().map(|&i| record.output_rows[i]).collect();
            let heads = select_active_heads(
                &tape,
                record,
                &rows,
                config.alpha_act,
                config.ablation.no_head_active,
                config.ablation.second_last_layer_only,
            )?;
            if heads.fallback {
                warning = Some("no head exceeded alpha_act; fell back to all heads".into());
            }
            // diagnostic: attention ratio aggregated over all heads/layers
            let mut r = 0.0f64;
            for &t in &rows {
                let mut p_mass = 0.0f64;
                let mut v_mass = 0.0f64;
                for l in 0..record.n_layers() {
                    for h in 0..record.n_heads() {
                        p_mass += super::objective::attention_mass(
                            &tape,
                            record,
                            l,
                            h,
                            t,
                            &record.vision_map.patch_set,
                        )? as f64;
                        v_mass += super::objective::attention_mass(
                            &tape,
                            record,
                            l,
                            h,
                            t,
                            &record.vision_map.vision_set,
                        )? as f64;
                    }
                }
                r += p_mass / v_mass.max(1e-12);
            }
            ratio = Some(r / rows.len() as f64);
            adv_loss(&mut tape, record, &rows, &heads, config.guard)?
        }
        AttackMethod::Ce => ce_loss(&mut tape, &out, t_ref)?,
    };
    let loss = tape.value(loss_node);
    tape.backward(loss_node)?;
    let grad = tape.grad(patch_id).expect("patch gradient").to_vec();
    Ok(PositionEval {
        loss,
        grad,
        ratio,
        warning,
    })
}

/// Evaluates several positions, optionally across worker threads; results
/// come back in position order either way.
#[allow(clippy::too_many_arguments)]
fn eval_positions(
    model: &Model,
    prefix: &PrefixCache,
    query: &SelectionQuery,
    t_ref: &[u32],
    scenes: &[GridScene],
    positions: &[usize],
    x_adv: &[f32],
    config: &AttackConfig,
    method: AttackMethod,
) -> Result<Vec<PositionEval>> {
    let workers = config.threads.max(1).min(positions.len().max(1));
    if workers <= 1 {
        return positions
            .iter()
            .map(|&n| eval_position(model, prefix, query, t_ref, &scenes[n], x_adv, config, method))
            .collect();
    }
    let chunk = positions.len().div_ceil(workers);
    let mut slots: Vec<Option<Result<PositionEval>>> = Vec::new();
    slots.resize_with(positions.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (wi, part) in positions.chunks(chunk).enumerate() {
            handles.push((
                wi,
                scope.spawn(move || {
                    part.iter()
                        .map(|&n| {
                            eval_position(
                                model, prefix, query, t_ref, &scenes[n], x_adv, config, method,
                            )
                        })
                        .collect::<Vec<_>>()
                }),
            ));
        }
        for (wi, h) in handles {
            for (j, r) in h.join().expect("position worker").into_iter().enumerate() {
                slots[wi * chunk + j] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}

/// Single-position, fixed-distractor initialization run. Returns the
/// best-loss iterate.
#[allow(clippy::too_many_arguments)]
pub fn warm_start(
    model: &Model,
    prefix: &PrefixCache,
    query: &SelectionQuery,
    t_ref: &[u32],
    scenes: &[GridScene],
    position: usize,
    x_clean: &[f32],
    x_init: &[f32],
    config: &AttackConfig,
    method: AttackMethod,
    log: &mut RunLog,
) -> Result<Vec<f32>> {
    let steps = config.warm_steps(scenes.len());
    let mut state = StepSizeState::new(config.eta_init, steps);
    let mut x = x_init.to_vec();
    let mut best = x.clone();
    let mut best_loss = f32::NEG_INFINITY;
    for i in 0..steps {
        let evals = eval_positions(
            model,
            prefix,
            query,
            t_ref,
            scenes,
            &[position],
            &x,
            config,
            method,
        )?;
        let e = &evals[0];
        if !e.loss.is_finite() {
            return Err(AttackError::NonFiniteLoss {
                iteration: i,
                phase: Phase::Warm,
            });
        }
        note_warning(log, &evals);
        if e.loss > best_loss {
            best_loss = e.loss;
            best.copy_from_slice(&x);
        }
        let halved = state.observe(i, e.loss);
        if halved {
            x.copy_from_slice(&best);
        }
        log.records.push(LogRecord {
            iteration: i,
            phase: Phase::Warm,
            per_position_loss: vec![e.loss],
            mean_loss: e.loss,
            eta: state.eta,
            swapped: false,
            version: 0,
            ratio: e.ratio,
        });
        x = apgd_step(&x, &e.grad, state.eta, x_clean, config.epsilon);
    }
    log.halvings_warm = state.halvings.clone();
    Ok(best)
}

fn note_warning(log: &mut RunLog, evals: &[PositionEval]) {
    for e in evals {
        if let Some(w) = &e.warning {
            if !log.warnings.contains(w) {
                log.warnings.push(w.clone());
            }
        }
    }
}

/// Runs the full attack (either method) against one target product.
pub fn run_attack(
    model: &Model,
    catalog: &Catalog,
    layout: &GridLayout,
    target_id: u32,
    config: &AttackConfig,
    method: AttackMethod,
) -> Result<RunArtifacts> {
    config.validate()?;
    let target = catalog.product(target_id)?;
    let n = layout.n_slots();
    let x_clean = render_tile(target);
    let query = SelectionQuery {
        category_index: scene::category_index(&target.category).expect("known category"),
        format: OutputFormat::Name,
        use_trajectory: !config.ablation.no_trajectory,
    };

    let scope = format!("{}/{target_id}", method.name());
    let mut init_rng = RngState::new(config.seed, labels::INIT_NOISE).substream(&scope);
    let mut swap_rng = RngState::new(config.seed, labels::DISTRACTOR_SWAP).substream(&scope);
    let mut pcgrad_rng = RngState::new(config.seed, labels::PCGRAD_ORDER).substream(&scope);

    let mut log = RunLog {
        method,
        target_id,
        seed: config.seed,
        epsilon: config.epsilon,
        ablation: config.ablation.active().iter().map(|s| s.to_string()).collect(),
        t_ref: Vec::new(),
        warm_steps: 0,
        warm_position: None,
        prefix_images: 0,
        prefix_len: 0,
        pcgrad_bypassed: config.ablation.avg_grad,
        swap_iterations: Vec::new(),
        halvings_warm: Vec::new(),
        halvings_main: Vec::new(),
        candidates: Vec::new(),
        chosen_iteration: None,
        validation_ssr: None,
        warnings: Vec::new(),
        records: Vec::new(),
    };

    // reference output: the victim's greedy decision with only the target
    // displayed, queried at the middle slot
    let ref_scene = empty_scene(layout, n / 2);
    let (ref_canvas, _) = compose_pixels(&x_clean, n / 2, &ref_scene);
    let decoded = greedy_decode(model, &query, &ref_canvas)?;
    let mut t_ref = decoded.sequence.tokens.clone();
    if t_ref.is_empty() {
        t_ref = vec![tok::SEL, model.config.id_token(target_id)];
        log.warnings
            .push("empty reference decode; fell back to the nominal selection tokens".into());
    }
    log.t_ref = t_ref.clone();

    // conversation prefix, computed once
    let blank = model.blank_frame();
    let prior: Vec<&[f32]> = if query.use_trajectory {
        vec![&blank]
    } else {
        Vec::new()
    };
    let prefix = model.build_prefix(&query, &prior)?;
    log.prefix_images = prior.len();
    log.prefix_len = prefix.len();

    // initial background: distinct distractors drawn from the optimization
    // pool; the canonical scene carries the assignment between swaps
    let pool = catalog.optimization_pool();
    let picks = swap_rng.sample_without_replacement(pool.len(), n - 1);
    let initial: Vec<u32> = picks.into_iter().map(|i| pool[i]).collect();
    let mut canonical = build_scene(catalog, layout, 0, &initial)?;
    let mut scenes = position_scenes(catalog, layout, &initial, canonical.version)?;

    // x' = x + delta_rand, projected
    let delta: Vec<f32> = (0..x_clean.len())
        .map(|_| init_rng.uniform(-config.epsilon, config.epsilon))
        .collect();
    let noisy: Vec<f32> = x_clean.iter().zip(delta.iter()).map(|(&a, &b)| a + b).collect();
    let mut x_adv = project_patch(&noisy, &x_clean, config.epsilon);

    if !config.ablation.no_init {
        let position = init_rng.below(n);
        log.warm_position = Some(position);
        log.warm_steps = config.warm_steps(n);
        x_adv = warm_start(
            model, &prefix, &query, &t_ref, &scenes, position, &x_clean, &x_adv, config, method,
            &mut log,
        )?;
    }

    // main optimization over all positions
    let mut state = StepSizeState::new(config.eta_init, config.n_iter);
    let mut tracker = CandidateTracker::new(config.n_iter, config.candidate_window_start);
    let mut x_best = x_adv.clone();
    let mut best_loss = f32::NEG_INFINITY;
    let positions: Vec<usize> = (0..n).collect();

    for i in 0..config.n_iter {
        let mut swapped = false;
        if i % config.swap_interval == 0 {
            tracker.close_window();
            swap_distractor(&mut canonical, &pool, catalog, &mut swap_rng)?;
            let current = ordered_distractors(&canonical);
            scenes = position_scenes(catalog, layout, &current, canonical.version)?;
            log.swap_iterations.push(i);
            swapped = true;
        }

        let evals = eval_positions(
            model, &prefix, &query, &t_ref, &scenes, &positions, &x_adv, config, method,
        )?;
        note_warning(&mut log, &evals);
        let losses: Vec<f32> = evals.iter().map(|e| e.loss).collect();
        let mut mean_loss = 0.0f32;
        for &l in &losses {
            if !l.is_finite() {
                return Err(AttackError::NonFiniteLoss {
                    iteration: i,
                    phase: Phase::Main,
                });
            }
            mean_loss += l;
        }
        mean_loss /= n as f32;
        let ratio = if evals.iter().all(|e| e.ratio.is_some()) {
            Some(evals.iter().map(|e| e.ratio.unwrap()).sum::<f64>() / n as f64)
        } else {
            None
        };

        tracker.observe(i, mean_loss, &x_adv, canonical.version);
        if mean_loss > best_loss {
            best_loss = mean_loss;
            x_best.copy_from_slice(&x_adv);
        }

        let grads: Vec<Vec<f32>> = evals.into_iter().map(|e| e.grad).collect();
        let g = pcgrad(&grads, config.ablation.avg_grad, &mut pcgrad_rng);

        let halved = state.observe(i, mean_loss);
        if halved {
            x_adv.copy_from_slice(&x_best);
        }
        x_adv = apgd_step(&x_adv, &g, state.eta, &x_clean, config.epsilon);

        log.records.push(LogRecord {
            iteration: i,
            phase: Phase::Main,
            per_position_loss: losses,
            mean_loss,
            eta: state.eta,
            swapped,
            version: canonical.version,
            ratio,
        });
    }
    tracker.close_window();
    log.halvings_main = state.halvings.clone();

    // held-out validation over the candidate set
    let mut candidates = std::mem::take(&mut tracker.candidates);
    if candidates.is_empty() {
        log.warnings
            .push("empty candidate set; validating the final iterate".into());
        candidates.push(Candidate {
            patch: x_adv.clone(),
            mean_loss: best_loss,
            iteration: config.n_iter.saturating_sub(1),
            window: canonical.version,
        });
    }
    let mut val_rng = RngState::new(config.seed, labels::SAMPLING)
        .substream(&format!("validation/{scope}"));
    let grids = sample_validation_grids(catalog, layout, config.validation_grids, &mut val_rng)?;
    let (chosen, ssrs) =
        validate_candidates(model, catalog, layout, target_id, &candidates, &grids, &query, config.threads)?;
    log.candidates = candidates
        .iter()
        .zip(ssrs.iter())
        .map(|(c, &ssr)| CandidateSummary {
            iteration: c.iteration,
            window: c.window,
            mean_loss: c.mean_loss,
            validation_ssr: ssr,
        })
        .collect();
    log.chosen_iteration = Some(candidates[chosen].iteration);
    log.validation_ssr = ssrs[chosen];

    let final_patch = quantize_patch(&candidates[chosen].patch);
    Ok(RunArtifacts {
        final_patch,
        clean_patch: x_clean,
        log,
    })
}

/// Scores every candidate's quantized patch by greedy-decode SSR over the
/// validation grids at all positions; the maximum wins and exact ties go to
/// the latest iteration.
#[allow(clippy::too_many_arguments)]
pub fn validate_candidates(
    model: &Model,
    catalog: &Catalog,
    layout: &GridLayout,
    target_id: u32,
    candidates: &[Candidate],
    validation_sets: &[Vec<u32>],
    query: &SelectionQuery,
    threads: usize,
) -> Result<(usize, Vec<Option<f64>>)> {
    assert!(!candidates.is_empty());
    let score_one = |c: &Candidate| -> Result<Option<f64>> {
        let q = quantize_patch(&c.patch);
        let mut successes = 0usize;
        let mut valid = 0usize;
        for set in validation_sets {
            for position in 0..layout.n_slots() {
                let scene = build_scene(catalog, layout, position, set)?;
                let mut rng = RngState::new(0, "validation-greedy");
                let (outcome, _, _) = crate::eval::score_grid(
                    model,
                    catalog,
                    &scene,
                    target_id,
                    &q.reloaded,
                    query,
                    0.0,
                    0.6,
                    &mut rng,
                )?;
                match outcome {
                    crate::eval::SuccessOutcome::Success => {
                        successes += 1;
                        valid += 1;
                    }
                    crate::eval::SuccessOutcome::Failure => valid += 1,
                    crate::eval::SuccessOutcome::Invalid => {}
                }
            }
        }
        Ok((valid > 0).then(|| successes as f64 / valid as f64))
    };

    let workers = threads.max(1).min(candidates.len());
    let ssrs: Vec<Option<f64>> = if workers <= 1 {
        candidates.iter().map(score_one).collect::<Result<_>>()?
    } else {
        let chunk = candidates.len().div_ceil(workers);
        let mut slots: Vec<Option<Result<Option<f64>>>> = Vec::new();
        slots.resize_with(candidates.len(), || None);
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (wi, part) in candidates.chunks(chunk).enumerate() {
                let score_one = &score_one;
                handles.push((
                    wi,
                    scope.spawn(move || part.iter().map(score_one).collect::<Vec<_>>()),
                ));
            }
            for (wi, h) in handles {
                for (j, r) in h.join().expect("validation worker").into_iter().enumerate() {
                    slots[wi * chunk + j] = Some(r);
                }
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("slot filled"))
            .collect::<Result<_>>()?
    };

    let mut chosen = 0usize;
    for (i, ssr) in ssrs.iter().enumerate() {
        let better = match (ssr, &ssrs[chosen]) {
            (Some(a), Some(b)) => {
                a > b || (a == b && candidates[i].iteration > candidates[chosen].iteration)
            }
            (Some(_), None) => true,
            (None, None) => candidates[i].iteration > candidates[chosen].iteration,
            (None, Some(_)) => false,
        };
        if better {
            chosen = i;
        }
    }
    Ok((chosen, ssrs))
}

/// Greedy reference output for a target shown alone at the middle slot.
fn reference_tokens(
    model: &Model,
    layout: &GridLayout,
    query: &SelectionQuery,
    x_clean: &[f32],
) -> Result<Vec<u32>> {
    let n = layout.n_slots();
    let ref_scene = empty_scene(layout, n / 2);
    let (ref_canvas, _) = compose_pixels(x_clean, n / 2, &ref_scene);
    Ok(greedy_decode(model, query, &ref_canvas)?.sequence.tokens)
}

/// End-to-end finite-difference oracle: compares the analytic patch
/// gradient of the chosen objective against central differences at
/// `samples` random pixels, skipping coordinates whose gradient is buried
/// beneath the f32 probe noise. Returns the worst relative error.
#[allow(clippy::too_many_arguments)]
pub fn end_to_end_fd_check(
    model: &Model,
    catalog: &Catalog,
    layout: &GridLayout,
    scene: &GridScene,
    target_id: u32,
    patch: &[f32],
    method: AttackMethod,
    samples: usize,
    rng: &mut RngState,
) -> Result<f64> {
    let target = catalog.product(target_id)?;
    let query = SelectionQuery {
        category_index: scene::category_index(&target.category).expect("known category"),
        format: OutputFormat::Name,
        use_trajectory: true,
    };
    let x_clean = render_tile(target);
    let mut t_ref = reference_tokens(model, layout, &query, &x_clean)?;
    if t_ref.is_empty() {
        t_ref = vec![tok::SEL, model.config.id_token(target_id)];
    }
    let blank = model.blank_frame();
    let prefix = model.build_prefix(&query, &[&blank])?;
    let config = AttackConfig::default();

    let eval = |p: &[f32]| -> Result<PositionEval> {
        eval_position(model, &prefix, &query, &t_ref, scene, p, &config, method)
    };
    let base = eval(patch)?;
    let grad = &base.grad;
    let max_g = grad.iter().fold(0.0f32, |m, &g| m.max(g.abs()));
    // pixels carrying less than 2% of the peak gradient measure only probe
    // noise at f32 precision
    let floor = 0.02 * max_g;
    let h = 2.0 / 255.0;
    let mut worst = 0.0f64;
    let mut probed = 0usize;
    let mut guard = 0usize;
    while probed < samples {
        guard += 1;
        if guard > samples * 200 {
            return Err(AttackError::InvalidConfig(
                "could not find enough informative pixels for the fd check".into(),
            ));
        }
        let i = rng.below(patch.len());
        if grad[i].abs() < floor {
            continue;
        }
        let mut plus = patch.to_vec();
        plus[i] += h;
        let mut minus = patch.to_vec();
        minus[i] -= h;
        let fd = (eval(&plus)?.loss as f64 - eval(&minus)?.loss as f64) / (2.0 * h as f64);
        let a = grad[i] as f64;
        let rel = (a - fd).abs() / a.abs().max(1e-8);
        if rel > worst {
            worst = rel;
        }
        probed += 1;
    }
    Ok(worst)
}

/// A captured forward of a noisy clean tile composed into the scene; test
/// harness for the selection oracles.
pub fn captured_forward(
    model: &Model,
    catalog: &Catalog,
    scene: &GridScene,
    target_id: u32,
    noise: f32,
) -> Result<(Tape, crate::vlm::AttentionRecord)> {
    let target = catalog.product(target_id)?;
    let query = SelectionQuery {
        category_index: scene::category_index(&target.category).expect("known category"),
        format: OutputFormat::Name,
        use_trajectory: false,
    };
    let x_clean = render_tile(target);
    let mut rng = RngState::new(target_id as u64, "captured-forward");
    let patch: Vec<f32> = x_clean
        .iter()
        .map(|&v| (v + rng.uniform(-noise, noise)).clamp(0.0, 1.0))
        .collect();
    let t_ref = vec![tok::SEL, model.config.id_token(target_id)];
    let prefix = model.build_prefix(&query, &[])?;
    let mut tape = Tape::new();
    let tile = scene.layout.tile;
    let patch_id = tape.leaf(patch, &[tile, tile, 3])?;
    let (canvas, mask) = compose(&mut tape, patch_id, scene.target_slot, scene)?;
    let out = model.forward_suffix(
        &mut tape,
        &prefix,
        &query,
        &ImageSource::Node {
            canvas,
            mask: Some(&mask),
        },
        &t_ref,
        true,
    )?;
    let record = out.record.expect("captured");
    Ok((tape, record))
}

/// Run log persistence: one summary line, then one line per step record.
pub fn write_run_log(path: &Path, log: &RunLog) -> Result<()> {
    let io_err = |source: std::io::Error| AttackError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let summary = RunLog {
        records: Vec::new(),
        ..log.clone()
    };
    writeln!(
        w,
        "{}",
        serde_json::to_string(&summary).expect("log serializes")
    )
    .map_err(io_err)?;
    for r in &log.records {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io_err)?;
    }
    Ok(())
}
