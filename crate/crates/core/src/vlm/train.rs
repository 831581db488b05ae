//! Supervised victim training on the selection task, plus the brief
//! fine-tune that produces grey-box transfer targets.
//!
//! A training scene shows 1..N same-category products; the label is the id
//! (or click bins) of the tile with the highest quality feature, which
//! forces visual comparison across tiles.

use super::decode::greedy_decode;
use super::model::{ImageSource, Model};
use super::{tok, ModelConfig, OutputFormat, Result, SelectionQuery, VlmError};
use crate::autodiff::{AdamState, Tape};
use crate::rng::RngState;
use crate::scene::{self, render_products, Catalog, GridLayout};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total optimizer steps; 0 skips training entirely.
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub warmup: usize,
    /// Distinct training scenes to generate.
    pub scenes: usize,
    /// Fraction of examples with the blank prior frame in context.
    pub trajectory_fraction: f32,
    /// Fraction of ACTION-format examples; the rest are NAME.
    pub action_fraction: f32,
    /// Held-out scenes for the accuracy report.
    pub holdout: usize,
    /// Relative frequency of scenes showing 1..=N products.
    pub scene_size_weights: Vec<f32>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3200,
            batch: 8,
            lr: 1.5e-3,
            warmup: 150,
            scenes: 4096,
            trajectory_fraction: 0.25,
            action_fraction: 0.5,
            holdout: 240,
            scene_size_weights: vec![1.0, 1.0, 1.0, 1.0, 4.0],
            threads: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub accuracy: f64,
    pub name_accuracy: f64,
    pub action_accuracy: f64,
    pub final_loss: f32,
    pub steps_run: usize,
    /// Loss went non-finite; the returned weights are the last finite
    /// checkpoint.
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Example {
    pub canvas: Vec<f32>,
    pub query: SelectionQuery,
    /// Teacher-forced output tokens, end token included.
    pub targets: Vec<u32>,
}

/// Output tokens (without the end token) that correctly select `product`.
pub fn expected_output(
    config: &ModelConfig,
    layout: &GridLayout,
    format: OutputFormat,
    product_id: u32,
    slot: usize,
) -> Vec<u32> {
    match format {
        OutputFormat::Name => vec![tok::SEL, config.id_token(product_id)],
        OutputFormat::Action => {
            let (cx, cy) = layout.slot_center(slot);
            vec![
                tok::CLK,
                config.coord_token(config.pixel_to_bin(cx)),
                config.coord_token(config.pixel_to_bin(cy)),
            ]
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn make_examples(
    catalog: &Catalog,
    layout: &GridLayout,
    config: &ModelConfig,
    count: usize,
    trajectory_fraction: f32,
    action_fraction: f32,
    scene_size_weights: &[f32],
    product_pool: Option<&[u32]>,
    rng: &mut RngState,
) -> Result<Vec<Example>> {
    let n = layout.n_slots();
    // eligible products per category
    let mut by_cat: Vec<(usize, Vec<u32>)> = Vec::new();
    for p in &catalog.products {
        if let Some(pool) = product_pool {
            if !pool.contains(&p.id) {
                continue;
            }
        }
        let ci = scene::category_index(&p.category).expect("known category");
        match by_cat.iter_mut().find(|(c, _)| *c == ci) {
            Some((_, v)) => v.push(p.id),
            None => by_cat.push((ci, vec![p.id])),
        }
    }
    by_cat.sort_by_key(|(c, _)| *c);

    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let (cat_index, pool) = &by_cat[rng.below(by_cat.len())];
        // scenes weighted toward full grids, but single-product scenes must
        // occur: they are the reference-output query. Scenes whose maximum
        // quality is tied have no well-defined label and are resampled.
        let k = (rng.categorical(&scene_size_weights[..n.min(scene_size_weights.len())]) + 1)
            .min(pool.len());
        let mut products: Vec<u32>;
        let mut tries = 0;
        loop {
            let picks = rng.sample_without_replacement(pool.len(), k);
            products = picks.into_iter().map(|i| pool[i]).collect();
            let mut qs: Vec<f32> = products
                .iter()
                .map(|&id| catalog.product(id).unwrap().quality)
                .collect();
            qs.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if k == 1 || qs[0] > qs[1] + 1e-6 || tries > 20 {
                break;
            }
            tries += 1;
        }
        let slots = rng.sample_without_replacement(n, k);
        let placements: Vec<(usize, u32)> = slots.iter().copied().zip(products.iter().copied()).collect();
        let canvas = render_products(catalog, layout, &placements)?;

        let (label_slot, label_id) = placements
            .iter()
            .copied()
            .max_by(|a, b| {
                let qa = catalog.product(a.1).unwrap().quality;
                let qb = catalog.product(b.1).unwrap().quality;
                qa.partial_cmp(&qb)
                    .unwrap()
                    .then_with(|| b.1.cmp(&a.1)) // deterministic on residual ties
            })
            .unwrap();
        let format = if rng.next_f32() < action_fraction {
            OutputFormat::Action
        } else {
            OutputFormat::Name
        };
        let mut targets = expected_output(config, layout, format, label_id, label_slot);
        targets.push(tok::EOS);
        examples.push(Example {
            canvas,
            query: SelectionQuery {
                category_index: *cat_index,
                format,
                use_trajectory: rng.next_f32() < trajectory_fraction,
            },
            targets,
        });
    }
    Ok(examples)
}

/// Mean cross-entropy of the example's target tokens; returns the loss
/// value and parameter gradients in `named_params` order.
fn example_grads(model: &Model, ex: &Example) -> Result<(f32, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let blank = model.blank_frame();
    let images: Vec<ImageSource> = if ex.query.use_trajectory {
        vec![ImageSource::Pixels(&blank), ImageSource::Pixels(&ex.canvas)]
    } else {
        vec![ImageSource::Pixels(&ex.canvas)]
    };
    let (out, nodes) =
        model.forward_full_nodes(&mut tape, &ex.query, &images, &ex.targets, true, false)?;
    let n = ex.targets.len();
    let first_predict = out.out_marker_row - out.row_offset;
    let rows = tape.slice_rows(out.logits, first_predict, n)?;
    let logp = tape.log_softmax_rows(rows)?;
    let coords: Vec<(usize, usize)> = ex
        .targets
        .iter()
        .enumerate()
        .map(|(i, &t)| (i, t as usize))
        .collect();
    let picked = tape.gather2d(logp, &coords)?;
    let sum = tape.sum_all(picked);
    let loss = tape.scale(sum, -1.0 / n as f32);
    let loss_val = tape.value(loss);
    tape.backward(loss)?;
    Ok((loss_val, nodes.collect_grads(&tape)))
}

fn lr_at(tc: &TrainConfig, step: usize) -> f32 {
    let warm = if tc.warmup == 0 {
        1.0
    } else {
        ((step + 1) as f32 / tc.warmup as f32).min(1.0)
    };
    let progress = step as f32 / tc.steps.max(1) as f32;
    let cosine = 0.55 + 0.45 * (std::f32::consts::PI * progress).cos();
    tc.lr * warm * cosine
}

/// Batched gradient computation, deterministically merged in batch order
/// regardless of worker scheduling. Examples are strided across workers so
/// the long trajectory-bearing sequences spread evenly.
fn batch_grads(
    model: &Model,
    examples: &[&Example],
    threads: usize,
) -> Result<Vec<(f32, Vec<Vec<f32>>)>> {
    let workers = threads.max(1).min(examples.len().max(1));
    if workers <= 1 {
        return examples.iter().map(|ex| example_grads(model, ex)).collect();
    }
    let mut slots: Vec<Option<Result<(f32, Vec<Vec<f32>>)>>> = Vec::new();
    slots.resize_with(examples.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            let mine: Vec<(usize, &Example)> = examples
                .iter()
                .enumerate()
                .skip(w)
                .step_by(workers)
                .map(|(i, ex)| (i, *ex))
                .collect();
            handles.push(scope.spawn(move || {
                mine.into_iter()
                    .map(|(i, ex)| (i, example_grads(model, ex)))
                    .collect::<Vec<_>>()
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}

/// Trains a fresh victim on the selection task and reports held-out
/// greedy-decode accuracy.
pub fn train_selection_task(
    catalog: &Catalog,
    layout: &GridLayout,
    config: &ModelConfig,
    tc: &TrainConfig,
    seed: u64,
) -> Result<(Model, TrainReport)> {
    let mut init_rng = RngState::new(seed, "train/init");
    let mut data_rng = RngState::new(seed, "train/data");
    let mut holdout_rng = RngState::new(seed, "train/holdout");
    let model = Model::init(config.clone(), &mut init_rng)?;
    let examples = make_examples(
        catalog,
        layout,
        config,
        tc.scenes,
        tc.trajectory_fraction,
        tc.action_fraction,
        &tc.scene_size_weights,
        None,
        &mut data_rng,
    )?;
    let holdout = make_examples(
        catalog,
        layout,
        config,
        tc.holdout,
        tc.trajectory_fraction,
        tc.action_fraction,
        &tc.scene_size_weights,
        None,
        &mut holdout_rng,
    )?;
    run_training(model, examples, holdout, tc, seed)
}

fn run_training(
    mut model: Model,
    examples: Vec<Example>,
    holdout: Vec<Example>,
    tc: &TrainConfig,
    seed: u64,
) -> Result<(Model, TrainReport)> {
    let mut order_rng = RngState::new(seed, "train/order");
    let mut adam = AdamState::new(&model.weights.param_sizes(), tc.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order_rng.shuffle(&mut order);
    let mut cursor = 0usize;
    let mut final_loss = 0.0f32;
    let mut diverged = false;
    let mut steps_run = 0usize;

    for step in 0..tc.steps {
        let mut batch: Vec<&Example> = Vec::with_capacity(tc.batch);
        for _ in 0..tc.batch {
            if cursor == order.len() {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }

        let results = batch_grads(&model, &batch, tc.threads)?;
        let mut grad_sum: Option<Vec<Vec<f32>>> = None;
        let mut loss_sum = 0.0f32;
        let mut finite = true;
        for (loss, grads) in results {
            loss_sum += loss;
            finite &= loss.is_finite();
            match &mut grad_sum {
                None => grad_sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grads.iter()) {
                        for (x, y) in a.iter_mut().zip(g.iter()) {
                            *x += *y;
                        }
                    }
                }
            }
        }
        let mut grads = grad_sum.expect("nonempty batch");
        let inv = 1.0 / tc.batch as f32;
        for g in &mut grads {
            for v in g.iter_mut() {
                *v *= inv;
                finite &= v.is_finite();
            }
        }
        let mean_loss = loss_sum / tc.batch as f32;
        if !finite {
            // abort with the last finite checkpoint: updates so far are kept
            diverged = true;
            final_loss = mean_loss;
            break;
        }
        adam.lr = lr_at(tc, step);
        {
            let mut params = model.weights.params_mut();
            let mut views: Vec<&mut [f32]> =
                params.iter_mut().map(|m| m.data.as_mut_slice()).collect();
            let grad_views: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
            adam.step(&mut views, &grad_views)?;
        }
        final_loss = mean_loss;
        steps_run = step + 1;
    }

    let (accuracy, name_accuracy, action_accuracy) = measure_accuracy(&model, &holdout)?;
    Ok((
        model,
        TrainReport {
            accuracy,
            name_accuracy,
            action_accuracy,
            final_loss,
            steps_run,
            diverged,
        },
    ))
}

/// Held-out accuracy: greedy decode must reproduce the label tokens exactly.
pub(crate) fn measure_accuracy(model: &Model, holdout: &[Example]) -> Result<(f64, f64, f64)> {
    let mut hits = [0usize; 2];
    let mut counts = [0usize; 2];
    for ex in holdout {
        let decoded = greedy_decode(model, &ex.query, &ex.canvas)?;
        let want = &ex.targets[..ex.targets.len() - 1]; // strip EOS
        let fi = match ex.query.format {
            OutputFormat::Name => 0,
            OutputFormat::Action => 1,
        };
        counts[fi] += 1;
        if decoded.sequence.tokens == want {
            hits[fi] += 1;
        }
    }
    let acc = |h: usize, c: usize| if c == 0 { f64::NAN } else { h as f64 / c as f64 };
    let total = acc(hits[0] + hits[1], counts[0] + counts[1]);
    Ok((total, acc(hits[0], counts[0]), acc(hits[1], counts[1])))
}

/// Re-derives the training run's holdout scenes and measures greedy-decode
/// accuracy; lets callers re-check a cached checkpoint without retraining.
pub fn holdout_accuracy(
    catalog: &Catalog,
    layout: &GridLayout,
    model: &Model,
    tc: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let mut holdout_rng = RngState::new(seed, "train/holdout");
    let holdout = make_examples(
        catalog,
        layout,
        &model.config,
        tc.holdout,
        tc.trajectory_fraction,
        tc.action_fraction,
        &tc.scene_size_weights,
        None,
        &mut holdout_rng,
    )?;
    Ok(measure_accuracy(model, &holdout)?.0)
}

/// Briefly fine-tunes a clone on held-out (test-split) scenes, producing a
/// grey-box transfer target. Rejects runs whose accuracy collapses.
pub fn perturb_finetune(
    model: &Model,
    catalog: &Catalog,
    layout: &GridLayout,
    steps: usize,
    seed: u64,
) -> Result<(Model, f64)> {
    let tc = TrainConfig {
        steps,
        lr: 3e-4,
        warmup: 0,
        scenes: 512.min(steps.max(1) * 8),
        holdout: 160,
        ..TrainConfig::default()
    };
    let pool = catalog.test_pool();
    let mut data_rng = RngState::new(seed, "finetune/data");
    let mut holdout_rng = RngState::new(seed, "finetune/holdout");
    let examples = make_examples(
        catalog,
        layout,
        &model.config,
        tc.scenes,
        tc.trajectory_fraction,
        tc.action_fraction,
        &tc.scene_size_weights,
        Some(&pool),
        &mut data_rng,
    )?;
    let holdout = make_examples(
        catalog,
        layout,
        &model.config,
        tc.holdout,
        tc.trajectory_fraction,
        tc.action_fraction,
        &tc.scene_size_weights,
        Some(&pool),
        &mut holdout_rng,
    )?;
    let clone = Model {
        config: model.config.clone(),
        weights: model.weights.clone(),
    };
    let (tuned, report) = run_training(clone, examples, holdout, &tc, seed)?;
    if steps > 0 && report.accuracy < 0.5 {
        return Err(VlmError::AccuracyCollapse {
            accuracy: report.accuracy,
        });
    }
    Ok((tuned, report.accuracy))
}
