//! Scene assembly, patch compositing, the distractor swap schedule, and
//! evaluation-grid sampling.

use super::render::{render_tile, TILE_SIZE};
use super::{Catalog, GridLayout, GridScene, Result, SceneError, Split, CANVAS_BG};
use crate::autodiff::{Tape, TensorId};
use crate::rng::RngState;

fn blank_canvas(layout: &GridLayout) -> Vec<f32> {
    vec![CANVAS_BG; layout.canvas_h * layout.canvas_w * 3]
}

fn blit_tile(canvas: &mut [f32], layout: &GridLayout, slot: usize, tile: &[f32]) {
    let (y0, x0) = layout.slots[slot];
    let w = layout.canvas_w;
    for ty in 0..TILE_SIZE {
        let dst = ((y0 + ty) * w + x0) * 3;
        canvas[dst..dst + TILE_SIZE * 3].copy_from_slice(&tile[ty * TILE_SIZE * 3..(ty + 1) * TILE_SIZE * 3]);
    }
}

fn clear_slot(canvas: &mut [f32], layout: &GridLayout, slot: usize) {
    let (y0, x0) = layout.slots[slot];
    let w = layout.canvas_w;
    for ty in 0..TILE_SIZE {
        let dst = ((y0 + ty) * w + x0) * 3;
        for v in &mut canvas[dst..dst + TILE_SIZE * 3] {
            *v = CANVAS_BG;
        }
    }
}

/// Builds a scene with the given distractors filling every slot except
/// `target_slot`, which stays empty. `distractors` are placed in slot order.
pub fn build_scene(
    catalog: &Catalog,
    layout: &GridLayout,
    target_slot: usize,
    distractors: &[u32],
) -> Result<GridScene> {
    let n = layout.n_slots();
    assert!(target_slot < n, "target slot {target_slot} of {n}");
    if distractors.len() != n - 1 {
        return Err(SceneError::ExtentMismatch {
            what: "build_scene distractors",
            expected: vec![n - 1],
            got: vec![distractors.len()],
        });
    }
    let mut background = blank_canvas(layout);
    let mut assignment = vec![None; n];
    let mut di = 0;
    for slot in 0..n {
        if slot == target_slot {
            continue;
        }
        let product = catalog.product(distractors[di])?;
        blit_tile(&mut background, layout, slot, &render_tile(product));
        assignment[slot] = Some(product.id);
        di += 1;
    }
    Ok(GridScene {
        layout: layout.clone(),
        background,
        version: 0,
        assignment,
        target_slot,
    })
}

/// Pastes the patch into the target slot on the tape, returning the canvas
/// node and the boolean adversarial mask. Gradients flow into the patch
/// only; every pixel outside the slot is a constant.
pub fn compose(
    tape: &mut Tape,
    patch: TensorId,
    slot: usize,
    scene: &GridScene,
) -> Result<(TensorId, Vec<bool>)> {
    let layout = &scene.layout;
    let expected = [TILE_SIZE, TILE_SIZE, 3];
    if tape.shape(patch) != expected {
        return Err(SceneError::ExtentMismatch {
            what: "compose patch",
            expected: expected.to_vec(),
            got: tape.shape(patch).to_vec(),
        });
    }
    let (y0, x0) = layout.slots[slot];
    let canvas = tape.paste(
        &scene.background,
        &[layout.canvas_h, layout.canvas_w, 3],
        patch,
        y0,
        x0,
    )?;
    Ok((canvas, slot_mask(layout, slot)))
}

/// Plain pixel compositing for evaluation paths that need no gradients.
pub fn compose_pixels(patch: &[f32], slot: usize, scene: &GridScene) -> (Vec<f32>, Vec<bool>) {
    debug_assert_eq!(patch.len(), TILE_SIZE * TILE_SIZE * 3);
    let layout = &scene.layout;
    let mut canvas = scene.background.clone();
    let (y0, x0) = layout.slots[slot];
    let w = layout.canvas_w;
    for ty in 0..TILE_SIZE {
        let dst = ((y0 + ty) * w + x0) * 3;
        canvas[dst..dst + TILE_SIZE * 3]
            .copy_from_slice(&patch[ty * TILE_SIZE * 3..(ty + 1) * TILE_SIZE * 3]);
    }
    (canvas, slot_mask(layout, slot))
}

pub fn slot_mask(layout: &GridLayout, slot: usize) -> Vec<bool> {
    let mut mask = vec![false; layout.canvas_h * layout.canvas_w];
    let (y0, x0) = layout.slots[slot];
    for ty in 0..TILE_SIZE {
        for tx in 0..TILE_SIZE {
            mask[(y0 + ty) * layout.canvas_w + x0 + tx] = true;
        }
    }
    mask
}

/// Replaces one uniformly chosen occupied distractor slot with a fresh draw
/// from the pool and bumps the version counter. The replacement avoids
/// products already on display so tiles stay distinct within a grid.
pub fn swap_distractor(scene: &mut GridScene, pool: &[u32], catalog: &Catalog, rng: &mut RngState) -> Result<()> {
    if pool.is_empty() {
        return Err(SceneError::EmptyPool);
    }
    let occupied: Vec<usize> = (0..scene.layout.n_slots())
        .filter(|&s| scene.assignment[s].is_some())
        .collect();
    debug_assert!(!occupied.is_empty());
    let slot = occupied[rng.below(occupied.len())];
    let displayed: Vec<u32> = scene.assignment.iter().flatten().copied().collect();
    let candidates: Vec<u32> = pool
        .iter()
        .copied()
        .filter(|id| !displayed.contains(id))
        .collect();
    // degenerate pools fall back to any pool member
    let pick = if candidates.is_empty() {
        pool[rng.below(pool.len())]
    } else {
        candidates[rng.below(candidates.len())]
    };
    let product = catalog.product(pick)?;
    let layout = scene.layout.clone();
    clear_slot(&mut scene.background, &layout, slot);
    blit_tile(&mut scene.background, &layout, slot, &render_tile(product));
    scene.assignment[slot] = Some(pick);
    scene.version += 1;
    Ok(())
}

/// Samples the evaluation protocol's grid set: the target occupies every
/// slot exactly `reps` times, distractors drawn per grid without
/// replacement from same-category test products.
pub fn sample_eval_grids(
    catalog: &Catalog,
    layout: &GridLayout,
    target_id: u32,
    reps: usize,
    rng: &mut RngState,
) -> Result<Vec<GridScene>> {
    let target = catalog.product(target_id)?;
    let n = layout.n_slots();
    let pool: Vec<u32> = catalog
        .test_pool_of_category(&target.category)
        .into_iter()
        .filter(|&id| id != target_id)
        .collect();
    if pool.len() < n - 1 {
        return Err(SceneError::InsufficientTestProducts {
            category: target.category.clone(),
            available: pool.len(),
            needed: n - 1,
        });
    }
    let mut scenes = Vec::with_capacity(n * reps);
    for position in 0..n {
        for rep in 0..reps {
            let mut grid_rng = rng.substream(&format!("grid/{position}/{rep}"));
            let picks = grid_rng.sample_without_replacement(pool.len(), n - 1);
            let distractors: Vec<u32> = picks.into_iter().map(|i| pool[i]).collect();
            scenes.push(build_scene(catalog, layout, position, &distractors)?);
        }
    }
    Ok(scenes)
}

/// Distinct validation grids: each draws N-1 distractors from the held-out
/// validation pool. Used to score attack candidates.
pub fn sample_validation_grids(
    catalog: &Catalog,
    layout: &GridLayout,
    count: usize,
    rng: &mut RngState,
) -> Result<Vec<Vec<u32>>> {
    let pool = catalog.split_ids(Split::Validation);
    let n = layout.n_slots();
    if pool.len() < n - 1 {
        return Err(SceneError::InsufficientTestProducts {
            category: "validation".into(),
            available: pool.len(),
            needed: n - 1,
        });
    }
    let mut grids = Vec::with_capacity(count);
    for g in 0..count {
        let mut grid_rng = rng.substream(&format!("val-grid/{g}"));
        let picks = grid_rng.sample_without_replacement(pool.len(), n - 1);
        grids.push(picks.into_iter().map(|i| pool[i]).collect());
    }
    Ok(grids)
}

/// Renders an arbitrary slot -> product placement onto a blank canvas;
/// training scenes use this directly.
pub fn render_products(
    catalog: &Catalog,
    layout: &GridLayout,
    placements: &[(usize, u32)],
) -> Result<Vec<f32>> {
    let mut canvas = blank_canvas(layout);
    for &(slot, id) in placements {
        let product = catalog.product(id)?;
        blit_tile(&mut canvas, layout, slot, &render_tile(product));
    }
    Ok(canvas)
}

/// A scene with every slot empty; composing a tile onto it yields the
/// single-product canvas used for the reference-output query.
pub fn empty_scene(layout: &GridLayout, target_slot: usize) -> GridScene {
    GridScene {
        layout: layout.clone(),
        background: blank_canvas(layout),
        version: 0,
        assignment: vec![None; layout.n_slots()],
        target_slot,
    }
}
