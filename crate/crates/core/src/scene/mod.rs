//! Procedural product catalog, webshop-grid scenes, and patch compositing.

mod grid;
pub mod io;
mod render;

pub use grid::{
    build_scene, compose, compose_pixels, empty_scene, render_products, sample_eval_grids,
    sample_validation_grids, slot_mask, swap_distractor,
};
pub use render::{decode_tile, render_tile, TILE_SIZE};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{labels, RngState};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("catalog of {count} products cannot cover {needed} (optimization + validation + test) entries")]
    CountTooSmall { count: usize, needed: usize },
    #[error("catalog supports at most {max} products, got {count}")]
    CountTooLarge { count: usize, max: usize },
    #[error("distractor pool is empty")]
    EmptyPool,
    #[error("test split has {available} products of category {category:?}, need {needed}")]
    InsufficientTestProducts {
        category: String,
        available: usize,
        needed: usize,
    },
    #[error("unknown product id {0}")]
    UnknownProduct(u32),
    #[error("{what}: extent mismatch, expected {expected:?}, got {got:?}")]
    ExtentMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed catalog record at line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },
    #[error("image error on {path}: {msg}")]
    Image { path: String, msg: String },
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

pub type Result<T> = std::result::Result<T, SceneError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Distractor pool used during attack optimization (the paper's D).
    Optimization,
    /// Held-out distractors for candidate validation.
    Validation,
    /// Evaluation-only products; targets and eval-grid distractors.
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProductSpec {
    pub id: u32,
    /// Full product name as an ordered word list; always contains the brand.
    pub name: Vec<String>,
    pub brand: String,
    pub category: String,
    /// Visual quality feature in [0,1]; rendered as logo luminance.
    pub quality: f32,
    pub split: Split,
}

impl ProductSpec {
    pub fn display_name(&self) -> String {
        self.name.join(" ")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Catalog {
    pub products: Vec<ProductSpec>,
}

const BRANDS: &[&str] = &[
    "Auric", "Borell", "Cadenza", "Drumlin", "Eastvale", "Fenwick", "Gossamer", "Halcyon",
    "Ironwood", "Juniper", "Kestrel", "Larkspur",
];
const AUDIENCES: &[&str] = &["Men", "Women"];
const COLORS: &[&str] = &[
    "Black", "White", "Olive", "Navy", "Crimson", "Slate", "Amber", "Teal",
];
const MODELS: &[&str] = &[
    "Apex", "Nova", "Drift", "Pulse", "Vector", "Summit", "Orbit", "Ridge",
];
const CATEGORIES: &[&str] = &[
    "Sneakers", "Watches", "Totes", "Shades", "Caps", "Scarves", "Belts", "Boots", "Gloves",
    "Jackets",
];

/// Products representable by the 8-bit barcode strip.
pub const MAX_PRODUCTS: usize = 256;

/// Distinct quality levels; spacing 1/QUALITY_LEVELS.
pub const QUALITY_LEVELS: usize = 10;

/// Index of a category name in the fixed category list; the victim's
/// query token for the category.
pub fn category_index(name: &str) -> Option<usize> {
    CATEGORIES.iter().position(|c| *c == name)
}

pub fn n_categories() -> usize {
    CATEGORIES.len()
}

impl Catalog {
    /// Deterministic procedural catalog. Categories are assigned round-robin
    /// (`id % categories`), qualities are distinct values drawn uniformly
    /// from a 1/count grid, and the test split is stratified per category so
    /// same-category evaluation grids stay feasible.
    pub fn generate(seed: u64, count: usize, categories: usize, n_slots: usize) -> Result<Catalog> {
        let d_size = 5 * n_slots - 1;
        let val_size = 5;
        // at least one full grid of test products on top of D and validation
        let needed = d_size + val_size + n_slots;
        if count < needed {
            return Err(SceneError::CountTooSmall { count, needed });
        }
        if count > MAX_PRODUCTS {
            return Err(SceneError::CountTooLarge {
                count,
                max: MAX_PRODUCTS,
            });
        }
        let categories = categories.clamp(1, CATEGORIES.len());
        let mut rng = RngState::new(seed, labels::DATA_GEN).substream("catalog");

        // qualities drawn uniformly from a coarse ten-level grid: the victim
        // must compare logo luminances across tiles, and a 0.1 spacing keeps
        // that comparison learnable at toy scale
        let mut qualities: Vec<f32> = (0..count)
            .map(|i| (i % QUALITY_LEVELS) as f32 / QUALITY_LEVELS as f32 + 0.05)
            .collect();
        rng.shuffle(&mut qualities);

        let mut products = Vec::with_capacity(count);
        for id in 0..count {
            let cat = CATEGORIES[id % categories];
            let brand = BRANDS[rng.below(BRANDS.len())];
            let audience = AUDIENCES[rng.below(AUDIENCES.len())];
            let color = COLORS[rng.below(COLORS.len())];
            let model = MODELS[rng.below(MODELS.len())];
            let name = vec![
                brand.to_string(),
                audience.to_string(),
                model.to_string(),
                color.to_string(),
                cat.to_string(),
            ];
            products.push(ProductSpec {
                id: id as u32,
                name,
                brand: brand.to_string(),
                category: cat.to_string(),
                quality: qualities[id],
                split: Split::Optimization, // reassigned below
            });
        }

        // Stratified test split first: spread the test quota evenly across
        // categories so every category keeps enough eval distractors.
        let test_size = count - d_size - val_size;
        let mut by_cat: Vec<Vec<usize>> = vec![Vec::new(); categories];
        for (i, p) in products.iter().enumerate() {
            let c = i % categories;
            debug_assert_eq!(CATEGORIES[c], p.category);
            by_cat[c].push(i);
        }
        for v in &mut by_cat {
            rng.shuffle(v);
        }
        let mut test_ids = Vec::with_capacity(test_size);
        let mut cursor = vec![0usize; categories];
        'outer: loop {
            for c in 0..categories {
                if test_ids.len() == test_size {
                    break 'outer;
                }
                if cursor[c] < by_cat[c].len() {
                    test_ids.push(by_cat[c][cursor[c]]);
                    cursor[c] += 1;
                }
            }
        }
        for &i in &test_ids {
            products[i].split = Split::Test;
        }
        let mut rest: Vec<usize> = (0..count).filter(|i| !test_ids.contains(i)).collect();
        rng.shuffle(&mut rest);
        for (k, &i) in rest.iter().enumerate() {
            products[i].split = if k < val_size {
                Split::Validation
            } else {
                Split::Optimization
            };
        }

        let catalog = Catalog { products };
        catalog.assert_split_hygiene();
        Ok(catalog)
    }

    pub fn product(&self, id: u32) -> Result<&ProductSpec> {
        self.products
            .iter()
            .find(|p| p.id == id)
            .ok_or(SceneError::UnknownProduct(id))
    }

    pub fn split_ids(&self, split: Split) -> Vec<u32> {
        self.products
            .iter()
            .filter(|p| p.split == split)
            .map(|p| p.id)
            .collect()
    }

    pub fn optimization_pool(&self) -> Vec<u32> {
        self.split_ids(Split::Optimization)
    }

    pub fn validation_pool(&self) -> Vec<u32> {
        self.split_ids(Split::Validation)
    }

    pub fn test_pool(&self) -> Vec<u32> {
        self.split_ids(Split::Test)
    }

    pub fn test_pool_of_category(&self, category: &str) -> Vec<u32> {
        self.products
            .iter()
            .filter(|p| p.split == Split::Test && p.category == category)
            .map(|p| p.id)
            .collect()
    }

    /// Ids are unique and the three pools are pairwise disjoint; asserted at
    /// load and after generation.
    pub fn assert_split_hygiene(&self) {
        let mut seen = std::collections::HashSet::new();
        for p in &self.products {
            assert!(seen.insert(p.id), "duplicate product id {}", p.id);
            assert!(
                p.name.contains(&p.brand),
                "product {} name does not contain brand",
                p.id
            );
        }
    }
}

/// Pixel-rect slot geometry of the shopping grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub tile: usize,
    /// (y0, x0) of each slot.
    pub slots: Vec<(usize, usize)>,
}

impl GridLayout {
    /// The default desk-scale layout: 48x240 canvas, five 36x36 tiles at
    /// x-offsets {6,54,102,150,198}, y-offset 6. Deliberately misaligned
    /// with the 8-pixel patch grid so boundary cells only partially overlap
    /// the tiles.
    pub fn default_five() -> GridLayout {
        GridLayout {
            canvas_h: 48,
            canvas_w: 240,
            tile: 36,
            slots: (0..5).map(|n| (6, 6 + 48 * n)).collect(),
        }
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slot_box(&self, n: usize) -> BoundingBox {
        let (y0, x0) = self.slots[n];
        BoundingBox {
            min_x: x0 as f64,
            min_y: y0 as f64,
            max_x: (x0 + self.tile) as f64,
            max_y: (y0 + self.tile) as f64,
        }
    }

    pub fn slot_center(&self, n: usize) -> (f64, f64) {
        let b = self.slot_box(n);
        ((b.min_x + b.max_x) / 2.0, (b.min_y + b.max_y) / 2.0)
    }
}

/// Axis-aligned pixel rectangle; containment is inclusive on all edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BoundingBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }
}

/// A shopping-grid environment image: N-1 rendered distractors and one
/// empty target slot, plus the swap version counter.
#[derive(Debug, Clone)]
pub struct GridScene {
    pub layout: GridLayout,
    /// I_bg as (h, w, 3) in [0,1]; the target slot holds background pixels.
    pub background: Vec<f32>,
    /// Swap version counter m.
    pub version: u64,
    /// Slot -> distractor product id; `None` exactly at the target slot.
    pub assignment: Vec<Option<u32>>,
    pub target_slot: usize,
}

pub const CANVAS_BG: f32 = 0.94;
