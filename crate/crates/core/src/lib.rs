//! Desk-scale laboratory for attention-concentration patch attacks.
//!
//! The crate is organized around a small dependency chain: [`autodiff`]
//! provides dense f32 tensors with a reverse-mode tape, [`scene`] renders a
//! procedural product catalog into shopping-grid canvases, [`vlm`] is a
//! miniature decoder-only multimodal transformer that serves as the
//! white-box victim, [`attack`] optimizes an L∞-bounded adversarial patch
//! against it, and [`eval`] measures selection success rates.

pub mod attack;
pub mod autodiff;
pub mod eval;
pub mod rng;
pub mod scene;
pub mod vlm;
