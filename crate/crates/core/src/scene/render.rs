//! Procedural tile rendering and the reference barcode decoder.
//!
//! A tile visually encodes its product id as an 8-bar color barcode and its
//! quality score as the luminance of a logo square. The decoder is the
//! test oracle for both.

use super::ProductSpec;

pub const TILE_SIZE: usize = 36;

// tile-local geometry
const BAR_Y0: usize = 3;
const BAR_Y1: usize = 13;
const BAR_X0: usize = 2;
const BAR_W: usize = 4;
const N_BARS: usize = 8;
const LOGO_Y0: usize = 17;
const LOGO_Y1: usize = 33;
const LOGO_X0: usize = 10;
const LOGO_X1: usize = 26;

const BIT_ONE: [f32; 3] = [0.82, 0.12, 0.12];
const BIT_ZERO: [f32; 3] = [0.12, 0.16, 0.80];
const FRAME: [f32; 3] = [0.25, 0.25, 0.25];
const TILE_BG: [f32; 3] = [0.86, 0.86, 0.86];

/// Renders a product as a `TILE_SIZE` x `TILE_SIZE` x 3 pixel block in [0,1].
pub fn render_tile(product: &ProductSpec) -> Vec<f32> {
    let mut px = vec![0.0f32; TILE_SIZE * TILE_SIZE * 3];
    let put = |px: &mut [f32], y: usize, x: usize, c: [f32; 3]| {
        let o = (y * TILE_SIZE + x) * 3;
        px[o..o + 3].copy_from_slice(&c);
    };
    for y in 0..TILE_SIZE {
        for x in 0..TILE_SIZE {
            let on_frame = y == 0 || x == 0 || y == TILE_SIZE - 1 || x == TILE_SIZE - 1;
            put(&mut px, y, x, if on_frame { FRAME } else { TILE_BG });
        }
    }
    for bar in 0..N_BARS {
        let bit = (product.id >> bar) & 1;
        let color = if bit == 1 { BIT_ONE } else { BIT_ZERO };
        for y in BAR_Y0..BAR_Y1 {
            for x in BAR_X0 + bar * BAR_W..BAR_X0 + (bar + 1) * BAR_W {
                put(&mut px, y, x, color);
            }
        }
    }
    let q = product.quality.clamp(0.0, 1.0);
    for y in LOGO_Y0..LOGO_Y1 {
        for x in LOGO_X0..LOGO_X1 {
            put(&mut px, y, x, [q, q, q]);
        }
    }
    px
}

/// Reference decoder: reads the id back from the bar centers and the
/// quality as mean logo luminance.
pub fn decode_tile(px: &[f32]) -> (u32, f32) {
    debug_assert_eq!(px.len(), TILE_SIZE * TILE_SIZE * 3);
    let at = |y: usize, x: usize| -> (f32, f32, f32) {
        let o = (y * TILE_SIZE + x) * 3;
        (px[o], px[o + 1], px[o + 2])
    };
    let mut id = 0u32;
    let y_mid = (BAR_Y0 + BAR_Y1) / 2;
    for bar in 0..N_BARS {
        let x_mid = BAR_X0 + bar * BAR_W + BAR_W / 2;
        let (r, _, b) = at(y_mid, x_mid);
        if r > b {
            id |= 1 << bar;
        }
    }
    let mut lum = 0.0f32;
    let mut n = 0usize;
    for y in LOGO_Y0..LOGO_Y1 {
        for x in LOGO_X0..LOGO_X1 {
            let (r, g, b) = at(y, x);
            lum += (r + g + b) / 3.0;
            n += 1;
        }
    }
    (id, lum / n as f32)
}
