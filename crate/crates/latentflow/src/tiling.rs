//! Inference on images larger than the training size: run the model on
//! four overlapping corner tiles of the training size and blend the tile
//! flows with an unnormalized Gaussian weight centered on each tile.
//!
//! Weights use the continuous falloff exp(-d^2 / (2 sigma^2)) where d is
//! the distance of the pixel's normalized tile coordinates from the tile
//! center and sigma = 0.05, floored at 1e-300 so the per-pixel weight sum
//! never vanishes. Accumulation is in f64.

use crate::data::FlowField;
use crate::data::Image;
use crate::model::{FlowModel, ModelError};
use crate::tensor::{Element, ParamStore};
use thiserror::Error;

pub const SIGMA: f64 = 0.05;
const WEIGHT_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum TileError {
    #[error("test size {0}x{1} is smaller than the tile size {2}x{3}; run single-pass inference instead")]
    TestSmallerThanTile(usize, usize, usize, usize),
    #[error("test size {0}x{1} exceeds twice the tile size {2}x{3}; four corner tiles cannot cover it")]
    NotCoverable(usize, usize, usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Where the four corner tiles sit inside the test image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub tile_h: usize,
    pub tile_w: usize,
    pub test_h: usize,
    pub test_w: usize,
    pub origins: [(usize, usize); 4],
}

impl TilePlan {
    pub fn new(
        tile_h: usize,
        tile_w: usize,
        test_h: usize,
        test_w: usize,
    ) -> Result<Self, TileError> {
        if test_h < tile_h || test_w < tile_w {
            return Err(TileError::TestSmallerThanTile(test_h, test_w, tile_h, tile_w));
        }
        if test_h > 2 * tile_h || test_w > 2 * tile_w {
            return Err(TileError::NotCoverable(test_h, test_w, tile_h, tile_w));
        }
        let (bh, bw) = (test_h - tile_h, test_w - tile_w);
        Ok(TilePlan {
            tile_h,
            tile_w,
            test_h,
            test_w,
            origins: [(0, 0), (0, bw), (bh, 0), (bh, bw)],
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.test_h == self.tile_h && self.test_w == self.tile_w
    }
}

/// Unnormalized Gaussian weight of position (u, v) inside an h x w tile:
/// 1 at the tile center, exp(-0.5) at distance sigma (in normalized
/// coordinates u/h, v/w), floored at 1e-300.
pub fn gaussian_weight(u: f64, v: f64, h: usize, w: usize) -> f64 {
    let du = u / h as f64 - 0.5;
    let dv = v / w as f64 - 0.5;
    let d2 = du * du + dv * dv;
    (-d2 / (2.0 * SIGMA * SIGMA)).exp().max(WEIGHT_FLOOR)
}

/// Per-pixel weights for one tile, row-major [h * w].
pub fn weight_map(h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            out.push(gaussian_weight(u as f64, v as f64, h, w));
        }
    }
    out
}

/// Blend per-tile flows into the full-size field. `tiles` follows
/// `plan.origins` order; each must be tile-sized.
pub fn blend_tiles(plan: &TilePlan, tiles: &[FlowField; 4]) -> Result<FlowField, TileError> {
    for t in tiles {
        if t.h != plan.tile_h || t.w != plan.tile_w {
            return Err(TileError::Model(ModelError::SizeMismatch(
                t.h,
                t.w,
                plan.tile_h,
                plan.tile_w,
            )));
        }
    }
    let weights = weight_map(plan.tile_h, plan.tile_w);
    let (th, tw) = (plan.test_h, plan.test_w);
    let mut acc = vec![0.0f64; th * tw * 2];
    let mut wsum = vec![0.0f64; th * tw];
    for (tile, &(oy, ox)) in tiles.iter().zip(&plan.origins) {
        for u in 0..plan.tile_h {
            for v in 0..plan.tile_w {
                let wgt = weights[u * plan.tile_w + v];
                let px = (oy + u) * tw + (ox + v);
                acc[px * 2] += wgt * tile.flow[(u * plan.tile_w + v) * 2] as f64;
                acc[px * 2 + 1] += wgt * tile.flow[(u * plan.tile_w + v) * 2 + 1] as f64;
                wsum[px] += wgt;
            }
        }
    }
    let mut out = FlowField::zeros(th, tw);
    for px in 0..th * tw {
        out.flow[px * 2] = (acc[px * 2] / wsum[px]) as f32;
        out.flow[px * 2 + 1] = (acc[px * 2 + 1] / wsum[px]) as f32;
    }
    Ok(out)
}

fn crop(img: &Image, oy: usize, ox: usize, h: usize, w: usize) -> Image {
    let mut out = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.set(y, x, c, img.at(oy + y, ox + x, c));
            }
        }
    }
    out
}

/// Tiled inference: decode each corner tile with the model and blend.
/// `threads` caps concurrent tile workers (the tiles are independent;
/// weights are shared read-only).
pub fn tile_infer<T: Element>(
    model: &FlowModel,
    store: &ParamStore<T>,
    src: &Image,
    tgt: &Image,
    tile_h: usize,
    tile_w: usize,
    iters: usize,
    threads: usize,
) -> Result<FlowField, TileError> {
    if src.h != tgt.h || src.w != tgt.w {
        return Err(TileError::Model(ModelError::SizeMismatch(src.h, src.w, tgt.h, tgt.w)));
    }
    let plan = TilePlan::new(tile_h, tile_w, src.h, src.w)?;
    let inputs: Vec<(Image, Image)> = plan
        .origins
        .iter()
        .map(|&(oy, ox)| {
            (crop(src, oy, ox, tile_h, tile_w), crop(tgt, oy, ox, tile_h, tile_w))
        })
        .collect();

    let workers = threads.clamp(1, 4);
    let results: Vec<Result<FlowField, ModelError>> = if workers == 1 {
        inputs.iter().map(|(s, t)| model.infer(store, s, t, iters)).collect()
    } else {
        let mut slots: Vec<Option<Result<FlowField, ModelError>>> = (0..4).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (i, (s, t)) in inputs.iter().enumerate() {
                handles.push((i, scope.spawn(move || model.infer(store, s, t, iters))));
            }
            for (i, h) in handles {
                slots[i] = Some(h.join().expect("tile worker panicked"));
            }
        });
        slots.into_iter().map(|s| s.unwrap()).collect()
    };
    let mut tiles = Vec::with_capacity(4);
    for r in results {
        tiles.push(r?);
    }
    let tiles: [FlowField; 4] = tiles.try_into().expect("exactly four tiles");
    blend_tiles(&plan, &tiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::Rng;

    #[test]
    fn center_weight_is_one_and_sigma_distance_matches() {
        let (h, w) = (64, 64);
        assert_eq!(gaussian_weight(32.0, 32.0, h, w), 1.0);
        // A point at normalized distance exactly sigma from the center.
        let u = (0.5 + SIGMA) * h as f64;
        let got = gaussian_weight(u, 32.0, h, w);
        assert!((got - (-0.5f64).exp()).abs() <= 1e-12);
    }

    #[test]
    fn weights_decay_monotonically_from_the_center() {
        let m = weight_map(32, 32);
        for v in 0..15 {
            let a = m[16 * 32 + v];
            let b = m[16 * 32 + v + 1];
            assert!(a < b, "weight should rise toward the center column");
        }
        assert!(m.iter().all(|&x| x >= WEIGHT_FLOOR && x <= 1.0));
    }

    #[test]
    fn weight_is_symmetric_under_mirroring() {
        let (h, w) = (48, 64);
        for &(u, v) in &[(3.0, 5.0), (10.0, 40.0), (20.0, 10.0)] {
            let a = gaussian_weight(u, v, h, w);
            let b = gaussian_weight(h as f64 - u, w as f64 - v, h, w);
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn plan_covers_every_pixel() {
        let plan = TilePlan::new(64, 64, 100, 120).unwrap();
        let mut covered = vec![false; 100 * 120];
        for &(oy, ox) in &plan.origins {
            for u in 0..64 {
                for v in 0..64 {
                    covered[(oy + u) * 120 + (ox + v)] = true;
                }
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn plan_rejects_bad_sizes() {
        assert!(matches!(
            TilePlan::new(64, 64, 32, 80),
            Err(TileError::TestSmallerThanTile(..))
        ));
        assert!(matches!(TilePlan::new(64, 64, 200, 80), Err(TileError::NotCoverable(..))));
    }

    #[test]
    fn degenerate_plan_blends_to_the_single_tile() {
        let plan = TilePlan::new(8, 8, 8, 8).unwrap();
        assert!(plan.is_degenerate());
        assert_eq!(plan.origins, [(0, 0); 4]);
        let mut rng = Rng::new(1);
        let mut tile = FlowField::zeros(8, 8);
        for v in tile.flow.iter_mut() {
            *v = rng.uniform_in(-3.0, 3.0) as f32;
        }
        let tiles = [tile.clone(), tile.clone(), tile.clone(), tile.clone()];
        let out = blend_tiles(&plan, &tiles).unwrap();
        let worst = out
            .flow
            .iter()
            .zip(&tile.flow)
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max);
        assert!(worst <= 1e-6, "max diff {worst}");
    }

    #[test]
    fn blended_flow_stays_in_the_tile_envelope() {
        let plan = TilePlan::new(8, 8, 12, 12).unwrap();
        let mut rng = Rng::new(2);
        let mut tiles = Vec::new();
        for _ in 0..4 {
            let mut t = FlowField::zeros(8, 8);
            for v in t.flow.iter_mut() {
                *v = rng.uniform_in(-5.0, 5.0) as f32;
            }
            tiles.push(t);
        }
        let tiles: [FlowField; 4] = tiles.try_into().unwrap();
        let out = blend_tiles(&plan, &tiles).unwrap();
        for py in 0..12 {
            for px in 0..12 {
                for ch in 0..2 {
                    let mut lo = f32::INFINITY;
                    let mut hi = f32::NEG_INFINITY;
                    for (tile, &(oy, ox)) in tiles.iter().zip(&plan.origins) {
                        if py >= oy && py < oy + 8 && px >= ox && px < ox + 8 {
                            let v = tile.flow[((py - oy) * 8 + (px - ox)) * 2 + ch];
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                    let b = out.flow[(py * 12 + px) * 2 + ch];
                    assert!(
                        b >= lo - 1e-5 && b <= hi + 1e-5,
                        "pixel ({py},{px}) channel {ch}: {b} outside [{lo}, {hi}]"
                    );
                }
            }
        }
    }

    #[test]
    fn corner_weight_matches_the_formula() {
        let got = gaussian_weight(0.0, 0.0, 64, 64);
        let want = (-(0.25 + 0.25) / (2.0 * SIGMA * SIGMA)).exp().max(WEIGHT_FLOOR);
        assert_eq!(got, want);
    }
}
