//! Synthetic warped image pairs with ground-truth flow.
//!
//! A textured source image is resampled into the target through a known
//! warp. Affine warps use the exact analytic inverse, so appearance
//! constancy `tgt[x + gt(x)] = src[x]` holds exactly; smooth random fields
//! have no closed-form inverse, so the target is built by first-order
//! inverse warping `tgt[y] = src(y - gt(y))`, exact for constant fields.

use super::{DataError, FlowField, Image};
use crate::config::SampleKind;
use crate::tensor::rng::Rng;

#[derive(Clone, Copy, Debug)]
pub struct SampleSpec {
    pub kind: SampleKind,
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    /// Rough flow scale in pixels; must be at most min(h, w) / 4.
    pub magnitude: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub src: Image,
    pub tgt: Image,
    pub gt: FlowField,
}

fn bilinear_rgb(img: &Image, x: f64, y: f64) -> [f32; 3] {
    let mut out = [0.0f32; 3];
    let x0 = x.floor();
    let y0 = y.floor();
    let wx = (x - x0) as f32;
    let wy = (y - y0) as f32;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let fetch = |xi: i64, yi: i64, c: usize| -> f32 {
        if xi < 0 || yi < 0 || xi >= img.w as i64 || yi >= img.h as i64 {
            0.0
        } else {
            img.at(yi as usize, xi as usize, c)
        }
    };
    for (c, o) in out.iter_mut().enumerate() {
        let v00 = fetch(x0, y0, c);
        let v10 = fetch(x0 + 1, y0, c);
        let v01 = fetch(x0, y0 + 1, c);
        let v11 = fetch(x0 + 1, y0 + 1, c);
        *o = v00 * (1.0 - wx) * (1.0 - wy)
            + v10 * wx * (1.0 - wy)
            + v01 * (1.0 - wx) * wy
            + v11 * wx * wy;
    }
    out
}

/// Multi-scale noise texture: coarse bilinearly-upsampled structure plus
/// lightly blurred fine detail, so correlation has something to match at
/// several scales.
pub fn textured_image(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = Rng::for_name(seed, "synthetic.texture");
    let (ch, cw) = ((h / 8).max(2), (w / 8).max(2));
    let coarse: Vec<f32> = (0..ch * cw * 3).map(|_| rng.uniform() as f32).collect();
    let mut fine: Vec<f32> = (0..h * w * 3).map(|_| rng.uniform() as f32).collect();

    // two [1,2,1]/4 blur passes per axis, edges clamped
    for _ in 0..2 {
        let snapshot = fine.clone();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let xm = x.saturating_sub(1);
                    let xp = (x + 1).min(w - 1);
                    fine[(y * w + x) * 3 + c] = 0.25 * snapshot[(y * w + xm) * 3 + c]
                        + 0.5 * snapshot[(y * w + x) * 3 + c]
                        + 0.25 * snapshot[(y * w + xp) * 3 + c];
                }
            }
        }
        let snapshot = fine.clone();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let ym = y.saturating_sub(1);
                    let yp = (y + 1).min(h - 1);
                    fine[(y * w + x) * 3 + c] = 0.25 * snapshot[(ym * w + x) * 3 + c]
                        + 0.5 * snapshot[(y * w + x) * 3 + c]
                        + 0.25 * snapshot[(yp * w + x) * 3 + c];
                }
            }
        }
    }

    let mut img = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            // coarse grid coordinate for this pixel
            let u = if w > 1 { x as f64 * (cw - 1) as f64 / (w - 1) as f64 } else { 0.0 };
            let v = if h > 1 { y as f64 * (ch - 1) as f64 / (h - 1) as f64 } else { 0.0 };
            let (u0, v0) = (u.floor(), v.floor());
            let (fu, fv) = ((u - u0) as f32, (v - v0) as f32);
            let (u0, v0) = (u0 as usize, v0 as usize);
            let (u1, v1) = ((u0 + 1).min(cw - 1), (v0 + 1).min(ch - 1));
            for c in 0..3 {
                let g = |yy: usize, xx: usize| coarse[(yy * cw + xx) * 3 + c];
                let cval = g(v0, u0) * (1.0 - fu) * (1.0 - fv)
                    + g(v0, u1) * fu * (1.0 - fv)
                    + g(v1, u0) * (1.0 - fu) * fv
                    + g(v1, u1) * fu * fv;
                let f = fine[(y * w + x) * 3 + c];
                img.set(y, x, c, (0.6 * cval + 0.4 * f).clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Warps `src` by the affine map p ↦ (I+m)(p−c) + c + b about the image
/// center c, using the exact inverse for resampling. Returns the target
/// image and the ground-truth flow gt(p) = m(p−c) + b.
pub fn affine_pair(src: &Image, m: [[f64; 2]; 2], b: [f64; 2]) -> Result<(Image, FlowField), DataError> {
    let (h, w) = (src.h, src.w);
    let a = [[1.0 + m[0][0], m[0][1]], [m[1][0], 1.0 + m[1][1]]];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det.abs() < 0.25 {
        return Err(DataError::BadSpec(format!("affine map is near-singular (det {det:.4})")));
    }
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;

    let mut gt = FlowField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 - cx, y as f64 - cy);
            let fx = m[0][0] * px + m[0][1] * py + b[0];
            let fy = m[1][0] * px + m[1][1] * py + b[1];
            gt.set(y, x, fx as f32, fy as f32);
            let tx = x as f64 + fx;
            let ty = y as f64 + fy;
            gt.valid[y * w + x] =
                tx >= 0.0 && ty >= 0.0 && tx <= (w - 1) as f64 && ty <= (h - 1) as f64;
        }
    }

    let mut tgt = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            // exact preimage of this target pixel
            let (qx, qy) = (x as f64 - b[0] - cx, y as f64 - b[1] - cy);
            let sx = inv[0][0] * qx + inv[0][1] * qy + cx;
            let sy = inv[1][0] * qx + inv[1][1] * qy + cy;
            let rgb = bilinear_rgb(src, sx, sy);
            for (c, v) in rgb.iter().enumerate() {
                tgt.set(y, x, c, *v);
            }
        }
    }
    Ok((tgt, gt))
}

/// A 4x4 control grid of random displacements, bilinearly upsampled to
/// full resolution.
fn smooth_field(rng: &mut Rng, h: usize, w: usize, magnitude: f64) -> FlowField {
    let ctrl: Vec<f64> = (0..4 * 4 * 2).map(|_| rng.uniform_in(-magnitude, magnitude)).collect();
    let mut gt = FlowField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let u = if w > 1 { x as f64 * 3.0 / (w - 1) as f64 } else { 0.0 };
            let v = if h > 1 { y as f64 * 3.0 / (h - 1) as f64 } else { 0.0 };
            let (u0, v0) = (u.floor().min(2.0), v.floor().min(2.0));
            let (fu, fv) = (u - u0, v - v0);
            let (u0, v0) = (u0 as usize, v0 as usize);
            let mut f = [0.0f64; 2];
            for (c, fc) in f.iter_mut().enumerate() {
                let g = |yy: usize, xx: usize| ctrl[(yy * 4 + xx) * 2 + c];
                *fc = g(v0, u0) * (1.0 - fu) * (1.0 - fv)
                    + g(v0, u0 + 1) * fu * (1.0 - fv)
                    + g(v0 + 1, u0) * (1.0 - fu) * fv
                    + g(v0 + 1, u0 + 1) * fu * fv;
            }
            gt.set(y, x, f[0] as f32, f[1] as f32);
            let tx = x as f64 + f[0];
            let ty = y as f64 + f[1];
            gt.valid[y * w + x] =
                tx >= 0.0 && ty >= 0.0 && tx <= (w - 1) as f64 && ty <= (h - 1) as f64;
        }
    }
    gt
}

pub fn generate(spec: &SampleSpec) -> Result<SyntheticSample, DataError> {
    if spec.h < 2 || spec.w < 2 {
        return Err(DataError::BadSpec(format!("image {}x{} too small", spec.h, spec.w)));
    }
    if spec.magnitude < 0.0 || spec.magnitude > spec.h.min(spec.w) as f64 / 4.0 {
        return Err(DataError::BadSpec(format!(
            "magnitude {} exceeds min(h, w)/4 = {}",
            spec.magnitude,
            spec.h.min(spec.w) as f64 / 4.0
        )));
    }
    let src = textured_image(spec.seed, spec.h, spec.w);
    match spec.kind {
        SampleKind::Affine => {
            let mut rng = Rng::for_name(spec.seed, "synthetic.affine");
            let mmax = spec.magnitude / (spec.h + spec.w) as f64;
            let mut m = [[0.0; 2]; 2];
            for row in &mut m {
                for v in row.iter_mut() {
                    *v = rng.uniform_in(-mmax, mmax);
                }
            }
            let b = [
                rng.uniform_in(-spec.magnitude / 2.0, spec.magnitude / 2.0),
                rng.uniform_in(-spec.magnitude / 2.0, spec.magnitude / 2.0),
            ];
            let (tgt, gt) = affine_pair(&src, m, b)?;
            Ok(SyntheticSample { src, tgt, gt })
        }
        SampleKind::SmoothRandom => {
            let mut rng = Rng::for_name(spec.seed, "synthetic.smooth");
            let gt = smooth_field(&mut rng, spec.h, spec.w, spec.magnitude);
            let mut tgt = Image::new(spec.h, spec.w);
            for y in 0..spec.h {
                for x in 0..spec.w {
                    let sx = x as f64 - gt.dx(y, x) as f64;
                    let sy = y as f64 - gt.dy(y, x) as f64;
                    let rgb = bilinear_rgb(&src, sx, sy);
                    for (c, v) in rgb.iter().enumerate() {
                        tgt.set(y, x, c, *v);
                    }
                }
            }
            Ok(SyntheticSample { src, tgt, gt })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_magnitude_is_the_identity_pair() {
        let spec = SampleSpec { kind: SampleKind::Affine, seed: 4, h: 16, w: 20, magnitude: 0.0 };
        let s = generate(&spec).unwrap();
        assert!(s.gt.flow.iter().all(|&v| v == 0.0));
        assert_eq!(s.src.rgb, s.tgt.rgb);
        assert!(s.gt.valid.iter().all(|&v| v));
    }

    #[test]
    fn unit_translation_is_an_exact_shift() {
        let src = textured_image(7, 12, 12);
        let (tgt, gt) = affine_pair(&src, [[0.0; 2]; 2], [1.0, 0.0]).unwrap();
        for y in 0..12 {
            for x in 1..12 {
                for c in 0..3 {
                    let a = tgt.at(y, x, c);
                    let b = src.at(y, x - 1, c);
                    assert!((a - b).abs() < 1e-6, "({y},{x},{c}): {a} vs {b}");
                }
            }
        }
        assert!(gt.flow.chunks(2).all(|f| f == [1.0, 0.0]));
    }

    #[test]
    fn valid_mask_matches_its_definition() {
        let spec =
            SampleSpec { kind: SampleKind::SmoothRandom, seed: 11, h: 24, w: 24, magnitude: 5.0 };
        let s = generate(&spec).unwrap();
        let mut any_invalid = false;
        for y in 0..24 {
            for x in 0..24 {
                let tx = x as f64 + s.gt.dx(y, x) as f64;
                let ty = y as f64 + s.gt.dy(y, x) as f64;
                let inside = tx >= 0.0 && ty >= 0.0 && tx <= 23.0 && ty <= 23.0;
                assert_eq!(s.gt.is_valid(y, x), inside, "({y},{x})");
                any_invalid |= !inside;
            }
        }
        // magnitude 5 on a 24x24 image should push some border pixels out
        assert!(any_invalid);
    }

    #[test]
    fn affine_appearance_constancy_holds_at_integer_targets() {
        let src = textured_image(3, 32, 32);
        // pure translation by (3, 2): every valid pixel lands on the grid
        let (tgt, gt) = affine_pair(&src, [[0.0; 2]; 2], [3.0, 2.0]).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if !gt.is_valid(y, x) {
                    continue;
                }
                let (ty, tx) = (y + 2, x + 3);
                for c in 0..3 {
                    assert!((tgt.at(ty, tx, c) - src.at(y, x, c)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec =
            SampleSpec { kind: SampleKind::SmoothRandom, seed: 9, h: 16, w: 16, magnitude: 2.0 };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.src.rgb, b.src.rgb);
        assert_eq!(a.tgt.rgb, b.tgt.rgb);
        assert_eq!(a.gt.flow, b.gt.flow);
        let c = generate(&SampleSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.gt.flow, c.gt.flow);
    }

    #[test]
    fn oversized_magnitude_is_rejected() {
        let spec = SampleSpec { kind: SampleKind::Affine, seed: 0, h: 16, w: 16, magnitude: 5.0 };
        assert!(matches!(generate(&spec), Err(DataError::BadSpec(_))));
    }

    #[test]
    fn smooth_field_stays_within_magnitude() {
        let spec =
            SampleSpec { kind: SampleKind::SmoothRandom, seed: 2, h: 20, w: 20, magnitude: 4.0 };
        let s = generate(&spec).unwrap();
        for f in s.gt.flow.chunks(2) {
            assert!(f[0].abs() <= 4.0 && f[1].abs() <= 4.0);
        }
    }
}
