//! All-pairs matching costs between two feature grids.
//!
//! For source and target features of shape [h, w, d], the cost volume is
//! the [h*w, h*w] matrix of dot products between every source cell and
//! every target cell, scaled by 1/sqrt(d). Row x, reshaped to [h, w], is
//! the cost map of source pixel x: its correlation against every target
//! location. The volume is logically 4D ([h, w, h, w]) but stored as the
//! 2D matrix, so a cost map is a contiguous row and can be borrowed
//! without copying.

use crate::encoders::FeatureGrid;
use crate::tensor::{Element, Graph, NodeId, Tensor, TensorError};

pub struct CostVolume {
    /// [h*w, h*w], row = source pixel, column = target pixel.
    pub node: NodeId,
    pub h: usize,
    pub w: usize,
}

impl CostVolume {
    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

pub fn build_cost_volume<T: Element>(
    g: &mut Graph<T>,
    src: &FeatureGrid,
    tgt: &FeatureGrid,
) -> Result<CostVolume, TensorError> {
    let (sh, th) = (g.shape(src.node).to_vec(), g.shape(tgt.node).to_vec());
    if sh != th {
        return Err(TensorError::Invalid {
            op: "cost_volume",
            msg: format!("feature grids disagree: {sh:?} vs {th:?}"),
        });
    }
    let (h, w, d) = (sh[0], sh[1], sh[2]);
    let a = g.reshape(src.node, &[h * w, d])?;
    let b = g.reshape(tgt.node, &[h * w, d])?;
    let bt = g.permute(b, &[1, 0])?;
    let prod = g.matmul(a, bt)?;
    let node = g.scale(prod, 1.0 / (d as f64).sqrt());
    Ok(CostVolume { node, h, w })
}

/// Borrow source pixel x's cost map as a contiguous [h*w] slice of the
/// stored matrix. No copy; the graph-side `cost_map` below is the
/// differentiable counterpart.
pub fn cost_map_slice<T: Element>(
    vol: &Tensor<T>,
    h: usize,
    w: usize,
    x: usize,
) -> Result<&[T], TensorError> {
    let n = h * w;
    if vol.shape() != [n, n] {
        return Err(TensorError::Invalid {
            op: "cost_map",
            msg: format!("expected a [{n}, {n}] volume, got {:?}", vol.shape()),
        });
    }
    if x >= n {
        return Err(TensorError::Invalid {
            op: "cost_map",
            msg: format!("pixel {x} out of range for {h}x{w} grid"),
        });
    }
    Ok(&vol.data()[x * n..(x + 1) * n])
}

/// Source pixel x's cost map as a graph node of shape [h, w].
pub fn cost_map<T: Element>(
    g: &mut Graph<T>,
    cv: &CostVolume,
    x: usize,
) -> Result<NodeId, TensorError> {
    if x >= cv.pixels() {
        return Err(TensorError::Invalid {
            op: "cost_map",
            msg: format!("pixel {x} out of range for {}x{} grid", cv.h, cv.w),
        });
    }
    let row = g.narrow(cv.node, 0, x, 1)?;
    g.reshape(row, &[cv.h, cv.w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::Rng;

    fn grid_from(g: &mut Graph<f32>, h: usize, w: usize, d: usize, data: Vec<f32>) -> FeatureGrid {
        let t = Tensor::from_vec(&[h, w, d], data).unwrap();
        FeatureGrid { node: g.constant(t), h, w }
    }

    fn random_grid(g: &mut Graph<f32>, rng: &mut Rng, h: usize, w: usize, d: usize) -> FeatureGrid {
        let data: Vec<f32> = (0..h * w * d).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect();
        grid_from(g, h, w, d, data)
    }

    #[test]
    fn matches_quadruple_loop_oracle() {
        // Five random 4x4x8 pairs against the direct definition: for every
        // (source cell, target cell) pair, the scaled dot product of their
        // feature vectors, accumulated in f64.
        let (h, w, d) = (4usize, 4usize, 8usize);
        for trial in 0..5 {
            let mut rng = Rng::new(100 + trial);
            let mut g = Graph::<f32>::new();
            let src = random_grid(&mut g, &mut rng, h, w, d);
            let tgt = random_grid(&mut g, &mut rng, h, w, d);
            let cv = build_cost_volume(&mut g, &src, &tgt).unwrap();
            assert_eq!(g.shape(cv.node), &[16, 16]);
            let (sv, tv) = (g.value(src.node).data().to_vec(), g.value(tgt.node).data().to_vec());
            let got = g.value(cv.node);
            let mut worst = 0.0f64;
            for i in 0..h {
                for j in 0..w {
                    for k in 0..h {
                        for l in 0..w {
                            let mut dot = 0.0f64;
                            for c in 0..d {
                                dot += sv[(i * w + j) * d + c] as f64 * tv[(k * w + l) * d + c] as f64;
                            }
                            let want = dot / (d as f64).sqrt();
                            let have = got.at(&[i * w + j, k * w + l]) as f64;
                            worst = worst.max((want - have).abs());
                        }
                    }
                }
            }
            assert!(worst <= 1e-5, "trial {trial}: max abs error {worst}");
        }
    }

    #[test]
    fn single_cell_hand_value() {
        let mut g = Graph::<f32>::new();
        let src = grid_from(&mut g, 1, 1, 2, vec![1.0, 2.0]);
        let tgt = grid_from(&mut g, 1, 1, 2, vec![3.0, 4.0]);
        let cv = build_cost_volume(&mut g, &src, &tgt).unwrap();
        let want = 11.0 / 2.0f32.sqrt();
        assert!((g.value(cv.node).data()[0] - want).abs() < 1e-6);
    }

    #[test]
    fn swapping_inputs_transposes() {
        let mut rng = Rng::new(7);
        let mut g = Graph::<f32>::new();
        let a = random_grid(&mut g, &mut rng, 3, 2, 4);
        let b = random_grid(&mut g, &mut rng, 3, 2, 4);
        let ab = build_cost_volume(&mut g, &a, &b).unwrap();
        let ba = build_cost_volume(&mut g, &b, &a).unwrap();
        let (vab, vba) = (g.value(ab.node), g.value(ba.node));
        for i in 0..6 {
            for j in 0..6 {
                assert!((vab.at(&[i, j]) - vba.at(&[j, i])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn scaling_features_scales_costs_quadratically() {
        let mut rng = Rng::new(8);
        let mut g = Graph::<f32>::new();
        let a = random_grid(&mut g, &mut rng, 2, 2, 4);
        let b = random_grid(&mut g, &mut rng, 2, 2, 4);
        let lam = 1.5f64;
        let a2 = FeatureGrid { node: g.scale(a.node, lam), h: 2, w: 2 };
        let b2 = FeatureGrid { node: g.scale(b.node, lam), h: 2, w: 2 };
        let base = build_cost_volume(&mut g, &a, &b).unwrap();
        let scaled = build_cost_volume(&mut g, &a2, &b2).unwrap();
        let (v0, v1) = (g.value(base.node).data().to_vec(), g.value(scaled.node).data().to_vec());
        for (x, y) in v0.iter().zip(&v1) {
            assert!((x * (lam * lam) as f32 - y).abs() < 1e-5);
        }
    }

    #[test]
    fn map_slice_is_the_matrix_row() {
        let mut rng = Rng::new(9);
        let mut g = Graph::<f32>::new();
        let a = random_grid(&mut g, &mut rng, 2, 3, 4);
        let b = random_grid(&mut g, &mut rng, 2, 3, 4);
        let cv = build_cost_volume(&mut g, &a, &b).unwrap();
        let vol = g.value(cv.node).clone();
        let slice = cost_map_slice(&vol, 2, 3, 4).unwrap();
        assert_eq!(slice, &vol.data()[4 * 6..5 * 6]);
        assert!(cost_map_slice(&vol, 2, 3, 6).is_err());
        let m = cost_map(&mut g, &cv, 4).unwrap();
        assert_eq!(g.shape(m), &[2, 3]);
        assert_eq!(g.value(m).data(), slice);
    }

    #[test]
    fn mismatched_grids_error() {
        let mut rng = Rng::new(10);
        let mut g = Graph::<f32>::new();
        let a = random_grid(&mut g, &mut rng, 2, 2, 4);
        let b = random_grid(&mut g, &mut rng, 2, 3, 4);
        assert!(build_cost_volume(&mut g, &a, &b).is_err());
    }
}
