//! Convolutional image encoders: a feature encoder for matching costs and
//! a context encoder (same architecture, separate weights) whose output
//! splits into the recurrent decoder's initial hidden state and its
//! per-iteration context injection.
//!
//! Both downsample by 8: six 3x3 GELU convolutions (three of them
//! stride 2, channels rising c/4 -> c/2 -> c) and two residual blocks at
//! full depth. Images are normalized to [-1, 1] and zero-padded on the
//! right/bottom to multiples of 8 before encoding, so padding matches the
//! mid-gray of the normalized range.

use crate::data::Image;
use crate::nn::Conv2dLayer;
use crate::tensor::{Bindings, Element, Graph, NodeId, ParamStore, Tensor, TensorError};

pub const GRID_STRIDE: usize = 8;

/// Init gain on the matching encoder's fourth conv. Plain Kaiming leaves
/// grid features so small that dot-product costs come out around 1e-3 at
/// init; everything downstream of the cost volume then starts effectively
/// blind and training never picks up the matching signal. Amplifying one
/// mid-stack layer brings initial costs to unit order.
pub const FEATURE_MID_GAIN: f64 = 8.0;

#[derive(Clone, Debug)]
pub struct ConvEncoder {
    convs: Vec<Conv2dLayer>,
    res: Vec<(Conv2dLayer, Conv2dLayer)>,
    pub out_dim: usize,
}

impl ConvEncoder {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        out_dim: usize,
    ) -> Result<Self, TensorError> {
        Self::register_with_mid_gain(store, name, out_dim, 1.0)
    }

    /// Like `register` with the fourth conv's init scaled by `gain`
    /// (see [`FEATURE_MID_GAIN`]).
    pub fn register_with_mid_gain<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        out_dim: usize,
        gain: f64,
    ) -> Result<Self, TensorError> {
        if out_dim % 4 != 0 || out_dim == 0 {
            return Err(TensorError::Invalid {
                op: "encoder",
                msg: format!("output channels {out_dim} must be a positive multiple of 4"),
            });
        }
        let q = out_dim / 4;
        let h = out_dim / 2;
        let plan: [(usize, usize, usize); 6] = [
            (3, q, 2),
            (q, q, 1),
            (q, h, 2),
            (h, h, 1),
            (h, out_dim, 2),
            (out_dim, out_dim, 1),
        ];
        let mut convs = Vec::with_capacity(6);
        for (i, (ci, co, stride)) in plan.into_iter().enumerate() {
            let g = if i == 3 { gain } else { 1.0 };
            convs.push(Conv2dLayer::register_with_gain(
                store,
                &format!("{name}.c{}", i + 1),
                ci,
                co,
                3,
                stride,
                1,
                g,
            )?);
        }
        let mut res = Vec::with_capacity(2);
        for i in 0..2 {
            res.push((
                Conv2dLayer::register(store, &format!("{name}.res{}.a", i + 1), out_dim, out_dim, 3, 1, 1)?,
                Conv2dLayer::register(store, &format!("{name}.res{}.b", i + 1), out_dim, out_dim, 3, 1, 1)?,
            ));
        }
        Ok(ConvEncoder { convs, res, out_dim })
    }

    /// [1, h, w, 3] with h, w multiples of 8 → [1, h/8, w/8, out_dim].
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let mut y = x;
        for conv in &self.convs {
            y = conv.forward(g, binds, y)?;
            y = g.gelu(y);
        }
        for (a, b) in &self.res {
            let branch = a.forward(g, binds, y)?;
            let branch = g.gelu(branch);
            let branch = b.forward(g, binds, branch)?;
            y = g.add(y, branch)?;
        }
        Ok(y)
    }
}

/// Image as a graph constant: [1, h_pad, w_pad, 3], pixels mapped to
/// [-1, 1], zero-padded right/bottom to multiples of 8.
pub fn image_node<T: Element>(g: &mut Graph<T>, img: &Image) -> Result<NodeId, TensorError> {
    if img.h < 16 || img.w < 16 {
        return Err(TensorError::Invalid {
            op: "encode",
            msg: format!("image {}x{} is below the 16x16 minimum", img.h, img.w),
        });
    }
    if !img.all_finite() {
        return Err(TensorError::NonFinite { context: "input image".into() });
    }
    let data: Vec<T> = img.rgb.iter().map(|&v| T::from_f64(v as f64 * 2.0 - 1.0)).collect();
    let t = Tensor::from_vec(&[1, img.h, img.w, 3], data)?;
    let node = g.constant(t);
    let pb = (GRID_STRIDE - img.h % GRID_STRIDE) % GRID_STRIDE;
    let pr = (GRID_STRIDE - img.w % GRID_STRIDE) % GRID_STRIDE;
    if pb == 0 && pr == 0 {
        Ok(node)
    } else {
        g.zero_pad2d(node, pb, pr)
    }
}

/// Grid-resolution feature map [h, w, dim] with its grid size.
pub struct FeatureGrid {
    pub node: NodeId,
    pub h: usize,
    pub w: usize,
}

pub fn encode_features<T: Element>(
    g: &mut Graph<T>,
    binds: &Bindings,
    enc: &ConvEncoder,
    img: &Image,
) -> Result<FeatureGrid, TensorError> {
    let x = image_node(g, img)?;
    let y = enc.forward(g, binds, x)?;
    let s = g.shape(y).to_vec();
    let node = g.reshape(y, &[s[1], s[2], s[3]])?;
    Ok(FeatureGrid { node, h: s[1], w: s[2] })
}

/// Decoder-side context: initial hidden state (tanh) and per-iteration
/// injection features (relu), both [h, w, dim].
pub struct ContextFeatures {
    pub hidden0: NodeId,
    pub inject: NodeId,
    pub h: usize,
    pub w: usize,
}

pub fn encode_context<T: Element>(
    g: &mut Graph<T>,
    binds: &Bindings,
    enc: &ConvEncoder,
    img: &Image,
) -> Result<ContextFeatures, TensorError> {
    let dim = enc.out_dim / 2;
    let grid = encode_features(g, binds, enc, img)?;
    let hidden_raw = g.narrow(grid.node, 2, 0, dim)?;
    let inject_raw = g.narrow(grid.node, 2, dim, dim)?;
    Ok(ContextFeatures {
        hidden0: g.tanh(hidden_raw),
        inject: g.relu(inject_raw),
        h: grid.h,
        w: grid.w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::Rng;

    fn test_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = Rng::new(seed);
        let mut img = Image::new(h, w);
        for v in &mut img.rgb {
            *v = rng.uniform() as f32;
        }
        img
    }

    fn stage(store: &ParamStore<f64>, g: &mut Graph<f64>) -> Bindings {
        store.stage(g)
    }

    #[test]
    fn output_grid_is_one_eighth() {
        let mut store = ParamStore::<f64>::new(1);
        let enc = ConvEncoder::register(&mut store, "feat", 32).unwrap();
        let mut g = Graph::new();
        let binds = stage(&store, &mut g);
        let grid = encode_features(&mut g, &binds, &enc, &test_image(0, 64, 64)).unwrap();
        assert_eq!((grid.h, grid.w), (8, 8));
        assert_eq!(g.shape(grid.node), &[8, 8, 32]);
    }

    #[test]
    fn odd_sizes_pad_up_to_ceil() {
        let mut store = ParamStore::<f64>::new(1);
        let enc = ConvEncoder::register(&mut store, "feat", 16).unwrap();
        let mut g = Graph::new();
        let binds = stage(&store, &mut g);
        let grid = encode_features(&mut g, &binds, &enc, &test_image(0, 72, 96)).unwrap();
        assert_eq!((grid.h, grid.w), (9, 12));
        let mut g2 = Graph::new();
        let binds = stage(&store, &mut g2);
        let grid = encode_features(&mut g2, &binds, &enc, &test_image(0, 65, 17)).unwrap();
        assert_eq!((grid.h, grid.w), (9, 3));
    }

    #[test]
    fn undersized_or_nonfinite_images_error() {
        let mut store = ParamStore::<f64>::new(1);
        let _ = ConvEncoder::register(&mut store, "feat", 16).unwrap();
        let mut g = Graph::<f64>::new();
        assert!(image_node(&mut g, &test_image(0, 8, 64)).is_err());
        let mut bad = test_image(0, 16, 16);
        bad.rgb[5] = f32::NAN;
        assert!(matches!(image_node(&mut g, &bad), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn identical_images_encode_identically() {
        let mut store = ParamStore::<f64>::new(2);
        let enc = ConvEncoder::register(&mut store, "feat", 16).unwrap();
        let img = test_image(3, 24, 24);
        let run = || {
            let mut g = Graph::new();
            let binds = store.stage(&mut g);
            let grid = encode_features(&mut g, &binds, &enc, &img).unwrap();
            g.value(grid.node).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn context_split_has_the_stated_ranges() {
        let mut store = ParamStore::<f64>::new(4);
        let enc = ConvEncoder::register(&mut store, "ctx", 32).unwrap();
        let mut g = Graph::new();
        let binds = stage(&store, &mut g);
        let ctx = encode_context(&mut g, &binds, &enc, &test_image(5, 32, 32)).unwrap();
        assert_eq!(g.shape(ctx.hidden0), &[4, 4, 16]);
        assert_eq!(g.shape(ctx.inject), &[4, 4, 16]);
        assert!(g.value(ctx.hidden0).data().iter().all(|&v| v > -1.0 && v < 1.0));
        assert!(g.value(ctx.inject).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn shifting_input_by_stride_shifts_interior_cells() {
        // A pattern on a constant background, shifted right by exactly 8
        // pixels, must shift the feature grid right by one cell away from
        // borders. The contaminated margin from padding is 8 cells, so the
        // image is large enough to leave a clean interior.
        let mut store = ParamStore::<f64>::new(6);
        let enc = ConvEncoder::register(&mut store, "feat", 16).unwrap();
        let size = 160;
        let mut rng = Rng::new(9);
        let mut base = Image::new(size, size);
        base.rgb.fill(0.5);
        for y in 60..100 {
            for x in 60..100 {
                for c in 0..3 {
                    base.set(y, x, c, rng.uniform() as f32);
                }
            }
        }
        let mut shifted = Image::new(size, size);
        shifted.rgb.fill(0.5);
        for y in 0..size {
            for x in 8..size {
                for c in 0..3 {
                    shifted.set(y, x, c, base.at(y, x - 8, c));
                }
            }
        }
        let mut g = Graph::new();
        let binds = stage(&store, &mut g);
        let ga = encode_features(&mut g, &binds, &enc, &base).unwrap();
        let gb = encode_features(&mut g, &binds, &enc, &shifted).unwrap();
        let (a, b) = (g.value(ga.node), g.value(gb.node));
        let cells = size / 8;
        let margin = 8;
        let mut checked = 0;
        for i in margin..cells - margin {
            for j in margin..cells - margin - 1 {
                for c in 0..16 {
                    let va = a.at(&[i, j, c]);
                    let vb = b.at(&[i, j + 1, c]);
                    assert!((va - vb).abs() < 1e-5, "cell ({i},{j},{c}): {va} vs {vb}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }
}
