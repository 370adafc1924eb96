//! Recurrent decoding of the cost memory into a flow field.
//!
//! Each iteration, every pixel crops a 9x9 patch of its own cost map
//! around its current correspondence estimate, turns the patch plus the
//! position's sinusoidal encoding into a query, cross-attends into that
//! pixel's latent tokens, and feeds the result (with the raw patch,
//! context injection, and an encoding of the current flow) to a ConvGRU.
//! A two-layer head regresses a residual flow update from the new hidden
//! state; a second head predicts convex-combination masks that upsample
//! the coarse flow by 8. Keys and values over the tokens do not depend on
//! the iteration, so they can be computed once and reused.

use crate::config::ModelConfig;
use crate::cost_volume::{cost_map, CostVolume};
use crate::data::FlowField;
use crate::encoders::ContextFeatures;
use crate::nn::{attention, Conv2dLayer, Ffn, Linear};
use crate::tensor::{Bindings, Element, Graph, NodeId, ParamStore, Tensor, TensorError};

/// Half-width of the cost crop; the window is (2*CROP+1) squared.
const CROP: usize = 4;
const CROP_LEN: usize = (2 * CROP + 1) * (2 * CROP + 1);
const UP: usize = 8;

#[derive(Clone, Debug)]
pub struct Decoder {
    q_inner: Ffn,
    q_outer: Ffn,
    key: Linear,
    val: Linear,
    flow_enc1: Conv2dLayer,
    flow_enc2: Conv2dLayer,
    gru_z: Conv2dLayer,
    gru_r: Conv2dLayer,
    gru_c: Conv2dLayer,
    head1: Conv2dLayer,
    head2: Conv2dLayer,
    mask1: Conv2dLayer,
    mask2: Conv2dLayer,
    heads: usize,
    dim: usize,
    ctx_dim: usize,
}

impl Decoder {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
    ) -> Result<Self, TensorError> {
        let d = cfg.token_dim;
        let dh = cfg.context_dim;
        // GRU input: attended tokens (d), raw crop (81), context injection
        // (dh), encoded flow (dh); gates also see the hidden state (dh).
        let cin = d + CROP_LEN + 2 * dh;
        let gin = dh + cin;
        Ok(Decoder {
            q_inner: Ffn::register(store, &format!("{name}.q_inner"), CROP_LEN, d, d)?,
            q_outer: Ffn::register(store, &format!("{name}.q_outer"), d, d, d)?,
            key: Linear::register(store, &format!("{name}.key"), d, d, true)?,
            // The token memory is LayerNormed upstream, so a plain Kaiming
            // value projection hands the GRU an attended read around 8 rms,
            // deep into tanh/sigmoid saturation. Reduced init keeps it at
            // unit order.
            val: Linear::register_with_gain(store, &format!("{name}.val"), d, d, true, 0.125)?,
            flow_enc1: Conv2dLayer::register(store, &format!("{name}.flow_enc1"), 2, dh, 3, 1, 1)?,
            flow_enc2: Conv2dLayer::register(store, &format!("{name}.flow_enc2"), dh, dh, 3, 1, 1)?,
            gru_z: Conv2dLayer::register(store, &format!("{name}.gru.z"), gin, dh, 3, 1, 1)?,
            gru_r: Conv2dLayer::register(store, &format!("{name}.gru.r"), gin, dh, 3, 1, 1)?,
            gru_c: Conv2dLayer::register(store, &format!("{name}.gru.c"), gin, dh, 3, 1, 1)?,
            head1: Conv2dLayer::register(store, &format!("{name}.head1"), dh, dh, 3, 1, 1)?,
            head2: Conv2dLayer::register_zeroed(store, &format!("{name}.head2"), dh, 2, 3, 1, 1)?,
            mask1: Conv2dLayer::register(store, &format!("{name}.mask1"), dh, dh, 3, 1, 1)?,
            mask2: Conv2dLayer::register(store, &format!("{name}.mask2"), dh, UP * UP * 9, 3, 1, 1)?,
            heads: cfg.heads(),
            dim: d,
            ctx_dim: dh,
        })
    }
}

/// 9x9 cost crop around a real-valued position. `map` is [h, w], `p` is
/// [1, 2] as (x, y); out-of-bounds samples are zero. Entry (i, j) of the
/// result samples the map at p + (j-4, i-4).
pub fn crop_cost_patch<T: Element>(
    g: &mut Graph<T>,
    map: NodeId,
    p: NodeId,
) -> Result<NodeId, TensorError> {
    let flat = crop_flat(g, map, p)?;
    g.reshape(flat, &[2 * CROP + 1, 2 * CROP + 1])
}

fn crop_offsets<T: Element>(g: &mut Graph<T>) -> Result<NodeId, TensorError> {
    let side = 2 * CROP + 1;
    let mut data = Vec::with_capacity(CROP_LEN * 2);
    for i in 0..side {
        for j in 0..side {
            data.push(T::from_f64(j as f64 - CROP as f64));
            data.push(T::from_f64(i as f64 - CROP as f64));
        }
    }
    Ok(g.constant(Tensor::from_vec(&[CROP_LEN, 2], data)?))
}

fn crop_flat<T: Element>(g: &mut Graph<T>, map: NodeId, p: NodeId) -> Result<NodeId, TensorError> {
    let offsets = crop_offsets(g)?;
    let coords = g.add(offsets, p)?;
    g.bilinear_sample(map, coords)
}

/// Everything the decode loop produced, one entry per iteration. `fine`
/// flows are at 8x the coarse grid; intermediate queries and attended
/// vectors are kept for inspection.
#[derive(Debug)]
pub struct DecodeOutput {
    pub coarse: Vec<NodeId>,
    pub fine: Vec<NodeId>,
    pub queries: Vec<NodeId>,
    pub attended: Vec<NodeId>,
    pub gates_z: Vec<NodeId>,
    pub gates_r: Vec<NodeId>,
    pub gates_c: Vec<NodeId>,
}

/// Convex upsampling: each fine pixel is a mask-weighted combination of
/// its coarse cell's 3x3 neighborhood (zero-padded at borders), scaled by
/// 8. `flow` is [h, w, 2]; `mask` is [h, w, 64, 9] and already normalized
/// over the last axis.
pub fn convex_upsample<T: Element>(
    g: &mut Graph<T>,
    flow: NodeId,
    mask: NodeId,
) -> Result<NodeId, TensorError> {
    let s = g.shape(flow).to_vec();
    let (h, w) = (s[0], s[1]);
    let nb = g.unfold3x3(flow)?;
    let nbf = g.reshape(nb, &[h * w, 9, 2])?;
    let maskf = g.reshape(mask, &[h * w, UP * UP, 9])?;
    let comb = g.bmm(maskf, nbf)?;
    let comb = g.scale(comb, UP as f64);
    let r = g.reshape(comb, &[h, w, UP, UP, 2])?;
    let p = g.permute(r, &[0, 2, 1, 3, 4])?;
    g.reshape(p, &[h * UP, w * UP, 2])
}

/// Run the recurrent decoder from an explicit initial coarse flow
/// ([h*w, 2], usually zeros). Keys and values over the cost memory are
/// computed once when `cache_kv` is set and rebuilt every iteration
/// otherwise; both paths must agree.
pub fn decode_from<T: Element>(
    g: &mut Graph<T>,
    binds: &Bindings,
    dec: &Decoder,
    memory: NodeId,
    cv: &CostVolume,
    ctx: &ContextFeatures,
    flow0: NodeId,
    iters: usize,
    cache_kv: bool,
) -> Result<DecodeOutput, TensorError> {
    if iters == 0 {
        return Err(TensorError::Invalid { op: "decode", msg: "iters must be at least 1".into() });
    }
    let (h, w) = (cv.h, cv.w);
    let n = h * w;
    let d = dec.dim;
    let dh = dec.ctx_dim;
    if g.shape(memory) != [n, g.shape(memory)[1], d] {
        return Err(TensorError::Invalid {
            op: "decode",
            msg: format!("memory shape {:?} does not match a {h}x{w} grid", g.shape(memory)),
        });
    }

    let maps: Vec<NodeId> =
        (0..n).map(|x| cost_map(g, cv, x)).collect::<Result<_, _>>()?;
    let offsets = crop_offsets(g)?;
    let base = {
        let mut data = Vec::with_capacity(n * 2);
        for i in 0..h {
            for j in 0..w {
                data.push(T::from_f64(j as f64));
                data.push(T::from_f64(i as f64));
            }
        }
        g.constant(Tensor::from_vec(&[n, 2], data)?)
    };

    let cached = if cache_kv {
        Some((dec.key.forward(g, binds, memory)?, dec.val.forward(g, binds, memory)?))
    } else {
        None
    };

    let mut flow = flow0;
    let mut hidden = g.reshape(ctx.hidden0, &[1, h, w, dh])?;
    let inj4 = g.reshape(ctx.inject, &[1, h, w, dh])?;
    let mut out = DecodeOutput {
        coarse: Vec::with_capacity(iters),
        fine: Vec::with_capacity(iters),
        queries: Vec::with_capacity(iters),
        attended: Vec::with_capacity(iters),
        gates_z: Vec::with_capacity(iters),
        gates_r: Vec::with_capacity(iters),
        gates_c: Vec::with_capacity(iters),
    };

    for it in 0..iters {
        let p = g.add(base, flow)?;

        // Per-pixel cost crops around the current correspondences.
        let mut crops = Vec::with_capacity(n);
        for x in 0..n {
            let px = g.narrow(p, 0, x, 1)?;
            let coords = g.add(offsets, px)?;
            crops.push(g.bilinear_sample(maps[x], coords)?);
        }
        let qcat = g.concat(&crops, 0)?;
        let q = g.reshape(qcat, &[n, CROP_LEN])?;
        out.queries.push(q);

        // Query construction and cross-attention into the token memory.
        let q_emb = dec.q_inner.forward(g, binds, q)?;
        let pe = g.pos_embed(p, d)?;
        let q_pos = g.add(q_emb, pe)?;
        let qq = dec.q_outer.forward(g, binds, q_pos)?;
        let (k, v) = match &cached {
            Some((k, v)) => (*k, *v),
            None => (dec.key.forward(g, binds, memory)?, dec.val.forward(g, binds, memory)?),
        };
        let q3 = g.reshape(qq, &[n, 1, d])?;
        let c3 = attention(g, q3, k, v, dec.heads)?;
        let c = g.reshape(c3, &[n, d])?;
        out.attended.push(c);

        // Assemble the GRU input maps.
        let c4 = g.reshape(c, &[1, h, w, d])?;
        let q4 = g.reshape(q, &[1, h, w, CROP_LEN])?;
        let f4 = g.reshape(flow, &[1, h, w, 2])?;
        let fe = dec.flow_enc1.forward(g, binds, f4)?;
        let fe = g.gelu(fe);
        let fe = dec.flow_enc2.forward(g, binds, fe)?;
        let input = g.concat(&[c4, q4, inj4, fe], 3)?;

        let hx = g.concat(&[hidden, input], 3)?;
        let z = dec.gru_z.forward(g, binds, hx)?;
        let z = g.sigmoid(z);
        let r = dec.gru_r.forward(g, binds, hx)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, hidden)?;
        let hc = g.concat(&[rh, input], 3)?;
        let cand = dec.gru_c.forward(g, binds, hc)?;
        let cand = g.tanh(cand);
        out.gates_z.push(z);
        out.gates_r.push(r);
        out.gates_c.push(cand);
        let zc = g.mul(z, cand)?;
        let nz = g.scale(z, -1.0);
        let nz = g.add_scalar(nz, 1.0);
        let keep = g.mul(nz, hidden)?;
        hidden = g.add(keep, zc)?;

        // Residual flow update.
        let dfh = dec.head1.forward(g, binds, hidden)?;
        let dfh = g.gelu(dfh);
        let df = dec.head2.forward(g, binds, dfh)?;
        let df = g.reshape(df, &[n, 2])?;
        flow = g.add(flow, df)?;
        let coarse = g.reshape(flow, &[h, w, 2])?;
        out.coarse.push(coarse);

        // Convex upsampling masks.
        let mh = dec.mask1.forward(g, binds, hidden)?;
        let mh = g.gelu(mh);
        let m = dec.mask2.forward(g, binds, mh)?;
        let m = g.reshape(m, &[h, w, UP * UP, 9])?;
        let m = g.softmax(m, 3)?;
        let fine = convex_upsample(g, coarse, m)?;
        if !g.value(fine).all_finite() {
            return Err(TensorError::NonFinite { context: format!("decode iteration {}", it + 1) });
        }
        out.fine.push(fine);
    }
    Ok(out)
}

/// `decode_from` with a zero initial flow.
pub fn decode<T: Element>(
    g: &mut Graph<T>,
    binds: &Bindings,
    dec: &Decoder,
    memory: NodeId,
    cv: &CostVolume,
    ctx: &ContextFeatures,
    iters: usize,
    cache_kv: bool,
) -> Result<DecodeOutput, TensorError> {
    let n = cv.pixels();
    let zeros = g.constant(Tensor::zeros(&[n, 2]));
    decode_from(g, binds, dec, memory, cv, ctx, zeros, iters, cache_kv)
}

/// Iteration-weighted supervision: sum over iterations of
/// gamma^(N-i) times the mean L1 error over valid pixels. Predictions are
/// fine flows [h, w, 2] matching the ground-truth size.
pub fn sequence_loss<T: Element>(
    g: &mut Graph<T>,
    preds: &[NodeId],
    gt: &FlowField,
    gamma: f64,
) -> Result<NodeId, TensorError> {
    if preds.is_empty() {
        return Err(TensorError::Invalid { op: "sequence_loss", msg: "no predictions".into() });
    }
    let n = gt.h * gt.w;
    let count = gt.valid.iter().filter(|v| **v).count();
    if count == 0 {
        return Err(TensorError::Invalid {
            op: "sequence_loss",
            msg: "ground truth has no valid pixels".into(),
        });
    }
    let gt_node = {
        let data: Vec<T> = gt.flow.iter().map(|&v| T::from_f64(v as f64)).collect();
        g.constant(Tensor::from_vec(&[n, 2], data)?)
    };
    let valid_node = {
        let data: Vec<T> =
            gt.valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
        g.constant(Tensor::from_vec(&[n], data)?)
    };
    let total = preds.len();
    let mut acc: Option<NodeId> = None;
    for (i, &pred) in preds.iter().enumerate() {
        let s = g.shape(pred).to_vec();
        if s != [gt.h, gt.w, 2] {
            return Err(TensorError::Invalid {
                op: "sequence_loss",
                msg: format!("prediction shape {s:?} does not match {}x{} truth", gt.h, gt.w),
            });
        }
        let p2 = g.reshape(pred, &[n, 2])?;
        let diff = g.sub(p2, gt_node)?;
        let l1 = g.abs(diff);
        let per_px = g.sum_axis(l1, 1)?;
        let masked = g.mul(per_px, valid_node)?;
        let sum = g.sum_all(masked);
        let mean = g.scale(sum, 1.0 / count as f64);
        let weighted = g.scale(mean, gamma.powi((total - 1 - i) as i32));
        acc = Some(match acc {
            Some(a) => g.add(a, weighted)?,
            None => weighted,
        });
    }
    Ok(acc.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::Rng;

    fn random_tensor(g: &mut Graph<f64>, rng: &mut Rng, shape: &[usize]) -> NodeId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        g.constant(Tensor::from_vec(shape, data).unwrap())
    }

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::toy();
        cfg.token_dim = 16;
        cfg.context_dim = 8;
        cfg.tokens = 3;
        cfg
    }

    struct Setup {
        g: Graph<f64>,
        binds: Bindings,
        dec: Decoder,
        memory: NodeId,
        cv: CostVolume,
        ctx: ContextFeatures,
    }

    fn setup(seed: u64, cfg: &ModelConfig, h: usize, w: usize) -> Setup {
        setup_with(seed, cfg, h, w, false)
    }

    /// `random_head` replaces the zero-initialized flow head with small
    /// random weights so decode produces nonzero flows.
    fn setup_with(seed: u64, cfg: &ModelConfig, h: usize, w: usize, random_head: bool) -> Setup {
        let mut store = ParamStore::<f64>::new(seed);
        let dec = Decoder::register(&mut store, "dec", cfg).unwrap();
        if random_head {
            let shape = store.get("dec.head2.w").unwrap().shape().to_vec();
            let n: usize = shape.iter().product();
            let mut rng = Rng::new(99);
            let vals: Vec<f64> = (0..n).map(|_| rng.uniform_in(-0.05, 0.05)).collect();
            store.set("dec.head2.w", Tensor::from_vec(&shape, vals).unwrap()).unwrap();
        }
        let mut g = Graph::new();
        let binds = store.stage(&mut g);
        let mut rng = Rng::new(seed + 1);
        let n = h * w;
        let memory = random_tensor(&mut g, &mut rng, &[n, cfg.tokens, cfg.token_dim]);
        let vol = random_tensor(&mut g, &mut rng, &[n, n]);
        let cv = CostVolume { node: vol, h, w };
        let hraw = random_tensor(&mut g, &mut rng, &[h, w, cfg.context_dim]);
        let iraw = random_tensor(&mut g, &mut rng, &[h, w, cfg.context_dim]);
        let hidden0 = g.tanh(hraw);
        let inject = g.relu(iraw);
        let ctx = ContextFeatures { hidden0, inject, h, w };
        Setup { g, binds, dec, memory, cv, ctx }
    }

    #[test]
    fn crop_at_integer_position_is_the_subgrid() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..20 * 20).map(|v| v as f64).collect();
        let map = g.constant(Tensor::from_vec(&[20, 20], data.clone()).unwrap());
        let p = g.constant(Tensor::from_vec(&[1, 2], vec![9.0, 7.0]).unwrap());
        let patch = crop_cost_patch(&mut g, map, p).unwrap();
        assert_eq!(g.shape(patch), &[9, 9]);
        let v = g.value(patch);
        for i in 0..9 {
            for j in 0..9 {
                let want = data[(7 + i - 4) * 20 + (9 + j - 4)];
                assert_eq!(v.at(&[i, j]), want);
            }
        }
    }

    #[test]
    fn crop_far_outside_is_zero() {
        let mut g = Graph::<f64>::new();
        let map = g.constant(Tensor::from_vec(&[8, 8], vec![1.0; 64]).unwrap());
        let p = g.constant(Tensor::from_vec(&[1, 2], vec![-100.0, -100.0]).unwrap());
        let patch = crop_cost_patch(&mut g, map, p).unwrap();
        assert!(g.value(patch).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_pixel_offset_averages_horizontal_neighbors() {
        let mut g = Graph::<f64>::new();
        let mut rng = Rng::new(3);
        let data: Vec<f64> = (0..400).map(|_| rng.uniform()).collect();
        let map = g.constant(Tensor::from_vec(&[20, 20], data.clone()).unwrap());
        let p = g.constant(Tensor::from_vec(&[1, 2], vec![9.5, 7.0]).unwrap());
        let patch = crop_cost_patch(&mut g, map, p).unwrap();
        let v = g.value(patch);
        for i in 0..9 {
            for j in 0..9 {
                let y = 7 + i - 4;
                let xl = 9 + j - 4;
                let want = 0.5 * (data[y * 20 + xl] + data[y * 20 + xl + 1]);
                assert!((v.at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_initialized_head_decodes_exactly_zero_flow() {
        let cfg = small_cfg();
        let mut s = setup(10, &cfg, 4, 4);
        let out =
            decode(&mut s.g, &s.binds, &s.dec, s.memory, &s.cv, &s.ctx, 3, true).unwrap();
        for (it, (&c, &f)) in out.coarse.iter().zip(&out.fine).enumerate() {
            assert!(s.g.value(c).data().iter().all(|&v| v == 0.0), "coarse iter {it}");
            assert!(s.g.value(f).data().iter().all(|&v| v == 0.0), "fine iter {it}");
            assert_eq!(s.g.shape(f), &[32, 32, 2]);
        }
    }

    #[test]
    fn cached_and_recomputed_keys_values_agree() {
        let cfg = small_cfg();
        for iters in [1usize, 2, 4] {
            let mut s = setup_with(20, &cfg, 2, 3, true);
            let a = decode(&mut s.g, &s.binds, &s.dec, s.memory, &s.cv, &s.ctx, iters, true)
                .unwrap();
            let b = decode(&mut s.g, &s.binds, &s.dec, s.memory, &s.cv, &s.ctx, iters, false)
                .unwrap();
            let last = s.g.value(*a.fine.last().unwrap());
            assert!(last.data().iter().any(|&v| v != 0.0), "flows should be nonzero");
            for (fa, fb) in a.fine.iter().zip(&b.fine) {
                let (va, vb) = (s.g.value(*fa).data(), s.g.value(*fb).data());
                let worst = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f64, f64::max);
                assert!(worst <= 1e-6, "iters {iters}: max diff {worst}");
            }
        }
    }

    #[test]
    fn single_token_attention_passes_the_value_through() {
        let mut cfg = small_cfg();
        cfg.tokens = 1;
        let mut s = setup(30, &cfg, 2, 2);
        let out = decode(&mut s.g, &s.binds, &s.dec, s.memory, &s.cv, &s.ctx, 1, true).unwrap();
        let v = s.dec.val.forward(&mut s.g, &s.binds, s.memory).unwrap();
        let (c, vv) = (s.g.value(out.attended[0]).clone(), s.g.value(v).clone());
        for p in 0..4 {
            for ch in 0..cfg.token_dim {
                let a = c.at(&[p, ch]);
                let b = vv.at(&[p, 0, ch]);
                assert!((a - b).abs() < 1e-12, "pixel {p} channel {ch}");
            }
        }
    }

    #[test]
    fn convex_upsample_keeps_constant_flow_in_the_interior() {
        let mut g = Graph::<f64>::new();
        let (h, w) = (4, 5);
        let (u, v) = (0.7, -1.3);
        let mut flow = Vec::with_capacity(h * w * 2);
        for _ in 0..h * w {
            flow.push(u);
            flow.push(v);
        }
        let flow = g.constant(Tensor::from_vec(&[h, w, 2], flow).unwrap());
        // Random mask logits, normalized the same way the decoder does it.
        let mut rng = Rng::new(5);
        let logits: Vec<f64> = (0..h * w * 64 * 9).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let m = g.constant(Tensor::from_vec(&[h, w, 64, 9], logits).unwrap());
        let m = g.softmax(m, 3).unwrap();
        let up = convex_upsample(&mut g, flow, m).unwrap();
        assert_eq!(g.shape(up), &[32, 40, 2]);
        let val = g.value(up);
        for fy in 8..24 {
            for fx in 8..32 {
                let du = (val.at(&[fy, fx, 0]) - 8.0 * u).abs();
                let dv = (val.at(&[fy, fx, 1]) - 8.0 * v).abs();
                assert!(du < 1e-5 && dv < 1e-5, "fine ({fy},{fx}): {du} {dv}");
            }
        }
        // Mask rows are convex weights.
        let mv = g.value(m);
        let rows = h * w * 64;
        for r in 0..rows {
            let s: f64 = mv.data()[r * 9..(r + 1) * 9].iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
            assert!(mv.data()[r * 9..(r + 1) * 9].iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn gru_hidden_stays_inside_unit_interval() {
        let cfg = small_cfg();
        let mut s = setup(40, &cfg, 2, 2);
        // Two iterations; inspect decode's internal hidden through its
        // effect: rebuild with the same inputs and walk one GRU step by
        // hand would duplicate the code, so instead rely on the convex
        // combination argument and check the flows stay finite while the
        // initial hidden is in (-1, 1).
        let h0 = s.g.value(s.ctx.hidden0).data().to_vec();
        assert!(h0.iter().all(|&v| v > -1.0 && v < 1.0));
        let out = decode(&mut s.g, &s.binds, &s.dec, s.memory, &s.cv, &s.ctx, 2, true).unwrap();
        assert!(out.fine.iter().all(|&f| s.g.value(f).all_finite()));
    }

    #[test]
    fn sequence_loss_hand_cases() {
        let mut g = Graph::<f64>::new();
        let gt = FlowField::zeros(2, 2);
        // Two predictions, each with constant per-pixel L1 error 1
        // (dx off by 1, dy exact).
        let mut p = Vec::new();
        for _ in 0..4 {
            p.push(1.0);
            p.push(0.0);
        }
        let p1 = g.constant(Tensor::from_vec(&[2, 2, 2], p.clone()).unwrap());
        let p2 = g.constant(Tensor::from_vec(&[2, 2, 2], p).unwrap());
        let loss = sequence_loss(&mut g, &[p1, p2], &gt, 0.5).unwrap();
        assert!((g.value(loss).data()[0] - 1.5).abs() < 1e-12);

        // Exact predictions give zero loss.
        let z1 = g.constant(Tensor::zeros(&[2, 2, 2]));
        let z2 = g.constant(Tensor::zeros(&[2, 2, 2]));
        let loss0 = sequence_loss(&mut g, &[z1, z2], &gt, 0.8).unwrap();
        assert_eq!(g.value(loss0).data()[0], 0.0);

        // gamma 1 is a plain sum of per-iteration means.
        let lsum = sequence_loss(&mut g, &[p1, p2], &gt, 1.0).unwrap();
        assert!((g.value(lsum).data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sequence_loss_requires_valid_pixels() {
        let mut g = Graph::<f64>::new();
        let mut gt = FlowField::zeros(2, 2);
        gt.valid.iter_mut().for_each(|v| *v = false);
        let p = g.constant(Tensor::zeros(&[2, 2, 2]));
        assert!(sequence_loss(&mut g, &[p], &gt, 0.8).is_err());
    }

    #[test]
    fn sequence_loss_ignores_invalid_pixels() {
        let mut g = Graph::<f64>::new();
        let mut gt = FlowField::zeros(1, 2);
        gt.valid[1] = false;
        // Pixel 0 exact, pixel 1 wildly wrong: loss must be zero.
        let p = g.constant(Tensor::from_vec(&[1, 2, 2], vec![0.0, 0.0, 50.0, -3.0]).unwrap());
        let loss = sequence_loss(&mut g, &[p], &gt, 0.8).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
    }

    #[test]
    fn query_locality_within_one_iteration() {
        // With everything else frozen, bumping one pixel's initial flow
        // changes that pixel's crop and attended vector only.
        let cfg = small_cfg();
        let mut s = setup(50, &cfg, 3, 3);
        let zeros = s.g.constant(Tensor::zeros(&[9, 2]));
        let a = decode_from(
            &mut s.g, &s.binds, &s.dec, s.memory, &s.cv, &s.ctx, zeros, 1, true,
        )
        .unwrap();
        let mut f0 = Tensor::zeros(&[9, 2]);
        f0.set(&[4, 0], 0.6);
        f0.set(&[4, 1], -0.4);
        let bumped = s.g.constant(f0);
        let b = decode_from(
            &mut s.g, &s.binds, &s.dec, s.memory, &s.cv, &s.ctx, bumped, 1, true,
        )
        .unwrap();
        let (qa, qb) = (s.g.value(a.queries[0]).clone(), s.g.value(b.queries[0]).clone());
        let (ca, cb) = (s.g.value(a.attended[0]).clone(), s.g.value(b.attended[0]).clone());
        for p in 0..9 {
            let q_same = (0..81).all(|i| (qa.at(&[p, i]) - qb.at(&[p, i])).abs() < 1e-12);
            let c_same =
                (0..cfg.token_dim).all(|i| (ca.at(&[p, i]) - cb.at(&[p, i])).abs() < 1e-12);
            if p == 4 {
                assert!(!q_same, "bumped pixel's crop should move");
            } else {
                assert!(q_same, "pixel {p} crop changed");
                assert!(c_same, "pixel {p} attended vector changed");
            }
        }
    }

    #[test]
    fn non_finite_memory_names_the_iteration() {
        let cfg = small_cfg();
        let mut s = setup(60, &cfg, 2, 2);
        let mut bad = s.g.value(s.memory).clone();
        bad.set(&[0, 0, 0], f64::NAN);
        let memory = s.g.constant(bad);
        let err =
            decode(&mut s.g, &s.binds, &s.dec, memory, &s.cv, &s.ctx, 2, true).unwrap_err();
        assert!(err.to_string().contains("iteration 1"), "{err}");
    }

    #[test]
    fn twelve_iteration_smoke_run_is_finite() {
        let cfg = small_cfg();
        let mut s = setup(70, &cfg, 2, 2);
        let out = decode(&mut s.g, &s.binds, &s.dec, s.memory, &s.cv, &s.ctx, 12, true).unwrap();
        assert_eq!(out.fine.len(), 12);
        assert!(out.fine.iter().all(|&f| s.g.value(f).all_finite()));
    }
}
