//! Compression of the cost volume into per-pixel latent token sets, then
//! joint refinement of all pixels' tokens with a transformer that
//! alternates between two grouping axes.
//!
//! Stage 1 (patchify): each source pixel's [h, w] cost map is zero-padded
//! to multiples of 8 and pushed through three stride-2 ReLU convolutions,
//! giving a patch grid of embeddings. Stage 2 (tokenize): learned
//! codewords cross-attend into the patch embeddings (keys carry a
//! positional encoding by concatenation; no output projection), so every
//! pixel is summarized by a fixed small token set regardless of image
//! size. Stage 3 (refinement): each layer first self-attends within a
//! pixel's tokens (intra), then regroups by token index and mixes across
//! the image (inter) with windowed local attention plus pooled global
//! attention, both conditioned on context features.

use crate::config::ModelConfig;
use crate::cost_volume::CostVolume;
use crate::nn::{attention, Conv2dLayer, Ffn, LayerNormLayer, Linear};
use crate::tensor::{Bindings, Element, Graph, NodeId, ParamStore, Tensor, TensorError};

const PATCH_STRIDE: usize = 8;

/// Three stride-2 convolutions mapping a [maps, h, w, 1] stack of cost
/// maps to [maps, h/8, w/8, dp] patch embeddings (after padding h and w
/// up to multiples of 8).
#[derive(Clone, Debug)]
pub struct Patchify {
    c1: Conv2dLayer,
    c2: Conv2dLayer,
    c3: Conv2dLayer,
    pub dp: usize,
}

impl Patchify {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dp: usize,
    ) -> Result<Self, TensorError> {
        Ok(Patchify {
            c1: Conv2dLayer::register(store, &format!("{name}.c1"), 1, dp / 4, 3, 2, 1)?,
            c2: Conv2dLayer::register(store, &format!("{name}.c2"), dp / 4, dp / 2, 3, 2, 1)?,
            c3: Conv2dLayer::register(store, &format!("{name}.c3"), dp / 2, dp, 3, 2, 1)?,
            dp,
        })
    }

    /// Cost volume [n, n] with n = h*w → ([n, h8, w8, dp], h8, w8).
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        cv: &CostVolume,
    ) -> Result<(NodeId, usize, usize), TensorError> {
        let n = cv.pixels();
        let maps = g.reshape(cv.node, &[n, cv.h, cv.w, 1])?;
        let pb = (PATCH_STRIDE - cv.h % PATCH_STRIDE) % PATCH_STRIDE;
        let pr = (PATCH_STRIDE - cv.w % PATCH_STRIDE) % PATCH_STRIDE;
        let maps = if pb == 0 && pr == 0 { maps } else { g.zero_pad2d(maps, pb, pr)? };
        let mut y = maps;
        for conv in [&self.c1, &self.c2, &self.c3] {
            y = conv.forward(g, binds, y)?;
            y = g.relu(y);
        }
        let s = g.shape(y).to_vec();
        Ok((y, s[1], s[2]))
    }
}

/// Sinusoidal position constants for an h x w grid, shape [h, w, dim].
/// Column index is the x coordinate.
pub fn grid_pos_embed<T: Element>(
    g: &mut Graph<T>,
    h: usize,
    w: usize,
    dim: usize,
) -> Result<NodeId, TensorError> {
    let mut coords = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            coords.push(T::from_f64(j as f64));
            coords.push(T::from_f64(i as f64));
        }
    }
    let c = g.constant(Tensor::from_vec(&[h * w, 2], coords)?);
    let pe = g.pos_embed(c, dim)?;
    g.reshape(pe, &[h, w, dim])
}

/// Learned codewords that cross-attend into patch embeddings, one token
/// set per source pixel. Keys and values see the patch embedding
/// concatenated with its position encoding; queries are the codewords
/// broadcast to every pixel. No output projection: with a single patch
/// cell the token is exactly that cell's value vector.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    key: Linear,
    val: Linear,
    codewords: String,
    pub tokens: usize,
    pub dim: usize,
    heads: usize,
}

impl Tokenizer {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dp: usize,
        tokens: usize,
        dim: usize,
        heads: usize,
    ) -> Result<Self, TensorError> {
        let codewords = format!("{name}.codewords");
        store.register(&codewords, &[tokens, dim], crate::tensor::Init::Normal { std: 0.02 })?;
        Ok(Tokenizer {
            key: Linear::register(store, &format!("{name}.key"), 2 * dp, dim, true)?,
            val: Linear::register(store, &format!("{name}.val"), 2 * dp, dim, true)?,
            codewords,
            tokens,
            dim,
            heads,
        })
    }

    /// patches [n, h8, w8, dp] → tokens [n, tokens, dim].
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        patches: NodeId,
    ) -> Result<NodeId, TensorError> {
        let s = g.shape(patches).to_vec();
        let (n, h8, w8, dp) = (s[0], s[1], s[2], s[3]);
        let pe = grid_pos_embed(g, h8, w8, dp)?;
        let pe1 = g.reshape(pe, &[1, h8, w8, dp])?;
        let peb = g.broadcast_to(pe1, &[n, h8, w8, dp])?;
        let cat = g.concat(&[patches, peb], 3)?;
        let catf = g.reshape(cat, &[n, h8 * w8, 2 * dp])?;
        let k = self.key.forward(g, binds, catf)?;
        let v = self.val.forward(g, binds, catf)?;
        let cw = binds.id(&self.codewords)?;
        let cw1 = g.reshape(cw, &[1, self.tokens, self.dim])?;
        let q = g.broadcast_to(cw1, &[n, self.tokens, self.dim])?;
        attention(g, q, k, v, self.heads)
    }
}

/// One refinement layer: token-group self-attention within each pixel,
/// then spatial mixing within each token index (windowed local attention
/// and pooled global attention, queries and keys conditioned on context
/// injection features), every sublayer pre-normalized and residual.
#[derive(Clone, Debug)]
pub struct AgtLayer {
    ln1: LayerNormLayer,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNormLayer,
    ffn1: Ffn,
    ln3: LayerNormLayer,
    lsa_q: Linear,
    lsa_k: Linear,
    lsa_v: Linear,
    lsa_o: Linear,
    ln4: LayerNormLayer,
    gsa_q: Linear,
    gsa_k: Linear,
    gsa_v: Linear,
    gsa_o: Linear,
    ln5: LayerNormLayer,
    ffn2: Ffn,
    heads: usize,
    window: usize,
}

impl AgtLayer {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        ctx_dim: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self, TensorError> {
        let dc = dim + ctx_dim;
        Ok(AgtLayer {
            ln1: LayerNormLayer::register(store, &format!("{name}.ln1"), dim)?,
            wq: Linear::register(store, &format!("{name}.intra.q"), dim, dim, true)?,
            wk: Linear::register(store, &format!("{name}.intra.k"), dim, dim, true)?,
            wv: Linear::register(store, &format!("{name}.intra.v"), dim, dim, true)?,
            wo: Linear::register(store, &format!("{name}.intra.o"), dim, dim, true)?,
            ln2: LayerNormLayer::register(store, &format!("{name}.ln2"), dim)?,
            ffn1: Ffn::register(store, &format!("{name}.ffn1"), dim, 4 * dim, dim)?,
            ln3: LayerNormLayer::register(store, &format!("{name}.ln3"), dim)?,
            lsa_q: Linear::register(store, &format!("{name}.lsa.q"), dc, dim, true)?,
            lsa_k: Linear::register(store, &format!("{name}.lsa.k"), dc, dim, true)?,
            lsa_v: Linear::register(store, &format!("{name}.lsa.v"), dim, dim, true)?,
            lsa_o: Linear::register(store, &format!("{name}.lsa.o"), dim, dim, true)?,
            ln4: LayerNormLayer::register(store, &format!("{name}.ln4"), dim)?,
            gsa_q: Linear::register(store, &format!("{name}.gsa.q"), dc, dim, true)?,
            gsa_k: Linear::register(store, &format!("{name}.gsa.k"), dc, dim, true)?,
            gsa_v: Linear::register(store, &format!("{name}.gsa.v"), dim, dim, true)?,
            gsa_o: Linear::register(store, &format!("{name}.gsa.o"), dim, dim, true)?,
            ln5: LayerNormLayer::register(store, &format!("{name}.ln5"), dim)?,
            ffn2: Ffn::register(store, &format!("{name}.ffn2"), dim, 4 * dim, dim)?,
            heads,
            window,
        })
    }

    /// Self-attention within each pixel's token set. [n, k, d] → [n, k, d].
    pub fn forward_intra<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        t: NodeId,
    ) -> Result<NodeId, TensorError> {
        let n1 = self.ln1.forward(g, binds, t)?;
        let q = self.wq.forward(g, binds, n1)?;
        let k = self.wk.forward(g, binds, n1)?;
        let v = self.wv.forward(g, binds, n1)?;
        let a = attention(g, q, k, v, self.heads)?;
        let a = self.wo.forward(g, binds, a)?;
        let t = g.add(t, a)?;
        let n2 = self.ln2.forward(g, binds, t)?;
        let f = self.ffn1.forward(g, binds, n2)?;
        g.add(t, f)
    }

    /// Spatial mixing within each token index. tokens [h*w, k, d],
    /// inject [h, w, ctx_dim] → [h*w, k, d].
    pub fn forward_inter<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        t: NodeId,
        inject: NodeId,
        h: usize,
        w: usize,
    ) -> Result<NodeId, TensorError> {
        let s = self.window;
        if h % s != 0 || w % s != 0 {
            return Err(TensorError::Invalid {
                op: "agt",
                msg: format!(
                    "grid {h}x{w} is not divisible by window {s}; choose a window that divides \
                     the grid or pad the input images"
                ),
            });
        }
        let ts = g.shape(t).to_vec();
        let (k, d) = (ts[1], ts[2]);
        let dh = g.shape(inject)[2];

        let y0 = g.reshape(t, &[h, w, k, d])?;
        let y0 = g.permute(y0, &[2, 0, 1, 3])?;
        let inj1 = g.reshape(inject, &[1, h, w, dh])?;
        let inj = g.broadcast_to(inj1, &[k, h, w, dh])?;

        // Local windows.
        let n = self.ln3.forward(g, binds, y0)?;
        let cat = g.concat(&[n, inj], 3)?;
        let cat_w = Self::partition(g, cat, k, h, w, s, d + dh)?;
        let tok_w = Self::partition(g, n, k, h, w, s, d)?;
        let q = self.lsa_q.forward(g, binds, cat_w)?;
        let kk = self.lsa_k.forward(g, binds, cat_w)?;
        let v = self.lsa_v.forward(g, binds, tok_w)?;
        let a = attention(g, q, kk, v, self.heads)?;
        let a = self.lsa_o.forward(g, binds, a)?;
        let a = Self::unpartition(g, a, k, h, w, s, d)?;
        let y1 = g.add(y0, a)?;

        // Global attention against window-pooled keys and values.
        let n = self.ln4.forward(g, binds, y1)?;
        let cat = g.concat(&[n, inj], 3)?;
        let qf = g.reshape(cat, &[k, h * w, d + dh])?;
        let q = self.gsa_q.forward(g, binds, qf)?;
        let pooled_cat = Self::window_mean(g, cat, k, h, w, s, d + dh)?;
        let pooled_tok = Self::window_mean(g, n, k, h, w, s, d)?;
        let kk = self.gsa_k.forward(g, binds, pooled_cat)?;
        let v = self.gsa_v.forward(g, binds, pooled_tok)?;
        let a = attention(g, q, kk, v, self.heads)?;
        let a = self.gsa_o.forward(g, binds, a)?;
        let a = g.reshape(a, &[k, h, w, d])?;
        let y2 = g.add(y1, a)?;

        let n = self.ln5.forward(g, binds, y2)?;
        let f = self.ffn2.forward(g, binds, n)?;
        let y3 = g.add(y2, f)?;

        let back = g.permute(y3, &[1, 2, 0, 3])?;
        g.reshape(back, &[h * w, k, d])
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        t: NodeId,
        inject: NodeId,
        h: usize,
        w: usize,
    ) -> Result<NodeId, TensorError> {
        let t = self.forward_intra(g, binds, t)?;
        self.forward_inter(g, binds, t, inject, h, w)
    }

    /// [k, h, w, c] → [k*nh*nw, s*s, c] non-overlapping windows.
    fn partition<T: Element>(
        g: &mut Graph<T>,
        x: NodeId,
        k: usize,
        h: usize,
        w: usize,
        s: usize,
        c: usize,
    ) -> Result<NodeId, TensorError> {
        let (nh, nw) = (h / s, w / s);
        let r = g.reshape(x, &[k, nh, s, nw, s, c])?;
        let p = g.permute(r, &[0, 1, 3, 2, 4, 5])?;
        g.reshape(p, &[k * nh * nw, s * s, c])
    }

    /// Inverse of `partition`.
    fn unpartition<T: Element>(
        g: &mut Graph<T>,
        x: NodeId,
        k: usize,
        h: usize,
        w: usize,
        s: usize,
        c: usize,
    ) -> Result<NodeId, TensorError> {
        let (nh, nw) = (h / s, w / s);
        let r = g.reshape(x, &[k, nh, nw, s, s, c])?;
        let p = g.permute(r, &[0, 1, 3, 2, 4, 5])?;
        g.reshape(p, &[k, h, w, c])
    }

    /// [k, h, w, c] → [k, nh*nw, c] by averaging each s x s window.
    fn window_mean<T: Element>(
        g: &mut Graph<T>,
        x: NodeId,
        k: usize,
        h: usize,
        w: usize,
        s: usize,
        c: usize,
    ) -> Result<NodeId, TensorError> {
        let (nh, nw) = (h / s, w / s);
        let r = g.reshape(x, &[k, nh, s, nw, s, c])?;
        let m1 = g.mean_axis(r, 2)?;
        let m2 = g.mean_axis(m1, 3)?;
        g.reshape(m2, &[k, nh * nw, c])
    }
}

/// Full cost encoder: patchify, tokenize, refine.
#[derive(Clone, Debug)]
pub struct CostEncoder {
    pub patch: Patchify,
    pub tok: Tokenizer,
    pub layers: Vec<AgtLayer>,
}

impl CostEncoder {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
    ) -> Result<Self, TensorError> {
        let patch = Patchify::register(store, &format!("{name}.patch"), cfg.patch_dim)?;
        let tok = Tokenizer::register(
            store,
            &format!("{name}.tok"),
            cfg.patch_dim,
            cfg.tokens,
            cfg.token_dim,
            cfg.heads(),
        )?;
        let mut layers = Vec::with_capacity(cfg.agt_depth);
        for i in 0..cfg.agt_depth {
            layers.push(AgtLayer::register(
                store,
                &format!("{name}.agt{i}"),
                cfg.token_dim,
                cfg.context_dim,
                cfg.heads(),
                cfg.window,
            )?);
        }
        Ok(CostEncoder { patch, tok, layers })
    }

    /// Cost volume plus context injection → memory [h*w, tokens, dim].
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        cv: &CostVolume,
        inject: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (patches, _, _) = self.patch.forward(g, binds, cv)?;
        let mut t = self.tok.forward(g, binds, patches)?;
        for layer in &self.layers {
            t = layer.forward(g, binds, t, inject, cv.h, cv.w)?;
        }
        Ok(t)
    }
}
