//! The assembled flow model: feature and context encoders, cost volume,
//! cost encoder, and recurrent decoder behind one registration and one
//! forward pass.

use crate::config::{ConfigError, ModelConfig};
use crate::cost_decoder::{decode, Decoder, DecodeOutput};
use crate::cost_encoder::CostEncoder;
use crate::cost_volume::{build_cost_volume, CostVolume};
use crate::data::{DataError, FlowField, Image};
use crate::encoders::{
    encode_context, encode_features, ContextFeatures, ConvEncoder, FeatureGrid, FEATURE_MID_GAIN,
};
use crate::tensor::{Bindings, Element, Graph, NodeId, ParamStore, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    pub cfg: ModelConfig,
    pub feat: ConvEncoder,
    pub ctx: ConvEncoder,
    pub enc: CostEncoder,
    pub dec: Decoder,
}

/// Both images encoded, ready for cost-volume construction.
pub struct EncodedPair {
    pub src: FeatureGrid,
    pub tgt: FeatureGrid,
    pub ctx: ContextFeatures,
    pub img_h: usize,
    pub img_w: usize,
}

/// One full forward pass with handles on every stage.
pub struct ForwardPass {
    pub grid_h: usize,
    pub grid_w: usize,
    /// [h*w, h*w] matching-cost matrix.
    pub cost_volume: NodeId,
    /// The same costs viewed as [h, w, h, w].
    pub cost_volume_4d: NodeId,
    /// [h*w, tokens, token_dim] latent summary.
    pub memory: NodeId,
    /// Per-iteration coarse flows, [h, w, 2].
    pub coarse: Vec<NodeId>,
    /// Per-iteration upsampled flows cropped to the input size,
    /// [img_h, img_w, 2].
    pub fine: Vec<NodeId>,
}

impl FlowModel {
    pub fn register<T: Element>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let feat =
            ConvEncoder::register_with_mid_gain(store, "feat", cfg.feat_dim, FEATURE_MID_GAIN)?;
        let ctx = ConvEncoder::register(store, "ctx", 2 * cfg.context_dim)?;
        let enc = CostEncoder::register(store, "enc", cfg)?;
        let dec = Decoder::register(store, "dec", cfg)?;
        Ok(FlowModel { cfg: cfg.clone(), feat, ctx, enc, dec })
    }

    /// Fresh store seeded from the config, with every parameter of this
    /// model registered.
    pub fn with_new_store<T: Element>(cfg: &ModelConfig) -> Result<(Self, ParamStore<T>), ModelError> {
        let mut store = ParamStore::new(cfg.seed);
        let model = Self::register(cfg, &mut store)?;
        Ok((model, store))
    }

    pub fn encode_pair<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        src: &Image,
        tgt: &Image,
    ) -> Result<EncodedPair, ModelError> {
        if src.h != tgt.h || src.w != tgt.w {
            return Err(ModelError::SizeMismatch(src.h, src.w, tgt.h, tgt.w));
        }
        let sg = encode_features(g, binds, &self.feat, src)?;
        let tg = encode_features(g, binds, &self.feat, tgt)?;
        let ctx = encode_context(g, binds, &self.ctx, src)?;
        Ok(EncodedPair { src: sg, tgt: tg, ctx, img_h: src.h, img_w: src.w })
    }

    pub fn build_cost<T: Element>(
        &self,
        g: &mut Graph<T>,
        pair: &EncodedPair,
    ) -> Result<CostVolume, ModelError> {
        Ok(build_cost_volume(g, &pair.src, &pair.tgt)?)
    }

    pub fn encode_memory<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        cv: &CostVolume,
        ctx: &ContextFeatures,
    ) -> Result<NodeId, ModelError> {
        Ok(self.enc.forward(g, binds, cv, ctx.inject)?)
    }

    pub fn decode_flow<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        memory: NodeId,
        cv: &CostVolume,
        ctx: &ContextFeatures,
        iters: usize,
        cache_kv: bool,
    ) -> Result<DecodeOutput, ModelError> {
        Ok(decode(g, binds, &self.dec, memory, cv, ctx, iters, cache_kv)?)
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        src: &Image,
        tgt: &Image,
        iters: usize,
        cache_kv: bool,
    ) -> Result<ForwardPass, ModelError> {
        let pair = self.encode_pair(g, binds, src, tgt)?;
        let cv = self.build_cost(g, &pair)?;
        let memory = self.encode_memory(g, binds, &cv, &pair.ctx)?;
        let out = self.decode_flow(g, binds, memory, &cv, &pair.ctx, iters, cache_kv)?;
        let cost_volume_4d = g.reshape(cv.node, &[cv.h, cv.w, cv.h, cv.w])?;
        let mut fine = Vec::with_capacity(out.fine.len());
        for &f in &out.fine {
            fine.push(crop_to(g, f, pair.img_h, pair.img_w)?);
        }
        Ok(ForwardPass {
            grid_h: cv.h,
            grid_w: cv.w,
            cost_volume: cv.node,
            cost_volume_4d,
            memory,
            coarse: out.coarse,
            fine,
        })
    }

    /// Single-pass inference: run `iters` decoder iterations and return
    /// the final flow at input resolution, all pixels valid.
    pub fn infer<T: Element>(
        &self,
        store: &ParamStore<T>,
        src: &Image,
        tgt: &Image,
        iters: usize,
    ) -> Result<FlowField, ModelError> {
        let mut g = Graph::new();
        let binds = store.stage(&mut g);
        let pass = self.forward(&mut g, &binds, src, tgt, iters, true)?;
        let last = *pass.fine.last().expect("iters >= 1 guarantees a prediction");
        Ok(flow_from_node(&g, last))
    }
}

/// Crop an upsampled [h8, w8, 2] flow back to the unpadded input size.
fn crop_to<T: Element>(
    g: &mut Graph<T>,
    f: NodeId,
    h: usize,
    w: usize,
) -> Result<NodeId, TensorError> {
    let s = g.shape(f).to_vec();
    let mut out = f;
    if s[0] != h {
        out = g.narrow(out, 0, 0, h)?;
    }
    if s[1] != w {
        out = g.narrow(out, 1, 0, w)?;
    }
    Ok(out)
}

/// Read a [h, w, 2] flow node into a fully-valid flow field.
pub fn flow_from_node<T: Element>(g: &Graph<T>, node: NodeId) -> FlowField {
    let t = g.value(node);
    let s = t.shape();
    let mut field = FlowField::zeros(s[0], s[1]);
    for (dst, src) in field.flow.iter_mut().zip(t.data()) {
        *dst = Element::to_f64(*src) as f32;
    }
    field
}
