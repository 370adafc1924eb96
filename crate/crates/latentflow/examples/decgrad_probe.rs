//! temporary: which decoder tensors get gradient through the full model?
use latentflow::config::{ModelConfig, SampleKind};
use latentflow::cost_decoder::sequence_loss;
use latentflow::data::synthetic::{generate, SampleSpec};
use latentflow::model::FlowModel;
use latentflow::tensor::{Graph, Element};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut mc = ModelConfig::toy();
    if let Some(fd) = std::env::args().nth(2).and_then(|s| s.parse().ok()) { mc.feat_dim = fd; }
    let size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let (model, mut store) = FlowModel::with_new_store::<f32>(&mc)?;
    // nudge the flow head off zero so flows move and the crop path is live
    for name in ["dec.head2.w", "dec.head2.b"] {
        let t = store.get(name)?;
        let shape = t.shape().to_vec();
        let data: Vec<f32> = t.data().iter().enumerate()
            .map(|(i, &v)| v + if i % 2 == 0 { 0.05 } else { -0.05 }).collect();
        store.set(name, latentflow::tensor::Tensor::from_vec(&shape, data)?)?;
    }
    let spec = SampleSpec { kind: SampleKind::Affine, seed: 5, h: size, w: size, magnitude: 6.0 };
    let s = generate(&spec)?;
    for cache in [true, false] {
        let mut g = Graph::new();
        let binds = store.stage(&mut g);
        let pass = model.forward(&mut g, &binds, &s.src, &s.tgt, 2, cache)?;
        let loss = sequence_loss(&mut g, &pass.fine, &s.gt, mc.gamma)?;
        g.backward(loss)?;
        println!("--- cache_kv = {cache}");
        for name in ["dec.key.w", "dec.key.b", "dec.val.w", "dec.q_inner.l1.w", "dec.q_outer.l1.w",
                     "dec.head2.w", "dec.gru.c.w", "feat.c1.w", "enc.tok.codewords"] {
            let id = binds.id(name)?;
            match g.grad(id) {
                Some(gr) => {
                    let n2: f64 = gr.iter().map(|&x| { let v = Element::to_f64(x); v * v }).sum();
                    println!("  {name:<18} grad norm {:.6e}", n2.sqrt());
                }
                None => println!("  {name:<18} NO GRAD"),
            }
        }
    }
    Ok(())
}
