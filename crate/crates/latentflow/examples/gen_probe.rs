//! temporary generalization probe
use latentflow::config::{ModelConfig, SampleKind, TrainConfig};
use latentflow::data::metrics::{aepe, zero_flow_aepe};
use latentflow::data::synthetic::{generate, SampleSpec, SyntheticSample};
use latentflow::tensor::graph::Graph;
use latentflow::model::FlowModel;
use latentflow::tensor::param::ParamStore;
use latentflow::train::{clip_global_norm, one_cycle_lr, Adam};
use latentflow::cost_decoder::sequence_loss;
use std::collections::BTreeMap;

fn heldout(
    model: &FlowModel,
    store: &ParamStore<f32>,
    kind: SampleKind,
    size: usize,
    mag: f64,
    iters: usize,
) -> (f64, f64) {
    let mut m = 0.0;
    let mut z = 0.0;
    for i in 1000..1010u64 {
        let spec = SampleSpec { kind, seed: i, h: size, w: size, magnitude: mag };
        let s = generate(&spec).unwrap();
        let pred = model.infer(store, &s.src, &s.tgt, iters).unwrap();
        m += aepe(&pred, &s.gt).unwrap();
        z += zero_flow_aepe(&s.gt).unwrap();
    }
    (m / 10.0, m / z)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut mc = ModelConfig::toy();
    if let Some(fd) = std::env::args().nth(5).and_then(|s| s.parse().ok()) { mc.feat_dim = fd; }
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let mag: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(3.0);
    let size: usize = std::env::args().nth(6).and_then(|s| s.parse().ok()).unwrap_or(64);
    let gain: f32 = std::env::args().nth(7).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let eval_every: usize = std::env::args().nth(8).and_then(|s| s.parse().ok()).unwrap_or(500);
    let kind_arg = std::env::args().nth(3).unwrap_or_default();
    let kind = if kind_arg == "smooth" { SampleKind::SmoothRandom } else { SampleKind::Affine };
    let tc = TrainConfig {
        steps,
        lr,
        kind,
        samples: 50,
        image_h: size,
        image_w: size,
        magnitude: mag,
        target_aepe: 0.0,
    };
    let mut train: Vec<SyntheticSample> = Vec::new();
    for i in 0..50u64 {
        let spec = SampleSpec { kind: tc.kind, seed: i, h: size, w: size, magnitude: mag };
        train.push(generate(&spec)?);
    }
    let (model, mut store) = FlowModel::with_new_store::<f32>(&mc)?;
    if gain != 1.0 {
        let mut t = store.get("feat.c4.w")?.clone();
        for v in t.data_mut() { *v *= gain; }
        store.set("feat.c4.w", t)?;
    }
    let t0 = std::time::Instant::now();
    let mut opt = Adam::new();
    let names: Vec<String> = store.names().map(String::from).collect();
    for step in 0..tc.steps {
        let sample = &train[step % train.len()];
        let mut g = Graph::new();
        let binds = store.stage(&mut g);
        let pass =
            model.forward(&mut g, &binds, &sample.src, &sample.tgt, model.cfg.iters_train, true)?;
        let loss = sequence_loss(&mut g, &pass.fine, &sample.gt, model.cfg.gamma)?;
        let loss_val = g.value(loss).data()[0] as f64;
        g.backward(loss)?;
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for name in &names {
            let id = binds.id(name)?;
            if let Some(grad) = g.grad(id) {
                grads.insert(name.clone(), grad.iter().map(|&x| x as f64).collect());
            }
        }
        clip_global_norm(&mut grads, 1.0);
        let lr_now = one_cycle_lr(step, tc.steps, tc.lr);
        opt.step(&mut store, &grads, lr_now)?;
        if step % 50 == 0 {
            println!("step {:>4} loss {:.4} lr {:.2e}", step, loss_val, lr_now);
        }
        if eval_every > 0 && step > 0 && step % eval_every == 0 {
            let (a6, r6) = heldout(&model, &store, kind, size, mag, 6);
            println!("  [step {:>4}] held-out AEPE@6 {:.4} ratio@6 {:.3}", step, a6, r6);
        }
    }
    println!("trained {} steps in {:.1}s", steps, t0.elapsed().as_secs_f64());
    for iters in [2usize, 4, 6, 12] {
        let (a, r) = heldout(&model, &store, kind, size, mag, iters);
        println!("held-out AEPE@{} {:.4} ratio {:.3}", iters, a, r);
    }
    Ok(())
}
