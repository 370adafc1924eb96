//! Overfit the toy model to a single synthetic pair, then inspect how the
//! flow estimate improves across decoder iterations at inference time.
//!
//!     cargo run --release --example overfit_single_pair

use latentflow::config::{ModelConfig, SampleKind, TrainConfig};
use latentflow::data::metrics::aepe;
use latentflow::data::synthetic::{generate, SampleSpec};
use latentflow::model::{flow_from_node, FlowModel};
use latentflow::tensor::Graph;
use latentflow::train::train_model;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mc = ModelConfig::toy();
    let tc = TrainConfig {
        steps: 500,
        lr: 2e-3,
        kind: SampleKind::SmoothRandom,
        samples: 1,
        image_h: 64,
        image_w: 64,
        magnitude: 3.0,
        target_aepe: 0.0,
    };

    let spec = SampleSpec {
        kind: tc.kind,
        seed: mc.seed,
        h: tc.image_h,
        w: tc.image_w,
        magnitude: tc.magnitude,
    };
    let sample = generate(&spec)?;

    let (model, mut store) = FlowModel::with_new_store::<f32>(&mc)?;
    println!("training for {} steps (full one-cycle schedule)", tc.steps);
    let rows = train_model(&model, &mut store, &[sample.clone()], &tc, |row| {
        if row.step % 50 == 0 {
            println!("step {:>4}  lr {:.2e}  loss {:.4}  aepe {:.4}", row.step, row.lr, row.loss, row.aepe);
        }
    })?;
    let last = rows.last().expect("at least one step");
    println!("stopped at step {} with train AEPE {:.4}", last.step, last.aepe);

    let mut g = Graph::new();
    let binds = store.stage(&mut g);
    let pass = model.forward(&mut g, &binds, &sample.src, &sample.tgt, mc.iters_eval, true)?;
    println!("\nper-iteration AEPE at inference ({} iterations):", pass.fine.len());
    for (i, &node) in pass.fine.iter().enumerate() {
        let flow = flow_from_node(&g, node);
        println!("  iteration {:>2}: {:.4}", i + 1, aepe(&flow, &sample.gt)?);
    }
    Ok(())
}
