//! Walk a synthetic pair through the cost encoder and print the shape at
//! every stage: images, feature grids, cost volume, and the latent cost
//! memory that the decoder will query. An 80x80 input gives a 10x10 grid,
//! whose cost maps are padded to 16x16 and patchified to 2x2, so each
//! map is summarized by several keys rather than one.

use latentflow::config::{ModelConfig, SampleKind};
use latentflow::data::synthetic::{generate, SampleSpec};
use latentflow::model::FlowModel;
use latentflow::tensor::{Element, Graph};

fn stats<T: Element>(data: &[T]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| Element::to_f64(v)).sum::<f64>() / n;
    let var = data
        .iter()
        .map(|&v| {
            let d = Element::to_f64(v) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mc = ModelConfig::toy();
    let (model, store) = FlowModel::with_new_store::<f32>(&mc)?;

    let spec = SampleSpec { kind: SampleKind::Affine, seed: 5, h: 80, w: 80, magnitude: 4.0 };
    let sample = generate(&spec)?;

    let mut g = Graph::new();
    let binds = store.stage(&mut g);
    let pair = model.encode_pair(&mut g, &binds, &sample.src, &sample.tgt)?;
    println!("images           {}x{} rgb", sample.src.h, sample.src.w);
    println!("feature grids    {:?}", g.shape(pair.src.node));
    println!("context features {:?}", g.shape(pair.ctx.inject));

    let cv = model.build_cost(&mut g, &pair)?;
    println!("cost volume      [{}, {}]", cv.pixels(), cv.pixels());

    let memory = model.encode_memory(&mut g, &binds, &cv, &pair.ctx)?;
    let mshape = g.shape(memory).to_vec();
    println!(
        "cost memory      {:?} = {} pixels x {} tokens x {} dims",
        mshape, mshape[0], mshape[1], mshape[2]
    );

    let (mean, std) = stats(g.value(memory).data());
    println!("memory stats     mean {mean:+.4}, std {std:.4}");

    // Distance between the first pixel's tokens shows the tokenizer
    // produced distinct summaries, not one vector repeated.
    let data = g.value(memory).data();
    let d = mshape[2];
    let mut max_gap = 0.0f64;
    for a in 0..mshape[1] {
        for b in a + 1..mshape[1] {
            let gap: f64 = (0..d)
                .map(|k| {
                    let x = Element::to_f64(data[a * d + k]) - Element::to_f64(data[b * d + k]);
                    x * x
                })
                .sum::<f64>()
                .sqrt();
            max_gap = max_gap.max(gap);
        }
    }
    println!("largest distance between pixel 0's tokens: {max_gap:.4}");
    Ok(())
}
