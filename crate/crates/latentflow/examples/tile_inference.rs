//! Estimate flow on an image larger than the training resolution by
//! running the model on four overlapping corner tiles and blending the
//! tile flows with Gaussian weights centered on each tile.

use latentflow::cli::jitter_params;
use latentflow::config::ModelConfig;
use latentflow::data::synthetic::textured_image;
use latentflow::model::FlowModel;
use latentflow::tiling::{gaussian_weight, tile_infer, TilePlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mc = ModelConfig::toy();
    let (model, mut store) = FlowModel::with_new_store::<f32>(&mc)?;
    jitter_params(&mut store, 0.05, 23)?;

    let (test_h, test_w) = (96, 80);
    let (tile_h, tile_w) = (64, 64);
    let plan = TilePlan::new(tile_h, tile_w, test_h, test_w)?;
    println!("test image {test_h}x{test_w}, tiles {tile_h}x{tile_w}");
    for (i, (r, c)) in plan.origins.iter().enumerate() {
        println!("  tile {i} at rows {r}..{}, cols {c}..{}", r + tile_h, c + tile_w);
    }

    println!("tile weight at center {:.3}", gaussian_weight(32.0, 32.0, tile_h, tile_w));
    println!("tile weight at corner {:.3e}", gaussian_weight(0.0, 0.0, tile_h, tile_w));

    let src = textured_image(41, test_h, test_w);
    let tgt = textured_image(42, test_h, test_w);
    let flow = tile_infer(&model, &store, &src, &tgt, tile_h, tile_w, 4, 1)?;
    let maxabs = flow.flow.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    println!("blended flow {}x{}, max |flow| {maxabs:.3}", flow.h, flow.w);

    // Degenerate case: a tile the size of the image is one plain pass.
    let small_src = textured_image(43, tile_h, tile_w);
    let small_tgt = textured_image(44, tile_h, tile_w);
    let tiled = tile_infer(&model, &store, &small_src, &small_tgt, tile_h, tile_w, 4, 1)?;
    let single = model.infer(&store, &small_src, &small_tgt, 4)?;
    let worst = tiled
        .flow
        .iter()
        .zip(&single.flow)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("tile == image size: difference from a single pass {worst:.2e}");
    Ok(())
}
