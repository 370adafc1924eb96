//! temporary: does the init-time cost volume carry usable matching evidence?
use latentflow::config::ModelConfig;
use latentflow::data::synthetic::textured_image;
use latentflow::data::Image;
use latentflow::model::FlowModel;
use latentflow::tensor::Graph;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut mc = ModelConfig::toy();
    let size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    if let Some(fd) = std::env::args().nth(2).and_then(|s| s.parse().ok()) {
        mc.feat_dim = fd;
    }
    let (model, store) = FlowModel::with_new_store::<f32>(&mc)?;
    // translate exactly one grid cell (8 px) right: tgt[y, x+8] = src[y, x]
    let base = textured_image(3, size, size);
    let mut tgt = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let sx = x as i64 - 8;
                let v = if sx < 0 { 0.0 } else { base.at(y, sx as usize, c) };
                tgt.set(y, x, c, v);
            }
        }
    }
    let mut g = Graph::new();
    let binds = store.stage(&mut g);
    let pair = model.encode_pair(&mut g, &binds, &base, &tgt)?;
    let cv = model.build_cost(&mut g, &pair)?;
    let vals = g.value(cv.node).data();
    let (h, w) = (cv.h, cv.w);
    let mut hits = 0;
    let mut total = 0;
    let mut margin_sum = 0.0f64;
    for i in 1..h - 1 {
        for j in 1..w - 2 {
            let row = &vals[(i * w + j) * h * w..(i * w + j + 1) * h * w];
            let expect = i * w + (j + 1);
            let (mut bi, mut bv) = (0usize, f32::NEG_INFINITY);
            let mut second = f32::NEG_INFINITY;
            for (k, &v) in row.iter().enumerate() {
                if v > bv { second = bv; bv = v; bi = k; } else if v > second { second = v; }
            }
            if bi == expect { hits += 1; margin_sum += (bv - second) as f64; }
            total += 1;
        }
    }
    println!("argmax at translated cell: {hits}/{total} interior cells");
    println!("mean top-2 margin when correct: {:.4}", margin_sum / hits.max(1) as f64);
    let mean: f64 = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
    let var: f64 = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    println!("cost stats: mean {:.4} std {:.4}", mean, var.sqrt());
    Ok(())
}
