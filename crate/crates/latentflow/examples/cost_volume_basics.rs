//! Build the all-pairs cost volume for a pair where the second image is
//! the first shifted right by 8 pixels, then read one source pixel's
//! cost map and locate its best match. With a pure translation the
//! argmax of each interior cost map sits one grid cell to the right of
//! the source cell, even with untrained features.

use latentflow::config::ModelConfig;
use latentflow::cost_volume::cost_map_slice;
use latentflow::data::synthetic::textured_image;
use latentflow::data::Image;
use latentflow::model::FlowModel;
use latentflow::tensor::Graph;

fn shift_right(img: &Image, px: usize) -> Image {
    let mut out = img.clone();
    for r in 0..img.h {
        for c in 0..img.w {
            let sc = c.saturating_sub(px).min(img.w - 1);
            for ch in 0..3 {
                out.rgb[(r * img.w + c) * 3 + ch] = img.rgb[(r * img.w + sc) * 3 + ch];
            }
        }
    }
    out
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mc = ModelConfig::toy();
    let (model, store) = FlowModel::with_new_store::<f32>(&mc)?;

    let src = textured_image(3, 64, 64);
    let tgt = shift_right(&src, 8);

    let mut g = Graph::new();
    let binds = store.stage(&mut g);
    let pair = model.encode_pair(&mut g, &binds, &src, &tgt)?;
    let cv = model.build_cost(&mut g, &pair)?;
    println!(
        "feature grid {}x{}, cost volume [{}, {}] ({} costs)",
        cv.h,
        cv.w,
        cv.pixels(),
        cv.pixels(),
        cv.pixels() * cv.pixels()
    );

    // An 8 px shift is exactly one cell at 1/8 resolution, so pixel
    // (r, c) should match (r, c+1). Count how many interior cost maps
    // agree.
    let mut hits = 0;
    let mut total = 0;
    for r in 1..cv.h - 1 {
        for c in 1..cv.w - 2 {
            let map = cost_map_slice(g.value(cv.node), cv.h, cv.w, r * cv.w + c)?;
            let best = map
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if best == r * cv.w + c + 1 {
                hits += 1;
            }
            total += 1;
        }
    }
    println!("argmax lands one cell right for {hits}/{total} interior source pixels");

    let map = cost_map_slice(g.value(cv.node), cv.h, cv.w, 3 * cv.w + 3)?;
    let row: Vec<String> = (0..cv.w).map(|c| format!("{:+.2}", map[3 * cv.w + c])).collect();
    println!("cost map of cell (3,3), row 3: [{}]", row.join(", "));
    Ok(())
}
