//! temporary data consistency probe
use latentflow::config::SampleKind;
use latentflow::data::synthetic::{generate, SampleSpec};

fn main() {
    for kind in [SampleKind::Affine, SampleKind::SmoothRandom] {
        println!("--- {kind:?}");
        for seed in [0u64, 1, 2, 1000, 1001] {
            let spec = SampleSpec { kind, seed, h: 64, w: 64, magnitude: 3.0 };
            let s = generate(&spec).unwrap();
            // appearance constancy both directions
            let (mut e_fwd, mut e_rev, mut n) = (0.0f64, 0.0f64, 0usize);
            let (mut mu, mut mv) = (0.0f64, 0.0f64);
            for y in 4..60usize {
                for x in 4..60usize {
                    let i = y * 64 + x;
                    if !s.gt.valid[i] { continue; }
                    let fx = s.gt.flow[2 * i] as f64;
                    let fy = s.gt.flow[2 * i + 1] as f64;
                    mu += fx; mv += fy;
                    let sample = |img: &latentflow::data::Image, xx: f64, yy: f64| -> f64 {
                        let (x0, y0) = (xx.floor() as i64, yy.floor() as i64);
                        let (wx, wy) = (xx - xx.floor(), yy - yy.floor());
                        let f = |xi: i64, yi: i64| -> f64 {
                            if xi < 0 || yi < 0 || xi >= 64 || yi >= 64 { 0.0 }
                            else { img.at(yi as usize, xi as usize, 0) as f64 }
                        };
                        f(x0,y0)*(1.0-wx)*(1.0-wy) + f(x0+1,y0)*wx*(1.0-wy)
                            + f(x0,y0+1)*(1.0-wx)*wy + f(x0+1,y0+1)*wx*wy
                    };
                    let src_v = s.src.at(y, x, 0) as f64;
                    e_fwd += (sample(&s.tgt, x as f64 + fx, y as f64 + fy) - src_v).abs();
                    e_rev += (sample(&s.tgt, x as f64 - fx, y as f64 - fy) - src_v).abs();
                    n += 1;
                }
            }
            println!("seed {seed:>4}: mean flow ({:+.3},{:+.3})  |tgt(x+f)-src(x)| {:.4}  |tgt(x-f)-src(x)| {:.4}",
                mu / n as f64, mv / n as f64, e_fwd / n as f64, e_rev / n as f64);
        }
    }
}
