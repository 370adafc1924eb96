//! temporary: RMS of the four GRU input blocks at init
use latentflow::config::{ModelConfig, SampleKind};
use latentflow::data::synthetic::{generate, SampleSpec};
use latentflow::model::FlowModel;
use latentflow::tensor::graph::Graph;

fn rms(v: &[f32]) -> f64 {
    let s: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum();
    (s / v.len() as f64).sqrt()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut mc = ModelConfig::toy();
    mc.feat_dim = 16;
    let size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(96);
    let gain: f32 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(8.0);
    let (model, mut store) = FlowModel::with_new_store::<f32>(&mc)?;
    if gain != 1.0 {
        let mut t = store.get("feat.c4.w")?.clone();
        for v in t.data_mut() { *v *= gain; }
        store.set("feat.c4.w", t)?;
    }
    let spec = SampleSpec { kind: SampleKind::Affine, seed: 3, h: size, w: size, magnitude: 16.0 };
    let s = generate(&spec)?;
    let mut g: Graph<f32> = Graph::new();
    let binds = store.stage(&mut g);
    let pair = model.encode_pair(&mut g, &binds, &s.src, &s.tgt)?;
    let cv = model.build_cost(&mut g, &pair)?;
    let memory = model.encode_memory(&mut g, &binds, &cv, &pair.ctx)?;
    let out = model.decode_flow(&mut g, &binds, memory, &cv, &pair.ctx, 2, true)?;
    println!("cost volume rms {:.4}", rms(g.value(cv.node).data()));
    println!("memory rms      {:.4}", rms(g.value(memory).data()));
    println!("inject rms      {:.4}", rms(g.value(pair.ctx.inject).data()));
    println!("hidden0 rms     {:.4}", rms(g.value(pair.ctx.hidden0).data()));
    for it in 0..out.queries.len() {
        let q = rms(g.value(out.queries[it]).data());
        let c = rms(g.value(out.attended[it]).data());
        println!("iter {it}: crop q rms {:.4}   attended c rms {:.6}   ratio c/q {:.5}", q, c, c / q);
    }
    // Per-column spread of the attended vectors: how much do they vary across
    // pixels (the consensus signal must vary with the query to carry info).
    let c0 = g.value(out.attended[0]);
    let sh = c0.shape().to_vec();
    let (n, d) = (sh[0], sh[1]);
    let data = c0.data();
    let mut var_sum = 0.0f64;
    for j in 0..d {
        let mut mean = 0.0f64;
        for i in 0..n { mean += data[i * d + j] as f64; }
        mean /= n as f64;
        let mut var = 0.0f64;
        for i in 0..n { let dv = data[i * d + j] as f64 - mean; var += dv * dv; }
        var_sum += var / n as f64;
    }
    println!("attended per-pixel std (mean over dims) {:.6}", (var_sum / d as f64).sqrt());

    // GRU gate health at init: fraction of saturated units.
    let sat = |name: &str, node, kind: &str| {
        let v = g.value(node).data();
        let frac = match kind {
            "tanh" => v.iter().filter(|&&x| x.abs() > 0.96).count() as f64 / v.len() as f64,
            _ => v.iter().filter(|&&x| x < 0.02 || x > 0.98).count() as f64 / v.len() as f64,
        };
        println!("{name}: saturated fraction {:.3}", frac);
    };
    sat("gru z (sigmoid)", out.gates_z[0], "sig");
    sat("gru r (sigmoid)", out.gates_r[0], "sig");
    sat("gru cand (tanh)", out.gates_c[0], "tanh");
    Ok(())
}
