//! temporary attainability probe: linear readout from init-time cost crops
//!
//! Fits ridge regression from each pixel's 9x9 cost crop (at the pixel's own
//! position, i.e. zero current flow) to the ground-truth coarse flow, using
//! the 50 training samples, then scores the 10 held-out samples. If even this
//! oracle readout cannot halve the zero-flow baseline, no training schedule
//! of the recurrent head can.

use latentflow::config::{ModelConfig, SampleKind};
use latentflow::cost_volume::cost_map_slice;
use latentflow::data::metrics::zero_flow_aepe;
use latentflow::data::synthetic::{generate, SampleSpec};
use latentflow::model::FlowModel;
use latentflow::tensor::Graph;

const R: usize = 4;
const D: usize = 162;

fn crops_and_targets(
    model: &FlowModel,
    store: &latentflow::tensor::ParamStore<f32>,
    spec: &SampleSpec,
    rows: &mut Vec<[f64; D + 1]>,
    targets: &mut Vec<[f64; 2]>,
) {
    let s = generate(spec).unwrap();
    let mut g = Graph::new();
    let binds = store.stage(&mut g);
    let pair = model.encode_pair(&mut g, &binds, &s.src, &s.tgt).unwrap();
    let cv = model.build_cost(&mut g, &pair).unwrap();
    let vol = g.value(cv.node);
    let (h, w) = (cv.h, cv.w);
    let mut global = [0.0f64; 81];
    for r in 0..h {
        for c in 0..w {
            let map = cost_map_slice(vol, h, w, r * w + c).unwrap();
            for dr in 0..9 {
                for dc in 0..9 {
                    let rr = r as isize + dr as isize - R as isize;
                    let cc = c as isize + dc as isize - R as isize;
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        global[dr * 9 + dc] += map[rr as usize * w + cc as usize] as f64;
                    }
                }
            }
        }
    }
    for v in global.iter_mut() {
        *v /= (h * w) as f64;
    }
    for r in 0..h {
        for c in 0..w {
            let map = cost_map_slice(vol, h, w, r * w + c).unwrap();
            let mut row = [0.0f64; D + 1];
            for dr in 0..9 {
                for dc in 0..9 {
                    let rr = r as isize + dr as isize - R as isize;
                    let cc = c as isize + dc as isize - R as isize;
                    row[dr * 9 + dc] = if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        map[rr as usize * w + cc as usize] as f64
                    } else {
                        0.0
                    };
                }
            }
            row[81..162].copy_from_slice(&global);
            row[D] = 1.0;
            rows.push(row);
            // coarse ground truth: average the 8x8 block, in cells
            let mut fx = 0.0;
            let mut fy = 0.0;
            for ir in 0..8 {
                for ic in 0..8 {
                    let px = (r * 8 + ir) * s.gt.w + c * 8 + ic;
                    fx += s.gt.flow[px * 2] as f64;
                    fy += s.gt.flow[px * 2 + 1] as f64;
                }
            }
            targets.push([fx / 64.0 / 8.0, fy / 64.0 / 8.0]);
        }
    }
}

fn solve(a: &mut Vec<Vec<f64>>, b: &mut Vec<[f64; 2]>) {
    let n = a.len();
    for i in 0..n {
        let mut piv = i;
        for k in i + 1..n {
            if a[k][i].abs() > a[piv][i].abs() {
                piv = k;
            }
        }
        a.swap(i, piv);
        b.swap(i, piv);
        let d = a[i][i];
        for v in a[i].iter_mut() {
            *v /= d;
        }
        b[i][0] /= d;
        b[i][1] /= d;
        for k in 0..n {
            if k != i && a[k][i] != 0.0 {
                let f = a[k][i];
                for j in 0..n {
                    a[k][j] -= f * a[i][j];
                }
                b[k][0] -= f * b[i][0];
                b[k][1] -= f * b[i][1];
            }
        }
    }
}

fn main() {
    let size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(96);
    let mag: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(6.0);
    let featdim: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let gain: f32 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let lambda: f64 = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let mut mc = ModelConfig::toy();
    mc.feat_dim = featdim;
    let (model, mut store) = FlowModel::with_new_store::<f32>(&mc).unwrap();
    if gain != 1.0 {
        let mut t = store.get("feat.c4.w").unwrap().clone();
        for v in t.data_mut() {
            *v *= gain;
        }
        store.set("feat.c4.w", t).unwrap();
    }

    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for seed in 0..50u64 {
        let spec = SampleSpec { kind: SampleKind::Affine, seed, h: size, w: size, magnitude: mag };
        crops_and_targets(&model, &store, &spec, &mut rows, &mut targets);
    }
    println!("{} training rows", rows.len());

    // normal equations with ridge
    let n = D + 1;
    let mut ata = vec![vec![0.0f64; n]; n];
    let mut atb = vec![[0.0f64; 2]; n];
    for (row, t) in rows.iter().zip(&targets) {
        for i in 0..n {
            if row[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                ata[i][j] += row[i] * row[j];
            }
            atb[i][0] += row[i] * t[0];
            atb[i][1] += row[i] * t[1];
        }
    }
    let m = rows.len() as f64;
    for i in 0..n {
        ata[i][i] += lambda * m;
    }
    solve(&mut ata, &mut atb);
    let wx: Vec<f64> = atb.iter().map(|v| v[0]).collect();
    let wy: Vec<f64> = atb.iter().map(|v| v[1]).collect();

    // held-out evaluation at full resolution via nearest-cell lookup
    let mut model_sum = 0.0;
    let mut zero_sum = 0.0;
    for seed in 1000..1010u64 {
        let spec = SampleSpec { kind: SampleKind::Affine, seed, h: size, w: size, magnitude: mag };
        let mut rows_t = Vec::new();
        let mut tg = Vec::new();
        crops_and_targets(&model, &store, &spec, &mut rows_t, &mut tg);
        let s = generate(&spec).unwrap();
        let gw = size / 8;
        let mut err_sum = 0.0;
        let mut count = 0usize;
        for r in 0..size {
            for c in 0..size {
                let px = r * size + c;
                if !s.gt.valid[px] {
                    continue;
                }
                let cell = (r / 8) * gw + c / 8;
                let mut px_f = 0.0;
                let mut py_f = 0.0;
                for i in 0..n {
                    px_f += rows_t[cell][i] * wx[i];
                    py_f += rows_t[cell][i] * wy[i];
                }
                let dx = px_f * 8.0 - s.gt.flow[px * 2] as f64;
                let dy = py_f * 8.0 - s.gt.flow[px * 2 + 1] as f64;
                err_sum += (dx * dx + dy * dy).sqrt();
                count += 1;
            }
        }
        model_sum += err_sum / count as f64;
        zero_sum += zero_flow_aepe(&s.gt).unwrap();
    }
    println!(
        "ridge readout held-out AEPE {:.4}  zero {:.4}  ratio {:.3}",
        model_sum / 10.0,
        zero_sum / 10.0,
        model_sum / zero_sum
    );
}
