//! From-scratch training on synthetic pairs: Adam with global-norm
//! gradient clipping, a one-cycle learning-rate schedule, and a
//! deterministic step loop that logs loss and endpoint error.

use crate::config::TrainConfig;
use crate::cost_decoder::sequence_loss;
use crate::data::metrics::aepe;
use crate::data::synthetic::SyntheticSample;
use crate::data::DataError;
use crate::model::{flow_from_node, FlowModel, ModelError};
use crate::tensor::{Element, Graph, ParamStore, Tensor, TensorError};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("no training samples")]
    NoSamples,
}

/// Adam moments, kept in f64 no matter the training precision.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step<T: Element>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<(), TensorError> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, grad) in grads {
            let cur = store.get(name)?;
            let shape = cur.shape().to_vec();
            let mut vals: Vec<f64> = cur.data().iter().map(|&x| Element::to_f64(x)).collect();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                vals[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
            let data: Vec<T> = vals.iter().map(|&x| T::from_f64(x)).collect();
            store.set(name, Tensor::from_vec(&shape, data)?)?;
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

/// Scale all gradients by min(1, max_norm / global_norm). Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        for &x in g {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One-cycle schedule: linear warmup over the first 5% of steps, then
/// linear decay from the peak to peak/25.
pub fn one_cycle_lr(step: usize, total: usize, peak: f64) -> f64 {
    assert!(total > 0);
    let warmup = (total / 20).max(1);
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    if total == warmup {
        return peak;
    }
    let floor = peak / 25.0;
    let frac = (step - warmup + 1) as f64 / (total - warmup) as f64;
    peak - (peak - floor) * frac
}

#[derive(Clone, Debug)]
pub struct StepRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub aepe: f64,
}

/// Run the training loop over `samples` (cycled in order) for
/// `cfg.steps` steps. `on_step` sees every completed step; training ends
/// early when `cfg.target_aepe` is positive and reached. Zero steps is a
/// no-op that leaves the store at initialization.
pub fn train_model<T: Element>(
    model: &FlowModel,
    store: &mut ParamStore<T>,
    samples: &[SyntheticSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRow),
) -> Result<Vec<StepRow>, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let mut opt = Adam::new();
    let mut rows = Vec::with_capacity(cfg.steps);
    let names: Vec<String> = store.names().map(String::from).collect();
    for step in 0..cfg.steps {
        let sample = &samples[step % samples.len()];
        let mut g = Graph::new();
        let binds = store.stage(&mut g);
        let pass =
            model.forward(&mut g, &binds, &sample.src, &sample.tgt, model.cfg.iters_train, true)?;
        let loss = sequence_loss(&mut g, &pass.fine, &sample.gt, model.cfg.gamma)?;
        let loss_val = Element::to_f64(g.value(loss).data()[0]);
        if !loss_val.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        g.backward(loss)?;
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for name in &names {
            let id = binds.id(name)?;
            if let Some(grad) = g.grad(id) {
                grads.insert(name.clone(), grad.iter().map(|&x| Element::to_f64(x)).collect());
            }
        }
        clip_global_norm(&mut grads, 1.0);
        let lr = one_cycle_lr(step, cfg.steps, cfg.lr);
        opt.step(store, &grads, lr)?;

        let pred = flow_from_node(&g, *pass.fine.last().unwrap());
        let err = aepe(&pred, &sample.gt)?;
        let row = StepRow { step, lr, loss: loss_val, aepe: err };
        on_step(&row);
        rows.push(row);
        if cfg.target_aepe > 0.0 && err < cfg.target_aepe {
            break;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, SampleKind, TrainConfig};
    use crate::data::synthetic::{generate, SampleSpec};

    #[test]
    fn one_cycle_peaks_after_warmup_and_decays() {
        let total = 100;
        let peak = 2e-3;
        let warmup = 5;
        assert!((one_cycle_lr(warmup - 1, total, peak) - peak).abs() < 1e-12);
        assert!(one_cycle_lr(0, total, peak) < peak);
        for s in 1..warmup {
            assert!(one_cycle_lr(s, total, peak) > one_cycle_lr(s - 1, total, peak));
        }
        for s in warmup + 1..total {
            assert!(one_cycle_lr(s, total, peak) < one_cycle_lr(s - 1, total, peak));
        }
        let last = one_cycle_lr(total - 1, total, peak);
        assert!(last > peak / 25.0 - 1e-9 && last < peak / 20.0);
    }

    #[test]
    fn clip_leaves_small_gradients_alone_and_scales_large_ones() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), vec![0.3, 0.4]);
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 0.5).abs() < 1e-12);
        assert_eq!(grads["a"], vec![0.3, 0.4]);
        grads.insert("a".to_string(), vec![3.0, 4.0]);
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped = &grads["a"];
        assert!((clipped[0] - 0.6).abs() < 1e-12 && (clipped[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn adam_moves_parameters_against_the_gradient() {
        let mut store = ParamStore::<f64>::new(0);
        store.register("p", &[2], crate::tensor::Init::Ones).unwrap();
        let mut opt = Adam::new();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![1.0, -1.0]);
        opt.step(&mut store, &grads, 0.1).unwrap();
        let p = store.get("p").unwrap().data().to_vec();
        assert!(p[0] < 1.0 && p[1] > 1.0);
    }

    fn quick_cfg() -> (ModelConfig, TrainConfig) {
        let mut mc = ModelConfig::toy();
        mc.feat_dim = 16;
        mc.patch_dim = 8;
        mc.token_dim = 16;
        mc.context_dim = 8;
        mc.tokens = 2;
        mc.iters_train = 2;
        let mut tc = TrainConfig::default();
        tc.steps = 3;
        tc.image_h = 16;
        tc.image_w = 16;
        tc.magnitude = 2.0;
        tc.kind = SampleKind::SmoothRandom;
        (mc, tc)
    }

    #[test]
    fn a_few_steps_change_parameters_and_log_rows() {
        let (mc, tc) = quick_cfg();
        let (model, mut store) = FlowModel::with_new_store::<f32>(&mc).unwrap();
        let before = store.get("dec.gru.z.w").unwrap().data().to_vec();
        let spec = SampleSpec {
            h: tc.image_h,
            w: tc.image_w,
            kind: tc.kind,
            magnitude: tc.magnitude,
            seed: 0,
        };
        let sample = generate(&spec).unwrap();
        let mut seen = 0;
        let rows = train_model(&model, &mut store, &[sample], &tc, |_| seen += 1).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(seen, 3);
        assert!(rows.iter().all(|r| r.loss.is_finite() && r.aepe.is_finite()));
        let after = store.get("dec.gru.z.w").unwrap().data().to_vec();
        assert_ne!(before, after);
    }

    #[test]
    fn same_seed_trains_identically() {
        let (mc, tc) = quick_cfg();
        let run = || {
            let (model, mut store) = FlowModel::with_new_store::<f32>(&mc).unwrap();
            let spec = SampleSpec {
                h: tc.image_h,
                w: tc.image_w,
                kind: tc.kind,
                magnitude: tc.magnitude,
                seed: 7,
            };
            let sample = generate(&spec).unwrap();
            let rows = train_model(&model, &mut store, &[sample], &tc, |_| {}).unwrap();
            let losses: Vec<f64> = rows.iter().map(|r| r.loss).collect();
            let p = store.get("dec.head1.w").unwrap().data().to_vec();
            (losses, p)
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn zero_steps_leaves_initialization_untouched() {
        let (mc, mut tc) = quick_cfg();
        tc.steps = 0;
        let (model, mut store) = FlowModel::with_new_store::<f32>(&mc).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        let before: Vec<Vec<f32>> = names.iter().map(|n| store.get(n).unwrap().data().to_vec()).collect();
        let spec = SampleSpec { h: 16, w: 16, kind: SampleKind::SmoothRandom, magnitude: 2.0, seed: 0 };
        let sample = generate(&spec).unwrap();
        let rows = train_model(&model, &mut store, &[sample], &tc, |_| {}).unwrap();
        assert!(rows.is_empty());
        for (n, b) in names.iter().zip(before) {
            assert_eq!(store.get(n).unwrap().data(), &b[..], "{n} changed");
        }
    }
}
