//! Finite-difference verification of tape gradients.
//!
//! For sampled parameter coordinates θ the analytic gradient is compared
//! against the central difference (f(θ+ε) − f(θ−ε)) / 2ε. Run this at f64;
//! at f32 the subtraction cancels most of the mantissa and the comparison
//! is meaningless.
//!
//! The check is only valid where the loss is differentiable. Kinked ops
//! (relu, abs, bilinear sampling at integer coordinates) disagree with the
//! oracle exactly on their kinks, so callers should evaluate at a generic
//! point, e.g. by jittering parameters first.

use super::graph::{Graph, NodeId};
use super::param::{Bindings, ParamStore};
use super::rng::Rng;
use super::TensorError;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub eps: f64,
    /// Coordinates sampled per parameter tensor (all of them if smaller).
    pub per_param: usize,
    /// Two gradients whose magnitudes are both below this are treated as
    /// agreeing; relative error is meaningless at zero.
    pub atol: f64,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-4, per_param: 8, atol: 1e-7, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat coordinate, analytic value, numeric value at the worst error.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn worst_param(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
    }
}

fn rel_err(a: f64, n: f64, atol: f64) -> f64 {
    if a.abs() < atol && n.abs() < atol {
        return 0.0;
    }
    (a - n).abs() / a.abs().max(n.abs())
}

/// Checks the gradients of `loss_fn` with respect to every parameter in the
/// store. `loss_fn` must be a deterministic function of the parameters and
/// must produce a scalar.
pub fn check<F>(
    store: &mut ParamStore<f64>,
    mut loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Graph<f64>, &Bindings) -> Result<NodeId, TensorError>,
{
    let mut graph = Graph::new();
    let binds = store.stage(&mut graph);
    let loss = loss_fn(&mut graph, &binds)?;
    if graph.value(loss).numel() != 1 {
        return Err(TensorError::Invalid {
            op: "gradcheck",
            msg: format!("loss must be scalar, got {:?}", graph.shape(loss)),
        });
    }
    if let Some((id, op)) = graph.first_non_finite() {
        return Err(TensorError::NonFinite {
            context: format!("forward node {} ({op})", id.0),
        });
    }
    graph.backward(loss)?;

    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    let mut analytic = Vec::with_capacity(names.len());
    for name in &names {
        let id = binds.id(name)?;
        let g = graph.grad(id).ok_or_else(|| TensorError::Invalid {
            op: "gradcheck",
            msg: format!("no gradient reached parameter {name}"),
        })?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { context: format!("gradient of {name}") });
        }
        analytic.push(g.to_vec());
    }
    drop(graph);

    let mut eval = |store: &mut ParamStore<f64>| -> Result<f64, TensorError> {
        let mut graph = Graph::new();
        let binds = store.stage(&mut graph);
        let loss = loss_fn(&mut graph, &binds)?;
        let v = graph.value(loss).data()[0];
        if !v.is_finite() {
            let ctx = graph
                .first_non_finite()
                .map(|(id, op)| format!("node {} ({op})", id.0))
                .unwrap_or_else(|| "loss".to_string());
            return Err(TensorError::NonFinite { context: ctx });
        }
        Ok(v)
    };

    let mut rng = Rng::for_name(opts.seed, "gradcheck.coords");
    let mut params = Vec::with_capacity(names.len());
    let mut coords_checked = 0usize;
    let mut global_max = 0.0f64;

    for (pi, name) in names.iter().enumerate() {
        let n = store.get(name)?.numel();
        let coords: Vec<usize> = if n <= opts.per_param {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut all);
            all.truncate(opts.per_param);
            all
        };

        let mut report = ParamReport {
            name: name.clone(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst: None,
        };
        for &ci in &coords {
            let orig = store.get(name)?.data()[ci];
            store.get_mut(name)?.data_mut()[ci] = orig + opts.eps;
            let plus = eval(store)?;
            store.get_mut(name)?.data_mut()[ci] = orig - opts.eps;
            let minus = eval(store)?;
            store.get_mut(name)?.data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[pi][ci];
            let err = rel_err(a, numeric, opts.atol);
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ci, a, numeric));
            }
            coords_checked += 1;
        }
        global_max = global_max.max(report.max_rel_err);
        params.push(report);
    }

    Ok(GradCheckReport { params, coords_checked, max_rel_err: global_max })
}
