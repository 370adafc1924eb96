//! Layers as named parameter bundles. A layer owns its parameter names and
//! hyperparameters only; values live in the `ParamStore` and are staged per
//! graph, so the same layer definition runs at either precision.

use crate::tensor::{Bindings, Element, Graph, Init, NodeId, ParamStore, TensorError};

#[derive(Clone, Debug)]
pub struct Linear {
    w: String,
    b: Option<String>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Result<Self, TensorError> {
        Self::register_with_gain(store, name, din, dout, bias, 1.0)
    }

    /// Like `register` but with the weight init scaled by `gain`, for
    /// layers whose output must enter a saturating unit at a controlled
    /// amplitude.
    pub fn register_with_gain<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self, TensorError> {
        let w = format!("{name}.w");
        store.register(&w, &[din, dout], Init::ScaledKaimingUniform { fan_in: din, gain })?;
        let b = if bias {
            let b = format!("{name}.b");
            store.register(&b, &[dout], Init::Zeros)?;
            Some(b)
        } else {
            None
        };
        Ok(Linear { w, b, din, dout })
    }

    /// Applies to the last axis; higher-rank inputs are flattened and
    /// restored around the matmul.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let shape = g.shape(x).to_vec();
        let din = *shape.last().ok_or(TensorError::Invalid {
            op: "linear",
            msg: "input must have rank >= 1".into(),
        })?;
        if din != self.din {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: shape.clone(),
                rhs: vec![self.din],
            });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let x2 = g.reshape(x, &[rows, din])?;
        let w = binds.id(&self.w)?;
        let mut y = g.matmul(x2, w)?;
        if let Some(bn) = &self.b {
            let b = binds.id(bn)?;
            y = g.add(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.dout;
        g.reshape(y, &out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    w: String,
    b: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        Self::register_with_gain(store, name, ci, co, k, stride, pad, 1.0)
    }

    /// Like `register` but with the weight init scaled by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn register_with_gain<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Result<Self, TensorError> {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        let init = Init::ScaledKaimingUniform { fan_in: k * k * ci, gain };
        store.register(&w, &[co, k, k, ci], init)?;
        store.register(&b, &[co], Init::Zeros)?;
        Ok(Conv2dLayer { w, b, stride, pad })
    }

    /// Weight and bias start at exactly zero, so the layer's first output
    /// is zero no matter the input.
    pub fn register_zeroed<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.register(&w, &[co, k, k, ci], Init::Zeros)?;
        store.register(&b, &[co], Init::Zeros)?;
        Ok(Conv2dLayer { w, b, stride, pad })
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let w = binds.id(&self.w)?;
        let b = binds.id(&self.b)?;
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormLayer {
    gamma: String,
    beta: String,
}

impl LayerNormLayer {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
    ) -> Result<Self, TensorError> {
        let gamma = format!("{name}.g");
        let beta = format!("{name}.b");
        store.register(&gamma, &[d], Init::Ones)?;
        store.register(&beta, &[d], Init::Zeros)?;
        Ok(LayerNormLayer { gamma, beta })
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let gamma = binds.id(&self.gamma)?;
        let beta = binds.id(&self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}

/// Two linear layers with GELU between.
#[derive(Clone, Debug)]
pub struct Ffn {
    l1: Linear,
    l2: Linear,
}

impl Ffn {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
    ) -> Result<Self, TensorError> {
        Ok(Ffn {
            l1: Linear::register(store, &format!("{name}.l1"), din, hidden, true)?,
            l2: Linear::register(store, &format!("{name}.l2"), hidden, dout, true)?,
        })
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        binds: &Bindings,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let h = self.l1.forward(g, binds, x)?;
        let h = g.gelu(h);
        self.l2.forward(g, binds, h)
    }
}

/// Multi-head scaled dot-product attention over batched sets.
///
/// q [batch, n, d], k [batch, m, d], v [batch, m, dv] → [batch, n, dv].
/// Projections are the caller's business; this is only the mixing step, so
/// call sites that need no projections (queries that are learned codewords,
/// for instance) use it directly.
pub fn attention<T: Element>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
) -> Result<NodeId, TensorError> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
        return Err(TensorError::Invalid {
            op: "attention",
            msg: format!("expected rank-3 q/k/v, got {sq:?} {sk:?} {sv:?}"),
        });
    }
    let (b, n, d) = (sq[0], sq[1], sq[2]);
    let (m, dv) = (sk[1], sv[2]);
    if sk[0] != b || sv[0] != b || sk[2] != d || sv[1] != m {
        return Err(TensorError::ShapeMismatch { op: "attention", lhs: sk, rhs: sv });
    }
    if heads == 0 || d % heads != 0 || dv % heads != 0 {
        return Err(TensorError::Invalid {
            op: "attention",
            msg: format!("{heads} heads do not divide dims {d}/{dv}"),
        });
    }
    let (dh, dvh) = (d / heads, dv / heads);

    let split = |g: &mut Graph<T>, x: NodeId, len: usize, dd: usize| -> Result<NodeId, TensorError> {
        let x = g.reshape(x, &[b, len, heads, dd])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * heads, len, dd])
    };
    let qh = split(g, q, n, dh)?;
    let kh = split(g, k, m, dh)?;
    let vh = split(g, v, m, dvh)?;

    let kt = g.permute(kh, &[0, 2, 1])?;
    let scores = g.bmm(qh, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax(scores, 2)?;
    let out = g.bmm(weights, vh)?;

    let out = g.reshape(out, &[b, heads, n, dvh])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    g.reshape(out, &[b, n, dv])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::Rng;
    use crate::tensor::Tensor;

    fn rand_node(g: &mut Graph<f64>, rng: &mut Rng, shape: &[usize]) -> NodeId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        g.constant(Tensor::from_vec(shape, data).unwrap())
    }

    #[test]
    fn linear_matches_manual_matmul() {
        let mut store = ParamStore::<f64>::new(1);
        let lin = Linear::register(&mut store, "l", 3, 2, true).unwrap();
        let mut g = Graph::new();
        let binds = store.stage(&mut g);
        let x = g.constant(Tensor::from_vec(&[2, 2, 3], (0..12).map(|i| i as f64).collect()).unwrap());
        let y = lin.forward(&mut g, &binds, x).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 2]);
        // row [3,4,5] against column 0 of w (bias is zero-initialized)
        let w = store.get("l.w").unwrap();
        let expected = 3.0 * w.data()[0] + 4.0 * w.data()[2] + 5.0 * w.data()[4];
        assert!((g.value(y).data()[2] - expected).abs() < 1e-12);
    }

    #[test]
    fn ffn_keeps_batch_shape() {
        let mut store = ParamStore::<f64>::new(2);
        let ffn = Ffn::register(&mut store, "f", 4, 8, 4).unwrap();
        let mut g = Graph::new();
        let binds = store.stage(&mut g);
        let mut rng = Rng::new(0);
        let x = rand_node(&mut g, &mut rng, &[3, 5, 4]);
        let y = ffn.forward(&mut g, &binds, x).unwrap();
        assert_eq!(g.shape(y), &[3, 5, 4]);
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let mut g = Graph::new();
        let mut rng = Rng::new(3);
        let q = rand_node(&mut g, &mut rng, &[2, 3, 8]);
        let k = rand_node(&mut g, &mut rng, &[2, 5, 8]);
        let v = rand_node(&mut g, &mut rng, &[2, 5, 8]);
        let _ = attention(&mut g, q, k, v, 2).unwrap();
        let softmaxes = g.softmax_nodes();
        assert_eq!(softmaxes.len(), 1);
        let (id, axis) = softmaxes[0];
        let t = g.value(id);
        let len = t.shape()[axis];
        for row in t.data().chunks(len) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_over_single_key_returns_the_value() {
        let mut g = Graph::new();
        let mut rng = Rng::new(4);
        let q = rand_node(&mut g, &mut rng, &[1, 3, 4]);
        let k = rand_node(&mut g, &mut rng, &[1, 1, 4]);
        let v = rand_node(&mut g, &mut rng, &[1, 1, 4]);
        let out = attention(&mut g, q, k, v, 2).unwrap();
        let vv = g.value(v).data().to_vec();
        for row in g.value(out).data().chunks(4) {
            for (a, b) in row.iter().zip(&vv) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_head_attention_matches_direct_formula() {
        let mut g = Graph::new();
        let mut rng = Rng::new(5);
        let q = rand_node(&mut g, &mut rng, &[1, 2, 4]);
        let k = rand_node(&mut g, &mut rng, &[1, 3, 4]);
        let v = rand_node(&mut g, &mut rng, &[1, 3, 4]);
        let out = attention(&mut g, q, k, v, 1).unwrap();

        let (qd, kd, vd) = (g.value(q).data(), g.value(k).data(), g.value(v).data());
        let scale = 1.0 / 2.0;
        for i in 0..2 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|c| qd[i * 4 + c] * kd[j * 4 + c]).sum::<f64>() * scale)
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..4 {
                let want: f64 = (0..3).map(|j| exps[j] / z * vd[j * 4 + c]).sum();
                let got = g.value(out).data()[i * 4 + c];
                assert!((want - got).abs() < 1e-12, "{want} vs {got}");
            }
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = Rng::new(6);
        let shapes: [&[usize]; 3] = [&[2, 2, 4], &[2, 3, 4], &[2, 3, 4]];
        let inits: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                Tensor::from_vec(s, (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
            })
            .collect();
        let eval = |ts: &[Tensor<f64>], grads: bool| -> (f64, Vec<Vec<f64>>) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = ts.iter().map(|t| g.leaf(t.clone())).collect();
            let out = attention(&mut g, ids[0], ids[1], ids[2], 2).unwrap();
            let sq = g.mul(out, out).unwrap();
            let loss = g.sum_all(sq);
            let lv = g.value(loss).data()[0];
            if !grads {
                return (lv, Vec::new());
            }
            g.backward(loss).unwrap();
            (lv, ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect())
        };
        let (_, analytic) = eval(&inits, true);
        let eps = 1e-5;
        for ti in 0..3 {
            for ci in 0..inits[ti].numel() {
                let mut plus = inits.clone();
                plus[ti].data_mut()[ci] += eps;
                let mut minus = inits.clone();
                minus[ti].data_mut()[ci] -= eps;
                let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * eps);
                let a = analytic[ti][ci];
                assert!(
                    (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6) < 1e-6,
                    "tensor {ti} coord {ci}: {a} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn zeroed_conv_outputs_zero() {
        let mut store = ParamStore::<f64>::new(7);
        let conv = Conv2dLayer::register_zeroed(&mut store, "z", 3, 2, 3, 1, 1).unwrap();
        let mut g = Graph::new();
        let binds = store.stage(&mut g);
        let mut rng = Rng::new(8);
        let x = rand_node(&mut g, &mut rng, &[1, 4, 4, 3]);
        let y = conv.forward(&mut g, &binds, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
