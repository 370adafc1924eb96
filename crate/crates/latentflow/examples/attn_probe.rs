//! temporary: does a [b,1,d] x [b,4,d] attention pass gradients to q and k?
use latentflow::nn::attention;
use latentflow::tensor::{Graph, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut g: Graph<f64> = Graph::new();
    let b = 3;
    let (n, m, d) = (1usize, 4usize, 8usize);
    let mk = |g: &mut Graph<f64>, shape: &[usize], seed: u64| {
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|i| ((i as f64 * 0.37 + seed as f64 * 1.91).sin()) * 0.7).collect();
        g.leaf(Tensor::from_vec(shape, data).unwrap())
    };
    let q = mk(&mut g, &[b, n, d], 1);
    let k = mk(&mut g, &[b, m, d], 2);
    let v = mk(&mut g, &[b, m, d], 3);
    let out = attention(&mut g, q, k, v, 1)?;
    let loss = g.mean_all(out);
    g.backward(loss)?;
    let gq = g.grad(q).unwrap().to_vec();
    let gk = g.grad(k).unwrap().to_vec();
    let gv = g.grad(v).unwrap().to_vec();
    let norm = |t: &[f64]| t.iter().map(|x| x * x).sum::<f64>().sqrt();
    println!("grad norms: q {:.3e}  k {:.3e}  v {:.3e}", norm(&gq), norm(&gk), norm(&gv));

    // numeric check on q[0]
    let f = |g: &mut Graph<f64>, qv: f64| -> f64 {
        let mut g2: Graph<f64> = Graph::new();
        let _ = g;
        let len = b * n * d;
        let mut data: Vec<f64> = (0..len).map(|i| ((i as f64 * 0.37 + 1.91).sin()) * 0.7).collect();
        data[0] = qv;
        let q2 = g2.leaf(Tensor::from_vec(&[b, n, d], data).unwrap());
        let k2 = {
            let len = b * m * d;
            let data: Vec<f64> = (0..len).map(|i| ((i as f64 * 0.37 + 2.0 * 1.91).sin()) * 0.7).collect();
            g2.leaf(Tensor::from_vec(&[b, m, d], data).unwrap())
        };
        let v2 = {
            let len = b * m * d;
            let data: Vec<f64> = (0..len).map(|i| ((i as f64 * 0.37 + 3.0 * 1.91).sin()) * 0.7).collect();
            g2.leaf(Tensor::from_vec(&[b, m, d], data).unwrap())
        };
        let out2 = attention(&mut g2, q2, k2, v2, 1).unwrap();
        let l2 = g2.mean_all(out2);
        g2.value(l2).data()[0]
    };
    let q00 = ((0.37f64 * 0.0 + 1.91).sin()) * 0.7;
    let eps = 1e-5;
    let num = (f(&mut g, q00 + eps) - f(&mut g, q00 - eps)) / (2.0 * eps);
    println!("q[0] analytic {:.6e} numeric {:.6e}", gq[0], num);
    Ok(())
}
