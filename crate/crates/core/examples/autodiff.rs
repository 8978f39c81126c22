//! Reverse-mode gradients, a finite-difference check and a few AdamW steps
//! fitting a linear map.

use zsdistill::tensor::{
    grad_check, AdamW, AdamWConfig, Graph, ParamStore, Real, ScalarFn, Tensor, Var,
};

/// `sum(log_softmax(x · xᵀ)) / n`
struct SelfAttentionScore;

impl ScalarFn for SelfAttentionScore {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: Var) -> zsdistill::tensor::Result<Var> {
        let xt = g.transpose(x)?;
        let s = g.matmul(x, xt)?;
        let l = g.log_softmax(s, 1)?;
        let total = g.sum(l);
        Ok(g.scale(total, 1.0 / g.value(x).dims2().0 as f64))
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut g = Graph::<f32>::new();
    let a = g.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])?);
    let b = g.param(Tensor::from_rows(&[vec![0.5], vec![-0.1]])?);
    let y = g.matmul(a, b)?;
    let y = g.relu(y);
    let loss = g.sum(y);
    g.backward(loss)?;
    println!("loss {}", g.value(loss).item());
    println!("dL/da {:?}", g.grad(a).unwrap().data());
    println!("dL/db {:?}", g.grad(b).unwrap().data());

    let x = Tensor::from_rows(&[
        vec![0.3, -0.2, 0.9],
        vec![0.1, 0.4, -0.5],
        vec![-0.7, 0.2, 0.05],
    ])?;
    let rep = grad_check(&SelfAttentionScore, &x, 1e-3, 1e-3)?;
    println!(
        "grad check: max rel error {:.2e}, passed {}",
        rep.max_rel_error, rep.passed
    );

    // y = 2x - 1
    let xs = Tensor::new([8, 1], (0..8).map(|i| i as f32 / 4.0).collect())?;
    let ys = Tensor::new([8, 1], xs.data().iter().map(|x| 2.0 * x - 1.0).collect())?;
    let mut params = ParamStore::new();
    params.insert("w", Tensor::zeros([1, 1]));
    params.insert("b", Tensor::zeros([1]));
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.05,
        ..Default::default()
    });
    for step in 0..400 {
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let xv = g.constant(xs.clone());
        let yv = g.constant(ys.clone());
        let h = g.matmul(xv, p["w"])?;
        let h = g.add_row(h, p["b"])?;
        let d = g.sub(h, yv)?;
        let sq = g.mul(d, d)?;
        let mse = g.mean(sq);
        g.backward(mse)?;
        let grads = ParamStore::collect_grads(&g, &p);
        opt.step(&mut params, &grads)?;
        if step % 100 == 0 {
            println!("step {step:3} mse {:.5}", g.value(mse).item());
        }
    }
    println!(
        "w {:.3} b {:.3}",
        params.get("w").unwrap().item(),
        params.get("b").unwrap().item()
    );
    Ok(())
}
