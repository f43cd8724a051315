//! Central finite-difference checks of reverse-mode gradients, in f64.

use crate::{Graph, Result, Tensor, Var};

/// Builds a scalar-or-tensor output from input variables.
pub type Build = dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>;

/// Reduces `out` to a scalar with fixed weights so every output entry
/// contributes a distinct amount to the checked gradient.
fn project<'g>(out: Var<'g, f64>) -> Result<Var<'g, f64>> {
    let shape = out.shape();
    let w = Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 0.618_033_988_75).fract() - 0.4);
    out.mul(out.graph().constant(w))?.sum()
}

fn eval(inputs: &[Tensor<f64>], f: &Build) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    Ok(project(f(&g, &vars)?)?.value().data()[0])
}

/// Largest entry-wise relative error between reverse-mode and central
/// differences with step `h`, over every entry of every input. Denominators
/// are floored at `1e-6`.
pub fn max_rel_err(inputs: &[Tensor<f64>], f: &Build, h: f64) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = project(f(&g, &vars)?)?;
    g.backward(loss)?;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus, f)? - eval(&minus, f)?) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    Ok(worst)
}

/// Runs [`max_rel_err`] with `h = 1e-5` on every differentiable operation.
/// `sample` supplies input values in `[-1, 1)`.
pub fn primitive_suite(sample: &mut dyn FnMut() -> f64) -> Result<Vec<(&'static str, f64)>> {
    let mut random = |shape: &[usize]| Tensor::from_fn(shape, |_| sample());
    // Keeps values away from 0 so kinks and poles are not straddled by ±h.
    let away = |t: Tensor<f64>| t.map(|v| if v < 0.0 { v * 1.3 - 0.2 } else { v * 1.3 + 0.2 });
    let a = away(random(&[2, 3, 4]));
    let b = away(random(&[2, 3, 4]));
    let bc = away(random(&[2, 1, 4]));
    let r = random(&[2, 3, 4, 2]);
    let r2 = random(&[2, 2, 4, 2]);
    let x = random(&[2, 3, 6, 6]);
    let w = random(&[4, 3, 3, 3]);
    let bias = random(&[4]);
    let m1 = random(&[2, 3, 5]);
    let m2 = random(&[2, 5, 4]);
    let shared = random(&[5, 4]);
    let lin_b = random(&[4]);
    let ln_x = random(&[3, 6]);
    let gamma = random(&[6]);
    let beta = random(&[6]);
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, Box<Build>)> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|_, v| v[0].add(v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|_, v| v[0].sub(v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|_, v| v[0].mul(v[1]))),
        ("div", vec![a.clone(), b.clone()], Box::new(|_, v| v[0].div(v[1]))),
        ("add_bcast", vec![a.clone(), bc.clone()], Box::new(|_, v| v[0].add(v[1]))),
        ("mul_bcast", vec![bc.clone(), a.clone()], Box::new(|_, v| v[0].mul(v[1]))),
        ("div_bcast", vec![a.clone(), bc.clone()], Box::new(|_, v| v[0].div(v[1]))),
        ("add_scalar", vec![a.clone()], Box::new(|_, v| v[0].add_scalar(0.3))),
        ("mul_scalar", vec![a.clone()], Box::new(|_, v| v[0].mul_scalar(-1.7))),
        ("neg", vec![a.clone()], Box::new(|_, v| v[0].neg())),
        ("relu", vec![a.clone()], Box::new(|_, v| v[0].relu())),
        ("gelu", vec![a.clone()], Box::new(|_, v| v[0].gelu())),
        ("softplus", vec![a.clone()], Box::new(|_, v| v[0].softplus())),
        ("exp", vec![a.clone()], Box::new(|_, v| v[0].exp())),
        ("reciprocal", vec![a.clone()], Box::new(|_, v| v[0].reciprocal())),
        ("abs", vec![a.clone()], Box::new(|_, v| v[0].abs())),
        ("sqr", vec![a.clone()], Box::new(|_, v| v[0].sqr())),
        ("sqrt", vec![a.map(f64::abs)], Box::new(|_, v| v[0].sqrt())),
        ("sum", vec![r.clone()], Box::new(|_, v| v[0].sqr()?.sum())),
        ("mean", vec![r.clone()], Box::new(|_, v| v[0].sqr()?.mean())),
        ("sum_axis", vec![r.clone()], Box::new(|_, v| v[0].sum_axis(1))),
        ("mean_axis", vec![r.clone()], Box::new(|_, v| v[0].mean_axis(3))),
        ("reshape", vec![r.clone()], Box::new(|_, v| v[0].reshape(&[6, 8])?.sqr())),
        ("permute", vec![r.clone()], Box::new(|_, v| v[0].permute(&[0, 2, 3, 1])?.sqr())),
        ("concat", vec![r.clone(), r2], Box::new(|_, v| Var::concat(&[v[0], v[1]], 1)?.sqr())),
        ("slice", vec![r.clone()], Box::new(|_, v| v[0].slice(2, 1, 2)?.sqr())),
        ("upsample2x", vec![r], Box::new(|_, v| v[0].upsample2x()?.sqr())),
        ("conv2d", vec![x.clone(), w.clone(), bias], Box::new(|_, v| v[0].conv2d(v[1], Some(v[2]), 1))),
        ("conv2d_stride2", vec![x, w], Box::new(|_, v| v[0].conv2d(v[1], None, 2))),
        ("matmul", vec![m1.clone(), m2], Box::new(|_, v| v[0].matmul(v[1]))),
        ("matmul_shared", vec![m1.clone(), shared.clone()], Box::new(|_, v| v[0].matmul(v[1]))),
        ("transpose_last", vec![m1.clone()], Box::new(|_, v| v[0].transpose_last()?.sqr())),
        ("linear", vec![m1, shared, lin_b], Box::new(|_, v| v[0].linear(v[1], Some(v[2])))),
        ("softmax", vec![ln_x.clone()], Box::new(|_, v| v[0].mul_scalar(2.0)?.softmax())),
        ("layer_norm", vec![ln_x, gamma, beta], Box::new(|_, v| v[0].layer_norm(v[1], v[2]))),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, max_rel_err(&inputs, f.as_ref(), 1e-5)?)))
        .collect()
}
