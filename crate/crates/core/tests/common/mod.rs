#![allow(dead_code)]

use padm_core::bridge::Schedule;

/// `|a − b| / max(|b|, 1)`: relative error that stays defined at zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Largest violation of `m_0 = 0`, `m_T = 1`, `δ_0 = δ_T = 0`, monotone `m`,
/// non-negative variances and `δ̃_1 = 0`.
pub fn schedule_invariant_residual(s: &Schedule) -> f64 {
    let t = s.t_max();
    let mut worst: f64 = [s.m()[0], s.m()[t] - 1.0, s.delta()[0], s.delta()[t], s.delta_tilde()[1]]
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if s.m().windows(2).any(|w| w[1] <= w[0]) {
        worst = f64::INFINITY;
    }
    let negative = s.delta().iter().chain(&s.delta_cond()[1..]).chain(&s.delta_tilde()[1..]);
    for v in negative {
        worst = worst.max(-v.min(0.0));
    }
    worst
}

/// Substitutes the forward mean and `x̂0 = x0` into the reverse step and
/// compares against the forward mean at `t − 1`, separately for the
/// coefficients of `x0` and `y`.
pub fn reverse_mean_residual(s: &Schedule) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 1..=s.t_max() {
        let (mt, ms) = (s.m()[t], s.m()[t - 1]);
        let (cx, cy, ce) = (s.c_x()[t], s.c_y()[t], s.c_eps()[t]);
        // x_t = (1 − m_t)·x0 + m_t·y; x_t − x0 = −m_t·x0 + m_t·y.
        let coef_x0 = cx * (1.0 - mt) - ce * (-mt);
        let coef_y = cx * mt + cy - ce * mt;
        worst = worst.max(rel_err(coef_x0, 1.0 - ms)).max(rel_err(coef_y, ms));
    }
    worst
}

/// Propagates mean coefficients and variance through the one-step
/// transitions from `x0` and compares with the closed-form marginals.
pub fn marginal_residual(s: &Schedule) -> f64 {
    let (mut a, mut b, mut var) = (1.0f64, 0.0f64, 0.0f64);
    let mut worst: f64 = 0.0;
    for t in 1..=s.t_max() {
        let (mt, ms) = (s.m()[t], s.m()[t - 1]);
        let r = (1.0 - mt) / (1.0 - ms);
        a *= r;
        b = r * b + (mt - r * ms);
        var = r * r * var + s.delta_cond()[t];
        worst = worst
            .max(rel_err(a, 1.0 - mt))
            .max(rel_err(b, mt))
            .max(rel_err(var, s.delta()[t]));
    }
    worst
}

/// Smallest configuration that still routes through every model component:
/// one U-Net level, a stride-2 conditioner and three path-length fields.
pub fn toy_config() -> padm_core::padm::PadmConfig {
    padm_core::padm::PadmConfig {
        image_size: 8,
        pixel_spacing: 3.2,
        n_proj: 3,
        alpha: 0.5,
        channels: vec![4],
        cond_channels: 4,
        d_attn: 4,
        t_embed_dim: 4,
        max_tokens: 16,
        physics_iters: 1,
        mu_scale: 0.2,
        s_scale: 10.0,
    }
}

/// Worst entry-wise relative error between reverse-mode and central
/// differences of `Σ w ⊙ x̂0` with respect to every parameter and every input
/// image, for a model with `role` in f64.
pub fn predict_x0_fd_error(role: padm_core::padm::Role, seed: u64) -> f64 {
    use gradkit::{Graph, ParamStore, Tensor};
    use padm_core::padm::{PadmModel, Role};
    use rand::{Rng, SeedableRng};

    const H: f64 = 1e-5;
    let model = PadmModel::new(toy_config(), role).unwrap();
    let params: ParamStore<f64> = model.init_params(seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = model.config.image_size;
    let shape = [2, 1, n, n];
    let mut random = |lo: f64, hi: f64| Tensor::from_fn(&shape, |_| rng.random_range(lo..hi));
    let inputs = vec![random(-1.0, 1.0), random(-1.0, 1.0), random(-1.0, 1.0)];
    let ts = [3usize, 17];
    let weights = Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 0.618_033_988_75).fract() - 0.4);

    let eval = |params: &ParamStore<f64>, inputs: &[Tensor<f64>], leaves: bool| {
        let g = Graph::new();
        let (p, vars): (_, Vec<_>) = if leaves {
            (params.bind(&g), inputs.iter().map(|t| g.leaf(t.clone())).collect())
        } else {
            (params.bind_frozen(&g), inputs.iter().map(|t| g.constant(t.clone())).collect())
        };
        let a = (role == Role::Teacher).then_some(vars[2]);
        let cond = model.condition(&p, vars[1], a).unwrap();
        let pred = model.predict_x0(&p, vars[0], &cond, vars[1], &ts).unwrap();
        let loss = pred.x0_hat.mul(g.constant(weights.clone())).unwrap().sum().unwrap();
        let value = loss.value().data()[0];
        if !leaves {
            return (value, Vec::new());
        }
        g.backward(loss).unwrap();
        let mut grads: Vec<Tensor<f64>> = inputs
            .iter()
            .zip(&vars)
            .map(|(t, v)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        for (name, param) in params.iter() {
            let v = p.get(name).unwrap();
            grads.push(g.grad(v).unwrap_or_else(|| Tensor::zeros(param.value.shape())));
        }
        (value, grads)
    };

    let (_, analytic) = eval(&params, &inputs, true);
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    let mut worst = 0.0f64;
    let mut check = |k: usize, i: usize, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * H);
        let a = analytic[k].data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if err > 1e-4 && std::env::var("FD_DEBUG").is_ok() {
            eprintln!("input {k} entry {i}: analytic {a:e} numeric {numeric:e}");
        }
        worst = worst.max(err);
    };
    for k in 0..inputs.len() {
        for i in 0..inputs[k].numel() {
            let mut up = inputs.clone();
            up[k].data_mut()[i] += H;
            let mut down = inputs.clone();
            down[k].data_mut()[i] -= H;
            check(k, i, eval(&params, &up, false).0, eval(&params, &down, false).0);
        }
    }
    for (j, name) in names.iter().enumerate() {
        let len = params.get(name).unwrap().value.numel();
        for i in 0..len {
            let mut up = params.clone();
            up.get_mut(name).unwrap().value.data_mut()[i] += H;
            let mut down = params.clone();
            down.get_mut(name).unwrap().value.data_mut()[i] -= H;
            check(inputs.len() + j, i, eval(&up, &inputs, false).0, eval(&down, &inputs, false).0);
        }
    }
    worst
}
