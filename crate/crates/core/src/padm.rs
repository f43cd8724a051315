//! The physics-aware denoiser family.
//!
//! A conditioner turns the NAC image `y` (and, for the teacher, the
//! attenuation map `A`) into features `C`. A U-Net trunk reads
//! `concat(x_t, C)` and the timestep, and emits `N` path-length fields, an
//! attenuation map `μ_θ` and an auxiliary reconstruction `x̃0`. The physics
//! branch turns `μ_θ` and the path lengths into an ACF and corrects `y`; the
//! final estimate blends that with `x̃0`.
//!
//! Images are normalised to `[-1, 1]` by `v ↦ 2v/vmax − 1`, so the ACF is
//! applied to `y + 1`, which is proportional to activity:
//! `x̄ = y + (y + 1)·(ACF_θ − 1)`.

use gradkit::{Bound, Element, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PadmError, Result};
use crate::image::{Image, MuMap};
use crate::projector::{Geometry, Projector};

/// Norm below which a distillation map is treated as the zero vector.
pub const AT_ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PadmConfig {
    /// Side of the square working grid.
    pub image_size: usize,
    /// Physical pixel size in cm at the working grid.
    pub pixel_spacing: f64,
    /// Number of path-length fields `N`.
    pub n_proj: usize,
    /// Blend weight of the physics estimate.
    pub alpha: f64,
    /// Trunk width per U-Net level; its length is the depth.
    pub channels: Vec<usize>,
    /// Conditioner feature channels.
    pub cond_channels: usize,
    pub d_attn: usize,
    pub t_embed_dim: usize,
    /// Upper bound on attention tokens; the conditioner stem strides by
    /// powers of two until the token grid fits.
    pub max_tokens: usize,
    /// Iterations `K` of the physics module.
    pub physics_iters: usize,
    /// Output scale of the `μ_θ` head in cm⁻¹ per softplus unit.
    pub mu_scale: f64,
    /// Output scale of the path-length heads in cm per softplus unit.
    pub s_scale: f64,
}

impl Default for PadmConfig {
    fn default() -> Self {
        Self::desk(32, 0.8)
    }
}

impl PadmConfig {
    /// Desk-scale configuration for `image_size × image_size` inputs.
    pub fn desk(image_size: usize, pixel_spacing: f64) -> Self {
        Self {
            image_size,
            pixel_spacing,
            n_proj: 16,
            alpha: 0.5,
            channels: vec![16, 32],
            cond_channels: 16,
            d_attn: 16,
            t_embed_dim: 32,
            max_tokens: 256,
            physics_iters: 1,
            mu_scale: 0.2,
            s_scale: 10.0,
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PadmError::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.n_proj == 0 {
            return bad("n_proj must be at least 1");
        }
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
            return bad("channel widths must be positive");
        }
        if self.cond_channels == 0 || self.d_attn == 0 || self.max_tokens == 0 {
            return bad("conditioner widths must be positive");
        }
        if self.t_embed_dim == 0 || self.t_embed_dim % 2 != 0 {
            return bad("t_embed_dim must be even and positive");
        }
        if self.physics_iters == 0 {
            return bad("physics_iters must be at least 1");
        }
        let down = 1usize << (self.levels() - 1);
        if self.image_size == 0 || self.image_size % down != 0 {
            return bad("image_size must be divisible by 2^(levels-1)");
        }
        if self.image_size % self.cond_stride() != 0 {
            return bad("image_size must be divisible by the conditioner stride");
        }
        if !(self.mu_scale > 0.0 && self.s_scale > 0.0 && self.pixel_spacing > 0.0) {
            return bad("scales must be positive");
        }
        Ok(())
    }

    /// Power-of-two stride of the conditioner stem.
    pub fn cond_stride(&self) -> usize {
        let mut stride = 1;
        while (self.image_size / stride).pow(2) > self.max_tokens && self.image_size / stride > 1 {
            stride *= 2;
        }
        stride
    }
}

/// Conditioning features `C` with the branch that produced them.
pub struct CondFeatures<'g, T> {
    pub features: Var<'g, T>,
    pub role: Role,
    /// Softmax weights `[B, tokens, tokens]`, teacher only.
    pub attention: Option<Var<'g, T>>,
}

/// Physics heads of the trunk.
pub struct PhysOut<'g, T> {
    /// `[B, N, H, W]`, cm.
    pub s_fields: Var<'g, T>,
    /// `[B, 1, H, W]`, cm⁻¹.
    pub mu: Var<'g, T>,
    /// `[B, 1, H, W]`, normalised image units.
    pub x0_aux: Var<'g, T>,
}

pub struct Prediction<'g, T> {
    pub x0_hat: Var<'g, T>,
    pub x_bar: Var<'g, T>,
    pub acf: Var<'g, T>,
    pub phys: PhysOut<'g, T>,
}

fn lossy<T: Element>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// Sinusoidal embedding `[B, dim]` of integer timesteps.
pub fn timestep_embedding<T: Element>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[ts.len(), dim], |i| {
        let (b, j) = (i / dim, i % dim);
        let k = j % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = ts[b] as f64 * freq;
        lossy(if j < half { arg.sin() } else { arg.cos() })
    })
}

/// `ACF_θ = 1 / mean_m exp(−μ_θ·s_m)` over the field axis.
pub fn acf_theta<'g, T: Element>(s_fields: Var<'g, T>, mu: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(mu.mul(s_fields)?.neg()?.exp()?.mean_axis(1)?.reciprocal()?)
}

/// Scaled dot-product attention over `[B, tokens, d]` operands. Returns the
/// attended values and the row-stochastic weights.
pub fn attend<'g, T: Element>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let d = *q.shape().last().unwrap_or(&1);
    let scale = lossy::<T>(1.0 / (d as f64).sqrt());
    let weights = q.matmul(k.transpose_last()?)?.mul_scalar(scale)?.softmax()?;
    Ok((weights.matmul(v)?, weights))
}

/// `x̄ = y + (y + 1)·(ACF − 1)`.
pub fn chang_correct<'g, T: Element>(y: Var<'g, T>, acf: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(y.add(y.add_scalar(T::one())?.mul(acf.add_scalar(-T::one())?)?)?)
}

/// `α·x̄ + (1 − α)·x̃0`, returning the operand itself at the endpoints.
pub fn blend<'g, T: Element>(x_bar: Var<'g, T>, x_aux: Var<'g, T>, alpha: f64) -> Result<Var<'g, T>> {
    if alpha == 0.0 {
        return Ok(x_aux);
    }
    if alpha == 1.0 {
        return Ok(x_bar);
    }
    Ok(x_bar.mul_scalar(lossy(alpha))?.add(x_aux.mul_scalar(lossy(1.0 - alpha))?)?)
}

/// Channel mean of squared features, `[B, C, H, W] → [B, 1, H, W]`.
pub fn agg<'g, T: Element>(features: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(features.sqr()?.mean_axis(1)?)
}

/// `‖Q_T/‖Q_T‖ − Q_S/‖Q_S‖‖₂` per item, averaged over the batch. Maps with
/// norm at most [`AT_ZERO_NORM`] normalise to zero.
pub fn at_loss<'g, T: Element>(q_t: Var<'g, T>, q_s: Var<'g, T>) -> Result<Var<'g, T>> {
    if q_t.shape() != q_s.shape() {
        return Err(PadmError::Shape(format!(
            "attention maps {:?} vs {:?}",
            q_t.shape(),
            q_s.shape()
        )));
    }
    let normalize = |q: Var<'g, T>| -> Result<Var<'g, T>> {
        let shape = q.shape();
        let b = shape[0];
        let flat = q.reshape(&[b, shape[1..].iter().product()])?;
        let norm = flat.sqr()?.sum_axis(1)?.sqrt()?;
        let mask = norm.value().map(|n| {
            if n.to_f64().unwrap_or(0.0) > AT_ZERO_NORM {
                T::one()
            } else {
                T::zero()
            }
        });
        let mask = q.graph().constant(mask);
        let safe = norm.add(mask.neg()?.add_scalar(T::one())?)?;
        Ok(flat.mul(mask.div(safe)?)?)
    };
    let diff = normalize(q_t)?.sub(normalize(q_s)?)?;
    Ok(diff.sqr()?.sum_axis(1)?.sqrt()?.mean()?)
}

fn he_normal<T: Element>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("finite std");
    Tensor::from_fn(shape, |_| lossy(dist.sample(rng)))
}

struct Init<'a, T> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Element> Init<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Result<()> {
        let w = he_normal(&[cout, cin, k, k], cin * k * k, gain, self.rng);
        self.store.insert(format!("{name}.w"), w)?;
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[cout]))?;
        Ok(())
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize, gain: f64) -> Result<()> {
        let w = he_normal(&[cin, cout], cin, gain, self.rng);
        self.store.insert(format!("{name}.w"), w)?;
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[cout]))?;
        Ok(())
    }

    fn norm(&mut self, name: &str, dim: usize) -> Result<()> {
        self.store.insert(format!("{name}.gamma"), Tensor::full(&[dim], T::one()))?;
        self.store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(())
    }
}

fn conv<'g, T: Element>(p: &Bound<'g, T>, name: &str, x: Var<'g, T>, stride: usize) -> Result<Var<'g, T>> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(x.conv2d(w, Some(b), stride)?)
}

fn linear<'g, T: Element>(p: &Bound<'g, T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(x.linear(w, Some(b))?)
}

fn layer_norm<'g, T: Element>(p: &Bound<'g, T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(x.layer_norm(p.get(&format!("{name}.gamma"))?, p.get(&format!("{name}.beta"))?)?)
}

/// A teacher or student denoiser: configuration plus branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PadmModel {
    pub config: PadmConfig,
    pub role: Role,
}

impl PadmModel {
    pub fn new(config: PadmConfig, role: Role) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, role })
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init_params<T: Element>(&self, seed: u64) -> Result<ParamStore<T>> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let d = cfg.cond_channels;
        init.conv("cond.nac", 1, d, 3, 1.0)?;
        if self.role == Role::Teacher {
            init.conv("cond.a", 1, d, 3, 1.0)?;
            init.linear("cond.attn.q", d, cfg.d_attn, 0.5)?;
            init.linear("cond.attn.k", d, cfg.d_attn, 0.5)?;
            init.linear("cond.attn.v", d, cfg.d_attn, 0.5)?;
            init.linear("cond.attn.o", cfg.d_attn, d, 0.5)?;
            init.norm("cond.ln1", d)?;
            init.linear("cond.ffn1", d, 2 * d, 1.0)?;
            init.linear("cond.ffn2", 2 * d, d, 0.5)?;
            init.norm("cond.ln2", d)?;
        }
        let ch = &cfg.channels;
        init.linear("temb.0", cfg.t_embed_dim, cfg.t_embed_dim, 1.0)?;
        init.conv("unet.stem", 1 + d, ch[0], 3, 1.0)?;
        for (l, &c) in ch.iter().enumerate() {
            init.linear(&format!("temb.l{l}"), cfg.t_embed_dim, c, 0.5)?;
            init.conv(&format!("unet.down{l}.c1"), c, c, 3, 1.0)?;
            init.conv(&format!("unet.down{l}.c2"), c, c, 3, 0.5)?;
            if l + 1 < ch.len() {
                init.conv(&format!("unet.pool{l}"), c, ch[l + 1], 3, 1.0)?;
            }
        }
        for l in (0..ch.len() - 1).rev() {
            init.conv(&format!("unet.lift{l}"), ch[l + 1], ch[l], 3, 1.0)?;
            init.conv(&format!("unet.merge{l}"), 2 * ch[l], ch[l], 3, 1.0)?;
            init.conv(&format!("unet.up{l}.c1"), ch[l], ch[l], 3, 1.0)?;
            init.conv(&format!("unet.up{l}.c2"), ch[l], ch[l], 3, 0.5)?;
        }
        init.conv("unet.head", ch[0], cfg.n_proj + 2, 3, 0.1)?;
        Ok(init.store)
    }

    fn check_image<T: Element>(&self, what: &str, v: Var<'_, T>, channels: usize) -> Result<usize> {
        let s = v.shape();
        let n = self.config.image_size;
        if s.len() != 4 || s[1] != channels || s[2] != n || s[3] != n {
            return Err(PadmError::Shape(format!(
                "{what} is {s:?}, expected [B, {channels}, {n}, {n}]"
            )));
        }
        Ok(s[0])
    }

    fn upsample_to_grid<'g, T: Element>(&self, mut x: Var<'g, T>) -> Result<Var<'g, T>> {
        let mut stride = self.config.cond_stride();
        while stride > 1 {
            x = x.upsample2x()?;
            stride /= 2;
        }
        Ok(x)
    }

    /// Teacher conditioning: cross-modal attention from NAC queries to
    /// attenuation keys/values.
    pub fn cross_attn<'g, T: Element>(
        &self,
        p: &Bound<'g, T>,
        y: Var<'g, T>,
        a: Var<'g, T>,
    ) -> Result<CondFeatures<'g, T>> {
        if self.role != Role::Teacher {
            return Err(PadmError::InvalidConfig("cross_attn needs a teacher model".into()));
        }
        let b = self.check_image("y", y, 1)?;
        let b_a = self.check_image("A", a, 1)?;
        if b != b_a {
            return Err(PadmError::Shape(format!("batch {b} for y, {b_a} for A")));
        }
        let stride = self.config.cond_stride();
        let x_nac = conv(p, "cond.nac", y, stride)?;
        let x_a = conv(p, "cond.a", a, stride)?;
        let [_, d, h, w] = x_nac.shape()[..] else {
            unreachable!("conv2d returns rank 4")
        };
        let tokens = |x: Var<'g, T>| -> Result<Var<'g, T>> {
            Ok(x.permute(&[0, 2, 3, 1])?.reshape(&[b, h * w, d])?)
        };
        let (q_in, kv_in) = (tokens(x_nac)?, tokens(x_a)?);
        let q = linear(p, "cond.attn.q", q_in)?;
        let k = linear(p, "cond.attn.k", kv_in)?;
        let v = linear(p, "cond.attn.v", kv_in)?;
        let (values, weights) = attend(q, k, v)?;
        let attended = linear(p, "cond.attn.o", values)?;
        let mixed = layer_norm(p, "cond.ln1", q_in.add(attended)?)?;
        let ffn = linear(p, "cond.ffn2", linear(p, "cond.ffn1", mixed)?.gelu()?)?;
        let out = layer_norm(p, "cond.ln2", mixed.add(ffn)?)?;
        let grid = out.reshape(&[b, h, w, d])?.permute(&[0, 3, 1, 2])?;
        Ok(CondFeatures {
            features: self.upsample_to_grid(grid)?,
            role: Role::Teacher,
            attention: Some(weights),
        })
    }

    /// Student conditioning: the NAC image lifted by its own stem.
    pub fn student_cond<'g, T: Element>(&self, p: &Bound<'g, T>, y: Var<'g, T>) -> Result<CondFeatures<'g, T>> {
        self.check_image("y", y, 1)?;
        let lifted = conv(p, "cond.nac", y, self.config.cond_stride())?;
        Ok(CondFeatures {
            features: self.upsample_to_grid(lifted)?,
            role: Role::Student,
            attention: None,
        })
    }

    /// Conditioning for this model's branch; the teacher requires `a`.
    pub fn condition<'g, T: Element>(
        &self,
        p: &Bound<'g, T>,
        y: Var<'g, T>,
        a: Option<Var<'g, T>>,
    ) -> Result<CondFeatures<'g, T>> {
        match (self.role, a) {
            (Role::Teacher, Some(a)) => self.cross_attn(p, y, a),
            (Role::Teacher, None) => Err(PadmError::MissingMu("teacher conditioning".into())),
            (Role::Student, _) => self.student_cond(p, y),
        }
    }

    fn res_block<'g, T: Element>(
        p: &Bound<'g, T>,
        name: &str,
        x: Var<'g, T>,
        t_bias: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let h = conv(p, &format!("{name}.c1"), x, 1)?.add(t_bias)?.relu()?;
        let h = conv(p, &format!("{name}.c2"), h, 1)?;
        Ok(x.add(h)?.relu()?)
    }

    /// Trunk forward pass: path lengths, attenuation map and auxiliary image.
    pub fn denoise<'g, T: Element>(
        &self,
        p: &Bound<'g, T>,
        x_t: Var<'g, T>,
        cond: &CondFeatures<'g, T>,
        ts: &[usize],
    ) -> Result<PhysOut<'g, T>> {
        let cfg = &self.config;
        let b = self.check_image("x_t", x_t, 1)?;
        self.check_image("C", cond.features, cfg.cond_channels)?;
        if ts.len() != b || cond.features.shape()[0] != b {
            return Err(PadmError::Shape(format!(
                "batch {b} with {} timesteps and {} feature maps",
                ts.len(),
                cond.features.shape()[0]
            )));
        }
        let g = x_t.graph();
        let emb = g.constant(timestep_embedding(ts, cfg.t_embed_dim));
        let emb = linear(p, "temb.0", emb)?.gelu()?;
        let ch = &cfg.channels;
        let biases = (0..ch.len())
            .map(|l| Ok(linear(p, &format!("temb.l{l}"), emb)?.reshape(&[b, ch[l], 1, 1])?))
            .collect::<Result<Vec<_>>>()?;
        let mut h = conv(p, "unet.stem", Var::concat(&[x_t, cond.features], 1)?, 1)?.relu()?;
        let mut skips = Vec::with_capacity(ch.len());
        for l in 0..ch.len() {
            h = Self::res_block(p, &format!("unet.down{l}"), h, biases[l])?;
            if l + 1 < ch.len() {
                skips.push(h);
                h = conv(p, &format!("unet.pool{l}"), h, 2)?.relu()?;
            }
        }
        for l in (0..ch.len() - 1).rev() {
            let lifted = conv(p, &format!("unet.lift{l}"), h.upsample2x()?, 1)?.relu()?;
            let merged = Var::concat(&[lifted, skips[l]], 1)?;
            h = conv(p, &format!("unet.merge{l}"), merged, 1)?.relu()?;
            h = Self::res_block(p, &format!("unet.up{l}"), h, biases[l])?;
        }
        let raw = conv(p, "unet.head", h, 1)?;
        let n = cfg.n_proj;
        Ok(PhysOut {
            s_fields: raw.slice(1, 0, n)?.softplus()?.mul_scalar(lossy(cfg.s_scale))?,
            mu: raw.slice(1, n, 1)?.softplus()?.mul_scalar(lossy(cfg.mu_scale))?,
            x0_aux: raw.slice(1, n + 1, 1)?,
        })
    }

    /// Physics estimate `x̄` from the heads and the condition image.
    pub fn physics_module<'g, T: Element>(
        &self,
        phys: &PhysOut<'g, T>,
        y: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let acf = acf_theta(phys.s_fields, phys.mu)?;
        let mut x_bar = chang_correct(y, acf)?;
        for _ in 1..self.config.physics_iters {
            let factor = self.reprojection_factor(phys.mu.value().as_ref(), x_bar.value().as_ref(), y.value().as_ref())?;
            let factor = y.graph().constant(factor);
            x_bar = x_bar.add_scalar(T::one())?.mul(factor)?.add_scalar(-T::one())?;
        }
        Ok((x_bar, acf))
    }

    /// Multiplicative correction `Aᵀ₀(g ⊘ A_μ a) ⊘ Aᵀ₀1` for each item, where
    /// `a = (x̄ + 1)/2` is the current activity estimate and `g = A₀ (y + 1)/2`
    /// re-projects the uncorrected image.
    fn reprojection_factor<T: Element>(&self, mu: &Tensor<T>, x_bar: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let n = cfg.image_size;
        let geometry = Geometry::parallel(cfg.n_proj, n, cfg.pixel_spacing)?;
        let plain = Projector::new(&geometry, None)?;
        let sens = plain.sensitivity();
        let to_f64 = |t: &Tensor<T>, i: usize| -> Vec<f64> {
            t.data()[i * n * n..(i + 1) * n * n]
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                .collect()
        };
        let mut out = Vec::with_capacity(x_bar.numel());
        for i in 0..x_bar.shape()[0] {
            let mu_img = MuMap::new(Image::new(n, cfg.pixel_spacing, to_f64(mu, i))?)?;
            let attenuated = Projector::new(&geometry, Some(&mu_img))?;
            let activity: Vec<f64> = to_f64(x_bar, i).iter().map(|v| ((v + 1.0) / 2.0).max(0.0)).collect();
            let data: Vec<f64> = to_f64(y, i).iter().map(|v| ((v + 1.0) / 2.0).max(0.0)).collect();
            let g = plain.apply(&data);
            let e = attenuated.apply(&activity);
            let ratio: Vec<f64> = g.iter().zip(&e).map(|(g, e)| if *e > 0.0 { g / e } else { 0.0 }).collect();
            let back = plain.apply_transpose(&ratio);
            out.extend(back.iter().zip(&sens).map(|(b, s)| lossy::<T>(if *s > 0.0 { b / s } else { 1.0 })));
        }
        Ok(Tensor::from_vec(x_bar.shape().to_vec(), out)?)
    }

    /// `x̂0 = α·x̄ + (1 − α)·x̃0`.
    pub fn predict_x0<'g, T: Element>(
        &self,
        p: &Bound<'g, T>,
        x_t: Var<'g, T>,
        cond: &CondFeatures<'g, T>,
        y: Var<'g, T>,
        ts: &[usize],
    ) -> Result<Prediction<'g, T>> {
        self.check_image("y", y, 1)?;
        let phys = self.denoise(p, x_t, cond, ts)?;
        let (x_bar, acf) = self.physics_module(&phys, y)?;
        let x0_hat = blend(x_bar, phys.x0_aux, self.config.alpha)?;
        Ok(Prediction {
            x0_hat,
            x_bar,
            acf,
            phys,
        })
    }

    /// Inference helper: `x̂0` for a batch without keeping the graph.
    pub fn predict_batch(
        &self,
        params: &ParamStore<f32>,
        x_t: &Tensor<f32>,
        y: &Tensor<f32>,
        a: Option<&Tensor<f32>>,
        ts: &[usize],
    ) -> Result<Tensor<f32>> {
        let g = Graph::new();
        let p = params.bind_frozen(&g);
        let yv = g.constant(y.clone());
        let cond = self.condition(&p, yv, a.map(|a| g.constant(a.clone())))?;
        let pred = self.predict_x0(&p, g.constant(x_t.clone()), &cond, yv, ts)?;
        Ok(pred.x0_hat.value().as_ref().clone())
    }
}

/// Draws a uniform integer in `1..=t_max`.
pub fn draw_timestep<R: Rng + ?Sized>(rng: &mut R, t_max: usize) -> usize {
    rng.random_range(1..=t_max)
}
