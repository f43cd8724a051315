//! Teacher training and student distillation.

use std::path::Path;

use gradkit::{AdamConfig, Bound, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bridge::{forward_sample_into, sample, NoiseMode, Schedule, ScheduleDescriptor};
use crate::error::{io_err, PadmError, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::dataset::{stack, Dataset, Field, SlicePair};
use crate::harness::manifest::Split;
use crate::harness::metrics::{Aggregate, ImageMetrics};
use crate::padm::{agg, at_loss, PadmConfig, PadmModel, Role};

pub const LOG_FILE: &str = "train_log.csv";
pub const LAST_CHECKPOINT: &str = "last.padc";
pub const BEST_CHECKPOINT: &str = "best.padc";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    Algorithm1Unweighted,
    ElboCepsWeighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub t_max: usize,
    pub s_max: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    pub loss_weighting: LossWeighting,
    /// Validation items sampled each epoch (taken from the front of the split).
    pub val_subset: usize,
    pub val_steps: usize,
    pub patience: usize,
    /// Maximum random shift in pixels applied to the attenuation input.
    pub mu_shift: usize,
    pub model: PadmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(PadmConfig::default())
    }
}

impl TrainConfig {
    pub fn desk(model: PadmConfig) -> Self {
        Self {
            t_max: 50,
            s_max: 1.0,
            lr: 1e-3,
            batch: 4,
            epochs: 100,
            lambda: 0.1,
            seed: 0,
            loss_weighting: LossWeighting::Algorithm1Unweighted,
            val_subset: 16,
            val_steps: 8,
            patience: 10,
            mu_shift: 0,
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PadmError::InvalidConfig(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if self.t_max < 2 {
            return bad("T must be at least 2");
        }
        if self.batch == 0 || self.epochs == 0 || self.val_steps == 0 {
            return bad("batch, epochs and val_steps must be positive");
        }
        self.model.validate()
    }

    pub fn schedule(&self) -> ScheduleDescriptor {
        ScheduleDescriptor {
            t_max: self.t_max,
            s_max: self.s_max,
        }
    }

    /// Learning rate for `epoch`, halved after each third of the run.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let third = self.epochs.div_ceil(3).max(1);
        self.lr * 0.5f64.powi((epoch / third) as i32)
    }
}

/// One line of the training log. Unused columns are left empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: Split,
    pub loss_elbo: Option<f64>,
    pub loss_at: Option<f64>,
    pub rmse: Option<f64>,
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation RMSE.
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
}

/// A batch prepared for one optimisation step.
pub struct Batch {
    pub y: Tensor<f32>,
    pub x0: Tensor<f32>,
    pub a: Option<Tensor<f32>>,
    pub x_t: Tensor<f32>,
    /// `m_t(y − x0) + √δ_t·ε − x_t`, so the Algorithm 1 residual is this plus `X_θ`.
    pub offset: Tensor<f32>,
    pub ts: Vec<usize>,
}

impl Batch {
    /// Draws a timestep and noise field per item and forms `x_t`.
    pub fn draw<R: Rng + ?Sized>(
        pairs: &[&SlicePair],
        side: usize,
        with_mu: bool,
        sched: &Schedule,
        rng: &mut R,
    ) -> Result<Self> {
        let y = stack(pairs, Field::Y, side)?;
        let x0 = stack(pairs, Field::X0, side)?;
        let a = with_mu.then(|| stack(pairs, Field::A, side)).transpose()?;
        let n = side * side;
        let mut x_t = Tensor::zeros(y.shape());
        let mut offset = Tensor::zeros(y.shape());
        let mut ts = Vec::with_capacity(pairs.len());
        for i in 0..pairs.len() {
            let t = rng.random_range(1..=sched.t_max());
            let eps: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            let (lo, hi) = (i * n, (i + 1) * n);
            let (yi, x0i) = (&y.data()[lo..hi], &x0.data()[lo..hi]);
            forward_sample_into(x0i, yi, &eps, t, sched, &mut x_t.data_mut()[lo..hi]);
            let (m, sd) = (sched.m()[t], sched.delta()[t].sqrt());
            for (j, o) in offset.data_mut()[lo..hi].iter_mut().enumerate() {
                let target = m * (yi[j] as f64 - x0i[j] as f64) + sd * eps[j] as f64;
                *o = (target - x_t.data()[lo + j] as f64) as f32;
            }
            ts.push(t);
        }
        Ok(Self { y, x0, a, x_t, offset, ts })
    }
}

/// Algorithm 1 objective for a prediction `x0_hat`:
/// mean over items of the (optionally `c_ε`-weighted) mean absolute residual.
pub fn elbo_loss<'g>(
    x0_hat: Var<'g, f32>,
    batch: &Batch,
    sched: &Schedule,
    weighting: LossWeighting,
) -> Result<Var<'g, f32>> {
    let g = x0_hat.graph();
    let residual = g.constant(batch.offset.clone()).add(x0_hat)?.abs()?;
    let b = batch.ts.len();
    let per_item = residual.reshape(&[b, residual.value().numel() / b])?.mean_axis(1)?;
    let weighted = match weighting {
        LossWeighting::Algorithm1Unweighted => per_item,
        LossWeighting::ElboCepsWeighted => {
            let w: Vec<f32> = batch.ts.iter().map(|&t| sched.c_eps()[t] as f32).collect();
            per_item.mul(g.constant(Tensor::from_vec(vec![b, 1], w)?))?
        }
    };
    Ok(weighted.mean()?)
}

/// `mean |X_θ − x0|` computed directly, for checking [`elbo_loss`].
pub fn direct_l1(x0_hat: &Tensor<f32>, x0: &Tensor<f32>) -> f64 {
    let n = x0.numel().max(1) as f64;
    x0_hat
        .data()
        .iter()
        .zip(x0.data())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum::<f64>()
        / n
}

fn shifted(a: &Tensor<f32>, side: usize, max_shift: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let n = side * side;
    let s = max_shift as i64;
    let mut out = Tensor::full(a.shape(), -1.0);
    for (src, dst) in a.data().chunks(n).zip(out.data_mut().chunks_mut(n)) {
        let (dr, dc) = (rng.random_range(-s..=s), rng.random_range(-s..=s));
        for r in 0..side as i64 {
            for c in 0..side as i64 {
                let (sr, sc) = (r - dr, c - dc);
                if (0..side as i64).contains(&sr) && (0..side as i64).contains(&sc) {
                    dst[(r * side as i64 + c) as usize] = src[(sr * side as i64 + sc) as usize];
                }
            }
        }
    }
    Ok(out)
}

/// Runs the sampler on `pairs` and scores the result against their AC targets.
pub fn evaluate(
    model: &PadmModel,
    params: &ParamStore<f32>,
    pairs: &[&SlicePair],
    side: usize,
    sched: &Schedule,
    steps: usize,
) -> Result<Vec<ImageMetrics>> {
    let predictions = predict(model, params, pairs, side, sched, steps)?;
    pairs
        .iter()
        .zip(predictions.chunks(side * side))
        .map(|(p, pred)| {
            let gt: Vec<f64> = p.x0.iter().map(|&v| v as f64).collect();
            ImageMetrics::compute(&p.id, pred, &gt, side)
        })
        .collect()
}

/// Deterministic sampling of `pairs` in chunks of at most 16 items; returns
/// the flattened predictions in `pairs` order.
pub fn predict(
    model: &PadmModel,
    params: &ParamStore<f32>,
    pairs: &[&SlicePair],
    side: usize,
    sched: &Schedule,
    steps: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len() * side * side);
    for chunk in pairs.chunks(16) {
        let y = stack(chunk, Field::Y, side)?;
        let a = (model.role == Role::Teacher).then(|| stack(chunk, Field::A, side)).transpose()?;
        let denoiser = |x: &Tensor<f32>, cond: &(Tensor<f32>, Option<Tensor<f32>>), t: usize| {
            let ts = vec![t; chunk.len()];
            model.predict_batch(params, x, &cond.0, cond.1.as_ref(), &ts)
        };
        let x0 = sample(denoiser, &y, &(y.clone(), a), sched, steps, NoiseMode::Deterministic)?;
        out.extend(x0.data().iter().map(|&v| v as f64));
    }
    Ok(out)
}

fn mean_metrics(m: &[ImageMetrics]) -> Aggregate {
    let n = m.len().max(1) as f64;
    Aggregate {
        rmse: m.iter().map(|v| v.rmse).sum::<f64>() / n,
        ssim: m.iter().map(|v| v.ssim).sum::<f64>() / n,
        psnr: m.iter().map(|v| v.psnr).sum::<f64>() / n,
    }
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PadmError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io_err(path))
}

struct Teacher<'a> {
    model: &'a PadmModel,
    params: &'a ParamStore<f32>,
}

fn run(
    dataset: &Dataset,
    config: &TrainConfig,
    role: Role,
    teacher: Option<Teacher<'_>>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.model.image_size != dataset.side {
        return Err(PadmError::ConfigMismatch(format!(
            "model grid {} vs dataset grid {}",
            config.model.image_size, dataset.side
        )));
    }
    let mut model_cfg = config.model.clone();
    model_cfg.pixel_spacing = dataset.spacing;
    let model = PadmModel::new(model_cfg, role)?;
    let sched = config.schedule().build()?;
    let train = dataset.split(Split::Train);
    let val_all = dataset.split(Split::Val);
    let val: Vec<&SlicePair> = val_all.iter().take(config.val_subset).copied().collect();
    if train.is_empty() || val.is_empty() {
        return Err(PadmError::InvalidConfig("training and validation splits must be non-empty".into()));
    }
    let needs_mu = role == Role::Teacher || teacher.is_some();
    if needs_mu {
        if let Some(p) = train.iter().chain(&val).find(|p| p.a.is_none()) {
            return Err(PadmError::MissingMu(format!("item {}", p.id)));
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let init_seed = config.seed ^ if role == Role::Teacher { 0x7eac_4e12 } else { 0x5700_de17 };
    let mut params: ParamStore<f32> = model.init_params(init_seed)?;
    let mut best = params.clone();
    let (mut best_rmse, mut best_epoch, mut stale) = (f64::INFINITY, 0, 0);
    let mut log = Vec::new();
    let meta = |epoch: usize, best_rmse: f64| {
        serde_json::json!({ "epoch": epoch, "best_val_rmse": best_rmse, "train": config })
    };

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let adam = AdamConfig {
            lr: config.lr_at(epoch),
            ..AdamConfig::default()
        };
        let (mut sum_elbo, mut sum_at, mut steps) = (0.0, 0.0, 0usize);
        for idx in order.chunks(config.batch) {
            let pairs: Vec<&SlicePair> = idx.iter().map(|&i| train[i]).collect();
            let mut batch = Batch::draw(&pairs, dataset.side, needs_mu, &sched, &mut rng)?;
            if config.mu_shift > 0 {
                if let Some(a) = &batch.a {
                    batch.a = Some(shifted(a, dataset.side, config.mu_shift, &mut rng)?);
                }
            }
            let g = Graph::new();
            let p = params.bind(&g);
            let (elbo, at) = step_losses(&g, &p, &model, &batch, &sched, config, teacher.as_ref())?;
            let elbo_v = elbo.value().data()[0] as f64;
            let at_v = at.map(|v| v.value().data()[0] as f64);
            let total = match at {
                Some(at) if config.lambda > 0.0 => elbo.add(at.mul_scalar(config.lambda as f32)?)?,
                _ => elbo,
            };
            let total_v = total.value().data()[0];
            if !total_v.is_finite() {
                return Err(PadmError::NonFiniteLoss { epoch, step: steps });
            }
            g.backward(total)?;
            params.accumulate_grads(&g, &p);
            params.adam_step(&adam);
            params.zero_grads();
            sum_elbo += elbo_v;
            sum_at += at_v.unwrap_or(0.0);
            steps += 1;
        }
        let n = steps as f64;
        log.push(LogRow {
            epoch,
            split: Split::Train,
            loss_elbo: Some(sum_elbo / n),
            loss_at: teacher.is_some().then_some(sum_at / n),
            rmse: None,
            ssim: None,
            psnr: None,
        });
        let scores = mean_metrics(&evaluate(&model, &params, &val, dataset.side, &sched, config.val_steps)?);
        log.push(LogRow {
            epoch,
            split: Split::Val,
            loss_elbo: None,
            loss_at: None,
            rmse: Some(scores.rmse),
            ssim: Some(scores.ssim),
            psnr: Some(scores.psnr),
        });
        if scores.rmse < best_rmse {
            best_rmse = scores.rmse;
            best_epoch = epoch;
            best = params.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        if let Some(dir) = out_dir {
            let last = Checkpoint {
                model: model.clone(),
                schedule: config.schedule(),
                params: params.clone(),
                meta: meta(epoch, best_rmse),
            };
            last.write(&dir.join(LAST_CHECKPOINT))?;
            if best_epoch == epoch {
                Checkpoint { params: best.clone(), ..last }.write(&dir.join(BEST_CHECKPOINT))?;
            }
            write_log(&dir.join(LOG_FILE), &log)?;
        }
        if stale >= config.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            schedule: config.schedule(),
            params: best,
            meta: meta(best_epoch, best_rmse),
        },
        log,
        best_epoch,
        best_val_rmse: best_rmse,
    })
}

fn step_losses<'g>(
    g: &'g Graph<f32>,
    p: &Bound<'g, f32>,
    model: &PadmModel,
    batch: &Batch,
    sched: &Schedule,
    config: &TrainConfig,
    teacher: Option<&Teacher<'_>>,
) -> Result<(Var<'g, f32>, Option<Var<'g, f32>>)> {
    let y = g.constant(batch.y.clone());
    let a = batch.a.as_ref().map(|a| g.constant(a.clone()));
    let cond = model.condition(p, y, a)?;
    let pred = model.predict_x0(p, g.constant(batch.x_t.clone()), &cond, y, &batch.ts)?;
    let elbo = elbo_loss(pred.x0_hat, batch, sched, config.loss_weighting)?;
    debug_assert!(
        config.loss_weighting != LossWeighting::Algorithm1Unweighted
            || (elbo.value().data()[0] as f64 - direct_l1(&pred.x0_hat.value(), &batch.x0)).abs() <= 1e-4,
        "Algorithm 1 objective drifted from the direct L1"
    );
    let at = match teacher {
        Some(t) => {
            let tp = t.params.bind_frozen(g);
            let c_t = t.model.condition(&tp, y, a)?;
            Some(at_loss(agg(c_t.features)?, agg(cond.features)?)?)
        }
        None => None,
    };
    Ok((elbo, at))
}

/// Trains a teacher from scratch on the dataset's train split.
pub fn train_teacher(dataset: &Dataset, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    run(dataset, config, Role::Teacher, None, out_dir)
}

/// Trains a student with the ELBO term alone.
pub fn train_student(dataset: &Dataset, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    run(dataset, config, Role::Student, None, out_dir)
}

/// Trains a student against a frozen teacher with `L_ELBO + λ·L_AT`.
pub fn distill_student(
    teacher: &Checkpoint,
    dataset: &Dataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if teacher.model.role != Role::Teacher {
        return Err(PadmError::ConfigMismatch("distillation needs a teacher checkpoint".into()));
    }
    teacher.verify()?;
    if teacher.schedule != config.schedule() {
        return Err(PadmError::ConfigMismatch(format!(
            "teacher schedule {:?} vs student {:?}",
            teacher.schedule,
            config.schedule()
        )));
    }
    let tc = &teacher.model.config;
    if tc.image_size != config.model.image_size || tc.cond_channels != config.model.cond_channels {
        return Err(PadmError::ConfigMismatch(format!(
            "teacher grid {} / {} conditioning channels vs student {} / {}",
            tc.image_size, tc.cond_channels, config.model.image_size, config.model.cond_channels
        )));
    }
    let mut frozen_params = teacher.params.clone();
    frozen_params.clear_optimizer_state();
    let frozen = Teacher {
        model: &teacher.model,
        params: &frozen_params,
    };
    run(dataset, config, Role::Student, Some(frozen), out_dir)
}
