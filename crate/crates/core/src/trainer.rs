//! Adam, the learning-rate schedule and the two training loops: teacher
//! pre-training on (downsampled clear → clear) pairs, then student training
//! on (hazy → clear) pairs with optional guidance from a frozen teacher.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use hkd_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Resolution, TrainConfig};
use crate::dataset::Sample;
use crate::distill::{fa_term, total_loss};
use crate::error::{CoreError, Result};
use crate::haze::downsample;
use crate::image::{stack, ImageRGB};
use crate::metrics::{psnr, ssim, ImageQuality, QualityReport};
use crate::nn::{Graph, ParamStore};
use crate::student::{mse, StudentNet};
use crate::teacher::{sr_loss, TeacherNet};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Parameters without one (frozen or unused) are left alone. Nothing is
/// written unless every gradient is finite and matches its parameter.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(CoreError::Config(format!("learning rate must be positive, got {lr}")));
    }
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| CoreError::Usage(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(CoreError::Usage(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(CoreError::NonFiniteGradient {
                name: name.clone(),
                step: state.t as usize + 1,
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        for (((pi, mi), vi), &gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            let gi = gi as f64;
            let mn = BETA1 * *mi as f64 + (1.0 - BETA1) * gi;
            let vn = BETA2 * *vi as f64 + (1.0 - BETA2) * gi * gi;
            *mi = mn as f32;
            *vi = vn as f32;
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
            *pi = (*pi as f64 - update) as f32;
        }
    }
    Ok(())
}

/// `lr0 · decay^floor(epoch / every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,split,loss,psnr,ssim\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(out, "{},{},{:.8e},{},{}", r.epoch, r.split, r.loss, opt(r.psnr), opt(r.ssim));
    }
    out
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct Trained<N> {
    /// Weights selected on the validation split, or the final weights when
    /// there is no validation data.
    pub net: N,
    pub best_epoch: usize,
    pub history: Vec<HistoryRow>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl<N> Trained<N> {
    pub fn steps(&self) -> usize {
        self.step_losses.len()
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

fn crop(img: &ImageRGB, width: usize, height: usize) -> Result<ImageRGB> {
    ImageRGB::from_fn(width, height, |y, x| [0, 1, 2].map(|c| img.get(y, x, c)))
}

/// `(lr, hr)` teacher training pair: the clear image cropped to a multiple
/// of `scale` and its bicubic downsample.
pub fn sr_pair(clear: &ImageRGB, scale: usize) -> Result<(ImageRGB, ImageRGB)> {
    let (w, h) = (clear.width() / scale * scale, clear.height() / scale * scale);
    let hr = if (w, h) == (clear.width(), clear.height()) {
        clear.clone()
    } else {
        crop(clear, w, h)?
    };
    Ok((downsample(&hr, scale)?, hr))
}

/// Clear image as the teacher sees it during distillation.
pub fn teacher_view(clear: &ImageRGB, resolution: Resolution) -> Result<ImageRGB> {
    match resolution {
        Resolution::Hr => Ok(clear.clone()),
        Resolution::Lr => downsample(clear, 2),
    }
}

struct Stepper {
    adam: AdamState,
    steps: usize,
    losses: Vec<f64>,
}

enum Progress {
    Continue,
    Stop,
}

impl Stepper {
    fn new() -> Self {
        Self {
            adam: AdamState::new(),
            steps: 0,
            losses: Vec::new(),
        }
    }

    fn apply(
        &mut self,
        params: &mut ParamStore,
        mut grads: BTreeMap<String, Tensor>,
        loss: f64,
        epoch: usize,
        cfg: &TrainConfig,
    ) -> Result<Progress> {
        self.steps += 1;
        clip_grad_norm(&mut grads, cfg.clip_norm);
        adam_step(params, &grads, &mut self.adam, lr_at(epoch, cfg))?;
        self.losses.push(loss);
        let hit_target = cfg.target_loss > 0.0 && loss < cfg.target_loss;
        let hit_limit = cfg.max_steps > 0 && self.steps >= cfg.max_steps;
        Ok(if hit_target || hit_limit { Progress::Stop } else { Progress::Continue })
    }
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

/// Validation loss, PSNR and SSIM of the teacher on `val`.
pub fn evaluate_teacher(net: &TeacherNet, val: &[Sample]) -> Result<(f64, QualityReport)> {
    let scale = net.config().scale;
    let mut loss = 0.0;
    let mut per_image = Vec::with_capacity(val.len());
    for s in val {
        let (lr, hr) = sr_pair(&s.clear, scale)?;
        let (sr, _) = net.infer(&lr.to_tensor())?;
        let sr_img = ImageRGB::from_tensor(&sr, 0)?;
        let mut tape = hkd_tensor::Tape::<f32>::no_grad();
        let a = tape.constant(sr);
        let b = tape.constant(hr.to_tensor());
        let l = sr_loss(&mut tape, a, b)?;
        loss += tape.value(l).item()? as f64;
        per_image.push(ImageQuality {
            id: s.id.clone(),
            psnr_db: psnr(&sr_img, &hr)?,
            ssim: ssim(&sr_img, &hr)?,
        });
    }
    Ok((loss / val.len().max(1) as f64, QualityReport::from_images(per_image)))
}

/// Pre-trains a teacher on `(downsample(clear), clear)` pairs and keeps the
/// weights with the lowest validation loss.
pub fn train_teacher(cfg: &TrainConfig, train: &[Sample], val: &[Sample]) -> Result<Trained<TeacherNet>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CoreError::Config("teacher training set is empty".into()));
    }
    let scale = cfg.teacher.scale;
    let pairs = train
        .iter()
        .map(|s| sr_pair(&s.clear, scale))
        .collect::<Result<Vec<_>>>()?;
    let mut net = TeacherNet::new(cfg.teacher, cfg.seed)?;
    let mut stepper = Stepper::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, TeacherNet)> = None;
    let mut stop = false;
    for epoch in 0..cfg.teacher_epochs {
        let order = epoch_order(pairs.len(), cfg.seed, epoch);
        let mut epoch_loss = Vec::new();
        for idx in batches(&order, cfg.batch_size) {
            let lr = stack(&idx.iter().map(|&i| &pairs[i].0).collect::<Vec<_>>())?;
            let hr = stack(&idx.iter().map(|&i| &pairs[i].1).collect::<Vec<_>>())?;
            let (loss, grads) = {
                let mut g = Graph::trainable(net.params());
                let x = g.input(lr);
                let y = g.input(hr);
                let out = net.forward_graph(&mut g, x)?;
                let l = sr_loss(&mut g.tape, out.sr, y)?;
                let grads = g.tape.backward(l)?;
                (g.tape.value(l).item()? as f64, g.param_grads(&grads))
            };
            epoch_loss.push(loss);
            if let Progress::Stop = stepper.apply(net.params_mut()?, grads, loss, epoch, cfg)? {
                stop = true;
                break;
            }
        }
        history.push(HistoryRow {
            epoch,
            split: "train",
            loss: epoch_loss.iter().sum::<f64>() / epoch_loss.len().max(1) as f64,
            psnr: None,
            ssim: None,
        });
        if !val.is_empty() {
            let (vloss, q) = evaluate_teacher(&net, val)?;
            history.push(HistoryRow {
                epoch,
                split: "val",
                loss: vloss,
                psnr: Some(q.psnr_db),
                ssim: Some(q.ssim),
            });
            if best.as_ref().is_none_or(|(b, _, _)| vloss < *b) {
                best = Some((vloss, epoch, net.clone()));
            }
        }
        if stop {
            break;
        }
    }
    let last_epoch = history.last().map_or(0, |r| r.epoch);
    let (net, best_epoch) = match best {
        Some((_, e, n)) => (n, e),
        None => (net, last_epoch),
    };
    Ok(Trained {
        net,
        best_epoch,
        history,
        step_losses: stepper.losses,
    })
}

/// Per-image PSNR/SSIM of the student's dehazed output against the clear
/// image, plus the mean MSE.
pub fn evaluate_student(net: &StudentNet, samples: &[Sample]) -> Result<(f64, QualityReport)> {
    let mut loss = 0.0;
    let mut per_image = Vec::with_capacity(samples.len());
    for s in samples {
        let raw = net.infer(&s.hazy.to_tensor())?;
        let clear = s.clear.to_tensor();
        loss += raw
            .data()
            .iter()
            .zip(clear.data())
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / raw.numel() as f64;
        let out = ImageRGB::from_tensor(&raw, 0)?;
        per_image.push(ImageQuality {
            id: s.id.clone(),
            psnr_db: psnr(&out, &s.clear)?,
            ssim: ssim(&out, &s.clear)?,
        });
    }
    Ok((loss / samples.len().max(1) as f64, QualityReport::from_images(per_image)))
}

/// Trains the student on hazy → clear pairs. With a teacher, every step adds
/// the affinity terms between the student's adapter outputs and the frozen
/// teacher's taps on the clear images. Keeps the weights with the best
/// validation PSNR.
pub fn train_student(
    cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    teacher: Option<&TeacherNet>,
) -> Result<Trained<StudentNet>> {
    cfg.validate()?;
    if let Some(t) = teacher {
        if !t.is_frozen() {
            return Err(CoreError::Usage("the teacher must be frozen before distillation".into()));
        }
        if t.config().tap_channels().to_vec() != cfg.student.teacher_tap_channels {
            return Err(CoreError::Config(format!(
                "teacher taps have {:?} channels, student adapters expect {:?}",
                t.config().tap_channels(),
                cfg.student.teacher_tap_channels
            )));
        }
    }
    if train.is_empty() {
        return Err(CoreError::Config("student training set is empty".into()));
    }
    let guided = teacher.filter(|_| cfg.fa.w_fa > 0.0);
    let views = match guided {
        Some(_) => train
            .iter()
            .map(|s| teacher_view(&s.clear, cfg.resolution))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let mut net = StudentNet::new(cfg.student.clone(), cfg.seed)?;
    let mut stepper = Stepper::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, StudentNet)> = None;
    let mut stop = false;
    for epoch in 0..cfg.student_epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut epoch_loss = Vec::new();
        for idx in batches(&order, cfg.batch_size) {
            let hazy = stack(&idx.iter().map(|&i| &train[i].hazy).collect::<Vec<_>>())?;
            let clear = stack(&idx.iter().map(|&i| &train[i].clear).collect::<Vec<_>>())?;
            let teacher_taps = match guided {
                Some(t) => t.infer(&stack(&idx.iter().map(|&i| &views[i]).collect::<Vec<_>>())?)?.1,
                None => Vec::new(),
            };
            let (loss, grads) = {
                let mut g = Graph::trainable(net.params());
                let x = g.input(hazy);
                let y = g.input(clear);
                let out = net.arch().forward(&mut g, x, guided.is_some())?;
                let l_mse = mse(&mut g.tape, out.out, y)?;
                let mut terms = Vec::with_capacity(out.taps.len());
                for (k, &s) in out.taps.iter().enumerate() {
                    let level = cfg.student.teacher_level(k);
                    let t = g.input(teacher_taps[level].clone());
                    terms.push(fa_term(&mut g.tape, s, t, &cfg.fa)?);
                }
                let l = total_loss(&mut g.tape, l_mse, &terms, &cfg.fa)?;
                let grads = g.tape.backward(l)?;
                (g.tape.value(l).item()? as f64, g.param_grads(&grads))
            };
            epoch_loss.push(loss);
            if let Progress::Stop = stepper.apply(net.params_mut(), grads, loss, epoch, cfg)? {
                stop = true;
                break;
            }
        }
        history.push(HistoryRow {
            epoch,
            split: "train",
            loss: epoch_loss.iter().sum::<f64>() / epoch_loss.len().max(1) as f64,
            psnr: None,
            ssim: None,
        });
        if !val.is_empty() {
            let (vloss, q) = evaluate_student(&net, val)?;
            history.push(HistoryRow {
                epoch,
                split: "val",
                loss: vloss,
                psnr: Some(q.psnr_db),
                ssim: Some(q.ssim),
            });
            if best.as_ref().is_none_or(|(b, _, _)| q.psnr_db > *b) {
                best = Some((q.psnr_db, epoch, net.clone()));
            }
        }
        if stop {
            break;
        }
    }
    let last_epoch = history.last().map_or(0, |r| r.epoch);
    let (net, best_epoch) = match best {
        Some((_, e, n)) => (n, e),
        None => (net, last_epoch),
    };
    Ok(Trained {
        net,
        best_epoch,
        history,
        step_losses: stepper.losses,
    })
}
