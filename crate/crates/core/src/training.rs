//! Losses, Adam with decoupled weight decay, cosine schedule, paired
//! augmentation and the desk-scale training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::mpsc::sync_channel;

use iat_tensor::{Activation, Eager, Graph, Scalar, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{image_to_tensor, tensor_to_image, ImageRGB};
use crate::isp::LinearImage;
use crate::metrics::psnr;
use crate::model::{iat_forward, Checkpoint, IatConfig, IatParams};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    Mixed,
    MixedRaw,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossKind::L1),
            "mixed" => Ok(LossKind::Mixed),
            "mixed_raw" => Ok(LossKind::MixedRaw),
            other => Err(Error::Config(format!(
                "unknown loss {other:?} (expected l1, mixed or mixed_raw)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub crop_size: usize,
    pub loss: LossKind,
    pub lambda_raw: f64,
    /// Weight of the gradient-difference term in the mixed loss.
    pub w_percep: f64,
    pub seed: u64,
    pub hflip: bool,
    pub vflip: bool,
    /// Validation period in steps; the final step is always evaluated.
    pub val_every: usize,
    /// Parameter-name prefixes excluded from optimization.
    pub frozen: Vec<String>,
    /// Produce batches on a background thread.
    pub prefetch: bool,
    pub model: IatConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2e-4,
            weight_decay: 1e-4,
            batch_size: 8,
            steps: 1000,
            crop_size: 256,
            loss: LossKind::Mixed,
            lambda_raw: 0.1,
            w_percep: 0.04,
            seed: 0,
            hflip: true,
            vflip: true,
            val_every: 50,
            frozen: Vec::new(),
            prefetch: false,
            model: IatConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(self.lambda_raw >= 0.0) || !(self.w_percep >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lambda_raw, w_percep and weight_decay must be ≥ 0".into());
        }
        if self.crop_size < 8 {
            return bad(format!("crop_size must be ≥ 8, got {}", self.crop_size));
        }
        if self.batch_size == 0 || self.steps == 0 || self.val_every == 0 {
            return bad("batch_size, steps and val_every must be ≥ 1".into());
        }
        self.model.validate()
    }
}

// ---------------------------------------------------------------------------
// losses

fn same_shape<T: Scalar, G: Graph<T>>(g: &G, a: &G::Node, b: &G::Node, what: &str) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Input(format!("{what}: shapes differ {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Mean of `0.5·d²` for `|d| < 1`, `|d| − 0.5` otherwise.
pub fn smooth_l1<T: Scalar, G: Graph<T>>(g: &G, pred: &G::Node, target: &G::Node) -> Result<G::Node> {
    same_shape(g, pred, target, "smooth_l1")?;
    let d = g.sub(pred, target)?;
    Ok(g.mean_all(&g.activation(&d, Activation::Huber))?)
}

pub fn l1_loss<T: Scalar, G: Graph<T>>(g: &G, pred: &G::Node, target: &G::Node) -> Result<G::Node> {
    same_shape(g, pred, target, "l1_loss")?;
    let d = g.sub(pred, target)?;
    Ok(g.mean_all(&g.activation(&d, Activation::Abs))?)
}

fn diff<T: Scalar, G: Graph<T>>(g: &G, x: &G::Node, axis: usize) -> Result<Option<G::Node>> {
    let n = g.shape(x)[axis];
    if n < 2 {
        return Ok(None);
    }
    let hi = g.narrow(x, axis, 1, n - 1)?;
    let lo = g.narrow(x, axis, 0, n - 1)?;
    Ok(Some(g.sub(&hi, &lo)?))
}

/// L1 distance between forward-difference edge maps, summed over the two
/// spatial axes. Constant offsets have no edges and contribute nothing.
pub fn gradient_difference<T: Scalar, G: Graph<T>>(g: &G, pred: &G::Node, target: &G::Node) -> Result<G::Node> {
    same_shape(g, pred, target, "gradient_difference")?;
    let rank = g.shape(pred).len();
    if rank < 2 {
        return Err(Error::Input("gradient_difference needs at least two axes".into()));
    }
    let mut total: Option<G::Node> = None;
    for axis in [rank - 2, rank - 1] {
        if let (Some(dp), Some(dt)) = (diff(g, pred, axis)?, diff(g, target, axis)?) {
            let term = l1_loss(g, &dp, &dt)?;
            total = Some(match total {
                Some(t) => g.add(&t, &term)?,
                None => term,
            });
        }
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    })
}

/// `smooth_l1 + w_percep · gradient_difference`.
pub fn mixed_loss<T: Scalar, G: Graph<T>>(g: &G, pred: &G::Node, target: &G::Node, w_percep: f64) -> Result<G::Node> {
    let base = smooth_l1(g, pred, target)?;
    let edges = gradient_difference(g, pred, target)?;
    Ok(g.add(&base, &g.scale(&edges, T::from_f64(w_percep)))?)
}

/// `l1(out, target) + λ · l1(f_out, pseudo_raw)`.
pub fn raw_supervision_loss<T: Scalar, G: Graph<T>>(
    g: &G,
    out: &G::Node,
    target: &G::Node,
    f_out: &G::Node,
    pseudo_raw: &G::Node,
    lambda: f64,
) -> Result<G::Node> {
    let rgb = l1_loss(g, out, target)?;
    let raw = l1_loss(g, f_out, pseudo_raw)?;
    Ok(g.add(&rgb, &g.scale(&raw, T::from_f64(lambda)))?)
}

// ---------------------------------------------------------------------------
// optimizer and schedule

/// Gradients keyed by parameter name.
pub type ParamGrads<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// `(m, v)` per trainable parameter.
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments for every parameter not matching a frozen prefix.
    pub fn new(params: &IatParams<T>, frozen: &[String]) -> Self {
        let moments = params
            .params()
            .iter()
            .filter(|p| !frozen.iter().any(|f| p.name.starts_with(f.as_str())))
            .map(|p| {
                let z = Tensor::zeros(p.value.shape());
                (p.name.clone(), (z.clone(), z))
            })
            .collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }
}

/// One bias-corrected Adam update with decoupled weight decay
/// (`θ ← θ − lr·wd·θ` before the Adam delta).
pub fn adam_step<T: Scalar>(
    params: &mut IatParams<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let t = state.step + 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for (name, (m, v)) in state.moments.iter_mut() {
        let grad = grads
            .get(name)
            .ok_or_else(|| iat_tensor::TensorError::Contract(format!("missing gradient for {name}")))?;
        let param = params.get_mut(name).expect("moments mirror params");
        if grad.shape() != param.value.shape() {
            return Err(iat_tensor::TensorError::shape("adam_step", grad.shape(), param.value.shape()).into());
        }
        let (md, vd, pd) = (m.data_mut(), v.data_mut(), param.value.data_mut());
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let decay = T::one() - T::from_f64(lr * weight_decay);
        let step = T::from_f64(lr);
        let (c1, c2, eps) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2), T::from_f64(state.eps));
        for i in 0..pd.len() {
            let gi = grad.data()[i];
            md[i] = b1t * md[i] + (T::one() - b1t) * gi;
            vd[i] = b2t * vd[i] + (T::one() - b2t) * gi * gi;
            let mh = md[i] * c1;
            let vh = vd[i] * c2;
            pd[i] = pd[i] * decay - step * mh / (vh.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}

/// `lr0·0.5·(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(iat_tensor::TensorError::Contract(format!(
            "cosine_lr needs 0 ≤ step ≤ total and total > 0 (step {step}, total {total})"
        ))
        .into());
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()))
}

// ---------------------------------------------------------------------------
// data

/// One training pair, optionally with the linear pseudo-raw of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: ImageRGB,
    pub target: ImageRGB,
    pub raw: Option<LinearImage>,
}

impl Sample {
    pub fn new(input: ImageRGB, target: ImageRGB, raw: Option<LinearImage>) -> Result<Self> {
        if !input.same_size(&target) {
            return Err(Error::Input(format!(
                "input {}×{} and target {}×{} differ in size",
                input.height(),
                input.width(),
                target.height(),
                target.width()
            )));
        }
        if let Some(r) = &raw {
            if (r.height, r.width) != (input.height(), input.width()) {
                return Err(Error::Input("pseudo-raw size differs from input".into()));
            }
        }
        Ok(Sample { input, target, raw })
    }

    fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Sample> {
        Ok(Sample {
            input: self.input.crop(y, x, h, w)?,
            target: self.target.crop(y, x, h, w)?,
            raw: self.raw.as_ref().map(|r| r.crop(y, x, h, w)).transpose()?,
        })
    }

    fn flip(&self, horizontal: bool, vertical: bool) -> Sample {
        let mut s = self.clone();
        if horizontal {
            s.input = s.input.flip_horizontal();
            s.target = s.target.flip_horizontal();
            s.raw = s.raw.map(|r| r.flip_horizontal());
        }
        if vertical {
            s.input = s.input.flip_vertical();
            s.target = s.target.flip_vertical();
            s.raw = s.raw.map(|r| r.flip_vertical());
        }
        s
    }
}

/// Flips both images the same way, each axis independently with p = 0.5.
pub fn augment_flip<R: Rng + ?Sized>(input: &ImageRGB, target: &ImageRGB, rng: &mut R) -> Result<(ImageRGB, ImageRGB)> {
    let s = Sample::new(input.clone(), target.clone(), None)?;
    let (h, v) = (rng.random_bool(0.5), rng.random_bool(0.5));
    let s = s.flip(h, v);
    Ok((s.input, s.target))
}

/// Draws epoch-shuffled, randomly cropped and flipped minibatches.
struct BatchSampler<'a> {
    data: &'a [Sample],
    cfg: &'a TrainConfig,
    order: Vec<usize>,
    pos: usize,
    shuffle: rng::Rng,
    augment: rng::Rng,
}

impl<'a> BatchSampler<'a> {
    fn new(data: &'a [Sample], cfg: &'a TrainConfig) -> Self {
        BatchSampler {
            data,
            cfg,
            order: Vec::new(),
            pos: 0,
            shuffle: rng::stream(cfg.seed, streams::SHUFFLE),
            augment: rng::stream(cfg.seed, streams::AUGMENT),
        }
    }

    fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.data.len()).collect();
            self.order.shuffle(&mut self.shuffle);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    fn next_batch(&mut self) -> Result<Vec<Sample>> {
        (0..self.cfg.batch_size)
            .map(|_| {
                let s = &self.data[self.next_index()];
                let (h, w) = (s.input.height(), s.input.width());
                let (ch, cw) = (self.cfg.crop_size.min(h), self.cfg.crop_size.min(w));
                let y = self.augment.random_range(0..=h - ch);
                let x = self.augment.random_range(0..=w - cw);
                let hf = self.cfg.hflip && self.augment.random_bool(0.5);
                let vf = self.cfg.vflip && self.augment.random_bool(0.5);
                Ok(s.crop(y, x, ch, cw)?.flip(hf, vf))
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// loop

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    /// Absent for the evaluation row before the first step.
    pub loss: Option<f64>,
    pub psnr_val: Option<f64>,
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,lr,loss,psnr_val\n");
    for r in rows {
        let psnr = r.psnr_val.map(|p| format!("{p:.6}")).unwrap_or_default();
        let loss = r.loss.map(|l| format!("{l:e}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:e},{},{}", r.step, r.lr, loss, psnr);
    }
    s
}

pub fn write_log_csv(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, log_to_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the highest validation PSNR.
    pub best: Checkpoint,
    pub best_psnr: f64,
    pub last: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Loss and parameter gradients for one sample, scaled by `weight`.
pub fn sample_loss_and_grads(
    params: &IatParams<f32>,
    sample: &Sample,
    cfg: &TrainConfig,
    weight: f32,
) -> Result<(f64, ParamGrads<f32>)> {
    let mut tape = Tape::new();
    for prefix in &cfg.frozen {
        tape = tape.freeze(prefix.clone());
    }
    let x = tape.constant(image_to_tensor(&sample.input));
    let y = tape.constant(image_to_tensor(&sample.target));
    let fwd = iat_forward(&tape, &x, params, false)?;
    let loss = match cfg.loss {
        LossKind::L1 => l1_loss(&tape, &fwd.out, &y)?,
        LossKind::Mixed => mixed_loss(&tape, &fwd.out, &y, cfg.w_percep)?,
        LossKind::MixedRaw => {
            let raw = sample
                .raw
                .as_ref()
                .ok_or_else(|| Error::Config("mixed_raw loss needs a pseudo-raw for every sample".into()))?;
            let r = tape.constant(raw.to_tensor());
            raw_supervision_loss(&tape, &fwd.out, &y, &fwd.f_out, &r, cfg.lambda_raw)?
        }
    };
    let loss = tape.scale(&loss, weight);
    let value = tape.value(&loss).item()? as f64;
    let names: Vec<String> = params.params().iter().map(|p| p.name.clone()).collect();
    let grads = tape.backward(loss)?;
    let map = names
        .into_iter()
        .filter_map(|n| grads.param(&n).cloned().map(|g| (n, g)))
        .collect();
    Ok((value, map))
}

/// Mean PSNR of clamped model outputs against targets.
pub fn evaluate_psnr(params: &IatParams<f32>, data: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        let out = iat_forward(&Eager, &image_to_tensor::<f32>(&s.input), params, false)?.out;
        total += psnr(&tensor_to_image(&out)?, &s.target)?;
    }
    Ok(total / data.len().max(1) as f64)
}

fn accumulate(into: &mut ParamGrads<f32>, from: ParamGrads<f32>) -> Result<()> {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => {
                let d = acc.data_mut();
                for (a, b) in d.iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            None => {
                into.insert(name, g);
            }
        }
    }
    Ok(())
}

/// Runs `cfg.steps` optimizer steps with a cosine schedule starting from
/// `init` (or a fresh seeded initialization). `on_row` sees every log row as
/// it is produced.
pub fn train_loop(
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    init: Option<Checkpoint>,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if cfg.loss == LossKind::MixedRaw && train.iter().any(|s| s.raw.is_none()) {
        return Err(Error::Config("mixed_raw loss needs a pseudo-raw for every training sample".into()));
    }
    let val = if val.is_empty() { train } else { val };
    let (mut params, start) = match init {
        Some(ck) => {
            ck.expect_config(cfg.model)?;
            (ck.params, ck.step)
        }
        None => (
            IatParams::init(cfg.model, &mut rng::stream(cfg.seed, streams::MODEL_INIT))?,
            0,
        ),
    };
    let mut adam = AdamState::new(&params, &cfg.frozen);
    let mut log = Vec::with_capacity(cfg.steps + 1);
    let mut losses: Vec<f64> = Vec::new();

    let psnr0 = evaluate_psnr(&params, val)?;
    let mut best = (psnr0, Checkpoint::new(params.clone(), start));
    let row = LogRow {
        step: start,
        lr: cfg.lr0,
        loss: None,
        psnr_val: Some(psnr0),
    };
    on_row(&row);
    log.push(row);

    let mut run = |next: &mut dyn FnMut() -> Result<Vec<Sample>>| -> Result<()> {
        for i in 0..cfg.steps {
            let batch = next()?;
            let lr = cosine_lr(i, cfg.steps, cfg.lr0)?;
            let weight = 1.0 / batch.len() as f32;
            let mut grads = ParamGrads::new();
            let mut loss = 0.0;
            for s in &batch {
                let (l, g) = sample_loss_and_grads(&params, s, cfg, weight)?;
                loss += l;
                accumulate(&mut grads, g)?;
            }
            let step = start + i as u64 + 1;
            losses.push(loss);
            if !loss.is_finite() || grads.values().any(|g| g.has_nan()) {
                let tail: Vec<String> = losses.iter().rev().take(5).rev().map(|l| format!("{l:.6e}")).collect();
                return Err(Error::Diverged(format!(
                    "non-finite loss at step {step} (lr {lr:e}); recent losses [{}]",
                    tail.join(", ")
                )));
            }
            adam_step(&mut params, &grads, &mut adam, lr, cfg.weight_decay)?;
            let psnr_val = if (i + 1) % cfg.val_every == 0 || i + 1 == cfg.steps {
                let p = evaluate_psnr(&params, val)?;
                if p > best.0 {
                    best = (p, Checkpoint::new(params.clone(), step));
                }
                Some(p)
            } else {
                None
            };
            let row = LogRow {
                step,
                lr,
                loss: Some(loss),
                psnr_val,
            };
            on_row(&row);
            log.push(row);
        }
        Ok(())
    };

    if cfg.prefetch {
        std::thread::scope(|scope| {
            let (tx, rx) = sync_channel(2);
            let mut sampler = BatchSampler::new(train, cfg);
            scope.spawn(move || {
                for _ in 0..cfg.steps {
                    if tx.send(sampler.next_batch()).is_err() {
                        break;
                    }
                }
            });
            let mut next = || rx.recv().map_err(|_| Error::Input("batch producer stopped".into()))?;
            run(&mut next)
        })?;
    } else {
        let mut sampler = BatchSampler::new(train, cfg);
        run(&mut || sampler.next_batch())?;
    }

    let last_step = start + cfg.steps as u64;
    Ok(TrainOutcome {
        best: best.1,
        best_psnr: best.0,
        last: Checkpoint::new(params, last_step),
        log,
    })
}
