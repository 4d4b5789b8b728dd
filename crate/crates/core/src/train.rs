//! Student-teacher training loop: AdamW, warmup + cosine schedules, EMA
//! teacher, deterministic batch sampling and resumable training state.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::augment::{multicrop, CropSpec};
use crate::data::image::FloatImage;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::stream;
use crate::ssl::{teacher_targets, total_loss, CenteringState, DinoHead, SslConfig};
use crate::tensor::{Tape, Tensor};
use crate::vit::{read_params, write_checkpoint, VitConfig, VitEncoder};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;
/// Batch size at which `base_lr` is used unscaled.
pub const LR_REFERENCE_BATCH: usize = 32;

// stream labels
const INIT: u64 = 1;
const EPOCH: u64 = 2;
const AUG: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Peak learning rate at the reference batch size; the effective peak is
    /// `base_lr · batch_size / 32`.
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_iters: usize,
    pub weight_decay: f64,
    pub momentum_start: f64,
    pub momentum_end: f64,
    pub seed: u64,
    /// Build batches inline. When off, a worker thread prepares batches ahead
    /// of the optimizer; batch contents are a function of `(seed, iteration)`
    /// either way.
    pub deterministic: bool,
    /// Write a resumable state file every this many iterations (0 = never).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 32,
            base_lr: 1e-3,
            final_lr: 1e-6,
            warmup_iters: 30,
            weight_decay: 0.04,
            momentum_start: 0.992,
            momentum_end: 1.0,
            seed: 0,
            deterministic: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if self.iterations > 0 && self.warmup_iters >= self.iterations {
            return bad(format!(
                "warmup_iters ({}) must be below iterations ({})",
                self.warmup_iters, self.iterations
            ));
        }
        if self.iterations == 0 && self.warmup_iters != 0 {
            return bad("warmup_iters must be 0 when iterations is 0".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        for (k, v) in [
            ("momentum_start", self.momentum_start),
            ("momentum_end", self.momentum_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.base_lr >= 0.0) || !(self.final_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rates and weight decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / LR_REFERENCE_BATCH as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub teacher_momentum: f64,
}

/// Linear warmup from 0 to the peak learning rate, cosine decay to `final_lr`
/// at the last iteration; teacher momentum follows a cosine from start to end.
pub fn schedule(iter: usize, cfg: &TrainConfig) -> Result<Schedule> {
    if iter >= cfg.iterations {
        return Err(Error::Param(format!(
            "iteration {iter} outside schedule of {} iterations",
            cfg.iterations
        )));
    }
    let cosine = |from: f64, to: f64, t: f64| to + 0.5 * (from - to) * (1.0 + (std::f64::consts::PI * t).cos());
    let peak = cfg.peak_lr();
    let last = cfg.iterations - 1;
    let lr = if iter < cfg.warmup_iters {
        peak * iter as f64 / cfg.warmup_iters as f64
    } else if last == cfg.warmup_iters {
        peak
    } else {
        cosine(
            peak,
            cfg.final_lr,
            (iter - cfg.warmup_iters) as f64 / (last - cfg.warmup_iters) as f64,
        )
    };
    let t = if last == 0 { 1.0 } else { iter as f64 / last as f64 };
    Ok(Schedule {
        lr,
        teacher_momentum: cosine(cfg.momentum_start, cfg.momentum_end, t),
    })
}

/// `t ← m·t + (1 − m)·s` for every scalar, computed in f64 and kept inside the
/// closed interval spanned by the two values.
pub fn ema_update(teacher: &mut ParamSet<f32>, student: &ParamSet<f32>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Param(format!("teacher momentum {m} outside [0, 1]")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::Shape("teacher and student parameters differ in layout".into()));
    }
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            let mixed = (m * *tv as f64 + (1.0 - m) * sv as f64) as f32;
            *tv = mixed.clamp(tv.min(sv), tv.max(sv));
        }
    }
    Ok(())
}

/// Whether weight decay applies to a parameter: matrices only, excluding the
/// position embedding and class token.
pub fn decays(name: &str, t: &Tensor<f32>) -> bool {
    t.rank() >= 2 && name != "pos_embed" && name != "cls_token"
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
    pub step: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let mut m = ParamSet::new();
        for (n, t) in params.iter() {
            m.insert(n, Tensor::zeros(t.shape().to_vec()));
        }
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    /// One update; `grads[i]` belongs to the i-th parameter, `None` meaning
    /// zero gradient.
    pub fn update(
        &mut self,
        params: &mut ParamSet<f32>,
        grads: &[Option<Tensor<f32>>],
        lr: f64,
        wd: f64,
    ) -> Result<()> {
        if grads.len() != params.len() || !self.m.same_layout(params) {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - (ADAM_BETA1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (ADAM_BETA2 as f64).powi(self.step as i32);
        let (lr32, bc1, bc2) = (lr as f32, bc1 as f32, bc2 as f32);
        let shrink = (1.0 - lr * wd) as f32;
        let names = params.names().to_vec();
        let (ms, vs) = (self.m.tensors_mut(), self.v.tensors_mut());
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let decay = wd > 0.0 && decays(&names[i], p);
            let (m, v) = (ms[i].data_mut(), vs[i].data_mut());
            let g = grads[i].as_ref().map(|g| g.data());
            if let Some(g) = g {
                if g.len() != m.len() {
                    return Err(Error::Shape(format!("gradient of `{}` has the wrong size", names[i])));
                }
            }
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                if decay {
                    *w *= shrink;
                }
                *w -= lr32 * (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Everything the trainer needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub vit: VitConfig,
    pub ssl: SslConfig,
    pub train: TrainConfig,
    pub crop: CropSpec,
}

impl TrainRun {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.ssl.validate()?;
        self.train.validate()?;
        self.crop.validate()?;
        if self.crop.global_size != self.vit.image_size {
            return Err(Error::Config {
                key: "crop.global_size".into(),
                msg: format!(
                    "global crops ({}) must match the encoder image size ({})",
                    self.crop.global_size, self.vit.image_size
                ),
            });
        }
        if self.vit.in_channels != 3 {
            return Err(Error::Config {
                key: "model.in_channels".into(),
                msg: "training data is RGB; in_channels must be 3".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f32,
    pub lr: f64,
    pub teacher_momentum: f64,
}

/// Diagnostics of one step beyond the logged loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub record: LossRecord,
    pub dino: f32,
    pub koleo: Option<f32>,
    /// Entropy of the batch-mean teacher assignment.
    pub teacher_entropy: f64,
    /// Largest deviation of a batch prototype marginal from `1/K`.
    pub marginal_deviation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: VitEncoder<f32>,
    pub teacher: VitEncoder<f32>,
    pub student_head: DinoHead<f32>,
    pub teacher_head: DinoHead<f32>,
    pub opt_encoder: AdamW,
    pub opt_head: AdamW,
    pub centering: CenteringState<f32>,
    pub iteration: usize,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    /// Fresh student from the seed; the teacher starts as an exact copy.
    pub fn init(vit: &VitConfig, ssl: &SslConfig, seed: u64) -> Result<Self> {
        let student = VitEncoder::init(vit.clone(), &mut stream(seed, &[INIT, 0]))?;
        let student_head = DinoHead::init(vit.embed_dim, ssl, &mut stream(seed, &[INIT, 1]));
        Ok(Self {
            opt_encoder: AdamW::new(&student.params),
            opt_head: AdamW::new(&student_head.params),
            teacher: student.clone(),
            teacher_head: student_head.clone(),
            student,
            student_head,
            centering: CenteringState::new(ssl.centering, ssl.prototypes),
            iteration: 0,
            history: Vec::new(),
        })
    }

    /// Writes a resumable state file (`RDCK` container with prefixed blobs).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut p = ParamSet::new();
        p.extend_prefixed("student.", &self.student.params);
        p.extend_prefixed("teacher.", &self.teacher.params);
        p.extend_prefixed("student_head.", &self.student_head.params);
        p.extend_prefixed("teacher_head.", &self.teacher_head.params);
        p.extend_prefixed("adam.encoder.m.", &self.opt_encoder.m);
        p.extend_prefixed("adam.encoder.v.", &self.opt_encoder.v);
        p.extend_prefixed("adam.head.m.", &self.opt_head.m);
        p.extend_prefixed("adam.head.v.", &self.opt_head.v);
        if let Some(c) = &self.centering.center {
            p.insert("center", c.clone());
        }
        p.insert("meta.iteration", counter(self.iteration as u64));
        p.insert("meta.adam_step", counter(self.opt_encoder.step));
        let losses: Vec<f32> = self.history.iter().map(|r| r.loss).collect();
        p.insert("meta.losses", Tensor::new(vec![losses.len()], losses)?);
        write_checkpoint(path, &self.student.config, &p)
    }

    /// Restores a state file written by [`TrainState::save`]. Learning rate and
    /// momentum of past records are recomputed from `cfg`.
    pub fn load(path: &Path, run: &TrainRun) -> Result<Self> {
        let (vit, p) = read_params(path)?;
        if vit != run.vit {
            return Err(Error::Config {
                key: "model".into(),
                msg: format!("state file {} was written for a different encoder", path.display()),
            });
        }
        let head = |prefix: &str| -> Result<DinoHead<f32>> {
            let h = DinoHead {
                params: p.with_prefix_stripped(prefix),
            };
            let reference = DinoHead::<f32>::init(vit.embed_dim, &run.ssl, &mut stream(0, &[]));
            if !reference.params.same_layout(&h.params) {
                return Err(Error::Config {
                    key: "ssl".into(),
                    msg: format!("head in {} does not match the ssl settings", path.display()),
                });
            }
            Ok(h)
        };
        let student = VitEncoder::from_params(vit.clone(), p.with_prefix_stripped("student."))?;
        let teacher = VitEncoder::from_params(vit.clone(), p.with_prefix_stripped("teacher."))?;
        let student_head = head("student_head.")?;
        let teacher_head = head("teacher_head.")?;
        let step = read_counter(&p, "meta.adam_step")?;
        let adam = |pre: &str, params: &ParamSet<f32>| -> Result<AdamW> {
            let a = AdamW {
                m: p.with_prefix_stripped(&format!("{pre}m.")),
                v: p.with_prefix_stripped(&format!("{pre}v.")),
                step,
            };
            if !a.m.same_layout(params) || !a.v.same_layout(params) {
                return Err(Error::format(
                    path.display(),
                    "optimizer moments do not match parameters",
                ));
            }
            Ok(a)
        };
        let opt_encoder = adam("adam.encoder.", &student.params)?;
        let opt_head = adam("adam.head.", &student_head.params)?;
        let mut centering = CenteringState::new(run.ssl.centering, run.ssl.prototypes);
        if centering.center.is_some() {
            centering.center = Some(p.get("center")?.clone());
        }
        let iteration = read_counter(&p, "meta.iteration")? as usize;
        let losses = p.get("meta.losses")?.data().to_vec();
        if losses.len() != iteration || iteration > run.train.iterations {
            return Err(Error::format(path.display(), "inconsistent iteration counter"));
        }
        let history = losses
            .into_iter()
            .enumerate()
            .map(|(i, loss)| {
                let s = schedule(i, &run.train)?;
                Ok(LossRecord {
                    iter: i,
                    loss,
                    lr: s.lr,
                    teacher_momentum: s.teacher_momentum,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            student,
            teacher,
            student_head,
            teacher_head,
            opt_encoder,
            opt_head,
            centering,
            iteration,
            history,
        })
    }
}

/// Counters are stored as two 16-bit halves per 32 bits so they survive the
/// f32 container exactly.
fn counter(v: u64) -> Tensor<f32> {
    let parts: Vec<f32> = (0..4).map(|i| ((v >> (16 * i)) & 0xFFFF) as f32).collect();
    Tensor::new(vec![4], parts).expect("shape")
}

fn read_counter(p: &ParamSet<f32>, name: &str) -> Result<u64> {
    let t = p.get(name)?;
    if t.numel() != 4 {
        return Err(Error::Shape(format!("`{name}` must hold 4 values")));
    }
    Ok(t.data()
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &x)| acc | ((x as u64 & 0xFFFF) << (16 * i))))
}

/// Views for one iteration: `global[v]` and `local[v]` are `[B, S, S, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiCropBatch {
    pub global: Vec<Tensor<f32>>,
    pub local: Vec<Tensor<f32>>,
}

/// Epoch-wise shuffled sampling without replacement; sample `j` of iteration
/// `i` is a pure function of `(seed, i, j)`.
pub struct BatchSampler<'a> {
    data: &'a [FloatImage],
    run: &'a TrainRun,
    perm: Option<(usize, Vec<usize>)>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(data: &'a [FloatImage], run: &'a TrainRun) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Protocol("training set is empty".into()));
        }
        Ok(Self { data, run, perm: None })
    }

    fn index(&mut self, pos: usize) -> usize {
        let n = self.data.len();
        let epoch = pos / n;
        if self.perm.as_ref().map(|p| p.0) != Some(epoch) {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut stream(self.run.train.seed, &[EPOCH, epoch as u64]));
            self.perm = Some((epoch, idx));
        }
        self.perm.as_ref().expect("set above").1[pos % n]
    }

    pub fn batch(&mut self, iter: usize) -> Result<MultiCropBatch> {
        let b = self.run.train.batch_size;
        let crop = &self.run.crop;
        let size = self.run.vit.image_size;
        let mut global = vec![Vec::with_capacity(b * size * size * 3); crop.global_crops];
        let mut local = vec![Vec::with_capacity(b * size * size * 3); crop.local_crops];
        for j in 0..b {
            let img = &self.data[self.index(iter * b + j)];
            let mut rng = stream(self.run.train.seed, &[AUG, iter as u64, j as u64]);
            let views = multicrop(img, crop, &mut rng);
            for (v, view) in views.into_iter().enumerate() {
                let view = if view.width != size || view.height != size {
                    view.resize(size, size)
                } else {
                    view
                };
                if v < crop.global_crops {
                    global[v].extend_from_slice(&view.data);
                } else {
                    local[v - crop.global_crops].extend_from_slice(&view.data);
                }
            }
        }
        let stack = |vs: Vec<Vec<f32>>| {
            vs.into_iter()
                .map(|d| Tensor::new(vec![b, size, size, 3], d))
                .collect::<Result<Vec<_>>>()
        };
        Ok(MultiCropBatch {
            global: stack(global)?,
            local: stack(local)?,
        })
    }
}

/// One optimization step on a prepared batch.
pub fn train_step(
    state: &mut TrainState,
    batch: &MultiCropBatch,
    ssl: &SslConfig,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let b = batch.global.first().map_or(0, |t| t.shape()[0]);
    if b < 2 {
        return Err(Error::Protocol(format!("batch size must be at least 2, got {b}")));
    }
    let sched = schedule(state.iteration, cfg)?;
    let targets = teacher_targets(
        &state.teacher,
        &state.teacher_head,
        &batch.global,
        &state.centering,
        ssl,
    )?;

    let mut tape = Tape::new();
    let enc_vars = state.student.params.bind(&mut tape, true);
    let head_vars = state.student_head.params.bind(&mut tape, true);
    let views: Vec<Tensor<f32>> = batch.global.iter().chain(&batch.local).cloned().collect();
    let terms = total_loss(
        &mut tape,
        &state.student,
        &enc_vars,
        &state.student_head,
        &head_vars,
        &views,
        &targets.probs,
        ssl,
    )?;
    tape.check_finite(terms.total, "total loss")?;
    tape.backward(terms.total)?;
    let grads = |vars: &[crate::tensor::Var], names: &[String]| -> Result<Vec<Option<Tensor<f32>>>> {
        vars.iter()
            .zip(names)
            .map(|(&v, n)| {
                let g = tape.grad(v);
                if g.as_ref().is_some_and(|g| !g.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of `{n}`")));
                }
                Ok(g)
            })
            .collect()
    };
    let enc_grads = grads(enc_vars.vars(), state.student.params.names())?;
    let head_grads = grads(head_vars.vars(), state.student_head.params.names())?;
    let loss = tape.value(terms.total).item();
    let dino = tape.value(terms.dino).item();
    let koleo = terms.koleo.map(|k| tape.value(k).item());
    drop(enc_vars);
    drop(head_vars);

    state
        .opt_encoder
        .update(&mut state.student.params, &enc_grads, sched.lr, cfg.weight_decay)?;
    state
        .opt_head
        .update(&mut state.student_head.params, &head_grads, sched.lr, cfg.weight_decay)?;
    state.student_head.renormalize_prototypes();
    ema_update(&mut state.teacher.params, &state.student.params, sched.teacher_momentum)?;
    ema_update(
        &mut state.teacher_head.params,
        &state.student_head.params,
        sched.teacher_momentum,
    )?;
    state.centering = targets.state;

    let record = LossRecord {
        iter: state.iteration,
        loss,
        lr: sched.lr,
        teacher_momentum: sched.teacher_momentum,
    };
    state.history.push(record);
    state.iteration += 1;
    Ok(StepStats {
        record,
        dino,
        koleo,
        teacher_entropy: targets.mean_entropy,
        marginal_deviation: targets.marginal_deviation,
    })
}

/// Runs from `state.iteration` to `run.train.iterations`, calling `on_step`
/// after every step.
pub fn train_loop(
    state: &mut TrainState,
    data: &[FloatImage],
    run: &TrainRun,
    mut on_step: impl FnMut(&TrainState, &StepStats) -> Result<()>,
) -> Result<()> {
    run.validate()?;
    let start = state.iteration;
    let end = run.train.iterations;
    if start >= end {
        return Ok(());
    }
    let mut sampler = BatchSampler::new(data, run)?;
    if run.train.deterministic {
        for it in start..end {
            let batch = sampler.batch(it)?;
            let stats = train_step(state, &batch, &run.ssl, &run.train)?;
            on_step(state, &stats)?;
        }
        return Ok(());
    }
    std::thread::scope(|s| {
        let (tx, rx) = std::sync::mpsc::sync_channel(2);
        s.spawn(move || {
            for it in start..end {
                if tx.send(sampler.batch(it)).is_err() {
                    break;
                }
            }
        });
        for _ in start..end {
            let batch = rx
                .recv()
                .map_err(|_| Error::Protocol("batch worker stopped early".into()))??;
            let stats = train_step(state, &batch, &run.ssl, &run.train)?;
            on_step(state, &stats)?;
        }
        Ok(())
    })
}

/// Writes the loss log as CSV `iter,loss,lr,teacher_momentum`.
pub fn write_loss_log(path: &Path, history: &[LossRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "iter,loss,lr,teacher_momentum").map_err(io)?;
    for r in history {
        writeln!(w, "{},{},{},{}", r.iter, r.loss, r.lr, r.teacher_momentum).map_err(io)?;
    }
    w.flush().map_err(io)
}
