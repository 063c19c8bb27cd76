//! Phased training: maximum-likelihood warmup under Adam, then controlled
//! dual-skew fine-tuning under SGD, with deterministic data order, gradient
//! clipping, a JSONL metrics stream, and single-file checkpoints.

pub mod optim;

use std::collections::VecDeque;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::controller::{Controller, ControllerConfig};
use crate::corpus::{batch_iter, Batch, ParallelCorpus, EOS, PAD};
use crate::divergences::{
    cdsd_loss, cross_entropy, cross_entropy_value, dsd_loss, one_hot, sample_divergence,
    LossOutput, SkewConfig, UAggregation,
};
use crate::error::{Error, Result};
use crate::eval::{decode_corpus, DecodeConfig};
use crate::num::Real;
use crate::numerics::Tensor;
use crate::seq2seq::checkpoint::{
    load as load_checkpoint, save as save_checkpoint_file, BlockInfo, CheckpointMeta, RngCursor,
};
use crate::seq2seq::{forward_teacher_forced, Seq2SeqConfig, Seq2SeqParams};

pub use optim::{clip_global_norm, AdamHyper, AdamState, Optimizer, OptimizerKind};

/// Training objective of a phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossKind<F> {
    /// Smoothed cross entropy.
    Xent { smoothing: F },
    /// Dual-skew loss at a fixed mixing weight.
    Dsd { beta: F },
    /// Dual-skew loss with the controller supplying `beta(t)`.
    Cdsd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase<F> {
    pub start_step: u64,
    pub loss: LossKind<F>,
    pub optimizer: OptimizerKind,
    pub lr: F,
}

/// When the first phase hands over to the second. `Fixed` switches at the
/// configured boundary. `Plateau` switches as soon as dev loss fails to
/// improve for `patience` consecutive evaluations, pulling all later
/// boundaries (and the total) forward by the same amount; the configured
/// boundary remains as a latest-case fallback.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SwitchRule {
    Fixed,
    Plateau { patience: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SetPoint<F> {
    /// Mean of the last `ML_WINDOW` likelihood losses at switch time.
    Auto,
    Fixed { value: F },
}

fn default_k_p<F: Real>() -> F {
    F::from_f64(0.01)
}
fn default_k_i<F: Real>() -> F {
    F::from_f64(1e-4)
}
fn default_beta_min<F: Real>() -> F {
    F::from_f64(0.85)
}
fn default_beta_max<F: Real>() -> F {
    F::from_f64(0.95)
}
fn default_set_point<F>() -> SetPoint<F> {
    SetPoint::Auto
}
fn default_window() -> usize {
    1
}
fn default_beta_init<F: Real>() -> F {
    F::one()
}

/// Controller gains plus the set-point rule; turned into a live
/// [`ControllerConfig`] when the first controlled phase begins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound(
    serialize = "F: Real + Serialize",
    deserialize = "F: Real + Deserialize<'de>"
))]
pub struct ControllerSettings<F> {
    #[serde(default = "default_k_p")]
    pub k_p: F,
    #[serde(default = "default_k_i")]
    pub k_i: F,
    #[serde(default = "default_beta_min")]
    pub beta_min: F,
    #[serde(default = "default_beta_max")]
    pub beta_max: F,
    #[serde(default = "default_set_point")]
    pub set_point: SetPoint<F>,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_beta_init")]
    pub beta_init: F,
}

impl<F: Real> Default for ControllerSettings<F> {
    fn default() -> Self {
        ControllerSettings {
            k_p: F::from_f64(0.01),
            k_i: F::from_f64(1e-4),
            beta_min: F::from_f64(0.85),
            beta_max: F::from_f64(0.95),
            set_point: SetPoint::Auto,
            window: 1,
            beta_init: F::one(),
        }
    }
}

impl<F: Real> ControllerSettings<F> {
    pub fn resolve(&self, set_point: F) -> ControllerConfig<F> {
        ControllerConfig {
            k_p: self.k_p,
            k_i: self.k_i,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
            set_point,
            window: self.window,
            beta_init: self.beta_init,
        }
    }
}

/// Likelihood-loss history length used by the auto set point.
pub const ML_WINDOW: usize = 100;

#[derive(Clone, Debug)]
pub struct TrainConfig<F> {
    pub model: Seq2SeqConfig,
    pub phases: Vec<Phase<F>>,
    pub switch_rule: SwitchRule,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Seed for data order (epoch shuffles); independent of model init.
    pub seed: u64,
    pub skew: SkewConfig<F>,
    pub u_aggregation: UAggregation,
    pub controller: ControllerSettings<F>,
    pub clip_norm: Option<F>,
    pub log_interval: u64,
    /// Dev evaluation cadence in steps; 0 disables evaluation.
    pub eval_interval: u64,
    /// Dev sentences per evaluation; 0 means all.
    pub eval_max_sentences: usize,
    pub decode: DecodeConfig,
    /// Record wall-clock per logged step. Off by default so that reruns of
    /// the same config produce byte-identical metrics.
    pub log_timings: bool,
}

impl<F: Real> TrainConfig<F> {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.skew.validate()?;
        self.decode.validate()?;
        if self.phases.is_empty() {
            return Err(Error::Config("schedule needs at least one phase".into()));
        }
        if self.phases[0].start_step != 0 {
            return Err(Error::Config("first phase must start at step 0".into()));
        }
        for w in self.phases.windows(2) {
            if w[1].start_step <= w[0].start_step {
                return Err(Error::Config("phase starts must be strictly increasing".into()));
            }
        }
        for p in &self.phases {
            if p.start_step >= self.total_steps {
                return Err(Error::Config(format!(
                    "phase start {} is beyond total steps {}",
                    p.start_step, self.total_steps
                )));
            }
            let lr = p.lr.as_f64();
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("learning rate must be positive, got {}", lr)));
            }
            if let LossKind::Xent { smoothing } = p.loss {
                let s = smoothing.as_f64();
                if !(0.0..1.0).contains(&s) {
                    return Err(Error::Config(format!(
                        "smoothing must be in [0, 1), got {}",
                        s
                    )));
                }
            }
            if let LossKind::Dsd { beta } = p.loss {
                let b = beta.as_f64();
                if !(0.0..=1.0).contains(&b) {
                    return Err(Error::Config(format!("beta must be in [0, 1], got {}", b)));
                }
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log interval must be >= 1".into()));
        }
        if let SwitchRule::Plateau { patience } = self.switch_rule {
            if patience == 0 {
                return Err(Error::Config("plateau patience must be >= 1".into()));
            }
            if self.eval_interval == 0 {
                return Err(Error::Config(
                    "plateau switching needs a nonzero eval interval".into(),
                ));
            }
            if self.phases.len() < 2 {
                return Err(Error::Config("plateau switching needs at least two phases".into()));
            }
        }
        let has_cdsd = self.phases.iter().any(|p| matches!(p.loss, LossKind::Cdsd));
        if has_cdsd {
            // Resolve with a dummy set point just to validate gains/bounds.
            self.controller.resolve(F::zero()).validate()?;
        }
        if let SetPoint::Fixed { value } = self.controller.set_point {
            if !value.as_f64().is_finite() {
                return Err(Error::Config("fixed set point must be finite".into()));
            }
        }
        Ok(())
    }
}

/// One metrics line. Every field is always serialized (absent values as
/// null) so downstream schemas stay fixed across phases and controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub phase: usize,
    pub loss: f64,
    /// Plain (unsmoothed) cross entropy of the same batch.
    pub xent: f64,
    /// Observed divergence signal.
    pub u: Option<f64>,
    /// Controller output, present only in controlled phases.
    pub beta: Option<f64>,
    pub lr: f64,
    pub dev_loss: Option<f64>,
    pub dev_bleu: Option<f64>,
    pub wall_clock_ms: Option<f64>,
}

/// Filesystem sink for a run: `metrics.jsonl` plus checkpoints.
pub struct RunSink {
    dir: PathBuf,
    metrics: BufWriter<std::fs::File>,
}

impl RunSink {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let metrics = BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?);
        Ok(RunSink { dir: dir.to_path_buf(), metrics })
    }

    /// Reopen for a resumed run; metrics append.
    pub fn append(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("metrics.jsonl"))?;
        Ok(RunSink { dir: dir.to_path_buf(), metrics: BufWriter::new(file) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_record(&mut self, r: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Numeric(format!("metrics serialization failed: {}", e)))?;
        self.metrics.write_all(line.as_bytes())?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        Ok(())
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("ckpt-step{:06}.bin", step))
    }

    pub fn final_checkpoint_path(&self) -> PathBuf {
        self.dir.join("ckpt-final.bin")
    }

    pub fn abort_checkpoint_path(&self) -> PathBuf {
        self.dir.join("ckpt-abort.bin")
    }
}

/// Read back a metrics file written by [`RunSink`].
pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let rec: MetricsRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("bad metrics line: {}", e),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainOutput<F> {
    pub params: Seq2SeqParams<F>,
    pub metrics: Vec<MetricsRecord>,
    pub final_step: u64,
    pub resolved_starts: Vec<u64>,
    pub resolved_total: u64,
}

/// Deterministic per-epoch shuffle seed (splitmix-style mix of the run
/// seed and the epoch index).
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn validate_corpus<F: Real>(cfg: &TrainConfig<F>, corpus: &ParallelCorpus, what: &str) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Data(format!("{} corpus is empty", what)));
    }
    for (i, (src, tgt)) in corpus.pairs.iter().enumerate() {
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Data(format!("{} pair {} has an empty side", what, i)));
        }
        if src.len() > cfg.model.max_src_len || tgt.len() > cfg.model.max_tgt_len {
            return Err(Error::Data(format!(
                "{} pair {} exceeds model max lengths ({} src, {} tgt)",
                what, i, cfg.model.max_src_len, cfg.model.max_tgt_len
            )));
        }
        for &t in src {
            if t == PAD || t as usize >= cfg.model.src_vocab {
                return Err(Error::Data(format!("{} pair {} has bad source token {}", what, i, t)));
            }
        }
        for &t in tgt {
            if t == PAD || t as usize >= cfg.model.tgt_vocab {
                return Err(Error::Data(format!("{} pair {} has bad target token {}", what, i, t)));
            }
        }
    }
    Ok(())
}

struct LoopState<F: Real> {
    params: Seq2SeqParams<F>,
    opt: Optimizer<F>,
    controller: Option<Controller<F>>,
    phase: usize,
    starts: Vec<u64>,
    total: u64,
    ml: VecDeque<f64>,
    plateau_best: Option<f64>,
    plateau_since: usize,
    start_step: u64,
}

/// Fresh training run.
pub fn train<F: Real>(
    cfg: &TrainConfig<F>,
    corpus: &ParallelCorpus,
    dev: Option<&ParallelCorpus>,
    sink: Option<&mut RunSink>,
) -> Result<TrainOutput<F>> {
    cfg.validate()?;
    validate_corpus(cfg, corpus, "train")?;
    if let Some(d) = dev {
        validate_corpus(cfg, d, "dev")?;
    }
    if matches!(cfg.switch_rule, SwitchRule::Plateau { .. }) && dev.is_none() {
        return Err(Error::Config("plateau switching needs a dev corpus".into()));
    }
    let params = Seq2SeqParams::init(&cfg.model)?;
    let views: Vec<&Tensor<F>> = params.named_tensors().into_iter().map(|(_, t)| t).collect();
    let opt = Optimizer::new(cfg.phases[0].optimizer, &views);
    let state = LoopState {
        params,
        opt,
        controller: None,
        phase: 0,
        starts: cfg.phases.iter().map(|p| p.start_step).collect(),
        total: cfg.total_steps,
        ml: VecDeque::new(),
        plateau_best: None,
        plateau_since: 0,
        start_step: 0,
    };
    run_loop(cfg, corpus, dev, sink, state)
}

/// Resume from a checkpoint written by this trainer. The configuration
/// must match the one the checkpoint was produced with.
pub fn resume<F: Real>(
    cfg: &TrainConfig<F>,
    corpus: &ParallelCorpus,
    dev: Option<&ParallelCorpus>,
    sink: Option<&mut RunSink>,
    ckpt: &Path,
) -> Result<TrainOutput<F>> {
    cfg.validate()?;
    validate_corpus(cfg, corpus, "train")?;
    if let Some(d) = dev {
        validate_corpus(cfg, d, "dev")?;
    }
    let (meta, blocks) = load_checkpoint::<F>(ckpt)?;
    if meta.model != cfg.model {
        return Err(Error::Config(
            "checkpoint model configuration differs from the run configuration".into(),
        ));
    }
    if meta.rng.seed != cfg.seed {
        return Err(Error::Config("checkpoint data seed differs from the run seed".into()));
    }
    if meta.phase >= cfg.phases.len() || meta.resolved_starts.len() != cfg.phases.len() {
        return Err(Error::Data("checkpoint phase bookkeeping is inconsistent".into()));
    }
    let params = crate::seq2seq::checkpoint::params_from_blocks(&cfg.model, &blocks)?;
    let phase_cfg = &cfg.phases[meta.phase];
    let opt = match (meta.optimizer.as_deref(), phase_cfg.optimizer) {
        (Some("sgd"), OptimizerKind::Sgd) => Optimizer::Sgd,
        (Some("adam"), OptimizerKind::Adam) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (name, _) in params.named_tensors() {
                let fetch = |prefix: &str| -> Result<Tensor<F>> {
                    let full = format!("{}.{}", prefix, name);
                    blocks
                        .iter()
                        .find(|(n, _)| *n == full)
                        .map(|(_, t)| t.clone())
                        .ok_or_else(|| {
                            Error::Data(format!("checkpoint is missing block {:?}", full))
                        })
                };
                m.push(fetch("optim.m")?);
                v.push(fetch("optim.v")?);
            }
            Optimizer::Adam {
                hyper: AdamHyper::default(),
                state: AdamState { m, v, t: meta.optimizer_steps },
            }
        }
        (tag, want) => {
            return Err(Error::Config(format!(
                "checkpoint optimizer {:?} does not match configured {:?}",
                tag, want
            )))
        }
    };
    let controller = match &meta.controller {
        Some(snap) => Some(Controller::restore(snap)?),
        None => None,
    };
    let state = LoopState {
        params,
        opt,
        controller,
        phase: meta.phase,
        starts: meta.resolved_starts.clone(),
        total: if meta.resolved_total == 0 { cfg.total_steps } else { meta.resolved_total },
        ml: meta.ml_window.iter().copied().collect(),
        plateau_best: meta.plateau_best,
        plateau_since: meta.plateau_since,
        start_step: meta.step,
    };
    run_loop(cfg, corpus, dev, sink, state)
}

fn opt_tag(kind: OptimizerKind) -> &'static str {
    match kind {
        OptimizerKind::Adam => "adam",
        OptimizerKind::Sgd => "sgd",
    }
}

fn write_state_checkpoint<F: Real>(
    path: &Path,
    cfg: &TrainConfig<F>,
    st: &LoopState<F>,
    step: u64,
    steps_per_epoch: u64,
) -> Result<()> {
    let mut blocks: Vec<(String, &Tensor<F>)> = st.params.named_tensors();
    if let Optimizer::Adam { state, .. } = &st.opt {
        let names: Vec<String> = st.params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        for ((name, m), v) in names.iter().zip(&state.m).zip(&state.v) {
            blocks.push((format!("optim.m.{}", name), m));
            blocks.push((format!("optim.v.{}", name), v));
        }
    }
    let meta = CheckpointMeta {
        format: String::new(),
        step,
        phase: st.phase,
        model: cfg.model,
        controller: st.controller.as_ref().map(|c| c.snapshot()),
        optimizer: Some(opt_tag(st.opt.kind()).to_string()),
        optimizer_steps: st.opt.steps(),
        rng: RngCursor {
            seed: cfg.seed,
            epoch: step / steps_per_epoch,
            pos: step % steps_per_epoch,
        },
        resolved_starts: st.starts.clone(),
        resolved_total: st.total,
        ml_window: st.ml.iter().copied().collect(),
        plateau_best: st.plateau_best,
        plateau_since: st.plateau_since,
        blocks: Vec::<BlockInfo>::new(),
    };
    save_checkpoint_file(path, meta, &blocks)
}

struct StepStats {
    loss: f64,
    xent: f64,
    u: f64,
    beta: Option<f64>,
}

fn dev_metrics<F: Real>(
    cfg: &TrainConfig<F>,
    params: &Seq2SeqParams<F>,
    dev: &ParallelCorpus,
) -> Result<(f64, f64)> {
    let take = if cfg.eval_max_sentences == 0 {
        dev.len()
    } else {
        dev.len().min(cfg.eval_max_sentences)
    };
    let mut total = 0.0;
    for (src, tgt) in dev.pairs.iter().take(take) {
        let mut sup = tgt.clone();
        sup.push(EOS);
        let trace = forward_teacher_forced(params, src, &sup)?;
        let q_rows: Vec<Tensor<F>> = sup
            .iter()
            .map(|&t| one_hot(cfg.model.tgt_vocab, t as usize))
            .collect::<Result<_>>()?;
        total += cross_entropy_value(&q_rows, &trace.dists, cfg.skew.epsilon)?.as_f64();
    }
    let dev_loss = total / take as f64;
    let (_, bleu) = decode_corpus(params, dev, &cfg.decode, take)?;
    Ok((dev_loss, bleu.score))
}

fn run_loop<F: Real>(
    cfg: &TrainConfig<F>,
    corpus: &ParallelCorpus,
    dev: Option<&ParallelCorpus>,
    mut sink: Option<&mut RunSink>,
    mut st: LoopState<F>,
) -> Result<TrainOutput<F>> {
    let steps_per_epoch = (corpus.len() as u64).div_ceil(cfg.batch_size as u64);
    let mut cached_epoch = u64::MAX;
    let mut batches: Vec<Batch> = Vec::new();
    let mut metrics: Vec<MetricsRecord> = Vec::new();

    macro_rules! abort {
        ($step:expr, $msg:expr) => {{
            if let Some(s) = sink.as_deref_mut() {
                let _ = write_state_checkpoint(
                    &s.abort_checkpoint_path(),
                    cfg,
                    &st,
                    $step,
                    steps_per_epoch,
                );
                let _ = s.flush();
            }
            return Err(Error::Numeric(format!("aborted at step {}: {}", $step, $msg)));
        }};
    }

    let mut step = st.start_step;
    while step < st.total {
        // Phase hand-over happens before the step runs; parameters carry
        // over unchanged, optimizer state resets only if the kind changes.
        while st.phase + 1 < cfg.phases.len() && step == st.starts[st.phase + 1] {
            if let Some(s) = sink.as_deref_mut() {
                write_state_checkpoint(&s.checkpoint_path(step), cfg, &st, step, steps_per_epoch)?;
            }
            let old_kind = cfg.phases[st.phase].optimizer;
            st.phase += 1;
            let new = &cfg.phases[st.phase];
            if new.optimizer != old_kind {
                let views: Vec<&Tensor<F>> =
                    st.params.named_tensors().into_iter().map(|(_, t)| t).collect();
                st.opt = Optimizer::new(new.optimizer, &views);
            }
        }
        if matches!(cfg.phases[st.phase].loss, LossKind::Cdsd) && st.controller.is_none() {
            let sp = match cfg.controller.set_point {
                SetPoint::Fixed { value } => value,
                SetPoint::Auto => {
                    if st.ml.is_empty() {
                        return Err(Error::Config(
                            "auto set point needs likelihood steps before the controlled phase"
                                .into(),
                        ));
                    }
                    F::from_f64(st.ml.iter().sum::<f64>() / st.ml.len() as f64)
                }
            };
            st.controller = Some(Controller::new(cfg.controller.resolve(sp))?);
        }

        let epoch = step / steps_per_epoch;
        let pos = (step % steps_per_epoch) as usize;
        if epoch != cached_epoch {
            batches = batch_iter(corpus, cfg.batch_size, epoch_seed(cfg.seed, epoch))?;
            cached_epoch = epoch;
        }
        let batch = &batches[pos];
        let timer = cfg.log_timings.then(Instant::now);

        let pre_step = st.params.clone();
        let stats = match run_step(cfg, &mut st, batch) {
            Ok(stats) => stats,
            Err(Error::Numeric(msg)) => {
                st.params = pre_step;
                abort!(step, msg)
            }
            Err(e) => return Err(e),
        };
        if !st.params.all_finite() {
            st.params = pre_step;
            abort!(step, "parameters became non-finite".to_string())
        }

        let phase_cfg = &cfg.phases[st.phase];
        if matches!(phase_cfg.loss, LossKind::Xent { .. }) {
            if st.ml.len() == ML_WINDOW {
                st.ml.pop_front();
            }
            st.ml.push_back(stats.loss);
        }

        let eval_due = cfg.eval_interval > 0 && (step + 1).is_multiple_of(cfg.eval_interval);
        let mut dev_loss = None;
        let mut dev_bleu = None;
        if eval_due {
            if let Some(d) = dev {
                let (dl, db) = dev_metrics(cfg, &st.params, d)?;
                dev_loss = Some(dl);
                dev_bleu = Some(db);
                if st.phase == 0 {
                    if let SwitchRule::Plateau { patience } = cfg.switch_rule {
                        let improved = match st.plateau_best {
                            None => true,
                            Some(best) => dl < best - 1e-9,
                        };
                        if improved {
                            st.plateau_best = Some(dl);
                            st.plateau_since = 0;
                        } else {
                            st.plateau_since += 1;
                        }
                        if st.plateau_since >= patience
                            && cfg.phases.len() > 1
                            && st.starts[1] > step + 1
                        {
                            let delta = st.starts[1] - (step + 1);
                            for s in st.starts.iter_mut().skip(1) {
                                *s -= delta;
                            }
                            st.total -= delta;
                        }
                    }
                }
            }
        }

        let log_due = step.is_multiple_of(cfg.log_interval) || step + 1 == st.total || eval_due;
        if log_due {
            let record = MetricsRecord {
                step,
                phase: st.phase,
                loss: stats.loss,
                xent: stats.xent,
                u: Some(stats.u),
                beta: stats.beta,
                lr: phase_cfg.lr.as_f64(),
                dev_loss,
                dev_bleu,
                wall_clock_ms: timer.map(|t| t.elapsed().as_secs_f64() * 1e3),
            };
            if let Some(s) = sink.as_deref_mut() {
                s.write_record(&record)?;
            }
            metrics.push(record);
        }
        step += 1;
    }

    if let Some(s) = sink {
        write_state_checkpoint(&s.final_checkpoint_path(), cfg, &st, st.total, steps_per_epoch)?;
        s.flush()?;
    }
    Ok(TrainOutput {
        params: st.params,
        metrics,
        final_step: st.total,
        resolved_starts: st.starts.clone(),
        resolved_total: st.total,
    })
}

/// One optimization step over a batch. Numeric failures bubble up as
/// `Error::Numeric` and trigger the abort path (parameters untouched).
fn run_step<F: Real>(cfg: &TrainConfig<F>, st: &mut LoopState<F>, batch: &Batch) -> Result<StepStats> {
    let b = batch.len();
    let inv_b = F::one() / F::from_f64(b as f64);
    let phase_cfg = &cfg.phases[st.phase];

    let mut traces = Vec::with_capacity(b);
    let mut targets: Vec<Vec<usize>> = Vec::with_capacity(b);
    let mut u_sum = 0.0;
    let mut xent_sum = 0.0;
    for i in 0..b {
        let mut sup = batch.tgt_row(i).to_vec();
        sup.push(EOS);
        let trace = forward_teacher_forced(&st.params, batch.src_row(i), &sup)?;
        let q_rows: Vec<Tensor<F>> = sup
            .iter()
            .map(|&t| one_hot(cfg.model.tgt_vocab, t as usize))
            .collect::<Result<_>>()?;
        u_sum += sample_divergence(
            &q_rows,
            &trace.dists,
            cfg.skew.alpha,
            cfg.skew.epsilon,
            cfg.u_aggregation,
        )?
        .as_f64();
        xent_sum += cross_entropy_value(&q_rows, &trace.dists, cfg.skew.epsilon)?.as_f64();
        targets.push(sup.iter().map(|&t| t as usize).collect());
        traces.push(trace);
    }
    let u = u_sum / b as f64;
    let xent = xent_sum / b as f64;
    if !u.is_finite() || !xent.is_finite() {
        return Err(Error::Numeric("non-finite batch statistics".into()));
    }

    let beta = match phase_cfg.loss {
        LossKind::Cdsd => {
            let ctl = st
                .controller
                .as_mut()
                .expect("controlled phase has a controller");
            Some(ctl.step(F::from_f64(u))?.as_f64())
        }
        _ => None,
    };

    let mut loss_sum = F::zero();
    let mut grads: Vec<Tensor<F>> = st
        .params
        .named_tensors()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    for (trace, tg) in traces.iter().zip(&targets) {
        let logits: Vec<Tensor<F>> = trace
            .logit_ids
            .iter()
            .map(|&id| trace.tape.value(id).clone())
            .collect();
        let out: LossOutput<F> = match phase_cfg.loss {
            LossKind::Xent { smoothing } => cross_entropy(&logits, tg, smoothing, cfg.skew.epsilon)?,
            LossKind::Dsd { beta } => dsd_loss(&logits, tg, &cfg.skew, beta)?,
            LossKind::Cdsd => {
                let bt = F::from_f64(beta.expect("beta emitted for controlled loss"));
                cdsd_loss(&logits, tg, &cfg.skew, bt)?
            }
        };
        if !out.value.is_finite() {
            return Err(Error::Numeric("non-finite training loss".into()));
        }
        loss_sum += out.value;
        let seeds: Vec<(crate::numerics::NodeId, Tensor<F>)> = trace
            .logit_ids
            .iter()
            .copied()
            .zip(out.grad_logits.into_iter().map(|mut g| {
                g.scale(inv_b);
                g
            }))
            .collect();
        let mut tape_grads = trace.tape.backward_seeded(&seeds)?;
        for (slot, &pid) in grads.iter_mut().zip(&trace.param_ids) {
            if let Some(g) = tape_grads.take(pid) {
                slot.add_assign(&g);
            }
        }
    }
    let loss = (loss_sum * inv_b).as_f64();
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite training loss".into()));
    }

    if let Some(max) = cfg.clip_norm {
        clip_global_norm(&mut grads, max);
    }
    let mut views: Vec<&mut Tensor<F>> = st.params.tensors_mut();
    st.opt.step(&mut views, &grads, phase_cfg.lr)?;

    Ok(StepStats { loss, xent, u, beta })
}

/// Newest checkpoint in a run directory (by recorded step), if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(u64, PathBuf)> = None;
    if !dir.exists() {
        return Ok(None);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if !name.starts_with("ckpt-") || !name.ends_with(".bin") {
            continue;
        }
        let (meta, _) = match load_checkpoint::<f64>(&path) {
            Ok(x) => x,
            Err(_) => continue,
        };
        if best.as_ref().is_none_or(|(s, _)| meta.step > *s) {
            best = Some((meta.step, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}
