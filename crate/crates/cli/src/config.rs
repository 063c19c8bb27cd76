//! The single JSON run configuration shared by every subcommand. Only the
//! seed is mandatory; each command checks for the sections it needs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dsd_core::corpus::TaskSpec;
use dsd_core::divergences::{SkewConfig, UAggregation};
use dsd_core::eval::DecodeConfig;
use dsd_core::seq2seq::Seq2SeqConfig;
use dsd_core::trainer::{ControllerSettings, Phase, SwitchRule, TrainConfig};
use dsd_core::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Default run directory; `--out` overrides it.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Where corpus TSVs live (written by `generate`, read by `train`/`eval`).
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub schedule: Option<ScheduleSection>,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub controller: ControllerSettings<f64>,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub decode: DecodeSection,
}

fn d_embed() -> usize {
    32
}
fn d_hidden() -> usize {
    64
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    #[serde(default = "d_embed")]
    pub embed_dim: usize,
    #[serde(default = "d_hidden")]
    pub hidden_dim: usize,
    /// Defaults to the hidden size.
    #[serde(default)]
    pub attn_dim: Option<usize>,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    /// Defaults to the run seed, so `--seed` varies the initialization too.
    #[serde(default)]
    pub init_seed: Option<u64>,
}

impl ModelSection {
    pub fn resolve(&self, run_seed: u64) -> Seq2SeqConfig {
        Seq2SeqConfig {
            src_vocab: self.src_vocab,
            tgt_vocab: self.tgt_vocab,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            attn_dim: self.attn_dim.unwrap_or(self.hidden_dim),
            max_src_len: self.max_src_len,
            max_tgt_len: self.max_tgt_len,
            init_seed: self.init_seed.unwrap_or(run_seed),
        }
    }
}

fn d_switch() -> SwitchRule {
    SwitchRule::Fixed
}
fn d_batch() -> usize {
    8
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub phases: Vec<Phase<f64>>,
    #[serde(default = "d_switch")]
    pub switch_rule: SwitchRule,
    pub total_steps: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
}

fn d_alpha() -> f64 {
    0.01
}
fn d_epsilon() -> f64 {
    1e-12
}
fn d_uagg() -> UAggregation {
    UAggregation::MeanPerToken
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default = "d_uagg")]
    pub u_aggregation: UAggregation,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection { alpha: d_alpha(), epsilon: d_epsilon(), u_aggregation: d_uagg() }
    }
}

fn d_clip() -> Option<f64> {
    Some(5.0)
}
fn d_log_interval() -> u64 {
    10
}
fn d_eval_interval() -> u64 {
    200
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    /// Global gradient-norm ceiling; JSON null disables clipping.
    #[serde(default = "d_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default = "d_log_interval")]
    pub log_interval: u64,
    /// Dev loss/BLEU cadence in steps; 0 disables evaluation.
    #[serde(default = "d_eval_interval")]
    pub eval_interval: u64,
    /// Dev sentences per evaluation; 0 means all.
    #[serde(default)]
    pub eval_max_sentences: usize,
    #[serde(default)]
    pub log_timings: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            clip_norm: d_clip(),
            log_interval: d_log_interval(),
            eval_interval: d_eval_interval(),
            eval_max_sentences: 0,
            log_timings: false,
        }
    }
}

fn d_beam() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    #[serde(default = "d_beam")]
    pub beam: usize,
    /// Defaults to the model's max target length.
    #[serde(default)]
    pub max_len: Option<usize>,
    #[serde(default)]
    pub length_norm: f64,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection { beam: d_beam(), max_len: None, length_norm: 0.0 }
    }
}

impl DecodeSection {
    pub fn resolve(&self, max_tgt_len: usize) -> DecodeConfig {
        DecodeConfig {
            beam: self.beam,
            max_len: self.max_len.unwrap_or(max_tgt_len),
            length_norm: self.length_norm,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {}", path.display(), e))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse { line: e.line(), msg: format!("bad config: {}", e) })
    }

    pub fn task(&self) -> Result<&TaskSpec> {
        self.task.as_ref().ok_or_else(|| Error::Config("config has no task section".into()))
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data_dir
            .as_deref()
            .ok_or_else(|| Error::Config("config has no data_dir".into()))
    }

    pub fn run_dir(&self, out_flag: Option<&Path>) -> Result<PathBuf> {
        out_flag
            .map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .ok_or_else(|| Error::Config("no output directory (set out_dir or pass --out)".into()))
    }

    /// Assemble the trainer configuration from the model/schedule/loss/
    /// controller/training/decode sections.
    pub fn train_config(&self) -> Result<TrainConfig<f64>> {
        let model_sec = self
            .model
            .as_ref()
            .ok_or_else(|| Error::Config("config has no model section".into()))?;
        let sched = self
            .schedule
            .as_ref()
            .ok_or_else(|| Error::Config("config has no schedule section".into()))?;
        let model = model_sec.resolve(self.seed);
        let decode = self.decode.resolve(model.max_tgt_len);
        Ok(TrainConfig {
            model,
            phases: sched.phases.clone(),
            switch_rule: sched.switch_rule,
            total_steps: sched.total_steps,
            batch_size: sched.batch_size,
            seed: self.seed,
            skew: SkewConfig { alpha: self.loss.alpha, epsilon: self.loss.epsilon },
            u_aggregation: self.loss.u_aggregation,
            controller: self.controller,
            clip_norm: self.training.clip_norm,
            log_interval: self.training.log_interval,
            eval_interval: self.training.eval_interval,
            eval_max_sentences: self.training.eval_max_sentences,
            decode,
            log_timings: self.training.log_timings,
        })
    }
}
