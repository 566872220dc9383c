//! Experiment configuration: the TOML schema, the built-in presets, and
//! the task-environment file format.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{RefineParams, TaskSpec};
use crate::error::{Error, Result};
use crate::optim::KlDirection;
use crate::pipeline::{Estimator, StageConfig, StageKind};
use crate::rewards::RewardKind;
use crate::TaskSpec64;

/// On-disk schema of a task environment. The same table is accepted
/// inline as the `[env]` section of an experiment config.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvFile {
    pub num_questions: usize,
    pub num_answers: usize,
    pub num_hints: usize,
    pub correct_answer: Vec<usize>,
    pub correct_hint: Vec<usize>,
    /// One row per question, one probability per answer.
    pub actor_original: Vec<Vec<f64>>,
    pub refine_params: RefineSection,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineSection {
    pub p_keep_ok: f64,
    pub p_break: f64,
    pub p_fix_good: f64,
    pub p_fix_bad: f64,
}

impl EnvFile {
    pub fn to_spec(&self) -> Result<TaskSpec64> {
        let mut flat = Vec::new();
        for row in &self.actor_original {
            if row.len() != self.num_answers {
                return Err(Error::input(format!(
                    "actor_original row has {} entries, expected {}",
                    row.len(),
                    self.num_answers
                )));
            }
            flat.extend_from_slice(row);
        }
        TaskSpec::new(
            self.num_questions,
            self.num_answers,
            self.num_hints,
            self.correct_answer.clone(),
            self.correct_hint.clone(),
            flat,
            RefineParams::new(
                self.refine_params.p_keep_ok,
                self.refine_params.p_break,
                self.refine_params.p_fix_good,
                self.refine_params.p_fix_bad,
            )?,
            self.seed,
        )
    }

    pub fn from_spec(spec: &TaskSpec64) -> Self {
        let rows = (0..spec.num_questions())
            .map(|q| spec.actor_row(q).to_vec())
            .collect();
        Self {
            num_questions: spec.num_questions(),
            num_answers: spec.num_answers(),
            num_hints: spec.num_hints(),
            correct_answer: (0..spec.num_questions())
                .map(|q| spec.correct_answer(q))
                .collect(),
            correct_hint: (0..spec.num_questions())
                .map(|q| spec.correct_hint(q))
                .collect(),
            actor_original: rows,
            refine_params: RefineSection {
                p_keep_ok: spec.refine_params().p_keep_ok,
                p_break: spec.refine_params().p_break,
                p_fix_good: spec.refine_params().p_fix_good,
                p_fix_bad: spec.refine_params().p_fix_bad,
            },
            seed: spec.seed(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("env file serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(&path)?;
        toml::from_str(&text).map_err(|e| Error::parse(format!("task file: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_toml())?;
        Ok(())
    }
}

/// Builds the environment the presets and `gen-env` defaults describe:
/// correct answers and hints cycle through the vocabularies, and each
/// question puts `correct_mass` on its correct answer with the remainder
/// spread evenly.
pub fn build_env(
    questions: usize,
    answers: usize,
    hints: usize,
    correct_mass: f64,
    refine: RefineSection,
    seed: u64,
) -> Result<TaskSpec64> {
    if answers < 2 {
        return Err(Error::input("answers must be at least 2"));
    }
    if !(0.0..=1.0).contains(&correct_mass) {
        return Err(Error::input("correct-mass must lie in [0, 1]"));
    }
    let correct_answer: Vec<usize> = (0..questions).map(|q| q % answers.max(1)).collect();
    let correct_hint: Vec<usize> = (0..questions).map(|q| q % hints.max(1)).collect();
    let rest = (1.0 - correct_mass) / (answers - 1) as f64;
    let mut actor = Vec::with_capacity(questions * answers);
    for q in 0..questions {
        for a in 0..answers {
            actor.push(if a == correct_answer[q] { correct_mass } else { rest });
        }
    }
    TaskSpec::new(
        questions,
        answers,
        hints,
        correct_answer,
        correct_hint,
        actor,
        RefineParams::new(
            refine.p_keep_ok,
            refine.p_break,
            refine.p_fix_good,
            refine.p_fix_bad,
        )?,
        seed,
    )
}

pub const REFERENCE_REFINE: RefineSection = RefineSection {
    p_keep_ok: 0.95,
    p_break: 0.5,
    p_fix_good: 0.9,
    p_fix_bad: 0.2,
};

/// The reference environment the presets train on.
pub fn reference_env(seed: u64) -> TaskSpec64 {
    build_env(4, 3, 3, 0.6, REFERENCE_REFINE, seed).expect("reference env is valid")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftSection {
    /// "uniform", "oracle" or "profile".
    #[serde(default = "default_teacher")]
    pub teacher: String,
    #[serde(default = "default_p_ok_correct")]
    pub teacher_p_ok_correct: f64,
    #[serde(default = "default_p_ok_incorrect")]
    pub teacher_p_ok_incorrect: f64,
    #[serde(default = "default_hint_acc")]
    pub teacher_hint_acc: f64,
    /// Loads the teacher from a checkpoint instead; overrides `teacher`.
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    #[serde(default = "default_sft_n")]
    pub n: usize,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
}

fn default_teacher() -> String {
    "profile".to_owned()
}
fn default_p_ok_correct() -> f64 {
    0.5
}
fn default_p_ok_incorrect() -> f64 {
    0.99
}
fn default_hint_acc() -> f64 {
    0.18
}
fn default_sft_n() -> usize {
    20_000
}
fn default_smoothing() -> f64 {
    1.0
}

impl Default for SftSection {
    fn default() -> Self {
        Self {
            teacher: default_teacher(),
            teacher_p_ok_correct: default_p_ok_correct(),
            teacher_p_ok_incorrect: default_p_ok_incorrect(),
            teacher_hint_acc: default_hint_acc(),
            teacher_checkpoint: None,
            n: default_sft_n(),
            smoothing: default_smoothing(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    /// "stage1", "stage2", "single-refine", "single-delta",
    /// "single-correction" or "star".
    pub kind: String,
    pub steps: Option<usize>,
    /// "exact", "rloo" or "reinforce".
    pub estimator: Option<String>,
    pub k: Option<usize>,
    pub batch: Option<usize>,
    pub learning_rate: Option<f64>,
    pub kl_coefficient: Option<f64>,
    pub beta1: Option<f64>,
    /// "reference-first" (as the staged objectives are written) or
    /// "policy-first".
    pub kl_direction: Option<String>,
    pub log_every: Option<usize>,
    /// Lets a helpfulness stage anchor to an on-disk discriminability
    /// snapshot instead of a preceding stage in this config.
    pub reference_checkpoint: Option<PathBuf>,
    /// Filter-and-refit rounds (star stages only; `steps` is ignored).
    pub rounds: Option<usize>,
    pub n_per_round: Option<usize>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_eval_episodes")]
    pub episodes: usize,
    #[serde(default = "default_true")]
    pub exact: bool,
}

fn default_eval_episodes() -> usize {
    500_000
}
fn default_true() -> bool {
    true
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: default_eval_episodes(),
            exact: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSection {
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

fn default_ks() -> Vec<usize> {
    vec![1, 2, 4]
}
fn default_trials() -> usize {
    10_000
}

impl Default for ScalingSection {
    fn default() -> Self {
        Self {
            ks: default_ks(),
            trials: default_trials(),
        }
    }
}

/// The on-disk experiment configuration. Unset fields fall back to the
/// selected preset; command-line flags override both.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub env: Option<EnvFile>,
    pub env_path: Option<PathBuf>,
    pub sft: Option<SftSection>,
    #[serde(default)]
    pub stage: Vec<StageSection>,
    pub eval: Option<EvalSection>,
    pub scaling: Option<ScalingSection>,
    pub iterations: Option<usize>,
}

impl ConfigFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(&path)?;
        toml::from_str(&text).map_err(|e| Error::config(format!("experiment config: {e}")))
    }
}

fn preset_stage(kind: &str, lr: f64, kl: f64, beta1: Option<f64>) -> StageSection {
    StageSection {
        kind: kind.to_owned(),
        steps: Some(500),
        estimator: Some("exact".to_owned()),
        k: None,
        batch: None,
        learning_rate: Some(lr),
        kl_coefficient: Some(kl),
        beta1,
        kl_direction: Some("reference-first".to_owned()),
        log_every: Some(25),
        reference_checkpoint: None,
        rounds: None,
        n_per_round: None,
    }
}

/// Built-in presets. `paper-main` uses the main-text coefficients
/// (KL 0.01, discrimination bonus 0.2); `paper-appendix` the
/// sensitivity-analysis choice (KL 0.01, bonus 0.9, stage-two KL 0.95).
pub fn preset(name: &str) -> Result<ConfigFile> {
    let (beta, beta1, beta2) = match name {
        "paper-main" => (0.01, 0.2, 0.01),
        "paper-appendix" => (0.01, 0.9, 0.95),
        other => {
            return Err(Error::config(format!(
                "unknown preset '{other}' (expected paper-main or paper-appendix)"
            )))
        }
    };
    Ok(ConfigFile {
        preset: Some(name.to_owned()),
        seed: Some(42),
        output_dir: Some(PathBuf::from(format!("runs/{name}"))),
        env: Some(EnvFile::from_spec(&reference_env(42))),
        env_path: None,
        sft: Some(SftSection::default()),
        stage: vec![
            preset_stage("stage1", 16.0, beta, None),
            preset_stage("stage2", 0.15, beta2, Some(beta1)),
        ],
        eval: Some(EvalSection::default()),
        scaling: Some(ScalingSection::default()),
        iterations: Some(2),
    })
}

pub const DEFAULT_PRESET: &str = "paper-main";

/// Preset <- file <- flags, later writers win field by field.
pub fn merge(base: ConfigFile, over: ConfigFile) -> ConfigFile {
    ConfigFile {
        preset: over.preset.or(base.preset),
        seed: over.seed.or(base.seed),
        output_dir: over.output_dir.or(base.output_dir),
        env: over.env.or(base.env),
        env_path: over.env_path.or(base.env_path),
        sft: over.sft.or(base.sft),
        stage: if over.stage.is_empty() {
            base.stage
        } else {
            over.stage
        },
        eval: over.eval.or(base.eval),
        scaling: over.scaling.or(base.scaling),
        iterations: over.iterations.or(base.iterations),
    }
}

/// A fully resolved experiment: validated, with concrete stage configs.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub spec: TaskSpec64,
    pub sft: SftSection,
    pub stages: Vec<ResolvedStage>,
    pub eval: EvalSection,
    pub scaling: ScalingSection,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct ResolvedStage {
    pub name: String,
    pub kind: StageKind,
    pub config: StageConfig<f64>,
    pub reference_checkpoint: Option<PathBuf>,
    /// Star-only knobs.
    pub rounds: usize,
    pub n_per_round: usize,
}

/// Forces every stage's estimator, used by the --exact/--sampled flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeOverride {
    None,
    Exact,
    Sampled,
}

pub fn resolve(file: ConfigFile, mode: ModeOverride) -> Result<Experiment> {
    let seed = file.seed.unwrap_or(42);
    let output_dir = file
        .output_dir
        .clone()
        .ok_or_else(|| Error::config("output_dir is not set"))?;
    let env_file = match (&file.env, &file.env_path) {
        (Some(env), None) => env.clone(),
        (None, Some(path)) => EnvFile::load(path)?,
        (Some(_), Some(_)) => {
            return Err(Error::config("set either env or env_path, not both"))
        }
        (None, None) => return Err(Error::config("no environment: set env or env_path")),
    };
    let spec = env_file.to_spec()?;
    let sft = file.sft.clone().unwrap_or_default();
    if let Some(path) = &sft.teacher_checkpoint {
        if !path.exists() {
            return Err(Error::config(format!(
                "teacher checkpoint {} does not exist",
                path.display()
            )));
        }
    }
    let mut stages = Vec::new();
    let mut seen_stage1 = false;
    for (index, section) in file.stage.iter().enumerate() {
        let kind = match section.kind.as_str() {
            "stage1" => StageKind::StageOne,
            "stage2" => StageKind::StageTwo,
            "single-refine" => StageKind::SingleStage(RewardKind::Refine),
            "single-delta" => StageKind::SingleStage(RewardKind::Delta),
            "single-correction" => StageKind::SingleStage(RewardKind::Correction),
            "star" => StageKind::Star,
            other => {
                return Err(Error::config(format!("unknown stage kind '{other}'")))
            }
        };
        if kind == StageKind::StageTwo {
            if let Some(path) = &section.reference_checkpoint {
                if !path.exists() {
                    return Err(Error::config(format!(
                        "reference checkpoint {} does not exist",
                        path.display()
                    )));
                }
            } else if !seen_stage1 {
                return Err(Error::config(
                    "a stage2 entry needs a preceding stage1 or a reference_checkpoint",
                ));
            }
        }
        if kind == StageKind::StageOne {
            seen_stage1 = true;
        }
        let estimator_name = match mode {
            ModeOverride::Exact => "exact".to_owned(),
            ModeOverride::Sampled => section
                .estimator
                .clone()
                .filter(|e| e != "exact")
                .unwrap_or_else(|| "rloo".to_owned()),
            ModeOverride::None => section
                .estimator
                .clone()
                .unwrap_or_else(|| "exact".to_owned()),
        };
        let k = section.k.unwrap_or(4);
        let batch = section.batch.unwrap_or(64);
        let estimator = match estimator_name.as_str() {
            "exact" => Estimator::Exact,
            "rloo" => Estimator::Rloo { k, batch },
            "reinforce" => Estimator::Reinforce { k, batch },
            other => {
                return Err(Error::config(format!("unknown estimator '{other}'")))
            }
        };
        let learning_rate = section.learning_rate.unwrap_or(match estimator {
            Estimator::Exact => 0.05,
            _ => 0.01,
        });
        let steps = section.steps.unwrap_or(500);
        let config = StageConfig {
            stage: kind,
            steps,
            estimator,
            learning_rate,
            kl_coefficient: section.kl_coefficient.unwrap_or(0.01),
            beta1: section.beta1.unwrap_or(0.2),
            kl_direction: match section
                .kl_direction
                .as_deref()
                .unwrap_or("reference-first")
            {
                "reference-first" => KlDirection::ReferenceFirst,
                "policy-first" => KlDirection::PolicyFirst,
                other => {
                    return Err(Error::config(format!("unknown kl_direction '{other}'")))
                }
            },
            log_every: section.log_every.unwrap_or(25).min(steps),
            seed: crate::pipeline::stage_seed(seed, index as u64),
        };
        config.validate()?;
        stages.push(ResolvedStage {
            name: format!("{index:02}_{}", section.kind),
            kind,
            config,
            reference_checkpoint: section.reference_checkpoint.clone(),
            rounds: section.rounds.unwrap_or(3),
            n_per_round: section.n_per_round.unwrap_or(sft.n),
        });
    }
    Ok(Experiment {
        seed,
        output_dir,
        spec,
        sft,
        stages,
        eval: file.eval.unwrap_or_default(),
        scaling: file.scaling.unwrap_or_default(),
        iterations: file.iterations.unwrap_or(2),
    })
}
