//! Experiment recipes: base fine-tune, adapter training, bucketed evaluation
//! and rank analysis, with per-seed artifacts and a median summary.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSpec, AdapterWeights};
use crate::checkpoint;
use crate::datasets::{emit_jsonl, mix_seed, GenConfig, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate_accuracy, AccuracyTable, Bucket};
use crate::model::{ModelConfig, TransformerWeights};
use crate::plot::{bar_chart, line_chart, Series};
use crate::rank::{analyze_adapter, DEFAULT_TAU};
use crate::tokenizer::Vocab;
use crate::trainer::{
    eval_loss, train_adapter, train_base, DataStream, RunLog, StopReason, TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    Planning,
    Reasoning,
    EloraCompare,
}

impl Recipe {
    pub const ALL: [Recipe; 3] = [Recipe::Planning, Recipe::Reasoning, Recipe::EloraCompare];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Planning => "planning",
            Recipe::Reasoning => "reasoning",
            Recipe::EloraCompare => "elora-compare",
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown recipe {s:?} (expected planning, reasoning or elora-compare)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub gen: GenConfig,
    /// Task mix for base fine-tuning.
    pub base_tasks: Vec<TaskSpec>,
    /// Task mix for adapter training.
    pub adapter_tasks: Vec<TaskSpec>,
    /// Evaluation grids; each contributes `eval_samples` samples.
    pub eval_tasks: Vec<TaskSpec>,
    pub eval_samples: usize,
    /// Held-out task whose loss, checked every `adapter_train.eval_every`
    /// steps, defines steps-to-threshold. Without it the smoothed training
    /// loss is used.
    #[serde(default)]
    pub convergence_task: Option<TaskSpec>,
    #[serde(default = "default_probe_samples")]
    pub convergence_samples: usize,
}

fn default_probe_samples() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedAdapter {
    pub name: String,
    pub spec: AdapterSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub recipe: Recipe,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub base_train: TrainConfig,
    pub adapter_train: TrainConfig,
    pub adapters: Vec<NamedAdapter>,
    /// Fixed loss threshold for steps-to-threshold; when absent it is
    /// `threshold_fraction` × the base model's loss on the adapter task.
    pub loss_threshold: Option<f64>,
    pub threshold_fraction: f64,
    pub tau: f64,
}

fn toy_model(max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 256,
        max_seq_len,
        ..Default::default()
    }
}

impl ExperimentConfig {
    /// Built-in toy-scale settings for each recipe.
    pub fn preset(recipe: Recipe) -> Self {
        let gen = GenConfig {
            hash_len: 1,
            max_chain_length: 20,
        };
        let base_train = TrainConfig {
            max_steps: 4000,
            lr_base: 1e-3,
            plateau_window: 500,
            ..Default::default()
        };
        let adapter_train = TrainConfig {
            max_steps: 1500,
            lr_lora: 1e-3,
            lr_entropy: 1e-2,
            plateau_window: 100_000,
            eval_every: 25,
            ..Default::default()
        };
        let lora = NamedAdapter {
            name: "lora".into(),
            spec: AdapterSpec::lora(8),
        };
        let elora = NamedAdapter {
            name: "elora".into(),
            spec: AdapterSpec::elora(8),
        };
        let chain3 = TaskSpec::HashChain {
            chains: vec![3],
            lengths: (1, 2),
        };
        let chain4 = TaskSpec::HashChain {
            chains: vec![4],
            lengths: (1, 2),
        };
        // Short lookups in the reasoning base mix give the model a one-hop skill to
        // build on; on multi-chain prompts alone it stays at the guess-a-hash rate.
        let warmup = TaskSpec::HashHop {
            hops: (1, 2),
            chain_length: 4,
        };
        let (data, adapters) = match recipe {
            Recipe::Planning => {
                let hop = TaskSpec::HashHop {
                    hops: (1, 10),
                    chain_length: 10,
                };
                let data = DataConfig {
                    gen,
                    base_tasks: vec![hop.clone()],
                    adapter_tasks: vec![hop.clone()],
                    eval_tasks: vec![hop],
                    eval_samples: 3000,
                    convergence_task: None,
                    convergence_samples: default_probe_samples(),
                };
                (data, vec![lora])
            }
            Recipe::Reasoning => {
                let data = DataConfig {
                    gen,
                    base_tasks: vec![warmup.clone(), chain3.clone()],
                    adapter_tasks: vec![chain3.clone(), chain4.clone()],
                    eval_tasks: vec![chain3, chain4.clone()],
                    eval_samples: 500,
                    convergence_task: Some(chain4),
                    convergence_samples: default_probe_samples(),
                };
                (data, vec![lora, elora])
            }
            Recipe::EloraCompare => {
                let data = DataConfig {
                    gen,
                    base_tasks: vec![warmup.clone(), chain3.clone()],
                    adapter_tasks: vec![chain4.clone()],
                    eval_tasks: vec![chain3, chain4.clone()],
                    eval_samples: 500,
                    convergence_task: Some(chain4),
                    convergence_samples: default_probe_samples(),
                };
                let mut adapters = vec![lora];
                for lambda in [0.01, 0.1, 1.0] {
                    adapters.push(NamedAdapter {
                        name: format!("elora-l{lambda}"),
                        spec: AdapterSpec {
                            entropy_weight: lambda,
                            ..AdapterSpec::elora(8)
                        },
                    });
                }
                (data, adapters)
            }
        };
        let max_len = data
            .base_tasks
            .iter()
            .chain(&data.adapter_tasks)
            .chain(&data.eval_tasks)
            .chain(&data.convergence_task)
            .map(|t| t.max_prompt_len(&data.gen) + data.gen.hash_len + 1)
            .max()
            .unwrap_or(64);
        ExperimentConfig {
            recipe,
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from(format!("runs/{recipe}")),
            data,
            model: toy_model(max_len.next_multiple_of(16)),
            base_train,
            adapter_train,
            adapters,
            loss_threshold: None,
            threshold_fraction: 0.73,
            tau: DEFAULT_TAU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.base_train.validate()?;
        self.adapter_train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut names: Vec<&str> = self.adapters.iter().map(|a| a.name.as_str()).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) || names.contains(&"base") {
            return Err(Error::Config(
                "adapter names must be unique and not \"base\"".into(),
            ));
        }
        for a in &self.adapters {
            a.spec.validate(&self.model)?;
        }
        if self.data.base_tasks.is_empty()
            || self.data.adapter_tasks.is_empty()
            || self.data.eval_tasks.is_empty()
        {
            return Err(Error::Config(
                "base, adapter and eval task lists must be non-empty".into(),
            ));
        }
        let need = self
            .data
            .base_tasks
            .iter()
            .chain(&self.data.adapter_tasks)
            .chain(&self.data.eval_tasks)
            .chain(&self.data.convergence_task)
            .map(|t| t.max_prompt_len(&self.data.gen) + self.data.gen.hash_len + 1)
            .max()
            .unwrap_or(0);
        if need > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "max_seq_len {} is shorter than the longest sample ({need} tokens)",
                self.model.max_seq_len
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!(
                "tau must be in (0,1), got {}",
                self.tau
            )));
        }
        if !(self.threshold_fraction > 0.0) {
            return Err(Error::Config("threshold_fraction must be positive".into()));
        }
        Ok(())
    }

    /// Reads a TOML (or `.json`) file and overlays it on the preset named by
    /// its `recipe` key, or by `recipe` when the file has none.
    pub fn load(path: &Path, recipe: Option<Recipe>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let overlay: serde_json::Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        let named = match overlay.get("recipe") {
            Some(v) => Some(
                v.as_str()
                    .ok_or_else(|| Error::Config("recipe must be a string".into()))?
                    .parse::<Recipe>()?,
            ),
            None => None,
        };
        let recipe = match (named, recipe) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!(
                    "config is for recipe {a}, but {b} was requested"
                )))
            }
            (Some(r), _) | (None, Some(r)) => r,
            (None, None) => return Err(Error::Config("config does not name a recipe".into())),
        };
        Self::overlay(recipe, overlay)
    }

    pub fn overlay(recipe: Recipe, overlay: serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::preset(recipe)).expect("config serializes");
        merge_json(&mut base, overlay);
        let cfg: ExperimentConfig =
            serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
fn merge_json(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Coarse grouping used for summary tables: hop count, or chain count.
pub fn group_of(b: &Bucket) -> String {
    match b {
        Bucket::Hops(h) => format!("hops={h}"),
        Bucket::Chains { num, .. } => format!("chains={num}"),
    }
}

fn grouped(table: &AccuracyTable) -> BTreeMap<String, f64> {
    let mut keys: Vec<String> = table.buckets.keys().map(group_of).collect();
    keys.dedup();
    keys.into_iter()
        .map(|k| {
            let acc = table.pooled(|b| group_of(b) == k).unwrap_or(0.0);
            (k, acc)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub name: String,
    /// Accuracy per group (`hops=h` or `chains=n`).
    pub accuracy: BTreeMap<String, f64>,
    /// Accuracy per full bucket.
    pub buckets: BTreeMap<String, f64>,
    pub chance: f64,
    pub steps_to_threshold: Option<usize>,
    pub mean_erank: Option<f64>,
    pub mean_cutoff: Option<f64>,
    /// Mean task loss over the last 50 training steps.
    pub final_loss: Option<f64>,
    pub stop: Option<StopReason>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub loss_threshold: f64,
    pub models: Vec<ModelResult>,
}

impl SeedSummary {
    pub fn model(&self, name: &str) -> Option<&ModelResult> {
        self.models.iter().find(|m| m.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub model: String,
    pub accuracy: BTreeMap<String, f64>,
    pub mean_erank: Option<f64>,
    pub mean_cutoff: Option<f64>,
    /// Median steps to threshold; runs that never reach it count as infinitely slow.
    pub steps_to_threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeSummary {
    pub recipe: Recipe,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedSummary>,
    pub median: Vec<MedianRow>,
}

impl RecipeSummary {
    pub fn median_row(&self, model: &str) -> Option<&MedianRow> {
        self.median.iter().find(|r| r.model == model)
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

fn medians(seeds: &[SeedSummary]) -> Vec<MedianRow> {
    let Some(first) = seeds.first() else {
        return Vec::new();
    };
    first
        .models
        .iter()
        .map(|m| {
            let runs: Vec<&ModelResult> = seeds.iter().filter_map(|s| s.model(&m.name)).collect();
            let accuracy = m
                .accuracy
                .keys()
                .filter_map(|k| {
                    let mut v: Vec<f64> = runs
                        .iter()
                        .filter_map(|r| r.accuracy.get(k).copied())
                        .collect();
                    median(&mut v).map(|x| (k.clone(), x))
                })
                .collect();
            let opt_median = |f: &dyn Fn(&ModelResult) -> Option<f64>| {
                let mut v: Vec<f64> = runs.iter().filter_map(|r| f(r)).collect();
                median(&mut v)
            };
            let mut steps: Vec<f64> = runs
                .iter()
                .map(|r| r.steps_to_threshold.map_or(f64::INFINITY, |s| s as f64))
                .collect();
            let steps_to_threshold = median(&mut steps).filter(|s| s.is_finite());
            MedianRow {
                model: m.name.clone(),
                accuracy,
                mean_erank: opt_median(&|r| r.mean_erank),
                mean_cutoff: opt_median(&|r| r.mean_cutoff),
                steps_to_threshold: if m.name == "base" {
                    None
                } else {
                    steps_to_threshold
                },
            }
        })
        .collect()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(
        path,
        serde_json::to_string_pretty(value).expect("serializable") + "\n",
    )
}

fn tail_mean(log: &RunLog, n: usize) -> Option<f64> {
    let l = log.losses();
    let tail = &l[l.len().saturating_sub(n)..];
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

fn check_stop(log: &RunLog, what: &str) -> Result<()> {
    match log.stop {
        StopReason::NonFinite { step } => Err(Error::NonFinite(format!(
            "{what} training diverged at step {step}; last finite weights saved"
        ))),
        _ => Ok(()),
    }
}

fn eval_set(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Sample>> {
    let eval_seed = mix_seed(seed, 0xE7A1);
    let mut out = Vec::new();
    for (t, task) in cfg.data.eval_tasks.iter().enumerate() {
        for i in 0..cfg.data.eval_samples {
            out.push(task.nth(mix_seed(eval_seed, t as u64), i as u64, &cfg.data.gen)?);
        }
    }
    Ok(out)
}

/// Eval-record key holding the held-out convergence loss.
pub const PROBE_KEY: &str = "probe_loss";

/// First evaluation step at which the held-out loss is at or below `threshold`.
pub fn steps_to_probe_loss(log: &RunLog, threshold: f64) -> Option<usize> {
    log.evals
        .iter()
        .find(|e| e.accuracies.get(PROBE_KEY).is_some_and(|&l| l <= threshold))
        .map(|e| e.step)
}

fn probe_series(label: &str, log: &RunLog) -> Series {
    let points = log
        .evals
        .iter()
        .filter_map(|e| e.accuracies.get(PROBE_KEY).map(|&l| (e.step as f64, l)))
        .collect();
    Series {
        label: label.to_owned(),
        points,
    }
}

fn loss_series(label: &str, log: &RunLog) -> Series {
    // 50-step trailing mean keeps the curve readable.
    let l = log.losses();
    let points = (0..l.len())
        .step_by(10)
        .map(|i| {
            let lo = i.saturating_sub(49);
            (
                i as f64,
                l[lo..=i].iter().sum::<f64>() / (i - lo + 1) as f64,
            )
        })
        .collect();
    Series {
        label: label.to_owned(),
        points,
    }
}

fn accuracy_series(label: &str, table: &AccuracyTable) -> Series {
    let points = table
        .buckets
        .iter()
        .map(|(b, s)| {
            let x = match b {
                Bucket::Hops(h) => *h as f64,
                Bucket::Chains { num, shortest } => (*num * 100 + *shortest) as f64,
            };
            (x, s.accuracy())
        })
        .collect();
    Series {
        label: label.to_owned(),
        points,
    }
}

/// Per-chain-count curves over the shortest chain length, or one curve over hops.
fn accuracy_plot(title: &str, tables: &[(String, &AccuracyTable)]) -> String {
    let chains = tables
        .iter()
        .any(|(_, t)| t.buckets.keys().any(|b| matches!(b, Bucket::Chains { .. })));
    if !chains {
        let series: Vec<Series> = tables.iter().map(|(n, t)| accuracy_series(n, t)).collect();
        return line_chart(title, "hops", "accuracy", &series);
    }
    let mut series = Vec::new();
    for (name, t) in tables {
        let mut by_num: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
        for (b, s) in &t.buckets {
            if let Bucket::Chains { num, shortest } = b {
                by_num
                    .entry(*num)
                    .or_default()
                    .push((*shortest as f64, s.accuracy()));
            }
        }
        for (num, points) in by_num {
            series.push(Series {
                label: format!("{name} {num}-chain"),
                points,
            });
        }
    }
    line_chart(title, "shortest chain length", "accuracy", &series)
}

/// Runs one seed end to end, writing artifacts into `dir`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let evals = eval_set(cfg, seed)?;
    emit_jsonl(&evals, &dir.join("eval.jsonl"))?;

    let base_stream = DataStream::Generated {
        tasks: cfg.data.base_tasks.clone(),
        gen: cfg.data.gen.clone(),
        seed: mix_seed(seed, 1),
    };
    let base_cfg = TrainConfig {
        seed,
        ..cfg.base_train.clone()
    };
    eprintln!(
        "[seed {seed}] base training, up to {} steps",
        base_cfg.max_steps
    );
    let out = train_base(&cfg.model, &base_stream, &base_cfg, None)?;
    let mut base = out.weights;
    let mut base_log = out.log;
    base_log.checkpoint = Some(dir.join("base.ckpt"));
    checkpoint::save_model(&dir.join("base.ckpt"), &base)?;
    write(&dir.join("base_log.csv"), base_log.to_csv())?;
    check_stop(&base_log, "base")?;
    base.set_trainable(false);

    let base_table = evaluate_accuracy(&base, &evals, None)?;
    let chance = base_table.total().chance;
    let adapter_stream = DataStream::Generated {
        tasks: cfg.data.adapter_tasks.clone(),
        gen: cfg.data.gen.clone(),
        seed: mix_seed(seed, 3),
    };
    let vocab = Vocab::new();
    let probe = match &cfg.data.convergence_task {
        Some(task) => {
            let stream = DataStream::Generated {
                tasks: vec![task.clone()],
                gen: cfg.data.gen.clone(),
                seed: mix_seed(seed, 4),
            };
            Some(stream.batch(&vocab, 0, cfg.data.convergence_samples)?)
        }
        None => None,
    };
    let threshold = match (cfg.loss_threshold, &probe) {
        (Some(t), _) => t,
        (None, Some(batch)) => cfg.threshold_fraction * eval_loss(&base, None, batch)?,
        (None, None) => {
            let mut total = 0.0;
            for step in 0..4 {
                total += eval_loss(
                    &base,
                    None,
                    &adapter_stream.batch(&vocab, step, cfg.adapter_train.batch_size)?,
                )?;
            }
            cfg.threshold_fraction * total / 4.0
        }
    };
    eprintln!(
        "[seed {seed}] base accuracy {:.3}, loss threshold {threshold:.4}",
        base_table.total().accuracy()
    );
    let mut models = vec![ModelResult {
        name: "base".into(),
        accuracy: grouped(&base_table),
        buckets: base_table.flat(),
        chance,
        steps_to_threshold: None,
        mean_erank: None,
        mean_cutoff: None,
        final_loss: tail_mean(&base_log, 50),
        stop: Some(base_log.stop.clone()),
    }];
    let mut tables = vec![("base".to_owned(), base_table)];
    let mut logs = Vec::new();
    let adapter_cfg = TrainConfig {
        seed,
        ..cfg.adapter_train.clone()
    };
    for named in &cfg.adapters {
        eprintln!(
            "[seed {seed}] training adapter {}, up to {} steps",
            named.name, adapter_cfg.max_steps
        );
        let init = AdapterWeights::init(&named.spec, &cfg.model, mix_seed(seed, 2))?;
        let out = match &probe {
            Some(batch) => {
                let mut hook =
                    |_: usize, w: &TransformerWeights<f32>, a: Option<&AdapterWeights<f32>>| {
                        Ok(BTreeMap::from([(
                            PROBE_KEY.to_owned(),
                            eval_loss(w, a, batch)?,
                        )]))
                    };
                train_adapter(&base, init, &adapter_stream, &adapter_cfg, Some(&mut hook))?
            }
            None => train_adapter(&base, init, &adapter_stream, &adapter_cfg, None)?,
        };
        let mut log = out.log;
        let ckpt = dir.join(format!("{}.ckpt", named.name));
        checkpoint::save_adapter(&ckpt, &out.weights)?;
        log.checkpoint = Some(ckpt);
        let steps = match &probe {
            Some(_) => {
                let s = steps_to_probe_loss(&log, threshold);
                log.steps_to_threshold
                    .insert(format!("{PROBE_KEY}<={threshold}"), s);
                s
            }
            None => log.record_threshold(threshold),
        };
        write(&dir.join(format!("{}_log.csv", named.name)), log.to_csv())?;
        check_stop(&log, &named.name)?;
        let rank = analyze_adapter(&out.weights, cfg.tau)?;
        write(&dir.join(format!("{}_rank.csv", named.name)), rank.to_csv())?;
        let bars: Vec<(String, f64)> = rank
            .layers
            .iter()
            .map(|l| {
                (
                    l.layer.clone(),
                    l.report.as_ref().map_or(f64::NAN, |r| r.erank_shannon),
                )
            })
            .collect();
        write(
            &dir.join(format!("{}_erank.svg", named.name)),
            bar_chart(
                &format!("{} effective rank per layer", named.name),
                "erank (Shannon)",
                &bars,
            ),
        )?;
        let table = evaluate_accuracy(&base, &evals, Some(&out.weights))?;
        eprintln!(
            "[seed {seed}] {}: accuracy {:.3}, steps to threshold {steps:?}, mean erank {:?}",
            named.name,
            table.total().accuracy(),
            rank.mean_erank
        );
        models.push(ModelResult {
            name: named.name.clone(),
            accuracy: grouped(&table),
            buckets: table.flat(),
            chance,
            steps_to_threshold: steps,
            mean_erank: rank.mean_erank,
            mean_cutoff: rank.mean_cutoff,
            final_loss: tail_mean(&log, 50),
            stop: Some(log.stop.clone()),
        });
        write_json(
            &dir.join(format!("{}_log.json", named.name)),
            &serde_json::json!({
                "config": { "adapter": named, "train": adapter_cfg },
                "steps_to_threshold": log.steps_to_threshold,
                "final_accuracies": table.flat(),
                "evals": log.evals,
            }),
        )?;
        tables.push((named.name.clone(), table));
        logs.push((named.name.clone(), log));
    }
    let loss_plot: Vec<Series> = logs.iter().map(|(n, l)| loss_series(n, l)).collect();
    write(
        &dir.join("loss.svg"),
        line_chart(
            "adapter training loss",
            "step",
            "task loss (50-step mean)",
            &loss_plot,
        ),
    )?;
    if probe.is_some() {
        let curves: Vec<Series> = logs.iter().map(|(n, l)| probe_series(n, l)).collect();
        write(
            &dir.join("convergence.svg"),
            line_chart(
                "held-out loss during adapter training",
                "step",
                PROBE_KEY,
                &curves,
            ),
        )?;
    }
    write(
        &dir.join("base_loss.svg"),
        line_chart(
            "base fine-tuning loss",
            "step",
            "task loss (50-step mean)",
            &[loss_series("base", &base_log)],
        ),
    )?;
    let refs: Vec<(String, &AccuracyTable)> = tables.iter().map(|(n, t)| (n.clone(), t)).collect();
    write(
        &dir.join("accuracy.svg"),
        accuracy_plot("accuracy by bucket", &refs),
    )?;
    let summary = SeedSummary {
        seed,
        loss_threshold: threshold,
        models,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Worker count: `LRLB_THREADS` if set, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("LRLB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every seed (in parallel up to [`worker_count`]) and writes the merged summary.
pub fn run_recipe(cfg: &ExperimentConfig) -> Result<RecipeSummary> {
    cfg.validate()?;
    let root = &cfg.output_dir;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write(&root.join("config.toml"), cfg.to_toml())?;
    let workers = worker_count().min(cfg.seeds.len()).max(1);
    let mut results: Vec<Option<Result<SeedSummary>>> =
        (0..cfg.seeds.len()).map(|_| None).collect();
    for chunk in cfg
        .seeds
        .iter()
        .enumerate()
        .collect::<Vec<_>>()
        .chunks(workers)
    {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&(i, &seed)| {
                    (
                        i,
                        s.spawn(move || run_seed(cfg, seed, &root.join(format!("seed-{seed}")))),
                    )
                })
                .collect();
            for (i, h) in handles {
                results[i] =
                    Some(h.join().unwrap_or_else(|_| {
                        Err(Error::Contract(format!("seed worker {i} panicked")))
                    }));
            }
        });
    }
    let seeds = results
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect::<Result<Vec<_>>>()?;
    let summary = RecipeSummary {
        recipe: cfg.recipe,
        config: cfg.clone(),
        median: medians(&seeds),
        seeds,
    };
    write_json(&root.join("summary.json"), &summary)?;
    write(&root.join("summary.csv"), summary_csv(&summary))?;
    write(
        &root.join("report.md"),
        render_report(&[(root.clone(), summary.clone())]),
    )?;
    Ok(summary)
}

fn summary_csv(s: &RecipeSummary) -> String {
    let mut out = String::from("model,group,median_accuracy\n");
    for row in &s.median {
        for (g, a) in &row.accuracy {
            writeln!(out, "{},{g},{a}", row.model).expect("write to string");
        }
    }
    out
}

/// Table-1-style rows: task label → model → median accuracy.
pub fn table1_rows(s: &RecipeSummary) -> Vec<(String, BTreeMap<String, f64>)> {
    let mut rows: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for m in &s.median {
        let mut hop_sum = (0.0, 0);
        for (g, a) in &m.accuracy {
            if let Some(n) = g.strip_prefix("chains=") {
                rows.entry(format!("Reasoning-{n}chain"))
                    .or_default()
                    .insert(m.model.clone(), *a);
            } else {
                hop_sum = (hop_sum.0 + a, hop_sum.1 + 1);
            }
        }
        if hop_sum.1 > 0 {
            rows.entry("HashHop".into())
                .or_default()
                .insert(m.model.clone(), hop_sum.0 / hop_sum.1 as f64);
        }
    }
    rows.into_iter().collect()
}

const PAPER_TABLE1: [(&str, [f64; 3]); 3] = [
    ("HashHop", [0.283, 0.302, 0.303]),
    ("Reasoning-3chain", [0.391, 0.452, 0.473]),
    ("Reasoning-4chain", [0.192, 0.369, 0.451]),
];

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.digits$}"))
}

/// Markdown report over recipe summaries; a pure function of its inputs.
pub fn render_report(runs: &[(PathBuf, RecipeSummary)]) -> String {
    let mut out = String::from("# Adapter experiment report\n\n");
    out.push_str("Reference numbers are labelled **paper (GPT-2 scale)**; measured numbers are labelled **this run (toy scale)**. ");
    out.push_str("The toy runs test orderings and trends only.\n\n");
    out.push_str("## paper (GPT-2 scale)\n\n| Task | Base | LoRA | ELoRA |\n|---|---|---|---|\n");
    for (task, v) in PAPER_TABLE1 {
        writeln!(out, "| {task} | {:.3} | {:.3} | {:.3} |", v[0], v[1], v[2]).unwrap();
    }
    out.push_str(
        "\nHashHop LoRA delta effective rank: mean Shannon erank 17.87, mean cutoff rank 158.\n\n",
    );
    for (dir, s) in runs {
        writeln!(
            out,
            "## this run (toy scale): {} ({})\n",
            s.recipe,
            dir.display()
        )
        .unwrap();
        let seeds: Vec<String> = s.seeds.iter().map(|x| x.seed.to_string()).collect();
        writeln!(out, "Seeds: {}. Medians over seeds.\n", seeds.join(", ")).unwrap();
        let models: Vec<&str> = s.median.iter().map(|m| m.model.as_str()).collect();
        writeln!(out, "| Task | {} |", models.join(" | ")).unwrap();
        writeln!(out, "|---|{}", "---|".repeat(models.len())).unwrap();
        for (task, row) in table1_rows(s) {
            let cells: Vec<String> = models
                .iter()
                .map(|m| fmt_opt(row.get(*m).copied(), 3))
                .collect();
            writeln!(out, "| {task} | {} |", cells.join(" | ")).unwrap();
        }
        out.push('\n');
        let groups: Vec<&String> = s
            .median
            .first()
            .map(|m| m.accuracy.keys().collect())
            .unwrap_or_default();
        if groups.len() > 1 {
            writeln!(out, "| Group | {} |", models.join(" | ")).unwrap();
            writeln!(out, "|---|{}", "---|".repeat(models.len())).unwrap();
            for g in groups {
                let cells: Vec<String> = s
                    .median
                    .iter()
                    .map(|m| fmt_opt(m.accuracy.get(g).copied(), 3))
                    .collect();
                writeln!(out, "| {g} | {} |", cells.join(" | ")).unwrap();
            }
            out.push('\n');
        }
        out.push_str("| Adapter | mean erank | mean cutoff rank | steps to loss threshold |\n|---|---|---|---|\n");
        for m in s.median.iter().filter(|m| m.model != "base") {
            writeln!(
                out,
                "| {} | {} | {} | {} |",
                m.model,
                fmt_opt(m.mean_erank, 2),
                fmt_opt(m.mean_cutoff, 1),
                fmt_opt(m.steps_to_threshold, 0)
            )
            .unwrap();
        }
        out.push('\n');
        for seed in &s.seeds {
            let d = format!("seed-{}", seed.seed);
            writeln!(
                out,
                "Plots for seed {}: `{d}/accuracy.svg`, `{d}/loss.svg`, `{d}/base_loss.svg`",
                seed.seed
            )
            .unwrap();
        }
        out.push('\n');
    }
    out
}

/// Builds a report from run directories holding `summary.json`.
pub fn report(dirs: &[PathBuf]) -> Result<String> {
    let mut runs = Vec::new();
    for d in dirs {
        let path = d.join("summary.json");
        if !path.exists() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let s: RecipeSummary = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        runs.push((d.clone(), s));
    }
    if runs.is_empty() {
        return Err(Error::Config(
            "no recipe summaries (summary.json) found in the given run directories".into(),
        ));
    }
    Ok(render_report(&runs))
}

#[doc(hidden)]
pub fn smoke_config(recipe: Recipe, dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(recipe);
    cfg.seeds = vec![1];
    cfg.output_dir = dir.to_path_buf();
    cfg.model = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        ..cfg.model
    };
    cfg.base_train.max_steps = 3;
    cfg.base_train.batch_size = 2;
    cfg.adapter_train.max_steps = 3;
    cfg.adapter_train.batch_size = 2;
    cfg.data.eval_samples = 4;
    for a in &mut cfg.adapters {
        a.spec.rank = 2;
    }
    cfg
}
