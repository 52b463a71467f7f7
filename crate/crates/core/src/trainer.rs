//! Training loops: full fine-tuning of the base model and frozen-base adapter training.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adapters::{
    mean_entropy_loss, total_loss, AdapterSpec, AdapterWeights, BoundAdapters, Variant,
};
use crate::datasets::{mix_seed, GenConfig, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{forward_tape, BoundModel, ModelConfig, TransformerWeights};
use crate::optim::{Adam, AdamConfig};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{Vocab, BOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    /// Run the eval hook every this many steps; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub adam: AdamConfig,
    pub lr_base: f64,
    /// Learning rate of adapter factors A and B.
    pub lr_lora: f64,
    /// Learning rate of the ELoRA entropy matrix E.
    pub lr_entropy: f64,
    pub plateau_window: usize,
    pub plateau_delta: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_steps: 10_000,
            eval_every: 0,
            adam: AdamConfig::default(),
            lr_base: 3e-4,
            lr_lora: 1e-5,
            lr_entropy: 1e-3,
            plateau_window: 500,
            plateau_delta: 0.01,
            seed: 0,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero rate is allowed: it freezes a group, which is useful for diagnostics.
        for (name, lr) in [
            ("lr_base", self.lr_base),
            ("lr_lora", self.lr_lora),
            ("lr_entropy", self.lr_entropy),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Params(format!(
                    "{name} must be a finite non-negative rate, got {lr}"
                )));
            }
        }
        if !(self.plateau_delta > 0.0 && self.plateau_delta < 1.0) {
            return Err(Error::Params(format!(
                "plateau_delta must be in (0,1), got {}",
                self.plateau_delta
            )));
        }
        if self.batch_size == 0 || self.plateau_window == 0 {
            return Err(Error::Params(
                "batch_size and plateau_window must be positive".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Params(format!(
                    "grad_clip must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// One training sequence: `[BOS] + prompt + target[..L-1]`, with the loss on
/// the positions that predict the target characters.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub targets: Vec<Option<usize>>,
}

pub fn encode_example(vocab: &Vocab, sample: &Sample) -> Result<Example> {
    encode_pair(vocab, sample.rendered(), sample.target().as_str())
}

fn encode_pair(vocab: &Vocab, rendered: &str, target: &str) -> Result<Example> {
    let prompt = vocab.encode(rendered)?;
    let target = vocab.encode(target)?;
    let mut tokens = Vec::with_capacity(1 + prompt.len() + target.len());
    tokens.push(BOS);
    tokens.extend(&prompt);
    tokens.extend(&target[..target.len().saturating_sub(1)]);
    let mut targets = vec![None; tokens.len()];
    let first = prompt.len();
    for (i, &t) in target.iter().enumerate() {
        targets[first + i] = Some(t as usize);
    }
    Ok(Example { tokens, targets })
}

/// Where training batches come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataStream {
    /// Fresh samples; each one's task is drawn uniformly from `tasks`.
    Generated {
        tasks: Vec<TaskSpec>,
        gen: GenConfig,
        seed: u64,
    },
    /// A fixed sample list, cycled in order.
    Fixed { samples: Vec<FixedSample> },
}

/// A prompt/target pair for [`DataStream::Fixed`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedSample {
    pub rendered: String,
    pub target: String,
}

impl DataStream {
    pub fn fixed(samples: &[Sample]) -> Self {
        DataStream::Fixed {
            samples: samples
                .iter()
                .map(|s| FixedSample {
                    rendered: s.rendered().to_owned(),
                    target: s.target().as_str().to_owned(),
                })
                .collect(),
        }
    }

    pub fn batch(&self, vocab: &Vocab, step: usize, batch_size: usize) -> Result<Vec<Example>> {
        (0..batch_size)
            .map(|i| {
                let index = (step * batch_size + i) as u64;
                match self {
                    DataStream::Generated { tasks, gen, seed } => {
                        if tasks.is_empty() {
                            return Err(Error::Params("data stream has no tasks".into()));
                        }
                        let task =
                            &tasks[(mix_seed(*seed ^ 0x7A5C, index) % tasks.len() as u64) as usize];
                        encode_example(vocab, &task.nth(*seed, index, gen)?)
                    }
                    DataStream::Fixed { samples } => {
                        if samples.is_empty() {
                            return Err(Error::Params("data stream has no samples".into()));
                        }
                        let s = &samples[index as usize % samples.len()];
                        encode_pair(vocab, &s.rendered, &s.target)
                    }
                }
            })
            .collect()
    }
}

/// Loss nodes for one batch.
pub struct BatchLoss {
    pub task: Var,
    pub entropy: Option<Var>,
    pub total: Var,
}

/// Records the masked cross-entropy (plus the entropy term for ELoRA) of a batch.
pub fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    model: &BoundModel,
    adapters: Option<(&BoundAdapters, &AdapterSpec)>,
    batch: &[Example],
) -> Result<BatchLoss> {
    let seqs: Vec<&[u32]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
    let targets: Vec<Option<usize>> = batch
        .iter()
        .flat_map(|e| e.targets.iter().copied())
        .collect();
    let out = forward_tape(tape, config, model, adapters.map(|a| a.0), &seqs)?;
    let task = tape.cross_entropy_masked(out.logits, &targets)?;
    let (entropy, lambda) = match adapters {
        Some((_, spec)) if spec.variant == Variant::Elora => (
            mean_entropy_loss(tape, &out.captured, spec.normalize_entropy)?,
            spec.effective_entropy_weight(),
        ),
        _ => (None, 0.0),
    };
    let total = total_loss(tape, task, entropy, lambda)?;
    Ok(BatchLoss {
        task,
        entropy,
        total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Task cross-entropy on the training batch.
    pub loss: f64,
    pub entropy_loss: Option<f64>,
    pub grad_norm_base: Option<f64>,
    pub grad_norm_adapter: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub accuracies: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Plateau { step: usize },
    NonFinite { step: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub checkpoint: Option<PathBuf>,
    /// Loss threshold (formatted) → first step whose smoothed loss reaches it.
    pub steps_to_threshold: BTreeMap<String, Option<usize>>,
    pub stop: StopReason,
}

impl RunLog {
    fn new() -> Self {
        RunLog {
            steps: Vec::new(),
            evals: Vec::new(),
            checkpoint: None,
            steps_to_threshold: BTreeMap::new(),
            stop: StopReason::MaxSteps,
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn record_threshold(&mut self, threshold: f64) -> Option<usize> {
        let s = steps_to_loss(self, threshold);
        self.steps_to_threshold.insert(format!("{threshold}"), s);
        s
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("step,loss,entropy_loss,grad_norm_base,grad_norm_adapter\n");
        for r in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.step,
                r.loss,
                opt(r.entropy_loss),
                opt(r.grad_norm_base),
                opt(r.grad_norm_adapter)
            )
            .expect("write to string");
        }
        out
    }
}

pub const SMOOTHING_WINDOW: usize = 50;

/// First step whose trailing mean loss (up to 50 steps) is at most `threshold`.
pub fn steps_to_loss(log: &RunLog, threshold: f64) -> Option<usize> {
    if !(threshold > 0.0) {
        return None;
    }
    let mut sum = 0.0;
    for (i, r) in log.steps.iter().enumerate() {
        sum += r.loss;
        if i >= SMOOTHING_WINDOW {
            sum -= log.steps[i - SMOOTHING_WINDOW].loss;
        }
        let n = (i + 1).min(SMOOTHING_WINDOW) as f64;
        if sum / n <= threshold {
            return Some(r.step);
        }
    }
    None
}

/// Windowed plateau test: mean loss over the last `w` steps improved by less
/// than `delta` relative to the window before it.
pub fn plateaued(losses: &[f64], w: usize, delta: f64) -> bool {
    if losses.len() < 2 * w {
        return false;
    }
    let n = losses.len();
    let prev: f64 = losses[n - 2 * w..n - w].iter().sum::<f64>() / w as f64;
    let cur: f64 = losses[n - w..].iter().sum::<f64>() / w as f64;
    (prev - cur) / prev.abs().max(f64::MIN_POSITIVE) < delta
}

pub struct TrainOutcome<W> {
    /// Final weights, or the last finite ones when training diverged.
    pub weights: W,
    pub log: RunLog,
}

/// Called every `eval_every` steps and once at the end with the current weights.
pub type EvalHook<'a> = dyn FnMut(
        usize,
        &TransformerWeights<f32>,
        Option<&AdapterWeights<f32>>,
    ) -> Result<BTreeMap<String, f64>>
    + 'a;

fn clip_factor(norm: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    }
}

fn collect_grads<'n>(
    grads: &crate::tape::Gradients<f32>,
    names: &'n [(String, Var)],
) -> (Vec<(&'n str, Vec<f32>)>, f64) {
    let mut out = Vec::new();
    let mut sq = 0.0f64;
    for (name, v) in names {
        if let Some(g) = grads.get(*v) {
            sq += g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
            out.push((name.as_str(), g.to_vec()));
        }
    }
    (out, sq.sqrt())
}

fn scaled(g: Vec<f32>, factor: f64) -> Vec<f32> {
    if factor == 1.0 {
        g
    } else {
        g.into_iter().map(|x| (x as f64 * factor) as f32).collect()
    }
}

fn should_stop(log: &mut RunLog, cfg: &TrainConfig, step: usize) -> bool {
    let done = step + 1;
    if done % cfg.plateau_window == 0
        && plateaued(&log.losses(), cfg.plateau_window, cfg.plateau_delta)
    {
        log.stop = StopReason::Plateau { step };
        return true;
    }
    false
}

/// Fine-tunes every base weight from a fresh init seeded by `cfg.seed`.
pub fn train_base(
    config: &ModelConfig,
    stream: &DataStream,
    cfg: &TrainConfig,
    eval: Option<&mut EvalHook<'_>>,
) -> Result<TrainOutcome<TransformerWeights<f32>>> {
    let mut w = TransformerWeights::init(config, cfg.seed)?;
    w.set_trainable(true);
    train_base_from(w, stream, cfg, eval)
}

/// Fine-tunes every base weight, starting from `weights`.
pub fn train_base_from(
    mut w: TransformerWeights<f32>,
    stream: &DataStream,
    cfg: &TrainConfig,
    mut eval: Option<&mut EvalHook<'_>>,
) -> Result<TrainOutcome<TransformerWeights<f32>>> {
    cfg.validate()?;
    w.set_trainable(true);
    let vocab = Vocab::new();
    let mut adam = Adam::new(cfg.adam);
    let mut log = RunLog::new();
    for step in 0..cfg.max_steps {
        let batch = stream.batch(&vocab, step, cfg.batch_size)?;
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        let model = BoundModel::bind(&mut tape, &w);
        let loss = batch_loss(&mut tape, &w.config, &model, None, &batch)?;
        let value = tape.scalar_value(loss.total) as f64;
        let grads = match tape.backward(loss.total) {
            Ok(g) if value.is_finite() => g,
            _ => {
                log.stop = StopReason::NonFinite { step };
                break;
            }
        };
        let (gs, norm) = collect_grads(&grads, &model.names);
        if !norm.is_finite() {
            log.stop = StopReason::NonFinite { step };
            break;
        }
        let factor = clip_factor(norm, cfg.grad_clip);
        adam.begin_step();
        let mut params: BTreeMap<String, &mut Tensor<f32>> = w.named_mut().into_iter().collect();
        for (name, g) in gs {
            let p = params
                .get_mut(name)
                .expect("bound names match weight names");
            adam.update(name, &mut **p, &scaled(g, factor), cfg.lr_base);
        }
        drop(params);
        log.steps.push(StepRecord {
            step,
            loss: value,
            entropy_loss: None,
            grad_norm_base: Some(norm),
            grad_norm_adapter: None,
        });
        if let Some(h) = eval.as_deref_mut() {
            if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
                let accuracies = h(step + 1, &w, None)?;
                log.evals.push(EvalRecord {
                    step: step + 1,
                    accuracies,
                });
            }
        }
        if should_stop(&mut log, cfg, step) {
            break;
        }
    }
    finish_eval(&mut log, &mut eval, &w, None)?;
    Ok(TrainOutcome { weights: w, log })
}

fn finish_eval(
    log: &mut RunLog,
    eval: &mut Option<&mut EvalHook<'_>>,
    w: &TransformerWeights<f32>,
    a: Option<&AdapterWeights<f32>>,
) -> Result<()> {
    let last = log.steps.len();
    if let Some(h) = eval.as_deref_mut() {
        if log.evals.last().map(|e| e.step) != Some(last) {
            let accuracies = h(last, w, a)?;
            log.evals.push(EvalRecord {
                step: last,
                accuracies,
            });
        }
    }
    Ok(())
}

/// Trains `adapters` on top of a frozen `base`. Only tensors of `adapters`
/// that require grad are updated: E at `lr_entropy`, A and B at `lr_lora`.
pub fn train_adapter(
    base: &TransformerWeights<f32>,
    mut adapters: AdapterWeights<f32>,
    stream: &DataStream,
    cfg: &TrainConfig,
    mut eval: Option<&mut EvalHook<'_>>,
) -> Result<TrainOutcome<AdapterWeights<f32>>> {
    cfg.validate()?;
    adapters.spec.validate(&base.config)?;
    if base.named().iter().any(|(_, t)| t.requires_grad()) {
        return Err(Error::Contract(
            "base weights must be frozen for adapter training".into(),
        ));
    }
    let vocab = Vocab::new();
    let mut adam = Adam::new(cfg.adam);
    let mut log = RunLog::new();
    let spec = adapters.spec.clone();
    for step in 0..cfg.max_steps {
        let batch = stream.batch(&vocab, step, cfg.batch_size)?;
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        let model = BoundModel::bind(&mut tape, base);
        let bound = BoundAdapters::bind(&mut tape, &adapters);
        let loss = batch_loss(
            &mut tape,
            &base.config,
            &model,
            Some((&bound, &spec)),
            &batch,
        )?;
        let value = tape.scalar_value(loss.task) as f64;
        let entropy = loss.entropy.map(|e| tape.scalar_value(e) as f64);
        let total = tape.scalar_value(loss.total) as f64;
        let grads = match tape.backward(loss.total) {
            Ok(g) if total.is_finite() => g,
            _ => {
                log.stop = StopReason::NonFinite { step };
                break;
            }
        };
        let (gs, norm) = collect_grads(&grads, &bound.names);
        if !norm.is_finite() {
            log.stop = StopReason::NonFinite { step };
            break;
        }
        let factor = clip_factor(norm, cfg.grad_clip);
        adam.begin_step();
        let mut params: BTreeMap<String, &mut Tensor<f32>> =
            adapters.named_mut().into_iter().collect();
        for (name, g) in gs {
            let p = params
                .get_mut(name)
                .expect("bound names match adapter names");
            let lr = if name.ends_with(".E") {
                cfg.lr_entropy
            } else {
                cfg.lr_lora
            };
            adam.update(name, &mut **p, &scaled(g, factor), lr);
        }
        drop(params);
        log.steps.push(StepRecord {
            step,
            loss: value,
            entropy_loss: entropy,
            grad_norm_base: None,
            grad_norm_adapter: Some(norm),
        });
        if let Some(h) = eval.as_deref_mut() {
            if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
                let accuracies = h(step + 1, base, Some(&adapters))?;
                log.evals.push(EvalRecord {
                    step: step + 1,
                    accuracies,
                });
            }
        }
        if should_stop(&mut log, cfg, step) {
            break;
        }
    }
    finish_eval(&mut log, &mut eval, base, Some(&adapters))?;
    Ok(TrainOutcome {
        weights: adapters,
        log,
    })
}

/// Mean masked cross-entropy of a batch, without updating anything.
pub fn eval_loss(
    base: &TransformerWeights<f32>,
    adapters: Option<&AdapterWeights<f32>>,
    batch: &[Example],
) -> Result<f64> {
    let mut frozen = base.clone();
    frozen.set_trainable(false);
    let frozen_ad = adapters.map(|a| {
        let mut a = a.clone();
        a.set_trainable(false);
        a
    });
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, &frozen);
    let bound = frozen_ad
        .as_ref()
        .map(|a| BoundAdapters::bind(&mut tape, a));
    let spec = frozen_ad.as_ref().map(|a| a.spec.clone());
    let pair = bound.as_ref().zip(spec.as_ref());
    let loss = batch_loss(&mut tape, &frozen.config, &model, pair, batch)?;
    Ok(tape.scalar_value(loss.task) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::gen_hashhop;
    use crate::model::generate_greedy;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            d_ff: 64,
            max_seq_len: 64,
            ..Default::default()
        }
    }

    fn gen() -> GenConfig {
        GenConfig {
            hash_len: 2,
            ..Default::default()
        }
    }

    fn stream() -> DataStream {
        DataStream::Generated {
            tasks: vec![TaskSpec::HashHop {
                hops: (1, 2),
                chain_length: 3,
            }],
            gen: gen(),
            seed: 4,
        }
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            max_steps: steps,
            lr_base: 1e-3,
            lr_lora: 1e-3,
            lr_entropy: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn example_masks_prompt() {
        let s = Sample::HashHop(gen_hashhop(1, 3, 2, &gen()).unwrap());
        let v = Vocab::new();
        let e = encode_example(&v, &s).unwrap();
        let prompt = v.encode(s.rendered()).unwrap();
        assert_eq!(e.tokens.len(), 1 + prompt.len() + 1);
        assert_eq!(e.tokens[0], BOS);
        let labelled: Vec<usize> = e.targets.iter().flatten().copied().collect();
        let want: Vec<usize> = v
            .encode(s.target().as_str())
            .unwrap()
            .iter()
            .map(|&t| t as usize)
            .collect();
        assert_eq!(labelled, want);
        assert!(e.targets[..prompt.len()].iter().all(Option::is_none));
    }

    #[test]
    fn steps_to_loss_contract() {
        let mut log = RunLog::new();
        for (i, l) in [3.0, 2.5, 2.0, 1.0, 0.5].iter().enumerate() {
            log.steps.push(StepRecord {
                step: i,
                loss: *l,
                entropy_loss: None,
                grad_norm_base: None,
                grad_norm_adapter: None,
            });
        }
        assert_eq!(steps_to_loss(&log, 10.0), Some(0));
        assert_eq!(steps_to_loss(&log, 0.0), None);
        assert_eq!(steps_to_loss(&log, 0.01), None);
        // trailing means: 3, 2.75, 2.5, 2.125, 1.8
        assert_eq!(steps_to_loss(&log, 2.5), Some(2));
        let mut prev = Some(0);
        for t in [5.0, 2.9, 2.5, 2.2, 2.0, 1.8, 1.0] {
            let s = steps_to_loss(&log, t);
            assert!(s.is_none() || prev.is_some_and(|p| s.unwrap() >= p), "{t}");
            prev = s.or(prev);
        }
    }

    #[test]
    fn plateau_rule() {
        let flat = vec![1.0; 20];
        assert!(plateaued(&flat, 10, 0.01));
        let falling: Vec<f64> = (0..20).map(|i| 2.0 - 0.05 * i as f64).collect();
        assert!(!plateaued(&falling, 10, 0.01));
        assert!(!plateaued(&flat[..15], 10, 0.01));
    }

    #[test]
    fn deterministic_runs() {
        let a = train_base(&tiny(), &stream(), &quick(5), None).unwrap();
        let b = train_base(&tiny(), &stream(), &quick(5), None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.weights.checksum(), b.weights.checksum());
    }

    #[test]
    fn zero_lr_keeps_loss() {
        let cfg = TrainConfig {
            lr_base: 0.0,
            ..quick(4)
        };
        let w0 = TransformerWeights::<f32>::init(&tiny(), 0).unwrap();
        let out = train_base(&tiny(), &stream(), &cfg, None).unwrap();
        assert_eq!(out.weights.checksum(), w0.checksum());
        let batch = stream().batch(&Vocab::new(), 0, 4).unwrap();
        assert_eq!(
            eval_loss(&out.weights, None, &batch).unwrap(),
            out.log.steps[0].loss
        );
    }

    #[test]
    fn overfits_one_sample() {
        let s = Sample::HashHop(gen_hashhop(11, 3, 2, &gen()).unwrap());
        let stream = DataStream::fixed(std::slice::from_ref(&s));
        let cfg = TrainConfig {
            batch_size: 1,
            max_steps: 2000,
            lr_base: 3e-3,
            plateau_window: 100_000,
            ..Default::default()
        };
        let out = train_base(&tiny(), &stream, &cfg, None).unwrap();
        let first_below = out.log.steps.iter().position(|r| r.loss < 0.01);
        assert!(
            first_below.is_some(),
            "final loss {}",
            out.log.steps.last().unwrap().loss
        );
        let v = Vocab::new();
        let mut prompt = vec![BOS];
        prompt.extend(v.encode(s.rendered()).unwrap());
        let ids = generate_greedy(&out.weights, None, &prompt, 2).unwrap();
        assert_eq!(v.decode(&ids[prompt.len()..]).unwrap(), s.target().as_str());
    }

    #[test]
    fn adapter_training_freezes_base_and_only_moves_adapters() {
        let mut base = TransformerWeights::<f32>::init(&tiny(), 1).unwrap();
        let before = base.checksum();
        let ad = AdapterWeights::init(&AdapterSpec::elora(2), &tiny(), 2).unwrap();
        let initial = ad.clone();
        base.set_trainable(true);
        assert!(train_adapter(&base, ad.clone(), &stream(), &quick(2), None).is_err());
        base.set_trainable(false);
        let out = train_adapter(&base, ad, &stream(), &quick(3), None).unwrap();
        assert_eq!(base.checksum(), before);
        assert_ne!(out.weights, initial);
        assert!(out
            .log
            .steps
            .iter()
            .all(|r| r.entropy_loss.is_some() && r.grad_norm_base.is_none()));
    }

    #[test]
    fn frozen_identity_elora_without_entropy_matches_lora() {
        let base = TransformerWeights::<f32>::init(&tiny(), 1).unwrap();
        let lora = AdapterWeights::init(&AdapterSpec::lora(2), &tiny(), 7).unwrap();
        let mut elora = AdapterWeights::init(
            &AdapterSpec {
                entropy_weight: 0.0,
                ..AdapterSpec::elora(2)
            },
            &tiny(),
            7,
        )
        .unwrap();
        for l in elora.layers.values_mut() {
            l.e.as_mut().unwrap().set_requires_grad(false);
        }
        let a = train_adapter(&base, lora, &stream(), &quick(6), None).unwrap();
        let b = train_adapter(&base, elora, &stream(), &quick(6), None).unwrap();
        assert_eq!(a.log.losses(), b.log.losses());
    }

    #[test]
    fn eval_hook_runs_on_schedule() {
        let mut calls = Vec::new();
        let mut hook =
            |step: usize, _: &TransformerWeights<f32>, _: Option<&AdapterWeights<f32>>| {
                calls.push(step);
                Ok(BTreeMap::from([("x".to_owned(), step as f64)]))
            };
        let cfg = TrainConfig {
            eval_every: 2,
            ..quick(5)
        };
        let out = train_base(&tiny(), &stream(), &cfg, Some(&mut hook)).unwrap();
        assert_eq!(calls, vec![2, 4, 5]);
        assert_eq!(out.log.evals.len(), 3);
        let csv = out.log.to_csv();
        assert_eq!(csv.lines().count(), 6);
    }
}
