//! A small pre-norm decoder-only transformer with tied embeddings.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterWeights, BoundAdapters, Target};
use crate::error::{Error, Result};
use crate::tape::{Segment, Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::VOCAB_SIZE;

pub const LN_EPS: f64 = 1e-5;
/// GPT-2's N(0, 0.02) is tuned for width 768; narrower models keep the same
/// std·sqrt(d) product so attention logits are not vanishingly small at init.
pub fn init_std(d_model: usize) -> f64 {
    0.02 * (768.0 / d_model as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 512,
            vocab_size: VOCAB_SIZE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_seq_len,
            self.vocab_size,
        ];
        if positive.contains(&0) {
            return Err(Error::Params(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Params(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Input and output width of a target projection.
    pub fn target_dims(&self, t: Target) -> (usize, usize) {
        match t {
            Target::Wq | Target::Wk | Target::Wv | Target::Wo => (self.d_model, self.d_model),
            Target::W1 => (self.d_model, self.d_ff),
            Target::W2 => (self.d_ff, self.d_model),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T: Scalar> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

impl<T: Scalar> LayerWeights<T> {
    pub fn target(&self, t: Target) -> &Tensor<T> {
        match t {
            Target::Wq => &self.wq,
            Target::Wk => &self.wk,
            Target::Wv => &self.wv,
            Target::Wo => &self.wo,
            Target::W1 => &self.w1,
            Target::W2 => &self.w2,
        }
    }

    pub fn target_mut(&mut self, t: Target) -> &mut Tensor<T> {
        match t {
            Target::Wq => &mut self.wq,
            Target::Wk => &mut self.wk,
            Target::Wv => &mut self.wv,
            Target::Wo => &mut self.wo,
            Target::W1 => &mut self.w1,
            Target::W2 => &mut self.w2,
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor<T>); 10] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("w1", &self.w1),
            ("w2", &self.w2),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 10] {
        [
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
            ("w1", &mut self.w1),
            ("w2", &mut self.w2),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights<T: Scalar = f32> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_gain: Tensor<T>,
    pub lnf_bias: Tensor<T>,
}

fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

fn filled<T: Scalar>(n: usize, v: f64) -> Tensor<T> {
    Tensor::new(vec![n], vec![T::of(v); n]).expect("init shape")
}

impl<T: Scalar> TransformerWeights<T> {
    /// GPT-2 style init: N(0, [`init_std`]) everywhere, residual output
    /// projections scaled by `1/sqrt(2·n_layers)`, layernorm gain 1 / bias 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = init_std(d);
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = normal(&mut rng, &[config.vocab_size, d], std);
        let pos_emb = normal(&mut rng, &[config.max_seq_len, d], std);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: filled(d, 1.0),
                ln1_bias: filled(d, 0.0),
                wq: normal(&mut rng, &[d, d], std),
                wk: normal(&mut rng, &[d, d], std),
                wv: normal(&mut rng, &[d, d], std),
                wo: normal(&mut rng, &[d, d], resid_std),
                ln2_gain: filled(d, 1.0),
                ln2_bias: filled(d, 0.0),
                w1: normal(&mut rng, &[d, config.d_ff], std),
                w2: normal(&mut rng, &[config.d_ff, d], resid_std),
            })
            .collect();
        Ok(TransformerWeights {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: filled(d, 1.0),
            lnf_bias: filled(d, 0.0),
        })
    }

    /// Tensors under their checkpoint names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_owned(), &self.tok_emb),
            ("pos_emb".to_owned(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(
                l.fields()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("ln_f.gain".to_owned(), &self.lnf_gain));
        out.push(("ln_f.bias".to_owned(), &self.lnf_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_owned(), &mut self.tok_emb),
            ("pos_emb".to_owned(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(
                l.fields_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("ln_f.gain".to_owned(), &mut self.lnf_gain));
        out.push(("ln_f.bias".to_owned(), &mut self.lnf_bias));
        out
    }

    /// Rebuilds weights from named tensors, checking every shape against `config`.
    pub fn from_named(
        config: &ModelConfig,
        mut tensors: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        let mut w = Self::init(config, 0)?;
        for (name, slot) in w.named_mut() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != slot.shape() {
                return Err(Error::Shape(format!(
                    "{name}: expected {:?}, found {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra:?}")));
        }
        Ok(w)
    }

    pub fn set_trainable(&mut self, on: bool) {
        for (_, t) in self.named_mut() {
            t.set_requires_grad(on);
        }
    }

    pub fn cast<U: Scalar>(&self) -> TransformerWeights<U> {
        let named: BTreeMap<String, Tensor<U>> = self
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.cast()))
            .collect();
        TransformerWeights::from_named(&self.config, named).expect("same layout")
    }

    /// Order-sensitive checksum over every weight bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.named() {
            for x in t.data() {
                let bits = x.to_f64().expect("finite").to_bits();
                h = (h ^ bits).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) struct BoundLayer {
    ln1: (Var, Var),
    ln2: (Var, Var),
    w: [Var; 6],
}

/// Model weights recorded as leaves on one tape.
pub struct BoundModel {
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<BoundLayer>,
    lnf: (Var, Var),
    pub(crate) names: Vec<(String, Var)>,
}

impl BoundModel {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, w: &TransformerWeights<T>) -> Self {
        let vars: Vec<(String, Var)> = w
            .named()
            .into_iter()
            .map(|(n, t)| (n, tape.leaf(t)))
            .collect();
        Self::from_vars(&w.config, vars).expect("weights match their config")
    }

    /// Assembles a bound model from leaves already on a tape, keyed by checkpoint name.
    pub fn from_vars(config: &ModelConfig, names: Vec<(String, Var)>) -> Result<Self> {
        let find = |n: &str| -> Result<Var> {
            names
                .iter()
                .find(|(k, _)| k == n)
                .map(|&(_, v)| v)
                .ok_or_else(|| Error::MissingTensor(n.to_owned()))
        };
        let layers = (0..config.n_layers)
            .map(|i| {
                let p = |n: &str| find(&format!("layers.{i}.{n}"));
                Ok(BoundLayer {
                    ln1: (p("ln1.gain")?, p("ln1.bias")?),
                    w: [p("wq")?, p("wk")?, p("wv")?, p("wo")?, p("w1")?, p("w2")?],
                    ln2: (p("ln2.gain")?, p("ln2.bias")?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundModel {
            tok_emb: find("tok_emb")?,
            pos_emb: find("pos_emb")?,
            layers,
            lnf: (find("ln_f.gain")?, find("ln_f.bias")?),
            names,
        })
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.names.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// Output of a tape forward: stacked logits for all sequences, plus the
/// entropy-matrix outputs captured by every ELoRA adapter.
pub struct ForwardOutput {
    pub logits: Var,
    pub segments: Vec<Segment>,
    pub captured: Vec<Var>,
}

fn linear<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    layer: usize,
    target: Target,
    adapters: Option<&BoundAdapters>,
    captured: &mut Vec<Var>,
) -> Result<Var> {
    match adapters.and_then(|a| a.get(layer, target)) {
        Some(ad) => {
            let (y, z) = ad.forward(tape, x, w)?;
            captured.extend(z);
            Ok(y)
        }
        None => tape.matmul(x, w),
    }
}

/// Records the forward pass for a batch of sequences packed along the row axis.
pub fn forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    model: &BoundModel,
    adapters: Option<&BoundAdapters>,
    seqs: &[&[u32]],
) -> Result<ForwardOutput> {
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.is_empty() {
            return Err(Error::Contract("empty sequence".into()));
        }
        if s.len() > config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: s.len(),
                max: config.max_seq_len,
            });
        }
        segments.push(Segment {
            start: ids.len(),
            len: s.len(),
        });
        ids.extend(s.iter().map(|&t| t as usize));
        positions.extend(0..s.len());
    }
    let tok = tape.gather(model.tok_emb, &ids)?;
    let pos = tape.gather(model.pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut captured = Vec::new();
    for (li, l) in model.layers.iter().enumerate() {
        let h = tape.layernorm(x, l.ln1.0, l.ln1.1, LN_EPS)?;
        let q = linear(tape, h, l.w[0], li, Target::Wq, adapters, &mut captured)?;
        let k = linear(tape, h, l.w[1], li, Target::Wk, adapters, &mut captured)?;
        let v = linear(tape, h, l.w[2], li, Target::Wv, adapters, &mut captured)?;
        let att = tape.causal_attention(q, k, v, config.n_heads, &segments)?;
        let o = linear(tape, att, l.w[3], li, Target::Wo, adapters, &mut captured)?;
        x = tape.add(x, o)?;
        let h2 = tape.layernorm(x, l.ln2.0, l.ln2.1, LN_EPS)?;
        let f = linear(tape, h2, l.w[4], li, Target::W1, adapters, &mut captured)?;
        let f = tape.gelu(f);
        let f = linear(tape, f, l.w[5], li, Target::W2, adapters, &mut captured)?;
        x = tape.add(x, f)?;
    }
    let x = tape.layernorm(x, model.lnf.0, model.lnf.1, LN_EPS)?;
    let logits = tape.matmul_t(x, false, model.tok_emb, true)?;
    Ok(ForwardOutput {
        logits,
        segments,
        captured,
    })
}

/// Next-token logits `[n × vocab]` for one sequence, without gradient tracking.
pub fn forward<T: Scalar>(
    weights: &TransformerWeights<T>,
    adapters: Option<&AdapterWeights<T>>,
    ids: &[u32],
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let frozen = frozen_copy(weights);
    let model = BoundModel::bind(&mut tape, &frozen);
    let bound = adapters.map(|a| BoundAdapters::bind(&mut tape, a));
    let out = forward_tape(&mut tape, &weights.config, &model, bound.as_ref(), &[ids])?;
    Ok(tape.to_tensor(out.logits))
}

fn frozen_copy<T: Scalar>(
    w: &TransformerWeights<T>,
) -> std::borrow::Cow<'_, TransformerWeights<T>> {
    if w.named().iter().any(|(_, t)| t.requires_grad()) {
        let mut c = w.clone();
        c.set_trainable(false);
        std::borrow::Cow::Owned(c)
    } else {
        std::borrow::Cow::Borrowed(w)
    }
}

fn argmax_lowest<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding of `n_new` tokens for each prompt; ties go to the lowest id.
pub fn generate_greedy_batch<T: Scalar>(
    weights: &TransformerWeights<T>,
    adapters: Option<&AdapterWeights<T>>,
    prompts: &[Vec<u32>],
    n_new: usize,
) -> Result<Vec<Vec<u32>>> {
    let max = weights.config.max_seq_len;
    if let Some(p) = prompts.iter().find(|p| p.len() + n_new > max) {
        return Err(Error::SequenceTooLong {
            len: p.len() + n_new,
            max,
        });
    }
    let mut seqs: Vec<Vec<u32>> = prompts.to_vec();
    if n_new == 0 || prompts.is_empty() {
        return Ok(seqs);
    }
    let frozen = frozen_copy(weights);
    let adapters_frozen = adapters.map(|a| {
        let mut a = a.clone();
        a.set_trainable(false);
        a
    });
    let vocab = weights.config.vocab_size;
    for _ in 0..n_new {
        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, &frozen);
        let bound = adapters_frozen
            .as_ref()
            .map(|a| BoundAdapters::bind(&mut tape, a));
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let out = forward_tape(&mut tape, &weights.config, &model, bound.as_ref(), &refs)?;
        let logits = tape.value(out.logits);
        for (s, seg) in seqs.iter_mut().zip(&out.segments) {
            let row = seg.start + seg.len - 1;
            s.push(argmax_lowest(&logits[row * vocab..(row + 1) * vocab]));
        }
    }
    Ok(seqs)
}

pub fn generate_greedy<T: Scalar>(
    weights: &TransformerWeights<T>,
    adapters: Option<&AdapterWeights<T>>,
    prompt: &[u32],
    n_new: usize,
) -> Result<Vec<u32>> {
    Ok(generate_greedy_batch(weights, adapters, &[prompt.to_vec()], n_new)?.remove(0))
}
