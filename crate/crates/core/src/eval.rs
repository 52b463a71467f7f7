//! Bucketed exact-match accuracy of greedy completions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterWeights;
use crate::datasets::Sample;
use crate::error::Result;
use crate::model::{generate_greedy_batch, TransformerWeights};
use crate::tokenizer::{Vocab, BOS};

/// Evaluation bucket: hop count for HashHop, chain count and shortest chain for HashChain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Bucket {
    Hops(usize),
    Chains { num: usize, shortest: usize },
}

impl Bucket {
    pub fn of(sample: &Sample) -> Bucket {
        match sample {
            Sample::HashHop(s) => Bucket::Hops(s.hops),
            Sample::HashChain(s) => Bucket::Chains {
                num: s.num_chains(),
                shortest: s.shortest(),
            },
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bucket::Hops(h) => write!(f, "hops={h}"),
            Bucket::Chains { num, shortest } => write!(f, "chains={num}/shortest={shortest}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub count: usize,
    pub correct: usize,
    /// Sum over samples of the matched-prefix fraction.
    pub prefix_sum: f64,
    /// Probability of a uniformly random hash being right: `1/36^L`.
    pub chance: f64,
}

impl BucketStats {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }

    pub fn prefix_accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.prefix_sum / self.count as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub buckets: BTreeMap<Bucket, BucketStats>,
}

impl AccuracyTable {
    pub fn total(&self) -> BucketStats {
        let mut t = BucketStats::default();
        for b in self.buckets.values() {
            t.count += b.count;
            t.correct += b.correct;
            t.prefix_sum += b.prefix_sum;
            t.chance = b.chance;
        }
        t
    }

    /// Pooled accuracy over buckets that satisfy `keep`; `None` if none do.
    pub fn pooled(&self, keep: impl Fn(&Bucket) -> bool) -> Option<f64> {
        let (n, c) = self
            .buckets
            .iter()
            .filter(|(k, _)| keep(k))
            .fold((0, 0), |(n, c), (_, s)| (n + s.count, c + s.correct));
        (n > 0).then(|| c as f64 / n as f64)
    }

    /// Accuracies keyed by the bucket's display name.
    pub fn flat(&self) -> BTreeMap<String, f64> {
        self.buckets
            .iter()
            .map(|(k, s)| (k.to_string(), s.accuracy()))
            .collect()
    }
}

/// Anything that completes prompts with a hash guess.
pub trait Predictor {
    fn predict(&self, samples: &[&Sample]) -> Result<Vec<String>>;
}

/// Greedy decoding with a (possibly adapted) model.
pub struct ModelPredictor<'a> {
    pub weights: &'a TransformerWeights<f32>,
    pub adapters: Option<&'a AdapterWeights<f32>>,
    pub batch_size: usize,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, samples: &[&Sample]) -> Result<Vec<String>> {
        let vocab = Vocab::new();
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.batch_size.max(1)) {
            let n_new = chunk.first().map_or(0, |s| s.hash_len());
            let prompts = chunk
                .iter()
                .map(|s| {
                    let mut ids = vec![BOS];
                    ids.extend(vocab.encode(s.rendered())?);
                    Ok(ids)
                })
                .collect::<Result<Vec<_>>>()?;
            let done = if chunk.iter().all(|s| s.hash_len() == n_new) {
                generate_greedy_batch(self.weights, self.adapters, &prompts, n_new)?
            } else {
                let mut v = Vec::new();
                for (p, s) in prompts.iter().zip(chunk) {
                    v.extend(generate_greedy_batch(
                        self.weights,
                        self.adapters,
                        std::slice::from_ref(p),
                        s.hash_len(),
                    )?);
                }
                v
            };
            for (seq, p) in done.iter().zip(&prompts) {
                // Specials are not printable; render them as a character no hash contains.
                out.push(
                    seq[p.len()..]
                        .iter()
                        .map(|&id| vocab.symbol(id).unwrap_or('?'))
                        .collect(),
                );
            }
        }
        Ok(out)
    }
}

/// Reads the answer off the sample: a harness self-test.
pub struct OracleDecoder;

impl Predictor for OracleDecoder {
    fn predict(&self, samples: &[&Sample]) -> Result<Vec<String>> {
        Ok(samples
            .iter()
            .map(|s| s.target().as_str().to_owned())
            .collect())
    }
}

/// Always answers the same string.
pub struct ConstantDecoder(pub String);

impl Predictor for ConstantDecoder {
    fn predict(&self, samples: &[&Sample]) -> Result<Vec<String>> {
        Ok(vec![self.0.clone(); samples.len()])
    }
}

pub fn chance(hash_len: usize) -> f64 {
    36f64.powi(-(hash_len as i32))
}

/// Scores `predictor` on `samples`, bucketed by hop count or chain shape.
pub fn evaluate(predictor: &dyn Predictor, samples: &[Sample]) -> Result<AccuracyTable> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let guesses = predictor.predict(&refs)?;
    let mut table = AccuracyTable::default();
    for (s, g) in samples.iter().zip(&guesses) {
        let target = s.target().as_str();
        let b = table.buckets.entry(Bucket::of(s)).or_default();
        b.chance = chance(s.hash_len());
        b.count += 1;
        if g == target {
            b.correct += 1;
        }
        let matched = target
            .chars()
            .zip(g.chars())
            .take_while(|(a, b)| a == b)
            .count();
        b.prefix_sum += matched as f64 / target.len().max(1) as f64;
    }
    Ok(table)
}

/// Accuracy of greedy decoding with `weights` (and optional adapters) on `samples`.
pub fn evaluate_accuracy(
    weights: &TransformerWeights<f32>,
    samples: &[Sample],
    adapters: Option<&AdapterWeights<f32>>,
) -> Result<AccuracyTable> {
    evaluate(
        &ModelPredictor {
            weights,
            adapters,
            batch_size: 64,
        },
        samples,
    )
}
