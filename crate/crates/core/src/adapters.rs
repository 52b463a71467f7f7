//! LoRA and ELoRA adapters.
//!
//! LoRA adds `(α/r)·(xA)B` to a frozen projection `xW`. ELoRA first maps the
//! input through a square "entropy matrix" `E` (`z = xE`), feeds `z` to the
//! low-rank path, and regularizes `z` toward a flat covariance spectrum with
//! `log ‖Z̃ᵀZ̃‖²_F`, `Z̃ = Z/‖Z‖_F` (a negated Rényi-2 entropy). Every adapter
//! path is linear, so a trained adapter folds back into `W`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerWeights};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Wq,
    Wk,
    Wv,
    Wo,
    W1,
    W2,
}

impl Target {
    pub const ALL: [Target; 6] = [
        Target::Wq,
        Target::Wk,
        Target::Wv,
        Target::Wo,
        Target::W1,
        Target::W2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Wq => "wq",
            Target::Wk => "wk",
            Target::Wv => "wv",
            Target::Wo => "wo",
            Target::W1 => "w1",
            Target::W2 => "w2",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Params(format!("unknown adapter target {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Lora,
    Elora,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Lora => "lora",
            Variant::Elora => "elora",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterSpec {
    pub variant: Variant,
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Target>,
    /// λ; only used by ELoRA.
    pub entropy_weight: f64,
    /// Frobenius-normalize `Z` before the entropy loss. `false` is the raw ablation.
    pub normalize_entropy: bool,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec {
            variant: Variant::Lora,
            rank: 8,
            alpha: 16.0,
            targets: vec![Target::Wq, Target::Wv],
            entropy_weight: 0.1,
            normalize_entropy: true,
        }
    }
}

impl AdapterSpec {
    pub fn lora(rank: usize) -> Self {
        AdapterSpec {
            rank,
            ..Self::default()
        }
    }

    pub fn elora(rank: usize) -> Self {
        AdapterSpec {
            variant: Variant::Elora,
            rank,
            ..Self::default()
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// λ as applied to the objective: zero for plain LoRA.
    pub fn effective_entropy_weight(&self) -> f64 {
        match self.variant {
            Variant::Lora => 0.0,
            Variant::Elora => self.entropy_weight,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Params("adapter needs at least one target".into()));
        }
        if !(self.entropy_weight >= 0.0) {
            return Err(Error::Params(format!(
                "entropy weight must be >= 0, got {}",
                self.entropy_weight
            )));
        }
        for &t in &self.targets {
            let (din, dout) = config.target_dims(t);
            if self.rank < 1 || self.rank > din.min(dout) {
                return Err(Error::Params(format!(
                    "rank {} outside 1..={} for target {t}",
                    self.rank,
                    din.min(dout)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer<T: Scalar> {
    /// `[d_in × r]`
    pub a: Tensor<T>,
    /// `[r × d_out]`
    pub b: Tensor<T>,
    /// `[d_in × d_in]`, ELoRA only.
    pub e: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterWeights<T: Scalar = f32> {
    pub spec: AdapterSpec,
    pub layers: BTreeMap<(usize, Target), AdapterLayer<T>>,
}

pub fn tensor_name(layer: usize, target: Target, part: &str) -> String {
    format!("{layer}.{target}.{part}")
}

/// Parses `<layer>.<target>.<part>`.
pub fn parse_tensor_name(name: &str) -> Option<(usize, Target, &str)> {
    let mut it = name.split('.');
    let layer = it.next()?.parse().ok()?;
    let target = it.next()?.parse().ok()?;
    let part = it.next()?;
    it.next().is_none().then_some((layer, target, part))
}

impl<T: Scalar> AdapterWeights<T> {
    /// A ~ N(0, 0.02), B = 0, E = I; one adapter per (layer, target).
    pub fn init(spec: &AdapterSpec, config: &ModelConfig, seed: u64) -> Result<Self> {
        spec.validate(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, ADAPTER_INIT_STD).expect("positive std");
        let mut layers = BTreeMap::new();
        for layer in 0..config.n_layers {
            for &target in &spec.targets {
                let (din, dout) = config.target_dims(target);
                let a_data = (0..din * spec.rank)
                    .map(|_| T::of(dist.sample(&mut rng)))
                    .collect();
                let a = Tensor::new(vec![din, spec.rank], a_data)?.with_grad();
                let b = Tensor::zeros(&[spec.rank, dout]).with_grad();
                let e = (spec.variant == Variant::Elora).then(|| Tensor::identity(din).with_grad());
                layers.insert((layer, target), AdapterLayer { a, b, e });
            }
        }
        Ok(AdapterWeights {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (&(layer, target), l) in &self.layers {
            out.push((tensor_name(layer, target, "A"), &l.a));
            out.push((tensor_name(layer, target, "B"), &l.b));
            if let Some(e) = &l.e {
                out.push((tensor_name(layer, target, "E"), e));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (&(layer, target), l) in &mut self.layers {
            out.push((tensor_name(layer, target, "A"), &mut l.a));
            out.push((tensor_name(layer, target, "B"), &mut l.b));
            if let Some(e) = &mut l.e {
                out.push((tensor_name(layer, target, "E"), e));
            }
        }
        out
    }

    /// Reassembles adapters from `<layer>.<target>.{A,B,E}` tensors.
    pub fn from_named(spec: AdapterSpec, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut parts: BTreeMap<(usize, Target), [Option<Tensor<T>>; 3]> = BTreeMap::new();
        for (name, t) in tensors {
            let (layer, target, part) = parse_tensor_name(&name).ok_or_else(|| {
                Error::Checkpoint(format!("unrecognized adapter tensor {name:?}"))
            })?;
            let slot = match part {
                "A" => 0,
                "B" => 1,
                "E" => 2,
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "unrecognized adapter tensor {name:?}"
                    )))
                }
            };
            parts.entry((layer, target)).or_default()[slot] = Some(t);
        }
        let mut layers = BTreeMap::new();
        for ((layer, target), [a, b, e]) in parts {
            let a = a.ok_or_else(|| Error::MissingTensor(tensor_name(layer, target, "A")))?;
            let b = b.ok_or_else(|| Error::MissingTensor(tensor_name(layer, target, "B")))?;
            if spec.variant == Variant::Elora && e.is_none() {
                return Err(Error::MissingTensor(tensor_name(layer, target, "E")));
            }
            let (din, r) = a.dims2();
            if b.dims2().0 != r || e.as_ref().is_some_and(|e| e.shape() != [din, din]) {
                return Err(Error::Shape(format!(
                    "inconsistent adapter shapes at {layer}.{target}"
                )));
            }
            layers.insert((layer, target), AdapterLayer { a, b, e });
        }
        Ok(AdapterWeights { spec, layers })
    }

    pub fn set_trainable(&mut self, on: bool) {
        for (_, t) in self.named_mut() {
            t.set_requires_grad(on);
        }
    }

    pub fn cast<U: Scalar>(&self) -> AdapterWeights<U> {
        let layers = self
            .layers
            .iter()
            .map(|(&k, l)| {
                (
                    k,
                    AdapterLayer {
                        a: l.a.cast(),
                        b: l.b.cast(),
                        e: l.e.as_ref().map(Tensor::cast),
                    },
                )
            })
            .collect();
        AdapterWeights {
            spec: self.spec.clone(),
            layers,
        }
    }

    /// The linear update this adapter adds to its target: `(α/r)·A·B`, or
    /// `(α/r)·E·A·B` for ELoRA.
    pub fn delta_matrix(&self, layer: usize, target: Target) -> Result<Tensor<T>> {
        let l = self
            .layers
            .get(&(layer, target))
            .ok_or_else(|| Error::MissingTensor(format!("{layer}.{target}")))?;
        let ab = l.a.matmul(&l.b)?;
        let ab = match &l.e {
            Some(e) => e.matmul(&ab)?,
            None => ab,
        };
        let s = T::of(self.spec.scale());
        let data = ab.data().iter().map(|&x| x * s).collect();
        Tensor::new(ab.shape().to_vec(), data)
    }

    /// Folds every adapter into a copy of `base`.
    pub fn merge_into(&self, base: &TransformerWeights<T>) -> Result<TransformerWeights<T>> {
        let mut out = base.clone();
        for &(layer, target) in self.layers.keys() {
            let w = out
                .layers
                .get_mut(layer)
                .ok_or_else(|| Error::Shape(format!("adapter for missing layer {layer}")))?
                .target_mut(target);
            *w = merge(w, &self.delta_matrix(layer, target)?)?;
        }
        Ok(out)
    }
}

/// `W + Δ`, elementwise.
pub fn merge<T: Scalar>(w: &Tensor<T>, delta: &Tensor<T>) -> Result<Tensor<T>> {
    if w.shape() != delta.shape() {
        return Err(Error::Shape(format!(
            "merge of {:?} and {:?}",
            w.shape(),
            delta.shape()
        )));
    }
    let data = w
        .data()
        .iter()
        .zip(delta.data())
        .map(|(&a, &b)| a + b)
        .collect();
    let mut out = Tensor::new(w.shape().to_vec(), data)?;
    out.set_requires_grad(w.requires_grad());
    Ok(out)
}

/// One adapter recorded on a tape.
pub struct BoundAdapter {
    pub a: Var,
    pub b: Var,
    pub e: Option<Var>,
    pub scale: f64,
}

impl BoundAdapter {
    /// `xW + (α/r)·(zA)B` with `z = xE` (ELoRA) or `z = x` (LoRA). Returns the
    /// output and, for ELoRA, the captured `z`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        w: Var,
    ) -> Result<(Var, Option<Var>)> {
        let base = tape.matmul(x, w)?;
        let z = match self.e {
            Some(e) => Some(tape.matmul(x, e)?),
            None => None,
        };
        let za = tape.matmul(z.unwrap_or(x), self.a)?;
        let zab = tape.matmul(za, self.b)?;
        let delta = tape.scale(zab, T::of(self.scale));
        let y = tape.add(base, delta)?;
        Ok((y, z))
    }
}

pub struct BoundAdapters {
    layers: BTreeMap<(usize, Target), BoundAdapter>,
    pub(crate) names: Vec<(String, Var)>,
}

impl BoundAdapters {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, w: &AdapterWeights<T>) -> Self {
        let vars: Vec<(String, Var)> = w
            .named()
            .into_iter()
            .map(|(n, t)| (n, tape.leaf(t)))
            .collect();
        Self::from_vars(&w.spec, vars).expect("adapter tensors are complete")
    }

    /// Assembles bound adapters from leaves named `<layer>.<target>.{A,B,E}`.
    pub fn from_vars(spec: &AdapterSpec, names: Vec<(String, Var)>) -> Result<Self> {
        let scale = spec.scale();
        let mut parts: BTreeMap<(usize, Target), [Option<Var>; 3]> = BTreeMap::new();
        for (name, v) in &names {
            let (layer, target, part) = parse_tensor_name(name)
                .ok_or_else(|| Error::Params(format!("unrecognized adapter tensor {name:?}")))?;
            let slot = ["A", "B", "E"]
                .iter()
                .position(|p| *p == part)
                .ok_or_else(|| Error::Params(format!("unrecognized adapter tensor {name:?}")))?;
            parts.entry((layer, target)).or_default()[slot] = Some(*v);
        }
        let mut layers = BTreeMap::new();
        for ((layer, target), [a, b, e]) in parts {
            let a = a.ok_or_else(|| Error::MissingTensor(tensor_name(layer, target, "A")))?;
            let b = b.ok_or_else(|| Error::MissingTensor(tensor_name(layer, target, "B")))?;
            if spec.variant == Variant::Elora && e.is_none() {
                return Err(Error::MissingTensor(tensor_name(layer, target, "E")));
            }
            layers.insert((layer, target), BoundAdapter { a, b, e, scale });
        }
        Ok(BoundAdapters { layers, names })
    }

    pub fn get(&self, layer: usize, target: Target) -> Option<&BoundAdapter> {
        self.layers.get(&(layer, target))
    }
}

/// `log ‖Z̃ᵀZ̃‖²_F` with `Z̃ = Z/‖Z‖_F` when `normalize`, else `log ‖ZᵀZ‖²_F`.
///
/// Normalized, the value lies in `[log(1/min(N,d)), 0]`: the lower end is a flat
/// spectrum (maximal entropy), `0` is rank one.
pub fn entropy_loss<T: Scalar>(tape: &mut Tape<T>, z: Var, normalize: bool) -> Result<Var> {
    if tape.shape(z).len() != 2 {
        return Err(Error::Shape(format!(
            "entropy loss needs [N×d], got {:?}",
            tape.shape(z)
        )));
    }
    if tape.value(z).iter().all(|&x| x == T::zero()) {
        return Err(Error::Contract(
            "entropy loss of an all-zero matrix is undefined".into(),
        ));
    }
    let gram = tape.matmul_t(z, true, z, false)?;
    let sq = tape.mul(gram, gram)?;
    let fro2 = tape.sum(sq);
    let log_fro2 = tape.ln(fro2);
    if !normalize {
        return Ok(log_fro2);
    }
    // ‖Z̃ᵀZ̃‖² = ‖ZᵀZ‖² / ‖Z‖⁴
    let zz = tape.mul(z, z)?;
    let norm2 = tape.sum(zz);
    let log_norm2 = tape.ln(norm2);
    let twice = tape.scale(log_norm2, T::of(2.0));
    tape.sub(log_fro2, twice)
}

/// Mean entropy loss over every captured `Z`; `None` when nothing was captured.
pub fn mean_entropy_loss<T: Scalar>(
    tape: &mut Tape<T>,
    captured: &[Var],
    normalize: bool,
) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &z in captured {
        let l = entropy_loss(tape, z, normalize)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    Ok(acc.map(|a| tape.scale(a, T::of(1.0 / captured.len() as f64))))
}

/// `task + λ·entropy`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    task: Var,
    entropy: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Params(format!(
            "entropy weight must be >= 0, got {lambda}"
        )));
    }
    match entropy {
        Some(e) if lambda > 0.0 => {
            let w = tape.scale(e, T::of(lambda));
            tape.add(task, w)
        }
        _ => Ok(task),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::VOCAB_SIZE;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            vocab_size: VOCAB_SIZE,
        }
    }

    fn entropy_of(rows: &[&[f64]], normalize: bool) -> f64 {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(&Tensor::from_rows(rows).unwrap());
        let l = entropy_loss(&mut tape, z, normalize).unwrap();
        tape.scalar_value(l)
    }

    #[test]
    fn entropy_loss_examples() {
        let row: &[f64] = &[2.0, -1.0, 3.0];
        assert!((entropy_of(&[&[1.0, 0.0], &[0.0, 1.0]], true) - 0.5f64.ln()).abs() < 1e-12);
        assert!(entropy_of(&[row; 4], true).abs() < 1e-12);
        let base = entropy_of(&[&[1.0, 2.0], &[0.5, -1.0], &[3.0, 0.1]], true);
        for c in [1e-3, -2.0, 1e3] {
            let scaled = entropy_of(&[&[c, 2.0 * c], &[0.5 * c, -c], &[3.0 * c, 0.1 * c]], true);
            assert!((scaled - base).abs() < 1e-9);
        }
        // Unnormalized: I₂ gives log 2.
        assert!((entropy_of(&[&[1.0, 0.0], &[0.0, 1.0]], false) - 2f64.ln()).abs() < 1e-12);
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(&Tensor::zeros(&[3, 2]));
        assert!(entropy_loss(&mut tape, z, true).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let ce = tape.leaf(&Tensor::scalar(1.0));
        let ent = tape.leaf(&Tensor::scalar(-0.693));
        let only = total_loss(&mut tape, ce, Some(ent), 0.0).unwrap();
        assert_eq!(tape.scalar_value(only), 1.0);
        let t = total_loss(&mut tape, ce, Some(ent), 1.0).unwrap();
        assert!((tape.scalar_value(t) - 0.307).abs() < 1e-12);
        assert!(total_loss(&mut tape, ce, Some(ent), -1.0).is_err());
    }

    #[test]
    fn spec_validation() {
        let c = cfg();
        assert!(AdapterSpec::lora(8).validate(&c).is_ok());
        assert!(AdapterSpec::lora(9).validate(&c).is_err());
        assert!(AdapterSpec::lora(0).validate(&c).is_err());
        let neg = AdapterSpec {
            entropy_weight: -0.1,
            ..AdapterSpec::elora(2)
        };
        assert!(neg.validate(&c).is_err());
        let none = AdapterSpec {
            targets: vec![],
            ..AdapterSpec::lora(2)
        };
        assert!(none.validate(&c).is_err());
        assert_eq!(AdapterSpec::lora(2).effective_entropy_weight(), 0.0);
        assert_eq!(AdapterSpec::elora(2).effective_entropy_weight(), 0.1);
    }

    #[test]
    fn init_layout() {
        let spec = AdapterSpec {
            targets: vec![Target::Wq, Target::W1, Target::W2],
            ..AdapterSpec::elora(4)
        };
        let w = AdapterWeights::<f32>::init(&spec, &cfg(), 1).unwrap();
        assert_eq!(w.layers.len(), 6);
        let l = &w.layers[&(1, Target::W2)];
        assert_eq!(l.a.shape(), &[16, 4]);
        assert_eq!(l.b.shape(), &[4, 8]);
        assert_eq!(l.e.as_ref().unwrap(), &Tensor::identity(16).with_grad());
        assert!(l.b.data().iter().all(|&x| x == 0.0));
        let names: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"0.wq.E".to_owned()));
        assert_eq!(parse_tensor_name("1.w2.B"), Some((1, Target::W2, "B")));
        assert_eq!(parse_tensor_name("x.w2.B"), None);
    }

    #[test]
    fn delta_is_zero_at_init_and_unknown_target_errors() {
        let w = AdapterWeights::<f64>::init(&AdapterSpec::lora(2), &cfg(), 2).unwrap();
        assert!(w
            .delta_matrix(0, Target::Wq)
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 0.0));
        assert!(matches!(
            w.delta_matrix(0, Target::Wk),
            Err(Error::MissingTensor(_))
        ));
        assert!(matches!(
            w.delta_matrix(5, Target::Wq),
            Err(Error::MissingTensor(_))
        ));
    }

    #[test]
    fn elora_with_identity_matches_lora_delta() {
        let mut lora = AdapterWeights::<f64>::init(&AdapterSpec::lora(2), &cfg(), 3).unwrap();
        for l in lora.layers.values_mut() {
            l.b.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x = (i as f64 * 0.37).sin());
        }
        let mut elora = AdapterWeights::<f64>::init(&AdapterSpec::elora(2), &cfg(), 3).unwrap();
        for (k, l) in elora.layers.iter_mut() {
            l.a = lora.layers[k].a.clone();
            l.b = lora.layers[k].b.clone();
        }
        for &k in lora.layers.keys() {
            assert_eq!(
                lora.delta_matrix(k.0, k.1).unwrap(),
                elora.delta_matrix(k.0, k.1).unwrap()
            );
        }
    }

    #[test]
    fn merge_checks_shapes() {
        let w = Tensor::<f32>::zeros(&[2, 3]);
        assert!(merge(&w, &Tensor::zeros(&[3, 2])).is_err());
        assert_eq!(merge(&w, &Tensor::zeros(&[2, 3])).unwrap(), w);
    }
}
