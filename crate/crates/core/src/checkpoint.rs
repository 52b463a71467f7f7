//! Binary named-tensor store.
//!
//! Layout: `b"LRLB"`, version `u32`, tensor count `u32`, then per tensor a
//! `u16` name length, the UTF-8 name, `u8` ndim, `u32` dims and `f32` data.
//! Every integer and float is little-endian. Scalars a loader cannot infer
//! from shapes (head count, adapter α, λ) travel as one-element `meta.*` tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::adapters::{AdapterSpec, AdapterWeights, Variant};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerWeights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LRLB";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(
        &u32::try_from(tensors.len())
            .map_err(|_| Error::Checkpoint("too many tensors".into()))?
            .to_le_bytes(),
    );
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {name:?}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let ndim = u8::try_from(t.shape().len())
            .map_err(|_| Error::Checkpoint(format!("{name}: too many dims")))?;
        out.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Checkpoint(format!("{name}: dim too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Decodes tensors in file order.
pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let ndim = r.take(1)?[0] as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode(tensors)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn meta(name: &str, v: f32) -> (String, Tensor<f32>) {
    (
        format!("meta.{name}"),
        Tensor::new(vec![1], vec![v]).expect("scalar"),
    )
}

fn take_meta(map: &mut BTreeMap<String, Tensor<f32>>, name: &str) -> Result<f32> {
    let key = format!("meta.{name}");
    let t = map.remove(&key).ok_or(Error::MissingTensor(key))?;
    t.data()
        .first()
        .copied()
        .ok_or_else(|| Error::Checkpoint(format!("empty meta.{name}")))
}

fn plain(t: &Tensor<f32>) -> Tensor<f32> {
    let mut t = t.clone();
    t.set_requires_grad(false);
    t
}

pub fn model_tensors(w: &TransformerWeights<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out: Vec<_> = w.named().into_iter().map(|(n, t)| (n, plain(t))).collect();
    out.push(meta("n_heads", w.config.n_heads as f32));
    out
}

pub fn save_model(path: &Path, w: &TransformerWeights<f32>) -> Result<()> {
    save_tensors(path, &model_tensors(w))
}

/// Loads a model; the config is recovered from tensor shapes and `meta.n_heads`.
pub fn load_model(path: &Path) -> Result<TransformerWeights<f32>> {
    let mut map: BTreeMap<String, Tensor<f32>> = load_tensors(path)?.into_iter().collect();
    let n_heads = take_meta(&mut map, "n_heads")? as usize;
    let dims = |map: &BTreeMap<String, Tensor<f32>>, name: &str| -> Result<(usize, usize)> {
        let t = map
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_owned()))?;
        if t.shape().len() != 2 {
            return Err(Error::Checkpoint(format!(
                "{name}: expected a matrix, found {:?}",
                t.shape()
            )));
        }
        Ok(t.dims2())
    };
    let (vocab_size, d_model) = dims(&map, "tok_emb")?;
    let (max_seq_len, _) = dims(&map, "pos_emb")?;
    let n_layers = (0..)
        .take_while(|i| map.contains_key(&format!("layers.{i}.wq")))
        .count();
    let d_ff = if n_layers > 0 {
        dims(&map, "layers.0.w1")?.1
    } else {
        4 * d_model
    };
    let config = ModelConfig {
        d_model,
        n_layers,
        n_heads,
        d_ff,
        max_seq_len,
        vocab_size,
    };
    config.validate()?;
    TransformerWeights::from_named(&config, map)
}

pub fn adapter_tensors(w: &AdapterWeights<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out: Vec<_> = w.named().into_iter().map(|(n, t)| (n, plain(t))).collect();
    out.push(meta("alpha", w.spec.alpha as f32));
    out.push(meta("entropy_weight", w.spec.entropy_weight as f32));
    out.push(meta(
        "normalize_entropy",
        if w.spec.normalize_entropy { 1.0 } else { 0.0 },
    ));
    out
}

pub fn save_adapter(path: &Path, w: &AdapterWeights<f32>) -> Result<()> {
    save_tensors(path, &adapter_tensors(w))
}

/// Loads adapters; variant, rank and targets are recovered from the tensors.
pub fn load_adapter(path: &Path) -> Result<AdapterWeights<f32>> {
    let mut map: BTreeMap<String, Tensor<f32>> = load_tensors(path)?.into_iter().collect();
    let alpha = take_meta(&mut map, "alpha")? as f64;
    let entropy_weight = take_meta(&mut map, "entropy_weight")? as f64;
    let normalize_entropy = take_meta(&mut map, "normalize_entropy")? != 0.0;
    let variant = if map.keys().any(|k| k.ends_with(".E")) {
        Variant::Elora
    } else {
        Variant::Lora
    };
    let first_a = map
        .iter()
        .find(|(k, _)| k.ends_with(".A"))
        .ok_or_else(|| Error::Checkpoint(format!("{}: no adapter tensors", path.display())))?;
    let rank = *first_a.1.shape().last().unwrap_or(&0);
    let mut targets: Vec<_> = map
        .keys()
        .filter_map(|k| crate::adapters::parse_tensor_name(k).map(|(_, t, _)| t))
        .collect();
    targets.sort();
    targets.dedup();
    let spec = AdapterSpec {
        variant,
        rank,
        alpha,
        targets,
        entropy_weight,
        normalize_entropy,
    };
    let mut w = AdapterWeights::from_named(spec, map)?;
    w.set_trainable(false);
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Target;

    fn config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 12,
            ..Default::default()
        }
    }

    #[test]
    fn model_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let w = TransformerWeights::<f32>::init(&config(), 3).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_model(&p1, &w).unwrap();
        let back = load_model(&p1).unwrap();
        assert_eq!(back.config, w.config);
        assert_eq!(back.checksum(), w.checksum());
        save_model(&p2, &back).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(&fs::read(&p1).unwrap()[..4], b"LRLB");
    }

    #[test]
    fn adapter_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = AdapterSpec {
            targets: vec![Target::Wq, Target::W1],
            ..AdapterSpec::elora(2)
        };
        let mut w = AdapterWeights::<f32>::init(&spec, &config(), 9).unwrap();
        w.layers.values_mut().for_each(|l| {
            l.b.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x = i as f32 * 0.1)
        });
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_adapter(&p1, &w).unwrap();
        let back = load_adapter(&p1).unwrap();
        assert_eq!(back.spec.variant, Variant::Elora);
        assert_eq!(back.spec.rank, 2);
        assert_eq!(back.spec.targets, vec![Target::Wq, Target::W1]);
        for ((_, a), (_, b)) in back.named().iter().zip(w.named()) {
            assert_eq!(a.data(), b.data());
        }
        save_adapter(&p2, &back).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_inputs() {
        let t = vec![(
            "x".to_owned(),
            Tensor::new(vec![2, 3], vec![1.0f32; 6]).unwrap(),
        )];
        let bytes = encode(&t).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 2 + 1 + 1 + 8 + 24);
        assert_eq!(decode(&bytes).unwrap(), t);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
        assert!(load_model(Path::new("/nonexistent/model.ckpt")).is_err());
    }

    #[test]
    fn missing_tensor_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let w = TransformerWeights::<f32>::init(&config(), 3).unwrap();
        let tensors: Vec<_> = model_tensors(&w)
            .into_iter()
            .filter(|(n, _)| n != "layers.1.w2")
            .collect();
        let p = dir.path().join("m.ckpt");
        save_tensors(&p, &tensors).unwrap();
        assert!(matches!(load_model(&p), Err(Error::MissingTensor(n)) if n == "layers.1.w2"));
    }
}
