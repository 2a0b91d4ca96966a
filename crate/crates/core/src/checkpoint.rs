//! Binary checkpoints.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! "NTTC" | version | config length | config text (key=value lines)
//! tensor count | { name length | name | rank | dims... | f32 data } ...
//! ```
//!
//! Tensors are the model parameters followed by the optimizer moments,
//! stored as `adam.m/<name>` and `adam.v/<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::{write_atomic, Vocab};
use crate::decoder::{DecoderKind, MetaDropout};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::InitConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::Adam;

pub const MAGIC: &[u8; 4] = b"NTTC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub optimizer: Adam,
    /// Free-form provenance such as the training seed.
    pub extra: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Rebuilds the model structure and loads the stored weights into it.
    pub fn restore(&self) -> Result<(Model, ParamStore)> {
        let (model, mut store) = Model::build(&self.model, &self.vocab, 0)?;
        store.assign_from(&self.params)?;
        Ok((model, store))
    }
}

fn config_text(ck: &Checkpoint) -> String {
    let m = &ck.model;
    let mut kv: Vec<(String, String)> = vec![
        ("kind".into(), m.kind.to_string()),
        ("embed".into(), m.embed.to_string()),
        ("hidden".into(), m.hidden.to_string()),
        ("att_dim".into(), m.att_dim.to_string()),
        ("feature_dim".into(), m.feature_dim.to_string()),
        ("dropout_left".into(), format!("{:?}", m.dropout.left)),
        ("dropout_right".into(), format!("{:?}", m.dropout.right)),
        ("dropout_joint".into(), format!("{:?}", m.dropout.joint)),
        ("dropout_output".into(), format!("{:?}", m.dropout.output)),
        ("init_scale".into(), format!("{:?}", m.init.scale)),
        ("forget_bias".into(), format!("{:?}", m.init.forget_bias)),
        ("adam_beta1".into(), format!("{:?}", ck.optimizer.beta1)),
        ("adam_beta2".into(), format!("{:?}", ck.optimizer.beta2)),
        ("adam_eps".into(), format!("{:?}", ck.optimizer.eps)),
        ("adam_step".into(), ck.optimizer.step.to_string()),
        ("adam_lr".into(), format!("{:?}", ck.optimizer.lr)),
        ("vocab".into(), ck.vocab.tokens().collect::<Vec<_>>().join(" ")),
    ];
    kv.extend(ck.extra.iter().map(|(k, v)| (format!("extra.{k}"), v.clone())));
    let mut s = String::new();
    for (k, v) in kv {
        s.push_str(&k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    }
    s
}

fn push_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    push_u32(buf, name.len())?;
    buf.extend_from_slice(name.as_bytes());
    push_u32(buf, t.rank())?;
    for &d in t.shape() {
        push_u32(buf, d)?;
    }
    for &x in t.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(())
}

pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    if ck.optimizer.m.len() != ck.params.len() || ck.optimizer.v.len() != ck.params.len() {
        return Err(Error::Checkpoint("optimizer moments do not match the parameters".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = config_text(ck);
    push_u32(&mut buf, cfg.len())?;
    buf.extend_from_slice(cfg.as_bytes());
    push_u32(&mut buf, 3 * ck.params.len())?;
    for (name, t) in ck.params.iter() {
        push_tensor(&mut buf, name, t)?;
    }
    for (prefix, moments) in [("adam.m/", &ck.optimizer.m), ("adam.v/", &ck.optimizer.v)] {
        for ((name, _), t) in ck.params.iter().zip(moments) {
            push_tensor(&mut buf, &format!("{prefix}{name}"), t)?;
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {} (need {n}, have {})",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string("tensor name")?;
        let rank = self.u32(&name)?;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor '{name}' has implausible rank {rank}")));
        }
        let dims = (0..rank).map(|_| self.u32(&name)).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' is too large")))?;
        let bytes_len = count
            .checked_mul(4)
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' is too large")))?;
        let raw = self.take(bytes_len, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
        Ok((name, t))
    }
}

fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("config line {}: expected key=value", i + 1)))?;
        kv.insert(k.to_string(), v.to_string());
    }
    Ok(kv)
}

fn field<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = kv
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("config block lacks '{key}'")))?;
    raw.parse()
        .map_err(|_| Error::Checkpoint(format!("config field '{key}' has invalid value '{raw}'")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported format version {version} (expected {VERSION})")));
    }
    let kv = parse_config(&r.string("config block")?)?;
    let kind: DecoderKind = kv
        .get("kind")
        .ok_or_else(|| Error::Checkpoint("config block lacks 'kind'".into()))?
        .parse()
        .map_err(|e: Error| Error::Checkpoint(e.to_string()))?;
    let model = ModelConfig {
        kind,
        embed: field(&kv, "embed")?,
        hidden: field(&kv, "hidden")?,
        att_dim: field(&kv, "att_dim")?,
        feature_dim: field(&kv, "feature_dim")?,
        dropout: MetaDropout {
            left: field(&kv, "dropout_left")?,
            right: field(&kv, "dropout_right")?,
            joint: field(&kv, "dropout_joint")?,
            output: field(&kv, "dropout_output")?,
        },
        init: InitConfig {
            scale: field(&kv, "init_scale")?,
            forget_bias: field(&kv, "forget_bias")?,
        },
    };
    let vocab_text: String = kv
        .get("vocab")
        .ok_or_else(|| Error::Checkpoint("config block lacks 'vocab'".into()))?
        .split(' ')
        .map(|t| format!("{t}\n"))
        .collect();
    let vocab = Vocab::parse(&vocab_text).map_err(|e| Error::Checkpoint(format!("vocab: {e}")))?;

    let count = r.u32("tensor count")?;
    if count % 3 != 0 {
        return Err(Error::Checkpoint(format!("tensor count {count} is not a multiple of 3")));
    }
    let n = count / 3;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let (name, t) = r.tensor()?;
        params.insert(name, t)?;
    }
    let mut moments = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for (slot, prefix) in ["adam.m/", "adam.v/"].iter().enumerate() {
        for (pname, p) in params.iter() {
            let (name, t) = r.tensor()?;
            if name != format!("{prefix}{pname}") || t.shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected moment {prefix}{pname} {:?}, found {name} {:?}",
                    p.shape(),
                    t.shape()
                )));
            }
            moments[slot].push(t);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let [m, v] = moments;
    let optimizer = Adam {
        beta1: field(&kv, "adam_beta1")?,
        beta2: field(&kv, "adam_beta2")?,
        eps: field(&kv, "adam_eps")?,
        step: field(&kv, "adam_step")?,
        lr: field(&kv, "adam_lr")?,
        m,
        v,
    };
    let extra = kv
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok(Checkpoint {
        model,
        vocab,
        params,
        optimizer,
        extra,
    })
}

pub fn checkpoint_save(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(ck)?)
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}
