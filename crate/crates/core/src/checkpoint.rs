//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SNDL"  u32 version  u32 n + n bytes of JSON config  u32 tensor count
//! per tensor: u32 n + n bytes of name, u32 rank, rank × u32 extent, u64 payload offset
//! payload: f32 values of every tensor, offsets counted from the payload start
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{named_params, Module};
use crate::model::SundialModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SNDL";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes the configuration and every parameter.
pub fn to_bytes(model: &SundialModel) -> Result<Vec<u8>> {
    let params = named_params(model);
    let config = serde_json::to_vec(&model.config).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.numel() as u64;
    }
    for (_, t) in &params {
        for v in t.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes to a sibling temporary file first so a failed save never leaves
/// a partial checkpoint at `path`.
pub fn save(model: &SundialModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Reads only the configuration.
pub fn read_config(bytes: &[u8]) -> Result<ModelConfig> {
    let mut r = Reader { buf: bytes, pos: 0 };
    header(&mut r)
}

fn header(r: &mut Reader) -> Result<ModelConfig> {
    if r.buf.len() < 4 || &r.buf[..4] != MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    r.pos = 4;
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let n = r.u32("config length")? as usize;
    let text = r.take(n, "config")?;
    let cfg: ModelConfig =
        serde_json::from_slice(text).map_err(|e| Error::Corrupt(format!("config does not parse: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a checkpoint, checking every tensor against the shapes its
/// configuration implies. Nothing is returned unless all of it is valid.
pub fn from_bytes(bytes: &[u8]) -> Result<SundialModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let cfg = header(&mut r)?;
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let n = r.u32("tensor name")? as usize;
        let name = String::from_utf8(r.take(n, "tensor name")?.to_vec())
            .map_err(|_| Error::Corrupt(format!("tensor {i} has a non-UTF-8 name")))?;
        let rank = r.u32(&name)? as usize;
        if rank > 8 {
            return Err(Error::Corrupt(format!("tensor {name} claims rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32(&name).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64(&name)?;
        entries.push(Entry { name, shape, offset });
    }
    let payload = &bytes[r.pos..];

    // the shapes come from a freshly built model of the stored configuration
    let mut model = SundialModel::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected = named_params(&model);
    if entries.len() != expected.len() {
        let names: Vec<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
        let missing: Vec<&str> = names
            .iter()
            .copied()
            .filter(|n| !entries.iter().any(|e| e.name == *n))
            .collect();
        let extra: Vec<&str> =
            entries.iter().map(|e| e.name.as_str()).filter(|n| !names.contains(n)).collect();
        return Err(Error::Corrupt(format!(
            "tensor table has {} entries, the configuration needs {} (missing: {missing:?}, unexpected: {extra:?})",
            entries.len(),
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(entries.len());
    for (name, t) in &expected {
        let e = entries
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::Corrupt(format!("tensor {name} is missing")))?;
        if e.shape != t.shape() {
            return Err(Error::Corrupt(format!(
                "tensor {name} has shape {:?}, the configuration implies {:?}",
                e.shape,
                t.shape()
            )));
        }
        let len = 4 * t.numel();
        let start = usize::try_from(e.offset).unwrap_or(usize::MAX);
        if start.checked_add(len).is_none_or(|end| end > payload.len()) {
            return Err(Error::Corrupt(format!("tensor {name} extends past the end of the file")));
        }
        let values: Vec<f32> = payload[start..start + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        loaded.push(Tensor::param(values, &e.shape)?);
    }
    let mut k = 0;
    model.visit_mut("", &mut |_, t| {
        *t = loaded[k].clone();
        k += 1;
    });
    Ok(model)
}

pub fn load(path: impl AsRef<Path>) -> Result<SundialModel> {
    from_bytes(&fs::read(path)?)
}

/// Configuration fields that change the parameter set or the computation;
/// sampling-step count and cache use are inference settings.
pub fn architecture_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    a.diff(b)
        .into_iter()
        .filter(|f| f != "sample_steps" && f != "kv_cache")
        .collect()
}

/// Loads a checkpoint that must share `expected`'s architecture.
pub fn load_matching(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<SundialModel> {
    let model = load(path)?;
    let diff = architecture_diff(&model.config, expected);
    if !diff.is_empty() {
        return Err(Error::Architecture(diff));
    }
    Ok(model)
}
