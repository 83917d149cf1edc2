//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes  "METASRCK"
//! version  u32
//! config   u32 length + UTF-8 "key=value\n" lines
//! count    u32
//! tensor*  u32 name length, name, u8 dtype (0 = f32, 1 = f64),
//!          u32 rank, rank x u64 dims, little-endian values
//! ```
//!
//! All integers are little-endian. Parameters are stored as `param/<name>`;
//! optimizer moments, when present, as `adam.m/<name>` and `adam.v/<name>`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{MetaSr, ModelConfig};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 8] = b"METASRCK";
pub const FORMAT_VERSION: u32 = 1;

/// Where training stood when the checkpoint was written.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingMeta {
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    pub learning_rate: f64,
}

pub struct Checkpoint<T: Element> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub adam: Option<AdamState<T>>,
    pub meta: TrainingMeta,
    /// Unrecognized config keys, preserved for inspection.
    pub extra: BTreeMap<String, String>,
}

impl<T: Element> Checkpoint<T> {
    pub fn into_model(self) -> Result<MetaSr<T>> {
        MetaSr::from_store(self.config, self.store)
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<T: Element>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE);
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
}

pub fn encode<T: Element>(model: &MetaSr<T>, adam: Option<&AdamState<T>>, meta: &TrainingMeta) -> Vec<u8> {
    let mut kv = model.config.to_kv();
    kv.push(("train.step".into(), meta.step.to_string()));
    kv.push(("train.epoch".into(), meta.epoch.to_string()));
    kv.push(("train.seed".into(), meta.seed.to_string()));
    kv.push(("train.learning_rate".into(), meta.learning_rate.to_string()));
    kv.push(("train.has_optimizer".into(), adam.is_some().to_string()));
    if let Some(a) = adam {
        kv.push(("adam.step_count".into(), a.step_count.to_string()));
        kv.push(("adam.learning_rate".into(), a.learning_rate.to_string()));
        kv.push(("adam.beta1".into(), a.beta1.to_string()));
        kv.push(("adam.beta2".into(), a.beta2.to_string()));
        kv.push(("adam.epsilon".into(), a.epsilon.to_string()));
    }
    let text: String = kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());
    let n = model.store.len() * if adam.is_some() { 3 } else { 1 };
    put_u32(&mut out, n as u32);
    for (_, name, t) in model.store.iter() {
        put_tensor(&mut out, &format!("param/{name}"), t.shape(), t.data());
    }
    if let Some(a) = adam {
        for (prefix, moments) in [("adam.m", &a.first_moment), ("adam.v", &a.second_moment)] {
            for ((_, name, t), m) in model.store.iter().zip(moments) {
                put_tensor(&mut out, &format!("{prefix}/{name}"), t.shape(), m);
            }
        }
    }
    out
}

/// Writes atomically: the file appears complete or not at all.
pub fn save<T: Element>(path: &Path, model: &MetaSr<T>, adam: Option<&AdamState<T>>, meta: &TrainingMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = PathBuf::from(format!("{}.partial", path.display()));
    std::fs::write(&tmp, encode(model, adam, meta)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(bad(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct RawTensor {
    dtype: u8,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl RawTensor {
    fn decode<T: Element>(&self) -> Vec<T> {
        match self.dtype {
            0 => self.bytes.chunks_exact(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
            _ => self.bytes.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
        }
    }
}

/// Parses a checkpoint. Values stored in another precision are converted.
pub fn decode<T: Element>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8).ok() != Some(&MAGIC[..]) {
        return Err(bad(path, "not a metasr checkpoint (bad magic bytes)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(
            path,
            format!("format version {version} is not supported (this build reads version {FORMAT_VERSION})"),
        ));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| bad(path, "config block is not UTF-8"))?;
    let mut kv = HashMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(path, format!("config line without '=': {line}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let config = ModelConfig::from_kv(&kv).map_err(|e| bad(path, e.to_string()))?;

    let count = r.u32()? as usize;
    let mut tensors: Vec<(String, RawTensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| bad(path, "tensor name is not UTF-8"))?;
        let dtype = r.take(1)?[0];
        let width = match dtype {
            0 => 4,
            1 => 8,
            d => return Err(bad(path, format!("tensor {name} has unknown dtype {d}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * width)?.to_vec();
        tensors.push((name, RawTensor { dtype, shape, bytes }));
    }
    if r.pos != bytes.len() {
        return Err(bad(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut store = ParamStore::new();
    let mut moments: HashMap<String, Vec<T>> = HashMap::new();
    for (name, raw) in &tensors {
        if let Some(p) = name.strip_prefix("param/") {
            let t = Tensor::new(&raw.shape, raw.decode()).map_err(|e| bad(path, e.to_string()))?;
            store.insert(p, t).map_err(|e| bad(path, e.to_string()))?;
        } else if name.starts_with("adam.") {
            moments.insert(name.clone(), raw.decode());
        } else {
            return Err(bad(path, format!("unexpected tensor {name}")));
        }
    }

    let num = |key: &str| -> Result<u64> {
        kv.get(key)
            .ok_or_else(|| bad(path, format!("missing {key}")))?
            .parse()
            .map_err(|_| bad(path, format!("{key} is not an integer")))
    };
    let real = |key: &str| -> Result<f64> {
        kv.get(key)
            .ok_or_else(|| bad(path, format!("missing {key}")))?
            .parse()
            .map_err(|_| bad(path, format!("{key} is not a number")))
    };
    let meta = TrainingMeta {
        step: num("train.step")?,
        epoch: num("train.epoch")?,
        seed: num("train.seed")?,
        learning_rate: real("train.learning_rate")?,
    };
    let adam = if kv.get("train.has_optimizer").map(String::as_str) == Some("true") {
        let mut first = Vec::with_capacity(store.len());
        let mut second = Vec::with_capacity(store.len());
        for (_, name, t) in store.iter() {
            for (prefix, dst) in [("adam.m", &mut first), ("adam.v", &mut second)] {
                let m = moments
                    .remove(&format!("{prefix}/{name}"))
                    .ok_or_else(|| bad(path, format!("missing {prefix}/{name}")))?;
                if m.len() != t.numel() {
                    return Err(bad(path, format!("{prefix}/{name} has the wrong length")));
                }
                dst.push(m);
            }
        }
        Some(AdamState {
            step_count: num("adam.step_count")?,
            first_moment: first,
            second_moment: second,
            learning_rate: real("adam.learning_rate")?,
            beta1: real("adam.beta1")?,
            beta2: real("adam.beta2")?,
            epsilon: real("adam.epsilon")?,
        })
    } else {
        None
    };
    let known: Vec<String> = config.to_kv().into_iter().map(|(k, _)| k).collect();
    let extra = kv
        .into_iter()
        .filter(|(k, _)| !known.contains(k) && !k.starts_with("train.") && !k.starts_with("adam."))
        .collect();
    Ok(Checkpoint {
        config,
        store,
        adam,
        meta,
        extra,
    })
}

pub fn load<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads a checkpoint and builds the model it describes.
pub fn load_model<T: Element>(path: &Path) -> Result<MetaSr<T>> {
    let ck = load(path)?;
    ck.into_model().map_err(|e| bad(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureNetConfig;
    use crate::meta_upscale::WeightNetConfig;
    use crate::model::Backend;

    fn tiny(backend: Backend) -> ModelConfig {
        let mut weight_net = WeightNetConfig::new(4, 3);
        weight_net.hidden = 6;
        ModelConfig {
            features: FeatureNetConfig {
                num_blocks: 1,
                convs_per_block: 1,
                growth_rate: 2,
                feature_channels: 4,
                image_channels: 3,
                kernel_size: 3,
            },
            weight_net,
            backend,
        }
    }

    #[test]
    fn round_trip_params_and_optimizer() {
        let m = MetaSr::<f32>::init(tiny(Backend::Meta), 9).unwrap();
        let mut adam = AdamState::new(&m.store, 3e-4).unwrap();
        adam.step_count = 17;
        adam.first_moment[0][0] = 0.25;
        let meta = TrainingMeta {
            step: 17,
            epoch: 2,
            seed: 5,
            learning_rate: 0.1 + 0.2,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.ck");
        save(&p, &m, Some(&adam), &meta).unwrap();
        let ck = load::<f32>(&p).unwrap();
        assert_eq!(ck.config, m.config);
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.adam.as_ref(), Some(&adam));
        for ((_, n1, a), (_, n2, b)) in ck.store.iter().zip(m.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(ck.into_model().is_ok());
    }

    #[test]
    fn rejects_foreign_and_damaged_files() {
        let m = MetaSr::<f32>::init(tiny(Backend::BiConv), 1).unwrap();
        let bytes = encode(&m, None, &TrainingMeta::default());
        let p = Path::new("x.ck");
        assert!(decode::<f32>(&bytes, p).unwrap().adam.is_none());

        let mut v = bytes.clone();
        v[8] = 99;
        let err = decode::<f32>(&v, p).err().unwrap().to_string();
        assert!(err.contains("version 99"), "{err}");

        assert!(matches!(decode::<f32>(b"PNG.....", p), Err(Error::Checkpoint { .. })));
        assert!(matches!(decode::<f32>(&bytes[..bytes.len() - 3], p), Err(Error::Checkpoint { .. })));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode::<f32>(&longer, p).is_err());
    }

    #[test]
    fn wrong_architecture_is_a_checkpoint_error() {
        let m = MetaSr::<f32>::init(tiny(Backend::Meta), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ck");
        save(&p, &m, None, &TrainingMeta::default()).unwrap();
        let mut ck = load::<f32>(&p).unwrap();
        ck.config.backend = Backend::BiConv;
        assert!(ck.into_model().is_err());
        assert!(matches!(load_model::<f32>(&dir.path().join("missing.ck")), Err(Error::Io { .. })));
    }

    #[test]
    fn f32_checkpoint_loads_as_f64() {
        let m = MetaSr::<f32>::init(tiny(Backend::MetaBi), 2).unwrap();
        let bytes = encode(&m, None, &TrainingMeta::default());
        let ck = decode::<f64>(&bytes, Path::new("x")).unwrap();
        let (_, _, a) = ck.store.iter().next().unwrap();
        let (_, _, b) = m.store.iter().next().unwrap();
        assert_eq!(a.data()[0], b.data()[0] as f64);
    }
}
