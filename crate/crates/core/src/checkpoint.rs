//! Binary tensor archive.
//!
//! Layout: `b"LT3R"`, version `u32` LE, header length `u64` LE, a JSON
//! header `{"metadata": .., "tensors": [..]}`, then the payload. Each tensor
//! entry records `name`, `dtype` (`f32`, `fp8e4m3` or `bool`), `shape`, and
//! `offset`/`length` in bytes from the start of the payload. Entries are
//! packed in ascending order without gaps. FP8 entries name an f32 entry that
//! holds one scale per row.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fp8::{Fp8Code, QuantAxis, QuantizedTensor};
use crate::model::{ModelConfig, ParamKind, ToyTransformer};
use crate::qlinear::{LinearMode, WeightOnlyLinear};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LT3R";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    Fp8e4m3,
    Bool,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::Fp8e4m3 | DType::Bool => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    metadata: Value,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    Fp8(Vec<u8>),
    Bool(Vec<bool>),
}

impl EntryData {
    fn dtype(&self) -> DType {
        match self {
            EntryData::F32(_) => DType::F32,
            EntryData::Fp8(_) => DType::Fp8e4m3,
            EntryData::Bool(_) => DType::Bool,
        }
    }

    fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::Fp8(v) => v.len(),
            EntryData::Bool(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EntryData,
    pub scale: Option<String>,
}

/// In-memory archive: free-form JSON metadata and ordered named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub metadata: Value,
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Archive(msg.into())
}

fn rows_of(shape: &[usize]) -> usize {
    match shape.len() {
        0 | 1 => 1,
        _ => shape[..shape.len() - 1].iter().product(),
    }
}

impl Archive {
    pub fn new(metadata: Value) -> Self {
        Archive {
            metadata,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    fn push(&mut self, entry: Entry) -> Result<()> {
        if self.index.contains_key(&entry.name) {
            return Err(corrupt(format!("duplicate entry {}", entry.name)));
        }
        if entry.shape.iter().product::<usize>() != entry.data.len() {
            return Err(corrupt(format!("entry {} has shape {:?} but {} elements", entry.name, entry.shape, entry.data.len())));
        }
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn push_f32(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.push(Entry {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: EntryData::F32(t.data().to_vec()),
            scale: None,
        })
    }

    pub fn push_bool(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<bool>) -> Result<()> {
        self.push(Entry {
            name: name.into(),
            shape: shape.to_vec(),
            data: EntryData::Bool(values),
            scale: None,
        })
    }

    /// Adds the codes under `name` and the row scales under `name.scale`.
    pub fn push_fp8(&mut self, name: impl Into<String>, q: &QuantizedTensor) -> Result<()> {
        let name = name.into();
        if q.axis() != QuantAxis::PerOutputRow {
            return Err(Error::InvalidArgument("only per-row FP8 tensors are archived".into()));
        }
        let scale = format!("{name}.scale");
        if self.index.contains_key(&scale) {
            return Err(corrupt(format!("duplicate entry {scale}")));
        }
        self.push(Entry {
            name,
            shape: q.shape().to_vec(),
            data: EntryData::Fp8(q.code_bytes()),
            scale: Some(scale.clone()),
        })?;
        let n = q.scales().len();
        self.push(Entry {
            name: scale,
            shape: vec![n],
            data: EntryData::F32(q.scales().to_vec()),
            scale: None,
        })
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.get(name).ok_or_else(|| corrupt(format!("missing entry {name}")))?;
        match &e.data {
            EntryData::F32(v) => Tensor::new(e.shape.clone(), v.clone()),
            EntryData::Fp8(_) => Ok(self.quantized(name)?.dequantize()),
            EntryData::Bool(_) => Err(corrupt(format!("entry {name} is bool, not a tensor"))),
        }
    }

    pub fn quantized(&self, name: &str) -> Result<QuantizedTensor> {
        let e = self.get(name).ok_or_else(|| corrupt(format!("missing entry {name}")))?;
        let (EntryData::Fp8(codes), Some(scale)) = (&e.data, &e.scale) else {
            return Err(corrupt(format!("entry {name} is not fp8e4m3")));
        };
        let s = self.get(scale).ok_or_else(|| corrupt(format!("missing scale entry {scale}")))?;
        let EntryData::F32(scales) = &s.data else {
            return Err(corrupt(format!("scale entry {scale} is not f32")));
        };
        if codes.iter().any(|&c| Fp8Code(c).is_nan()) {
            return Err(corrupt(format!("entry {name} holds NaN codes")));
        }
        QuantizedTensor::from_parts(
            codes.iter().map(|&c| Fp8Code(c)).collect(),
            scales.clone(),
            QuantAxis::PerOutputRow,
            e.shape.clone(),
        )
        .map_err(|err| corrupt(format!("entry {name}: {err}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let offset = payload.len() as u64;
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                EntryData::Fp8(v) => payload.extend_from_slice(v),
                EntryData::Bool(v) => payload.extend(v.iter().map(|&b| b as u8)),
            }
            tensors.push(ManifestEntry {
                name: e.name.clone(),
                dtype: e.data.dtype(),
                shape: e.shape.clone(),
                offset,
                length: payload.len() as u64 - offset,
                scale: e.scale.clone(),
            });
        }
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let payload_start = (PREAMBLE as u64)
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| corrupt("header length exceeds file"))? as usize;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
            .map_err(|e| corrupt(format!("bad header: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut archive = Archive::new(header.metadata);
        let mut cursor = 0u64;
        for m in header.tensors {
            let numel = m
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt(format!("entry {} shape overflows", m.name)))?;
            if m.offset != cursor {
                return Err(corrupt(format!("entry {} at offset {} overlaps or leaves a gap (expected {cursor})", m.name, m.offset)));
            }
            if m.length != (numel as u64).saturating_mul(m.dtype.size() as u64) {
                return Err(corrupt(format!("entry {} length {} does not match shape {:?}", m.name, m.length, m.shape)));
            }
            let end = m
                .offset
                .checked_add(m.length)
                .filter(|&e| e <= payload.len() as u64)
                .ok_or_else(|| corrupt(format!("entry {} runs past the payload", m.name)))?;
            let raw = &payload[m.offset as usize..end as usize];
            cursor = end;
            let data = match m.dtype {
                DType::F32 => EntryData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::Fp8e4m3 => {
                    if m.scale.is_none() {
                        return Err(corrupt(format!("fp8 entry {} has no scale entry", m.name)));
                    }
                    EntryData::Fp8(raw.to_vec())
                }
                DType::Bool => EntryData::Bool(
                    raw.iter()
                        .map(|&b| match b {
                            0 => Ok(false),
                            1 => Ok(true),
                            _ => Err(corrupt(format!("entry {} has a bool byte {b}", m.name))),
                        })
                        .collect::<Result<_>>()?,
                ),
            };
            if m.scale.is_some() && m.dtype != DType::Fp8e4m3 {
                return Err(corrupt(format!("entry {} carries a scale but is not fp8", m.name)));
            }
            archive.push(Entry {
                name: m.name,
                shape: m.shape,
                data,
                scale: m.scale,
            })?;
        }
        if cursor != payload.len() as u64 {
            return Err(corrupt("trailing bytes after the last entry"));
        }
        for e in &archive.entries {
            if let Some(s) = &e.scale {
                let se = archive.get(s).ok_or_else(|| corrupt(format!("missing scale entry {s}")))?;
                if !matches!(se.data, EntryData::F32(_)) || se.data.len() != rows_of(&e.shape) {
                    return Err(corrupt(format!("scale entry {s} does not fit {}", e.name)));
                }
            }
        }
        Ok(archive)
    }

    /// Writes through a temporary sibling file, so a failed save leaves no
    /// partial archive at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path).inspect_err(|_| {
            let _ = std::fs::remove_file(&tmp);
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerQuant {
    Full,
    FakeQuant { enable_act_quant: bool },
    WeightOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub model: ModelConfig,
    pub keep_ratio: Option<f32>,
    pub trainable: Vec<String>,
    pub quant: BTreeMap<String, LayerQuant>,
    /// Caller-provided context (run config, provenance of the export, ...).
    #[serde(default)]
    pub extra: Value,
}

/// Archive a model. Weight-only layers are stored as FP8 codes plus scales,
/// everything else as f32.
pub fn save_model(model: &ToyTransformer, extra: Value) -> Result<Archive> {
    let store = model.params();
    let mut quant = BTreeMap::new();
    let mut fp8: HashMap<String, Arc<WeightOnlyLinear>> = HashMap::new();
    for l in model.linears() {
        let q = match &l.mode {
            LinearMode::Full => LayerQuant::Full,
            LinearMode::FakeQuant { enable_act_quant } => LayerQuant::FakeQuant {
                enable_act_quant: *enable_act_quant,
            },
            LinearMode::WeightOnly(wo) => {
                fp8.insert(store.get(l.weight).name.clone(), wo.clone());
                LayerQuant::WeightOnly
            }
        };
        quant.insert(l.name.clone(), q);
    }
    let meta = ModelMeta {
        model: *model.config(),
        keep_ratio: model.is_student().then(|| model.keep_ratio()),
        trainable: store.iter().filter(|(_, g)| g.trainable).map(|(_, g)| g.name.clone()).collect(),
        quant,
        extra,
    };
    let mut archive = Archive::new(serde_json::to_value(&meta)?);
    for (_, g) in store.iter() {
        match fp8.get(&g.name) {
            Some(wo) => archive.push_fp8(&g.name, wo.weight())?,
            None => archive.push_f32(&g.name, &g.tensor)?,
        }
    }
    Ok(archive)
}

pub fn model_meta(archive: &Archive) -> Result<ModelMeta> {
    serde_json::from_value(archive.metadata.clone()).map_err(|e| corrupt(format!("bad model metadata: {e}")))
}

/// Rebuild a model, its trainable set and the quantization mode of every
/// linear from an archive written by [`save_model`].
pub fn load_model(archive: &Archive) -> Result<ToyTransformer> {
    let meta = model_meta(archive)?;
    let mut model = ToyTransformer::build(meta.model, meta.keep_ratio, |name, shape, _: ParamKind| {
        let t = archive.tensor(name)?;
        if t.shape() != shape {
            return Err(corrupt(format!("entry {name} has shape {:?}, model expects {shape:?}", t.shape())));
        }
        Ok(t)
    })?;
    let trainable: HashSet<&str> = meta.trainable.iter().map(String::as_str).collect();
    let store = model.params_mut();
    let ids: Vec<_> = store.iter().map(|(id, g)| (id, trainable.contains(g.name.as_str()))).collect();
    for (id, t) in ids {
        store.set_trainable(id, t);
    }
    if store.iter().filter(|(_, g)| g.trainable).count() != trainable.len() {
        return Err(corrupt("trainable list names unknown parameters"));
    }

    let store = std::mem::take(model.params_mut());
    let result = (|| {
        let mut seen = 0;
        for layer in model.linears_mut() {
            let Some(q) = meta.quant.get(&layer.name) else {
                continue;
            };
            seen += 1;
            layer.mode = match *q {
                LayerQuant::Full => LinearMode::Full,
                LayerQuant::FakeQuant { enable_act_quant } => LinearMode::FakeQuant { enable_act_quant },
                LayerQuant::WeightOnly => {
                    let wname = &store.get(layer.weight).name;
                    let bias = layer.bias.map(|b| store.get(b).tensor.clone());
                    LinearMode::WeightOnly(Arc::new(WeightOnlyLinear::new(archive.quantized(wname)?, bias)?))
                }
            };
        }
        if seen != meta.quant.len() {
            return Err(corrupt("quantization map names unknown layers"));
        }
        Ok(())
    })();
    *model.params_mut() = store;
    result?;
    Ok(model)
}
