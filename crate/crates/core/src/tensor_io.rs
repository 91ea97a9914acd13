//! NAPD tensor files and dataset manifests.
//!
//! A `.napd` file is a fixed little-endian layout:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "NAPD"
//! 4       1           version (1)
//! 5       1           dtype code (1 = f32)
//! 6       1           ndim
//! 7       1           pad (0)
//! 8       8 * ndim    dims, u64 each
//! ...     4 * prod    payload, row-major f32
//! ```
//!
//! A manifest (`*.manifest.json`) lists one entry per sample with paths
//! relative to the manifest's own directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::ClassifierHead;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NAPD";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const TENSOR_EXTENSION: &str = "napd";
pub const MANIFEST_SUFFIX: &str = ".manifest.json";
/// Layer tag of the pre-pooling feature map.
pub const DEFAULT_LAYER: &str = "penultimate";
/// Layer tag of the cls-token attention vector.
pub const ATTENTION_LAYER: &str = "attention";

const HEADER_LEN: usize = 8;

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument("tensor needs at least one dim".into()));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("too many dims: {}", dims.len())));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("dim {pos} has size zero")));
        }
        let numel = checked_numel(&dims)
            .ok_or_else(|| Error::InvalidArgument("element count overflows".into()))?;
        if numel != data.len() {
            return Err(Error::DimensionMismatch {
                what: "tensor payload".into(),
                expected: numel,
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Serialized NAPD bytes. Fails on non-finite values.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {i}")));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        out.push(0);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Length {
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        if bytes[5] != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {}", bytes[5])));
        }
        let ndim = bytes[6] as usize;
        if ndim == 0 {
            return Err(Error::Format("ndim is zero".into()));
        }
        if bytes[7] != 0 {
            return Err(Error::Format(format!("non-zero pad byte {}", bytes[7])));
        }
        let dims_end = HEADER_LEN + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(Error::Length {
                expected: dims_end as u64,
                actual: bytes.len() as u64,
            });
        }
        let mut dims = Vec::with_capacity(ndim);
        for chunk in bytes[HEADER_LEN..dims_end].chunks_exact(8) {
            let d = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            let d = usize::try_from(d).map_err(|_| Error::Format(format!("dim {d} too large")))?;
            if d == 0 {
                return Err(Error::Format("zero-sized dim".into()));
            }
            dims.push(d);
        }
        let numel = checked_numel(&dims)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let payload = &bytes[dims_end..];
        if payload.len() != numel {
            return Err(Error::Length {
                expected: (dims_end + numel) as u64,
                actual: bytes.len() as u64,
            });
        }
        let mut data = Vec::with_capacity(numel / 4);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("payload element {i}")));
            }
            data.push(v);
        }
        Ok(Self { dims, data })
    }
}

fn checked_numel(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        Error::NonFinite(msg) => Error::NonFinite(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = tensor.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Id,
    Ood,
    PseudoOod,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Id => "id",
            Label::Ood => "ood",
            Label::PseudoOod => "pseudo_ood",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" => Ok(Label::Id),
            "ood" => Ok(Label::Ood),
            "pseudo_ood" => Ok(Label::PseudoOod),
            other => Err(Error::InvalidArgument(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub label: Label,
    /// Layer tag to tensor path.
    pub tensors: BTreeMap<String, String>,
    pub logits: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadRef {
    pub weights: String,
    pub bias: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadRef>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub label: Label,
    pub activations: BTreeMap<String, Tensor>,
    pub logits: Vec<f32>,
    pub feature: Option<Vec<f32>>,
}

/// A fully loaded, validated manifest. Immutable after load.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub head: Option<ClassifierHead>,
    pub meta: BTreeMap<String, String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn with_label(&self, label: Label) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.label == label)
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_vector(path: &Path, what: &str) -> Result<Vec<f32>> {
    let t = read_tensor(path)?;
    if t.ndim() != 1 {
        return Err(Error::Manifest(format!(
            "{what} at {} must be 1-d, has dims {:?}",
            path.display(),
            t.dims()
        )));
    }
    Ok(t.into_data())
}

fn load_record(base: &Path, entry: &ManifestEntry) -> Result<SampleRecord> {
    let mut activations = BTreeMap::new();
    for (tag, rel) in &entry.tensors {
        let path = resolve(base, rel);
        let t = read_tensor(&path)?;
        if let Some(&v) = t.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::NegativeActivation {
                context: format!("sample {} layer {tag} ({})", entry.sample_id, path.display()),
                value: v,
            });
        }
        activations.insert(tag.clone(), t);
    }
    let logits = read_vector(&resolve(base, &entry.logits), "logits")?;
    let feature = entry
        .feature
        .as_deref()
        .map(|rel| read_vector(&resolve(base, rel), "feature"))
        .transpose()?;
    Ok(SampleRecord {
        sample_id: entry.sample_id.clone(),
        label: entry.label,
        activations,
        logits,
        feature,
    })
}

fn load_head(base: &Path, head: &HeadRef) -> Result<ClassifierHead> {
    let wpath = resolve(base, &head.weights);
    let weights = read_tensor(&wpath)?;
    if weights.ndim() != 2 {
        return Err(Error::Manifest(format!(
            "head weights {} must be 2-d, has dims {:?}",
            wpath.display(),
            weights.dims()
        )));
    }
    let bias = read_vector(&resolve(base, &head.bias), "head bias")?;
    let (k, c) = (weights.dims()[0], weights.dims()[1]);
    if bias.len() != k {
        return Err(Error::DimensionMismatch {
            what: "head bias length vs weight rows".into(),
            expected: k,
            actual: bias.len(),
        });
    }
    ClassifierHead::new(
        k,
        c,
        weights.data().iter().map(|&v| v as f64).collect(),
        bias.iter().map(|&v| v as f64).collect(),
    )
}

/// Parses a manifest without touching the referenced tensors.
pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a manifest and every tensor it references, validating each record.
///
/// Either all entries load or an error is returned; entries are never
/// skipped. Tensor files are read in parallel, but records keep manifest
/// order and the reported error is the first failing entry in that order.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest = parse_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut seen = HashSet::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        if !seen.insert(e.sample_id.as_str()) {
            return Err(Error::Manifest(format!("duplicate sample_id {:?}", e.sample_id)));
        }
    }

    let head = manifest.head.as_ref().map(|h| load_head(base, h)).transpose()?;

    let loaded: Vec<Result<SampleRecord>> = manifest
        .entries
        .par_iter()
        .map(|e| load_record(base, e))
        .collect();
    let records = loaded.into_iter().collect::<Result<Vec<_>>>()?;

    validate_consistency(&records, head.as_ref())?;

    Ok(Dataset {
        records,
        head,
        meta: manifest.meta,
    })
}

fn validate_consistency(records: &[SampleRecord], head: Option<&ClassifierHead>) -> Result<()> {
    let mut logit_len = head.map(|h| h.num_classes());
    let mut feature_len = head.map(|h| h.num_features());
    let mut channels: HashMap<&str, usize> = HashMap::new();
    for r in records {
        match logit_len {
            Some(k) if k != r.logits.len() => {
                return Err(Error::Manifest(format!(
                    "sample {}: logits length {} does not match K = {k}",
                    r.sample_id,
                    r.logits.len()
                )))
            }
            None => logit_len = Some(r.logits.len()),
            _ => {}
        }
        if let Some(f) = &r.feature {
            match feature_len {
                Some(c) if c != f.len() => {
                    return Err(Error::Manifest(format!(
                        "sample {}: feature length {} does not match C = {c}",
                        r.sample_id,
                        f.len()
                    )))
                }
                None => feature_len = Some(f.len()),
                _ => {}
            }
        }
        for (tag, t) in &r.activations {
            let c = t.dims()[0];
            let expected = *channels.entry(tag.as_str()).or_insert(c);
            if expected != c {
                return Err(Error::Manifest(format!(
                    "sample {}: layer {tag} has {c} channels, expected {expected}",
                    r.sample_id
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn zero_scalar_reads_back() {
        let dir = tmp();
        let p = dir.path().join("z.napd");
        write_tensor(&p, &Tensor::vector(vec![0.0]).unwrap()).unwrap();
        let t = read_tensor(&p).unwrap();
        assert_eq!(t.dims(), &[1]);
        assert_eq!(t.data(), &[0.0]);
    }

    #[test]
    fn header_arithmetic() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bytes = t.to_bytes().unwrap();
        assert_eq!(bytes.len(), 4 + 1 + 1 + 1 + 1 + 16 + 16);
        assert_eq!(&bytes[..8], b"NAPD\x01\x01\x02\x00");

        let t = Tensor::new(vec![3, 4, 5], vec![0.5; 60]).unwrap();
        let bytes = t.to_bytes().unwrap();
        assert_eq!(bytes.len() - 8 - 3 * 8, 240);
    }

    #[test]
    fn nan_is_rejected_on_write() {
        let t = Tensor::vector(vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(t.to_bytes(), Err(Error::NonFinite(_))));
        let dir = tmp();
        assert!(write_tensor(dir.path().join("n.napd"), &t).is_err());
    }

    #[test]
    fn zero_sized_dim_is_an_argument_error() {
        assert!(matches!(
            Tensor::new(vec![2, 0], vec![]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn corrupt_headers() {
        let good = Tensor::vector(vec![1.0, 2.0]).unwrap().to_bytes().unwrap();

        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&b), Err(Error::Format(_))));

        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(Tensor::from_bytes(&b), Err(Error::Format(_))));

        let mut b = good.clone();
        b[5] = 2;
        assert!(matches!(Tensor::from_bytes(&b), Err(Error::Format(_))));

        let b = &good[..good.len() - 1];
        assert!(matches!(Tensor::from_bytes(b), Err(Error::Length { .. })));

        let mut b = good.clone();
        b.push(0);
        assert!(matches!(Tensor::from_bytes(&b), Err(Error::Length { .. })));

        let mut b = good.clone();
        let n = b.len();
        b[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(Tensor::from_bytes(&b), Err(Error::NonFinite(_))));

        assert!(matches!(Tensor::from_bytes(b"NAP"), Err(Error::Length { .. })));
    }

    fn write_entry(dir: &Path, id: &str, act: &Tensor, logits: &[f32]) -> ManifestEntry {
        let a = format!("{id}.act.napd");
        let l = format!("{id}.logits.napd");
        write_tensor(dir.join(&a), act).unwrap();
        write_tensor(dir.join(&l), &Tensor::vector(logits.to_vec()).unwrap()).unwrap();
        ManifestEntry {
            sample_id: id.into(),
            label: Label::Id,
            tensors: BTreeMap::from([("penultimate".to_string(), a)]),
            logits: l,
            feature: None,
        }
    }

    #[test]
    fn empty_manifest_loads_empty() {
        let dir = tmp();
        let p = dir.path().join("e.manifest.json");
        Manifest::default().write(&p).unwrap();
        let ds = load_manifest(&p).unwrap();
        assert!(ds.is_empty());
        assert!(ds.head.is_none());
    }

    #[test]
    fn missing_file_names_the_path() {
        let dir = tmp();
        let act = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let mut e = write_entry(dir.path(), "a", &act, &[0.0, 0.0]);
        e.logits = "nowhere.napd".into();
        let m = Manifest {
            entries: vec![e],
            ..Default::default()
        };
        let p = dir.path().join("m.manifest.json");
        m.write(&p).unwrap();
        let err = load_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("nowhere.napd"), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tmp();
        let act = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let e = write_entry(dir.path(), "a", &act, &[0.0, 0.0]);
        let m = Manifest {
            entries: vec![e.clone(), e],
            ..Default::default()
        };
        let p = dir.path().join("m.manifest.json");
        m.write(&p).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest(_))));
    }

    #[test]
    fn negative_activation_rejected() {
        let dir = tmp();
        let act = Tensor::new(vec![1, 1, 2], vec![1.0, -0.5]).unwrap();
        let e = write_entry(dir.path(), "a", &act, &[0.0, 0.0]);
        let m = Manifest {
            entries: vec![e],
            ..Default::default()
        };
        let p = dir.path().join("m.manifest.json");
        m.write(&p).unwrap();
        assert!(matches!(
            load_manifest(&p),
            Err(Error::NegativeActivation { value, .. }) if value == -0.5
        ));
    }

    #[test]
    fn head_k_mismatch_rejected() {
        let dir = tmp();
        let act = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let e = write_entry(dir.path(), "a", &act, &[0.0, 0.0, 0.0]);
        write_tensor(
            dir.path().join("w.napd"),
            &Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(),
        )
        .unwrap();
        write_tensor(dir.path().join("b.napd"), &Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap();
        let m = Manifest {
            entries: vec![e],
            head: Some(HeadRef {
                weights: "w.napd".into(),
                bias: "b.napd".into(),
            }),
            meta: BTreeMap::new(),
        };
        let p = dir.path().join("m.manifest.json");
        m.write(&p).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest(_))));
    }

    #[test]
    fn head_bias_length_checked() {
        let dir = tmp();
        write_tensor(
            dir.path().join("w.napd"),
            &Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(),
        )
        .unwrap();
        write_tensor(dir.path().join("b.napd"), &Tensor::vector(vec![0.0; 3]).unwrap()).unwrap();
        let m = Manifest {
            head: Some(HeadRef {
                weights: "w.napd".into(),
                bias: "b.napd".into(),
            }),
            ..Default::default()
        };
        let p = dir.path().join("m.manifest.json");
        m.write(&p).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn unknown_manifest_fields_rejected() {
        let dir = tmp();
        let p = dir.path().join("m.manifest.json");
        fs::write(&p, r#"{"entries": [], "extra": 1}"#).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Json(_))));
    }

    #[test]
    fn label_parsing() {
        assert_eq!("pseudo_ood".parse::<Label>().unwrap(), Label::PseudoOod);
        assert!("OOD".parse::<Label>().is_err());
        assert_eq!(Label::Ood.to_string(), "ood");
    }
}
