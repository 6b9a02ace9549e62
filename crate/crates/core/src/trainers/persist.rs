//! Model file:
//!
//! ```text
//! magic "LMFMDL1\0" | u32 version | u32 kind | u32 header_len | header JSON
//! | f32 × num_params (row-major blocks) | u32 CRC32 of everything before it
//! ```
//!
//! All integers are little-endian. Kind 0 is a classifier, 1 a linear student,
//! 2 a one-hidden-layer student.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::{ClassifierHead, ProviderFingerprint};
use super::dataset::LabelEncoder;
use super::mimic::{StudentKind, StudentModel, StudentSpec};
use super::optim::OptimizerConfig;
use super::TrainError;
use crate::util::{read_file, verify_crc, ByteReader, ShortRead};

pub const MODEL_MAGIC: &[u8; 8] = b"LMFMDL1\0";
pub const MODEL_FORMAT_VERSION: u32 = 1;

const KIND_CLASSIFIER: u32 = 0;
const KIND_LINEAR: u32 = 1;
const KIND_MLP1: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Classifier(ClassifierHead),
    Student(StudentModel),
}

impl From<ClassifierHead> for TrainedModel {
    fn from(h: ClassifierHead) -> Self {
        Self::Classifier(h)
    }
}

impl From<StudentModel> for TrainedModel {
    fn from(s: StudentModel) -> Self {
        Self::Student(s)
    }
}

impl TrainedModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Classifier(_) => "classifier",
            Self::Student(s) => match s.spec.kind {
                StudentKind::Linear => "linear",
                StudentKind::Mlp1 => "mlp1",
            },
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (kind, header, params) = match self {
            Self::Classifier(h) => {
                let header = serde_json::to_vec(&ClassifierHeader {
                    dim: h.dim,
                    classes: h.encoder.clone(),
                    provider: h.provider.clone(),
                    optimizer: h.optimizer,
                })
                .expect("header serializes");
                (KIND_CLASSIFIER, header, &h.params)
            }
            Self::Student(s) => {
                let header = serde_json::to_vec(&StudentHeader {
                    in_dim: s.spec.in_dim,
                    out_dim: s.spec.out_dim,
                    hidden: s.spec.hidden,
                    featurizer: s.featurizer.clone(),
                    teacher: s.teacher.clone(),
                    optimizer: s.optimizer,
                })
                .expect("header serializes");
                let kind = match s.spec.kind {
                    StudentKind::Linear => KIND_LINEAR,
                    StudentKind::Mlp1 => KIND_MLP1,
                };
                (kind, header, &s.params)
            }
        };
        let mut out = Vec::with_capacity(24 + header.len() + params.len() * 4);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&kind.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for &p in params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, TrainError> {
        let mut r = ByteReader::new(buf);
        let magic = r.take(MODEL_MAGIC.len())?;
        if magic != MODEL_MAGIC {
            return Err(TrainError::VersionMismatch("not a model file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != MODEL_FORMAT_VERSION {
            return Err(TrainError::VersionMismatch(format!(
                "format version {version}, this build reads {MODEL_FORMAT_VERSION}"
            )));
        }
        let body = verify_crc(buf).map_err(|offset| corrupt(offset, "checksum mismatch"))?;
        let mut r = ByteReader::new(body);
        r.take(MODEL_MAGIC.len() + 4)?;
        let kind = r.u32()?;
        let header_len = r.u32()? as usize;
        let header_at = r.offset();
        let header = r.take(header_len)?;
        let bad_header = |e: serde_json::Error| corrupt(header_at, &format!("header: {e}"));
        let model = match kind {
            KIND_CLASSIFIER => {
                let h: ClassifierHeader = serde_json::from_slice(header).map_err(bad_header)?;
                let params = read_params(&mut r, h.classes.len() * (h.dim + 1))?;
                Self::Classifier(ClassifierHead::from_params(h.dim, params, h.classes, h.provider, h.optimizer)?)
            }
            KIND_LINEAR | KIND_MLP1 => {
                let h: StudentHeader = serde_json::from_slice(header).map_err(bad_header)?;
                let student_kind = if kind == KIND_LINEAR { StudentKind::Linear } else { StudentKind::Mlp1 };
                let spec = StudentSpec { kind: student_kind, in_dim: h.in_dim, out_dim: h.out_dim, hidden: h.hidden };
                spec.validate().map_err(|e| corrupt(header_at, &e.to_string()))?;
                let params = read_params(&mut r, spec.num_params())?;
                Self::Student(StudentModel::from_params(spec, params, h.featurizer, h.teacher, h.optimizer)?)
            }
            other => return Err(TrainError::VersionMismatch(format!("unknown model kind {other}"))),
        };
        if r.remaining() != 0 {
            return Err(corrupt(r.offset(), "trailing bytes before checksum"));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ClassifierHeader {
    dim: usize,
    classes: LabelEncoder,
    provider: ProviderFingerprint,
    optimizer: OptimizerConfig,
}

#[derive(Serialize, Deserialize)]
struct StudentHeader {
    in_dim: usize,
    out_dim: usize,
    hidden: usize,
    featurizer: String,
    teacher: ProviderFingerprint,
    optimizer: OptimizerConfig,
}

fn corrupt(offset: usize, reason: &str) -> TrainError {
    TrainError::CorruptModel { offset, reason: reason.to_string() }
}

impl From<ShortRead> for TrainError {
    fn from(e: ShortRead) -> Self {
        corrupt(e.offset, &format!("file ends early (wanted {} more bytes)", e.wanted))
    }
}

fn read_params(r: &mut ByteReader<'_>, n: usize) -> Result<Vec<f64>, TrainError> {
    let at = r.offset();
    if r.remaining() < n.saturating_mul(4) {
        return Err(corrupt(at, "parameter block shorter than the header declares"));
    }
    let params: Vec<f64> = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<_, _>>()?;
    if params.iter().any(|p| !p.is_finite()) {
        return Err(corrupt(at, "non-finite parameter"));
    }
    Ok(params)
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, model.to_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedModel, TrainError> {
    TrainedModel::from_bytes(&read_file(path)?)
}
