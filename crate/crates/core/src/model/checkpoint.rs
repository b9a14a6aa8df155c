//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header describing every tensor, then the raw little-endian `f32` data in
//! header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::net::{EmaTeacher, ParamStore};
use crate::model::optim::{Sgd, SgdConfig};
use crate::model::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DFXCKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub student: ParamStore<f32>,
    pub teacher: EmaTeacher<f32>,
    pub optimizer: Sgd<f32>,
    /// Free-form run state (config, rng positions, metric history).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    student_version: u64,
    teacher_version: u64,
    teacher_decay: f64,
    teacher_synced_to: u64,
    optimizer: SgdConfig,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

impl Checkpoint {
    fn groups(&self) -> [(&'static str, &[String], &[Tensor<f32>]); 3] {
        [
            ("student", self.student.names(), self.student.tensors()),
            ("teacher", self.teacher.params().names(), self.teacher.params().tensors()),
            ("momentum", self.student.names(), self.optimizer.velocity()),
        ]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        for (group, names, ts) in self.groups() {
            for (name, t) in names.iter().zip(ts) {
                tensors.push(TensorEntry {
                    group: group.into(),
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                });
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            step: self.step,
            student_version: self.student.version(),
            teacher_version: self.teacher.version(),
            teacher_decay: self.teacher.decay(),
            teacher_synced_to: self.teacher.synced_to(),
            optimizer: self.optimizer.config,
            tensors,
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(origin, reason);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&e.to_string()))?;
        let mut data = &body[hlen..];
        let mut groups: [(Vec<String>, Vec<Tensor<f32>>); 3] = Default::default();
        for entry in header.tensors {
            if entry.dtype != "f32" {
                return Err(bad(&format!("unsupported dtype {}", entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            if data.len() < 4 * n {
                return Err(bad("truncated tensor data"));
            }
            let values = data[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data = &data[4 * n..];
            let slot = match entry.group.as_str() {
                "student" => 0,
                "teacher" => 1,
                "momentum" => 2,
                g => return Err(bad(&format!("unknown tensor group {g}"))),
            };
            groups[slot].0.push(entry.name);
            groups[slot].1.push(Tensor::from_vec(&entry.shape, values)?);
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let [(sn, st), (tn, tt), (_, mt)] = groups;
        let student = ParamStore::from_parts(sn, st, header.student_version)?;
        let teacher_params = ParamStore::from_parts(tn, tt, header.teacher_version)?;
        student.check_same_layout(&teacher_params)?;
        if mt.len() != student.tensors().len() || mt.iter().zip(student.tensors()).any(|(m, s)| m.shape() != s.shape()) {
            return Err(bad("momentum buffers do not match parameters"));
        }
        Ok(Self {
            step: header.step,
            student,
            teacher: EmaTeacher::from_parts(teacher_params, header.teacher_decay, header.teacher_synced_to),
            optimizer: Sgd::from_parts(header.optimizer, mt),
            meta: header.meta,
        })
    }

    /// Writes through a temporary sibling file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
