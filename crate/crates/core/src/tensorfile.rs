//! safetensors-backed storage for named f32 tensors.
//!
//! Files carry a single metadata entry (`featimit`) holding a JSON header so
//! that the on-disk bytes are deterministic.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};

pub const HEADER_KEY: &str = "featimit";

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Default)]
pub struct TensorFile {
    pub header: Option<String>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl TensorFile {
    pub fn insert(&mut self, name: String, shape: Vec<usize>, data: &[f32]) {
        self.tensors.insert(
            name,
            StoredTensor {
                shape,
                data: data.to_vec(),
            },
        );
    }

    pub fn lookup(&self, name: &str) -> Option<(Vec<usize>, Vec<f32>)> {
        self.tensors
            .get(name)
            .map(|t| (t.shape.clone(), t.data.clone()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let raw = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                (n.clone(), t.shape.clone(), raw)
            })
            .collect();
        let mut views = Vec::with_capacity(bytes.len());
        for (name, shape, raw) in &bytes {
            let view = TensorView::new(Dtype::F32, shape.clone(), raw)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            views.push((name.clone(), view));
        }
        let metadata = self
            .header
            .as_ref()
            .map(|h| HashMap::from([(HEADER_KEY.to_string(), h.clone())]));
        let data = safetensors::serialize(views, &metadata)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, data).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let corrupt = |reason: String| Error::Load {
            path: path.to_path_buf(),
            reason,
        };
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(e.to_string()))?;
        let header = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY).cloned());
        let st = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let data: Vec<f32> = match view.dtype() {
                Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
                Dtype::F64 => view
                    .data()
                    .chunks_exact(8)
                    .map(|c| {
                        f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]) as f32
                    })
                    .collect(),
                // Integer buffers (e.g. batch counters) carry no weights.
                Dtype::I64 | Dtype::I32 => continue,
                other => return Err(corrupt(format!("tensor {name}: unsupported dtype {other:?}"))),
            };
            tensors.insert(
                name,
                StoredTensor {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        Ok(TensorFile { header, tensors })
    }
}
