//! Named-tensor archive: the on-disk container for model weights,
//! checkpoints, EWC anchors, and extractor weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"NTA1"
//! u32    metadata length, then metadata as JSON (string -> string map)
//! u32    tensor count
//! per tensor:
//!   u16       name length, name bytes (UTF-8)
//!   u8        dtype (1 = f32, 2 = f64)
//!   u8        ndim
//!   u32 * n   dims
//!   bytes     row-major little-endian data
//! ```
//!
//! Tensors are written in sorted name order so identical contents produce
//! identical bytes. Writes go through a temp file + rename.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"NTA1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    fn tag(self) -> u8 {
        self as u8
    }
    fn from_tag(t: u8) -> Option<Self> {
        match t {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
    fn of<T: Scalar>() -> Self {
        match T::DTYPE {
            "f32" => Dtype::F32,
            _ => Dtype::F64,
        }
    }
}

/// In-memory archive. `metadata` carries small scalar state (iteration
/// counters, seeds, config echoes); `tensors` carries arrays.
pub struct Archive<T: Scalar> {
    pub metadata: BTreeMap<String, String>,
    pub tensors: IndexMap<String, ArrayD<T>>,
}

impl<T: Scalar> Default for Archive<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Archive<T> {
    pub fn new() -> Self {
        Archive {
            metadata: BTreeMap::new(),
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(|s| s.as_str())
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    /// Atomic write: temp file in the target directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);

        let mut names: Vec<&String> = self.tensors.keys().collect();
        names.sort();
        buf.extend_from_slice(&(names.len() as u32).to_le_bytes());
        for name in names {
            let tensor = &self.tensors[name.as_str()];
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(Dtype::of::<T>().tag());
            buf.push(tensor.ndim() as u8);
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.as_standard_layout().iter() {
                v.to_le_bytes(&mut buf);
            }
        }

        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp-{}",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("archive"),
            std::process::id()
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let err = |message: String| Error::Archive {
            path: path.display().to_string(),
            message,
        };
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::MissingWeights {
                path: path.display().to_string(),
                message: e.to_string(),
            })?
            .read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(err(format!("truncated at byte {pos}", pos = *pos)));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };

        if take(&mut pos, 4)? != MAGIC {
            return Err(err("bad magic; not a tensor archive".into()));
        }
        let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let metadata: BTreeMap<String, String> = serde_json::from_slice(take(&mut pos, meta_len)?)
            .map_err(|e| err(format!("bad metadata JSON: {e}")))?;
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

        let mut tensors = IndexMap::with_capacity(count);
        for _ in 0..count {
            let name_len =
                u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|e| err(format!("bad tensor name: {e}")))?;
            let dtype = Dtype::from_tag(take(&mut pos, 1)?[0])
                .ok_or_else(|| err(format!("unknown dtype tag for {name}")))?;
            if dtype != Dtype::of::<T>() {
                return Err(err(format!(
                    "dtype mismatch for {name}: archive holds {:?}, caller expects {}",
                    dtype,
                    T::DTYPE
                )));
            }
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let n: usize = dims.iter().product();
            let raw = take(&mut pos, n * T::WIDTH)?;
            let data: Vec<T> = raw
                .chunks_exact(T::WIDTH)
                .map(|c| T::from_le_slice(c))
                .collect();
            tensors.insert(
                name,
                ArrayD::from_shape_vec(IxDyn(&dims), data).expect("consistent dims"),
            );
        }
        Ok(Archive { metadata, tensors })
    }

    /// Validates that names and shapes match `expected` exactly, in any
    /// order; names missing or extra are spelled out.
    pub fn validate_exact(&self, expected: &[(String, Vec<usize>)], path_hint: &str) -> Result<()> {
        let mut missing = Vec::new();
        for (name, shape) in expected {
            match self.tensors.get(name.as_str()) {
                None => missing.push(name.clone()),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Archive {
                        path: path_hint.into(),
                        message: format!(
                            "tensor {name} has shape {:?}, expected {:?}",
                            t.shape(),
                            shape
                        ),
                    });
                }
                _ => {}
            }
        }
        let expected_names: std::collections::BTreeSet<&str> =
            expected.iter().map(|(n, _)| n.as_str()).collect();
        let extra: Vec<&str> = self
            .tensors
            .keys()
            .map(|s| s.as_str())
            .filter(|n| !expected_names.contains(n))
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Archive {
                path: path_hint.into(),
                message: format!("name-set mismatch; missing {missing:?}, unexpected {extra:?}"),
            });
        }
        Ok(())
    }
}
