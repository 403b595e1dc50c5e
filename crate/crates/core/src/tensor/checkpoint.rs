//! Named-tensor container: a text manifest plus one little-endian `f64` blob.
//!
//! ```text
//! hls-checkpoint	1
//! meta	<key>	<value>
//! tensor	<name>	<d0,d1,..>	<byte offset>
//! ```
//!
//! Scalars of any [`Scalar`] type are widened to `f64` on write, which is
//! exact for both `f32` and `f64`, so load(save(x)) is bit-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Parameters, Tensor};
use crate::error::{HlsError, Result};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "weights.bin";
const MAGIC: &str = "hls-checkpoint";
const VERSION: &str = "1";

/// In-memory contents of a checkpoint directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl TensorArchive {
    pub fn insert<S: Scalar>(&mut self, name: &str, t: &Tensor<S>) {
        self.insert_raw(name, t.shape(), t.data());
    }

    pub fn insert_raw<S: Scalar>(&mut self, name: &str, shape: &[usize], data: &[S]) {
        let data = data.iter().map(|x| x.to_f64_lossless()).collect();
        self.tensors.insert(name.to_string(), (shape.to_vec(), data));
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn tensor<S: Scalar>(&self, name: &str) -> Option<Tensor<S>> {
        let (shape, data) = self.tensors.get(name)?;
        let data = data.iter().map(|&x| S::from_f64_lossy(x)).collect();
        Tensor::new(shape, data).ok()
    }

    pub fn raw<S: Scalar>(&self, name: &str) -> Option<Vec<S>> {
        self.tensors
            .get(name)
            .map(|(_, d)| d.iter().map(|&x| S::from_f64_lossy(x)).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = format!("{MAGIC}\t{VERSION}\n");
        for (k, v) in &self.meta {
            if k.contains(['\t', '\n']) || v.contains(['\t', '\n']) {
                return Err(ckpt_err(dir, format!("meta entry {k:?} contains a tab or newline")));
            }
            manifest.push_str(&format!("meta\t{k}\t{v}\n"));
        }
        let mut blob = Vec::new();
        for (name, (shape, data)) in &self.tensors {
            let dims = shape.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
            manifest.push_str(&format!("tensor\t{name}\t{dims}\t{}\n", blob.len()));
            for x in data {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::File::create(dir.join(BLOB_FILE))?.write_all(&blob)?;
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))
            .map_err(|e| ckpt_err(dir, format!("reading manifest: {e}")))?;
        let blob = fs::read(dir.join(BLOB_FILE)).map_err(|e| ckpt_err(dir, format!("reading blob: {e}")))?;
        let mut lines = manifest.lines();
        if lines.next() != Some(&format!("{MAGIC}\t{VERSION}")) {
            return Err(ckpt_err(dir, "unrecognized manifest header"));
        }
        let mut out = TensorArchive::default();
        for (no, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["meta", k, v] => {
                    out.meta.insert(k.to_string(), v.to_string());
                }
                ["tensor", name, dims, offset] => {
                    let shape = parse_dims(dims).ok_or_else(|| ckpt_err(dir, format!("line {}: bad shape", no + 2)))?;
                    let offset: usize = offset
                        .parse()
                        .map_err(|_| ckpt_err(dir, format!("line {}: bad offset", no + 2)))?;
                    let numel: usize = shape.iter().product();
                    let end = offset + numel * 8;
                    let bytes = blob
                        .get(offset..end)
                        .ok_or_else(|| ckpt_err(dir, format!("tensor {name} extends past the blob")))?;
                    let data = bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    out.tensors.insert(name.to_string(), (shape, data));
                }
                [""] => {}
                _ => return Err(ckpt_err(dir, format!("line {}: unrecognized entry", no + 2))),
            }
        }
        Ok(out)
    }

    /// Stores every tensor of `params` under `prefix`.
    pub fn insert_params<S: Scalar, P: Parameters<S> + ?Sized>(&mut self, prefix: &str, params: &P) {
        params.visit(prefix, &mut |name, t| self.insert(name, t));
    }

    /// Overwrites every tensor of `params` from the archive. Missing names and
    /// shape mismatches are errors.
    pub fn load_params<S: Scalar, P: Parameters<S> + ?Sized>(&self, prefix: &str, params: &mut P) -> Result<()> {
        let mut err = None;
        params.visit_mut(prefix, &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(name) {
                None => err = Some(format!("missing tensor {name}")),
                Some((shape, _)) if shape.as_slice() != t.shape() => {
                    err = Some(format!("tensor {name}: stored shape {shape:?}, expected {:?}", t.shape()))
                }
                Some((_, data)) => {
                    for (d, &x) in t.data_mut().iter_mut().zip(data) {
                        *d = S::from_f64_lossy(x);
                    }
                }
            }
        });
        match err {
            Some(msg) => Err(ckpt_err(Path::new("<archive>"), msg)),
            None => Ok(()),
        }
    }
}

fn parse_dims(s: &str) -> Option<Vec<usize>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|d| d.parse().ok()).collect()
}

pub(crate) fn ckpt_err(dir: &Path, msg: impl Into<String>) -> HlsError {
    HlsError::Checkpoint {
        path: PathBuf::from(dir),
        msg: msg.into(),
    }
}
