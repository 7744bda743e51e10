//! Named-tensor files (safetensors layout) with string metadata.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::{Element, Error, Result};

pub struct TensorFile<T> {
    pub tensors: Vec<(String, ArrayD<T>)>,
    pub metadata: HashMap<String, String>,
}

impl<T: Element> TensorFile<T> {
    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }
}

fn ckpt_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

/// Writes tensors in the element type of `T` (`F32` or `F64`).
pub fn write_tensors<T: Element>(
    path: &Path,
    tensors: &[(String, ArrayD<T>)],
    metadata: HashMap<String, String>,
) -> Result<()> {
    let f32_out = T::DTYPE == "f32";
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, a)| {
            let mut buf = Vec::with_capacity(a.len() * if f32_out { 4 } else { 8 });
            for v in a.iter() {
                let x = v.to_f64_lossy();
                if f32_out {
                    buf.extend_from_slice(&(x as f32).to_le_bytes());
                } else {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            (name.clone(), a.shape().to_vec(), buf)
        })
        .collect();
    let dtype = if f32_out { Dtype::F32 } else { Dtype::F64 };
    let views = bytes
        .iter()
        .map(|(n, s, b)| {
            Ok((
                n.as_str(),
                TensorView::new(dtype, s.clone(), b).map_err(|e| ckpt_err(path, e))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = safetensors::serialize(views, Some(metadata)).map_err(|e| ckpt_err(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, data).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads `F32` and `F64` tensors, converting to `T`. Tensor order
/// follows the file's offsets.
pub fn read_tensors<T: Element>(path: &Path) -> Result<TensorFile<T>> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&data).map_err(|e| ckpt_err(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&data).map_err(|e| ckpt_err(path, e))?;
    let mut tensors = Vec::new();
    let mut order = meta.offset_keys();
    order.retain(|k| st.names().contains(&k.as_str()));
    for name in order {
        let view = st.tensor(&name).map_err(|e| ckpt_err(path, e))?;
        let raw = view.data();
        let values: Vec<T> = match view.dtype() {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            Dtype::I64 if name.ends_with("num_batches_tracked") => continue,
            other => {
                return Err(ckpt_err(
                    path,
                    format!("tensor `{name}` has unsupported dtype {other:?}"),
                ))
            }
        };
        let arr =
            ArrayD::from_shape_vec(IxDyn(view.shape()), values).map_err(|e| ckpt_err(path, e))?;
        tensors.push((name, arr));
    }
    Ok(TensorFile {
        tensors,
        metadata: meta.metadata().clone().unwrap_or_default(),
    })
}
