//! Checkpoint archives: a JSON header (configs, class set, per-tensor
//! digests) followed by raw little-endian tensor payloads. Save -> load ->
//! save is byte-identical and a loaded model reproduces forward outputs
//! exactly.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{
    build_backbone, build_head, tensor_bytes, tensor_from_flat, BackboneConfig,
    FusionStrategy, HeadConfig, Layer, MultiViewModel, SingleViewModel,
};
use crate::data_model::ClassSet;
use crate::error::{Error, Result};
use crate::numeric::Scalar;

const MAGIC: &[u8; 8] = b"MVFUSEC\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SingleView,
    MultiView,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelMeta {
    SingleView {
        backbone: BackboneConfig,
        head: HeadConfig,
        frozen: bool,
    },
    MultiView {
        backbone: BackboneConfig,
        head: HeadConfig,
        fusion: FusionStrategy,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub crc32: u32,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub toolkit_version: String,
    pub dtype: String,
    pub kind: ModelKind,
    pub class_set: ClassSet,
    pub model: ModelMeta,
    pub tensors: Vec<TensorMeta>,
}

fn write_archive<T: Scalar>(
    path: &Path,
    kind: ModelKind,
    class_set: &ClassSet,
    model: ModelMeta,
    named: Vec<(String, ndarray::ArrayViewD<'_, T>)>,
) -> Result<()> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, view) in named {
        let bytes = tensor_bytes(&view);
        tensors.push(TensorMeta {
            name,
            shape: view.shape().to_vec(),
            crc32: crc32fast::hash(&bytes),
            offset: payload.len() as u64,
            len: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        toolkit_version: crate::TOOLKIT_VERSION.to_string(),
        dtype: T::DTYPE.to_string(),
        kind,
        class_set: class_set.clone(),
        model,
        tensors,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_archive(path: &Path) -> Result<(CheckpointHeader, Vec<u8>)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: "bad magic bytes; not a checkpoint archive".into(),
        });
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!(
                "unsupported format version {} (supported: {FORMAT_VERSION})",
                header.format_version
            ),
        });
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    Ok((header, payload))
}

/// Reads only the header; used to dispatch on dtype and model kind.
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    read_archive(path.as_ref()).map(|(h, _)| h)
}

fn decode_tensors<T: Scalar>(
    path: &Path,
    header: &CheckpointHeader,
    payload: &[u8],
) -> Result<Vec<ArrayD<T>>> {
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("dtype is {}, expected {}", header.dtype, T::DTYPE),
        });
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let start = meta.offset as usize;
        let end = start + meta.len as usize;
        let bytes = payload.get(start..end).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("tensor {} payload out of bounds", meta.name),
        })?;
        if crc32fast::hash(bytes) != meta.crc32 {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("tensor {} digest mismatch (corrupt archive)", meta.name),
            });
        }
        let data: Vec<T> = bytes
            .chunks_exact(T::BYTE_WIDTH)
            .map(T::read_le)
            .collect();
        tensors.push(tensor_from_flat(&meta.shape, data)?);
    }
    Ok(tensors)
}

fn named_stack_params<'a, T: Scalar>(
    prefix: &str,
    stack: &'a super::Stack<T>,
) -> Vec<(String, ndarray::ArrayViewD<'a, T>)> {
    stack
        .param_names()
        .into_iter()
        .map(|n| format!("{prefix}.{n}"))
        .zip(stack.params())
        .collect()
}

pub fn save_single_view<T: Scalar>(
    path: impl AsRef<Path>,
    model: &SingleViewModel<T>,
    class_set: &ClassSet,
) -> Result<()> {
    let mut named = named_stack_params("extractor", &model.extractor.stack);
    named.extend(named_stack_params("head", &model.head.stack));
    write_archive(
        path.as_ref(),
        ModelKind::SingleView,
        class_set,
        ModelMeta::SingleView {
            backbone: model.extractor.config.clone(),
            head: model.head.config.clone(),
            frozen: model.extractor.frozen,
        },
        named,
    )
}

pub fn save_multi_view<T: Scalar>(
    path: impl AsRef<Path>,
    model: &MultiViewModel<T>,
    class_set: &ClassSet,
) -> Result<()> {
    let mut named = named_stack_params("branch_surface", &model.branch_surface.stack);
    named.extend(named_stack_params("branch_section", &model.branch_section.stack));
    if let Some(dense) = &model.fusion_dense {
        for (suffix, view) in ["weight", "bias"].iter().zip(dense.params()) {
            named.push((format!("fusion_dense.{suffix}"), view));
        }
    }
    named.extend(named_stack_params("head", &model.head.stack));
    write_archive(
        path.as_ref(),
        ModelKind::MultiView,
        class_set,
        ModelMeta::MultiView {
            backbone: model.branch_surface.config.clone(),
            head: model.head.config.clone(),
            fusion: model.fusion,
        },
        named,
    )
}

pub fn load_single_view<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(SingleViewModel<T>, ClassSet)> {
    let path = path.as_ref();
    let (header, payload) = read_archive(path)?;
    let (backbone, head_config, frozen) = match &header.model {
        ModelMeta::SingleView {
            backbone,
            head,
            frozen,
        } => (backbone.clone(), head.clone(), *frozen),
        ModelMeta::MultiView { .. } => {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: "archive holds a multi-view model, expected single-view".into(),
            })
        }
    };
    let tensors = decode_tensors::<T>(path, &header, &payload)?;
    let mut extractor = build_backbone::<T>(&backbone, 0)?;
    extractor.frozen = frozen;
    let num_classes = header.class_set.len();
    let mut head = build_head::<T>(backbone.feature_dim, num_classes, &head_config, 0)?;

    let n_extractor = extractor.stack.params().len();
    let mut iter = tensors.into_iter();
    extractor
        .stack
        .set_params(iter.by_ref().take(n_extractor).collect())?;
    head.stack.set_params(iter.collect())?;
    Ok((SingleViewModel { extractor, head }, header.class_set))
}

pub fn load_multi_view<T: Scalar>(path: impl AsRef<Path>) -> Result<(MultiViewModel<T>, ClassSet)> {
    let path = path.as_ref();
    let (header, payload) = read_archive(path)?;
    let (backbone, head_config, fusion) = match &header.model {
        ModelMeta::MultiView {
            backbone,
            head,
            fusion,
        } => (backbone.clone(), head.clone(), *fusion),
        ModelMeta::SingleView { .. } => {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: "archive holds a single-view model, expected multi-view".into(),
            })
        }
    };
    let tensors = decode_tensors::<T>(path, &header, &payload)?;
    let mut iter = tensors.into_iter();

    let mut branch_surface = build_backbone::<T>(&backbone, 0)?;
    branch_surface.frozen = true;
    let n_branch = branch_surface.stack.params().len();
    branch_surface
        .stack
        .set_params(iter.by_ref().take(n_branch).collect())?;

    let mut branch_section = build_backbone::<T>(&backbone, 0)?;
    branch_section.frozen = true;
    branch_section
        .stack
        .set_params(iter.by_ref().take(n_branch).collect())?;

    let fusion_dense = match fusion {
        FusionStrategy::Concat => {
            let weight = iter.next().ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                message: "missing fusion_dense.weight".into(),
            })?;
            let bias = iter.next().ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                message: "missing fusion_dense.bias".into(),
            })?;
            Some(Layer::Dense {
                weight: weight
                    .into_dimensionality()
                    .map_err(|e| Error::Config(format!("fusion_dense.weight: {e}")))?,
                bias: bias
                    .into_dimensionality()
                    .map_err(|e| Error::Config(format!("fusion_dense.bias: {e}")))?,
            })
        }
        FusionStrategy::MaxPool => None,
    };

    let head_input = match fusion {
        // The concat dense maps 2D back to D before the head.
        FusionStrategy::Concat => backbone.feature_dim,
        FusionStrategy::MaxPool => backbone.feature_dim,
    };
    let num_classes = header.class_set.len();
    let mut head = build_head::<T>(head_input, num_classes, &head_config, 0)?;
    head.stack.set_params(iter.collect())?;

    Ok((
        MultiViewModel {
            branch_surface,
            branch_section,
            fusion,
            fusion_dense,
            head,
        },
        header.class_set,
    ))
}
