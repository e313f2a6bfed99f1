//! Weight file serialization.
//!
//! Layout: the 4-byte magic `AEDM`, a little-endian `u32` format version
//! (currently 1), a little-endian `u64` header length, a JSON header
//! (config plus the ordered layer list with shapes), then the raw `f32`
//! little-endian parameter data — weights then bias for each layer, in
//! header order. Loading verifies magic, version, header/body sizes, and
//! layer shapes, and refuses files whose architecture does not match the
//! one requested; a truncated file never yields a partial model.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::{shape_plan, Layer, LayerShape, Model, ModelConfig, NetError};

const MAGIC: &[u8; 4] = b"AEDM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    layers: Vec<LayerShape>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NetError + '_ {
    move |source| NetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> NetError {
    NetError::WeightFormat {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Writes the model's parameters to `path`.
pub fn save_weights(model: &Model, path: &Path) -> Result<(), NetError> {
    let header = Header {
        config: model.config().clone(),
        layers: model
            .layers()
            .iter()
            .map(|l| LayerShape {
                name: l.name.clone(),
                weight_shape: match *l.w.shape() {
                    [a, b, c, d] => [a, b, c, d],
                    _ => unreachable!("conv weights are rank 4"),
                },
                bias_len: l.b.len(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");

    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut out = std::io::BufWriter::new(file);
    let write = |out: &mut std::io::BufWriter<std::fs::File>, bytes: &[u8]| {
        out.write_all(bytes).map_err(io_err(path))
    };
    write(&mut out, MAGIC)?;
    write(&mut out, &VERSION.to_le_bytes())?;
    write(&mut out, &(header_bytes.len() as u64).to_le_bytes())?;
    write(&mut out, &header_bytes)?;
    for layer in model.layers() {
        for &v in layer.w.data().iter().chain(layer.b.data()) {
            write(&mut out, &v.to_le_bytes())?;
        }
    }
    out.flush().map_err(io_err(path))
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(Header, usize), NetError> {
    if bytes.len() < 16 {
        return Err(format_err(path, "file too short for magic and lengths"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(path, "bad magic (not a weight file)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(
            path,
            format!("unsupported version {version}, this build reads {VERSION}"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err(path, "header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| format_err(path, format!("bad header json: {e}")))?;
    // The header must be internally consistent with its own config.
    if header.layers != shape_plan(&header.config) {
        return Err(format_err(
            path,
            "header layer list does not match its own config".to_string(),
        ));
    }
    Ok((header, body_start))
}

/// Reads only the architecture stored in a weight file, so callers can
/// rebuild a matching model without knowing the configuration up front.
pub fn read_weights_config(path: &Path) -> Result<ModelConfig, NetError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(parse_header(path, &bytes)?.0.config)
}

/// Loads a model from `path`, verifying that the stored architecture
/// matches `expected` layer-for-layer (names and shapes; the stored seed is
/// irrelevant once parameters exist).
pub fn load_weights(path: &Path, expected: &ModelConfig) -> Result<Model, NetError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (header, body_start) = parse_header(path, &bytes)?;
    let stored_plan = shape_plan(&header.config);
    // The stored architecture must be structurally identical to what the
    // caller asked for.
    let expected_plan = shape_plan(expected);
    if stored_plan != expected_plan {
        let detail = stored_plan
            .iter()
            .zip(&expected_plan)
            .find(|(a, b)| a != b)
            .map(|(a, b)| {
                format!(
                    "layer {} has shape {:?}, expected {} with shape {:?}",
                    a.name, a.weight_shape, b.name, b.weight_shape
                )
            })
            .unwrap_or_else(|| {
                format!(
                    "file has {} layers, expected {}",
                    stored_plan.len(),
                    expected_plan.len()
                )
            });
        return Err(NetError::ConfigMismatch {
            path: path.display().to_string(),
            detail,
        });
    }

    let param_count: usize = stored_plan
        .iter()
        .map(|ls| ls.weight_shape.iter().product::<usize>() + ls.bias_len)
        .sum();
    let body = &bytes[body_start..];
    if body.len() != param_count * 4 {
        return Err(format_err(
            path,
            format!(
                "body holds {} bytes, architecture needs {} ({} f32 values)",
                body.len(),
                param_count * 4,
                param_count
            ),
        ));
    }

    let mut floats = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let layers: Vec<Layer> = stored_plan
        .into_iter()
        .map(|ls| {
            let wn: usize = ls.weight_shape.iter().product();
            let w = Tensor::from_vec(
                &ls.weight_shape,
                (&mut floats).take(wn).collect(),
            );
            let b = Tensor::from_vec(&[ls.bias_len], (&mut floats).take(ls.bias_len).collect());
            Layer {
                name: ls.name,
                w,
                b,
            }
        })
        .collect();

    Ok(Model::assemble(header.config, layers))
}
