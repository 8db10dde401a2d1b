//! Classifier model file format.
//!
//! Layout: magic `CTIM`, little-endian u16 version, a u32 length-prefixed
//! UTF-8 JSON header describing the architecture, then the raw
//! little-endian f32 weight blobs in header order (per layer: weight then
//! bias). Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv2dLayer, DenseLayer, Layer};
use crate::model::ClassifierModel;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"CTIM";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    input_shape: [usize; 3],
    classes: usize,
    layers: Vec<LayerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerHeader {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        out_features: usize,
    },
    Relu,
    Maxpool2d {
        size: usize,
        stride: usize,
    },
    Avgpool2d {
        size: usize,
        stride: usize,
    },
    Flatten,
    Softmax,
}

fn header_of(layer: &Layer, index: usize) -> Result<LayerHeader> {
    Ok(match layer {
        Layer::Conv2d(c) => {
            if c.kernel_h() != c.kernel_w() {
                return Err(Error::InvalidModel(format!(
                    "layer {index}: only square conv kernels are storable"
                )));
            }
            LayerHeader::Conv2d {
                out_channels: c.out_channels(),
                kernel: c.kernel_h(),
                stride: c.stride,
                padding: c.padding,
            }
        }
        Layer::Dense(d) => LayerHeader::Dense {
            out_features: d.out_features(),
        },
        Layer::Relu => LayerHeader::Relu,
        Layer::MaxPool2d { size, stride } => LayerHeader::Maxpool2d {
            size: *size,
            stride: *stride,
        },
        Layer::AvgPool2d { size, stride } => LayerHeader::Avgpool2d {
            size: *size,
            stride: *stride,
        },
        Layer::Flatten => LayerHeader::Flatten,
        Layer::Softmax => LayerHeader::Softmax,
        Layer::Log { .. } | Layer::Scale { .. } => {
            return Err(Error::InvalidModel(format!(
                "layer {index}: {} layers are calibration-head only and not storable",
                layer.kind()
            )))
        }
    })
}

pub fn save_model(model: &ClassifierModel, path: &Path) -> Result<()> {
    let header = ModelHeader {
        input_shape: model.input_shape(),
        classes: model.classes(),
        layers: model
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| header_of(l, i))
            .collect::<Result<Vec<_>>>()?,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for layer in model.layers() {
        match layer {
            Layer::Conv2d(c) => {
                write_f32s(&mut w, c.weight.data())?;
                write_f32s(&mut w, c.bias.data())?;
            }
            Layer::Dense(d) => {
                write_f32s(&mut w, d.weight.data())?;
                write_f32s(&mut w, d.bias.data())?;
            }
            _ => {}
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ClassifierModel> {
    let mut r = OffsetReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if &magic != MODEL_MAGIC {
        return Err(Error::ModelFormat {
            offset: 0,
            reason: format!(
                "bad magic {:?}, expected {:?} (\"CTIM\")",
                magic, MODEL_MAGIC
            ),
        });
    }
    let mut v = [0u8; 2];
    r.read_exact_at(&mut v, "version")?;
    let version = u16::from_le_bytes(v);
    if version != MODEL_VERSION {
        return Err(Error::ModelFormat {
            offset: 4,
            reason: format!("unsupported version {version}, expected {MODEL_VERSION}"),
        });
    }
    let mut len = [0u8; 4];
    r.read_exact_at(&mut len, "header length")?;
    let json_len = u32::from_le_bytes(len) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact_at(&mut json, "json header")?;
    let header: ModelHeader = serde_json::from_slice(&json).map_err(|e| Error::ModelFormat {
        offset: 10,
        reason: format!("malformed header: {e}"),
    })?;

    let mut shape: Vec<usize> = header.input_shape.to_vec();
    let mut layers = Vec::with_capacity(header.layers.len());
    for (i, lh) in header.layers.iter().enumerate() {
        let bad_shape = |need: &str| Error::ModelFormat {
            offset: r.offset,
            reason: format!("layer {i}: input shape {shape:?} unusable for {need}"),
        };
        let layer = match lh {
            LayerHeader::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if shape.len() != 3 {
                    return Err(bad_shape("conv2d"));
                }
                let cin = shape[2];
                let wlen = kernel * kernel * cin * out_channels;
                let weight = Tensor::new(
                    vec![*kernel, *kernel, cin, *out_channels],
                    r.read_f32s(wlen, i)?,
                )?;
                let bias = Tensor::new(vec![*out_channels], r.read_f32s(*out_channels, i)?)?;
                Layer::Conv2d(Conv2dLayer::new(weight, bias, *stride, *padding)?)
            }
            LayerHeader::Dense { out_features } => {
                if shape.len() != 1 {
                    return Err(bad_shape("dense"));
                }
                let n_in = shape[0];
                let weight =
                    Tensor::new(vec![n_in, *out_features], r.read_f32s(n_in * out_features, i)?)?;
                let bias = Tensor::new(vec![*out_features], r.read_f32s(*out_features, i)?)?;
                Layer::Dense(DenseLayer::new(weight, bias)?)
            }
            LayerHeader::Relu => Layer::Relu,
            LayerHeader::Maxpool2d { size, stride } => Layer::MaxPool2d {
                size: *size,
                stride: *stride,
            },
            LayerHeader::Avgpool2d { size, stride } => Layer::AvgPool2d {
                size: *size,
                stride: *stride,
            },
            LayerHeader::Flatten => Layer::Flatten,
            LayerHeader::Softmax => Layer::Softmax,
        };
        shape = layer.output_shape(&shape).map_err(|e| Error::ModelFormat {
            offset: r.offset,
            reason: format!("layer {i}: {e}"),
        })?;
        layers.push(layer);
    }
    // trailing bytes indicate a corrupt or mismatched file
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(Error::ModelFormat {
            offset: r.offset,
            reason: "trailing bytes after final weight blob".into(),
        });
    }
    ClassifierModel::new(layers, header.input_shape, header.classes)
}

fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    for &v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::ModelFormat {
                offset: self.offset,
                reason: format!("truncated file while reading {what}"),
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn read_f32s(&mut self, n: usize, layer: usize) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; n * 4];
        self.read_exact_at(&mut bytes, &format!("weights of layer {layer}"))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}
