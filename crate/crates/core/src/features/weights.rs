//! Little-endian binary weight files.
//!
//! ```text
//! "WDSTNET1"  u32 layer_count  u32 input_channels
//! per layer:
//!   u8 kind (0 conv, 1 relu, 2 pool)
//!   u32 tag_len, tag bytes (UTF-8, 0 = untagged)
//!   conv: u32 in, u32 out, u32 kh, u32 kw, f32 weights[out][in][kh][kw], f32 bias[out]
//!   pool: u8 mode (0 average, 1 max), u32 window, u32 stride
//! ```

use std::path::Path;

use super::{Conv2d, FeatureNetwork, LayerKind, LayerSpec, PoolMode};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"WDSTNET1";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated file while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos, format!("{what} count overflows")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }
}

/// Parses a weight file image.
pub fn read_weights(bytes: &[u8]) -> Result<FeatureNetwork> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected WDSTNET1"));
    }
    let count = r.u32("layer count")?;
    let input_channels = r.u32("input channel count")?;
    if input_channels == 0 {
        return Err(Error::format(12, "input channel count is zero"));
    }
    let mut channels = input_channels;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let start = r.pos;
        let kind = r.u8("layer kind")?;
        let tag_len = r.u32("tag length")?;
        let tag_pos = r.pos;
        let tag_bytes = r.take(tag_len, "tag")?;
        let tag = if tag_len == 0 {
            None
        } else {
            Some(
                std::str::from_utf8(tag_bytes)
                    .map_err(|_| Error::format(tag_pos, "tag is not valid UTF-8"))?
                    .to_string(),
            )
        };
        let kind = match kind {
            0 => {
                let dims_pos = r.pos;
                let in_c = r.u32("conv input channels")?;
                let out_c = r.u32("conv output channels")?;
                let kh = r.u32("kernel height")?;
                let kw = r.u32("kernel width")?;
                if kh != 3 || kw != 3 {
                    return Err(Error::format(
                        dims_pos,
                        format!("layer {i}: only 3x3 kernels are supported, got {kh}x{kw}"),
                    ));
                }
                if in_c != channels || out_c == 0 {
                    return Err(Error::format(
                        dims_pos,
                        format!(
                            "layer {i}: conv {in_c}->{out_c} breaks the channel chain ({channels} channels arrive)"
                        ),
                    ));
                }
                let count = out_c
                    .checked_mul(in_c)
                    .and_then(|v| v.checked_mul(9))
                    .ok_or_else(|| Error::format(dims_pos, "conv size overflows"))?;
                let weights = r.f32s(count, "conv weights")?;
                let bias = r.f32s(out_c, "conv bias")?;
                channels = out_c;
                LayerKind::Conv(Conv2d {
                    in_channels: in_c,
                    out_channels: out_c,
                    weights,
                    bias,
                })
            }
            1 => LayerKind::Relu,
            2 => {
                let mode_pos = r.pos;
                let mode = match r.u8("pool mode")? {
                    0 => PoolMode::Average,
                    1 => PoolMode::Max,
                    m => return Err(Error::format(mode_pos, format!("unknown pool mode {m}"))),
                };
                let window = r.u32("pool window")?;
                let stride = r.u32("pool stride")?;
                if window == 0 || stride == 0 {
                    return Err(Error::format(
                        mode_pos,
                        "pool window and stride must be positive",
                    ));
                }
                LayerKind::Pool {
                    mode,
                    window,
                    stride,
                }
            }
            k => return Err(Error::format(start, format!("unknown layer kind {k}"))),
        };
        layers.push(LayerSpec { kind, tag });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after last layer"));
    }
    FeatureNetwork::new(input_channels, layers).map_err(|e| Error::format(r.pos, e.to_string()))
}

/// Serializes a network. Weights are stored as f32.
pub fn write_weights(net: &FeatureNetwork) -> Vec<u8> {
    let mut out = Vec::new();
    let put_u32 = |out: &mut Vec<u8>, v: usize| {
        out.extend_from_slice(&u32::try_from(v).expect("size fits in u32").to_le_bytes())
    };
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, net.layers().len());
    put_u32(&mut out, net.input_channels());
    for layer in net.layers() {
        let kind = match layer.kind {
            LayerKind::Conv(_) => 0u8,
            LayerKind::Relu => 1,
            LayerKind::Pool { .. } => 2,
        };
        out.push(kind);
        let tag = layer.tag.as_deref().unwrap_or("");
        put_u32(&mut out, tag.len());
        out.extend_from_slice(tag.as_bytes());
        match &layer.kind {
            LayerKind::Conv(c) => {
                for v in [c.in_channels, c.out_channels, 3, 3] {
                    put_u32(&mut out, v);
                }
                for w in c.weights.iter().chain(&c.bias) {
                    out.extend_from_slice(&(*w as f32).to_le_bytes());
                }
            }
            LayerKind::Relu => {}
            LayerKind::Pool {
                mode,
                window,
                stride,
            } => {
                out.push(match mode {
                    PoolMode::Average => 0,
                    PoolMode::Max => 1,
                });
                put_u32(&mut out, *window);
                put_u32(&mut out, *stride);
            }
        }
    }
    out
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<FeatureNetwork> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_weights(&bytes)
}

pub fn save_weights(net: &FeatureNetwork, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_weights(net)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{random_network, vgg_network, VggDepth};

    #[test]
    fn bytes_round_trip_exactly() {
        let net = random_network(17, 0.25);
        let bytes = write_weights(&net);
        let back = read_weights(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(write_weights(&back), bytes);
    }

    #[test]
    fn file_round_trip_and_tags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg16.bin");
        let net = vgg_network(VggDepth::Vgg16, 32, 1, 0.1, PoolMode::Max);
        save_weights(&net, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert_eq!(write_weights(&loaded), bytes);
        for tag in [
            "conv2_2", "relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1",
        ] {
            loaded.layer_index(tag).unwrap();
        }
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = write_weights(&random_network(2, 0.1));
        for cut in [0, 4, 8, 12, 15, 40, bytes.len() - 1] {
            match read_weights(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_broken_chain() {
        let mut bytes = write_weights(&random_network(2, 0.1));
        bytes[0] = b'X';
        assert!(matches!(
            read_weights(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));

        let net = random_network(2, 0.1);
        let mut bytes = write_weights(&net);
        // first layer is conv1_1: kind(1) + len(4) + "conv1_1"(7), then in_channels
        let in_pos = 16 + 1 + 4 + 7;
        bytes[in_pos] = 5;
        match read_weights(&bytes) {
            Err(Error::Format { offset, reason }) => {
                assert_eq!(offset, in_pos);
                assert!(reason.contains("channel chain"));
            }
            other => panic!("{other:?}"),
        }
    }
}
