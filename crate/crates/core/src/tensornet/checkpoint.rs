//! Binary checkpoint format.
//!
//! ```text
//! "LPRF"            magic
//! u32               format version
//! u8                role (0 generator, 1 discriminator), u32 generator depth
//! u32               input channels
//! u32               layer count, then per layer:
//!                     u8 tag, u32 input count, u32 inputs...,
//!                     conv: u32 in, out, kernel, stride, pad
//!                     activation: u8 kind (0 leaky, 1 sigmoid), f32 slope
//! u32               parameter tensor count, then per tensor: u32 rank, u32 dims...
//! f32...            parameter values in declaration order
//! optional "ADAM":  u64 step, f64 lr, beta1, beta2, eps, then f32 first and
//!                   second moments per tensor in declaration order
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::adam::{AdamConfig, AdamState};
use super::network::{Activation, LayerNode, LayerSpec, NetRole, Network};
use super::tensor::Scalar;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LPRF";
pub const FORMAT_VERSION: u32 = 1;
const ADAM_TAG: &[u8; 4] = b"ADAM";

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32s<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect())
    }
}

fn to_f32<T: Scalar>(v: T) -> f32 {
    v.as_f64() as f32
}

/// Serializes a network and, optionally, its optimizer state.
pub fn encode<T: Scalar>(net: &Network<T>, adam: Option<&AdamState<T>>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION as usize);
    match net.role() {
        NetRole::Generator { depth } => {
            w.u8(0);
            w.u32(depth);
        }
        NetRole::Discriminator => {
            w.u8(1);
            w.u32(0);
        }
    }
    w.u32(net.input_channels());
    w.u32(net.nodes().len());
    for node in net.nodes() {
        let tag = match node.spec {
            LayerSpec::Conv { .. } => 0,
            LayerSpec::Upsample => 1,
            LayerSpec::Norm => 2,
            LayerSpec::Act(_) => 3,
            LayerSpec::Concat => 4,
        };
        w.u8(tag);
        w.u32(node.inputs.len());
        node.inputs.iter().for_each(|&i| w.u32(i));
        match node.spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => [in_channels, out_channels, kernel, stride, pad].into_iter().for_each(|v| w.u32(v)),
            LayerSpec::Act(Activation::LeakyRelu(s)) => {
                w.u8(0);
                w.f32(s);
            }
            LayerSpec::Act(Activation::Sigmoid) => {
                w.u8(1);
                w.f32(0.0);
            }
            _ => {}
        }
    }
    w.u32(net.params().len());
    for p in net.params() {
        w.u32(p.shape().len());
        p.shape().iter().for_each(|&d| w.u32(d));
    }
    for p in net.params() {
        p.data().iter().for_each(|&v| w.f32(to_f32(v)));
    }
    if let Some(a) = adam {
        w.0.extend_from_slice(ADAM_TAG);
        w.u64(a.t);
        let c = a.config;
        [c.lr, c.beta1, c.beta2, c.eps].into_iter().for_each(|v| w.f64(v));
        for (m, v) in a.m.iter().zip(&a.v) {
            m.iter().for_each(|&x| w.f32(to_f32(x)));
            v.iter().for_each(|&x| w.f32(to_f32(x)));
        }
    }
    w.0
}

/// Parses bytes produced by [`encode`].
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Network<T>, Option<AdamState<T>>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let role = match (r.u8()?, r.u32()?) {
        (0, depth) => NetRole::Generator { depth },
        (1, _) => NetRole::Discriminator,
        (t, _) => return Err(Error::Checkpoint(format!("unknown role tag {t}"))),
    };
    let input_channels = r.u32()?;
    let n_nodes = r.u32()?;
    let mut nodes = Vec::with_capacity(n_nodes.min(4096));
    for _ in 0..n_nodes {
        let tag = r.u8()?;
        let n_in = r.u32()?;
        let inputs = (0..n_in).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let spec = match tag {
            0 => LayerSpec::Conv {
                in_channels: r.u32()?,
                out_channels: r.u32()?,
                kernel: r.u32()?,
                stride: r.u32()?,
                pad: r.u32()?,
            },
            1 => LayerSpec::Upsample,
            2 => LayerSpec::Norm,
            3 => {
                let kind = r.u8()?;
                let slope = r.f32()?;
                match kind {
                    0 => LayerSpec::Act(Activation::LeakyRelu(slope)),
                    1 => LayerSpec::Act(Activation::Sigmoid),
                    k => return Err(Error::Checkpoint(format!("unknown activation {k}"))),
                }
            }
            4 => LayerSpec::Concat,
            t => return Err(Error::Checkpoint(format!("unknown layer tag {t}"))),
        };
        nodes.push(LayerNode { spec, inputs });
    }
    let mut net = Network::<T>::from_nodes(role, input_channels, nodes)?;
    let n_params = r.u32()?;
    if n_params != net.params().len() {
        return Err(Error::Checkpoint("parameter count disagrees with topology".into()));
    }
    for p in net.params() {
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if dims != p.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter shape {dims:?} disagrees with topology {:?}",
                p.shape()
            )));
        }
    }
    let sizes: Vec<usize> = net.params().iter().map(|p| p.numel()).collect();
    let values = sizes.iter().map(|&n| r.f32s::<T>(n)).collect::<Result<Vec<_>>>()?;
    net.load_values(values)?;
    let adam = if r.pos == bytes.len() {
        None
    } else {
        if r.take(4)? != ADAM_TAG {
            return Err(Error::Checkpoint("unexpected trailing data".into()));
        }
        let t = r.u64()?;
        let config = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let mut state = AdamState::new(config, net.params());
        state.t = t;
        for (i, &n) in sizes.iter().enumerate() {
            state.m[i] = r.f32s(n)?;
            state.v[i] = r.f32s(n)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("unexpected trailing data".into()));
        }
        Some(state)
    };
    Ok((net, adam))
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, net: &Network<T>, adam: Option<&AdamState<T>>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(net, adam)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<(Network<T>, Option<AdamState<T>>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;
    use crate::tensornet::{adam_step, build_discriminator, build_generator, DiscriminatorConfig, GeneratorConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut g = build_generator::<f32>(&GeneratorConfig::default()).unwrap();
        g.init_weights(&mut rng_from_seed(9));
        let bytes = encode(&g, None);
        assert_eq!(&bytes[..4], b"LPRF");
        let (back, adam) = decode::<f32>(&bytes).unwrap();
        assert!(adam.is_none());
        assert_eq!(back, g);
        assert_eq!(encode(&back, None), bytes);
    }

    #[test]
    fn adam_state_round_trip() {
        let mut d = build_discriminator::<f32>(&DiscriminatorConfig::default()).unwrap();
        d.init_weights(&mut rng_from_seed(2));
        let mut state = AdamState::new(AdamConfig::default(), d.params());
        for p in d.params_mut() {
            let g: Vec<f32> = (0..p.numel()).map(|i| (i % 7) as f32 * 0.01).collect();
            p.accumulate_grad(&g);
        }
        adam_step(d.params_mut(), &mut state).unwrap();
        let bytes = encode(&d, Some(&state));
        let (back, back_state) = decode::<f32>(&bytes).unwrap();
        let back_state = back_state.unwrap();
        assert_eq!(back_state.t, 1);
        assert_eq!(back_state.m, state.m);
        assert_eq!(back_state.v, state.v);
        assert_eq!(encode(&back, Some(&back_state)), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let g = build_generator::<f32>(&GeneratorConfig::default()).unwrap();
        let bytes = encode(&g, None);
        assert!(decode::<f32>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
        let mut trailing = bytes;
        trailing.extend_from_slice(b"junk");
        assert!(decode::<f32>(&trailing).is_err());
    }
}
