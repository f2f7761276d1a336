//! `FPWT` weight checkpoints.
//!
//! ```text
//! "FPWT" | version u16 | num_conv_blocks u32 | filters u32 | kernel_size u32
//!        | input_len u32 | input_channels u32 | num_classes u32
//!        | leaky_slope f64 | stride u32 | pool_width u32
//!        | tensor_count u32 | per tensor: rank u32, dims u32 × rank
//!        | f32 data of every tensor in declaration order
//! ```
//!
//! All fields little-endian. The federated wire protocol carries the same
//! bytes as its payload.

use std::path::Path;

use super::model::{ArchConfig, Network};
use super::NnError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FPWT";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Size of the header and shape table for `arch`.
pub fn header_len(arch: &ArchConfig) -> Result<usize, NnError> {
    let shapes = arch.param_shapes()?;
    let table: usize = shapes.iter().map(|(_, s)| 4 + 4 * s.len()).sum();
    Ok(4 + 2 + 8 * 4 + 8 + 4 + table)
}

/// Encoded checkpoint size; a pure function of the architecture.
pub fn checkpoint_len(arch: &ArchConfig) -> Result<usize, NnError> {
    Ok(header_len(arch)? + 4 * arch.param_count()?)
}

pub fn encode_checkpoint(net: &Network<f32>) -> Vec<u8> {
    let arch = net.arch();
    let shapes = arch.param_shapes().expect("network holds a valid architecture");
    let mut buf = Vec::with_capacity(checkpoint_len(arch).unwrap_or(0));
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        arch.num_conv_blocks,
        arch.filters,
        arch.kernel_size,
        arch.input_len,
        arch.input_channels,
        arch.num_classes,
    ] {
        put_u32(&mut buf, v);
    }
    buf.extend_from_slice(&arch.leaky_slope.to_le_bytes());
    put_u32(&mut buf, arch.stride);
    put_u32(&mut buf, arch.pool_width);
    put_u32(&mut buf, shapes.len());
    for (_, shape) in &shapes {
        put_u32(&mut buf, shape.len());
        for &d in shape {
            put_u32(&mut buf, d);
        }
    }
    for p in net.params() {
        for &w in p {
            buf.extend_from_slice(&w.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NnError> {
        if self.bytes.len() - self.pos < n {
            return Err(NnError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Parses a checkpoint into its architecture and parameter tensors.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ArchConfig, Vec<Vec<f32>>), NnError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let num_conv_blocks = r.u32()?;
    let filters = r.u32()?;
    let kernel_size = r.u32()?;
    let input_len = r.u32()?;
    let input_channels = r.u32()?;
    let num_classes = r.u32()?;
    let leaky_slope = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let stride = r.u32()?;
    let pool_width = r.u32()?;
    let arch = ArchConfig {
        num_conv_blocks,
        filters,
        kernel_size,
        input_len,
        input_channels,
        num_classes,
        leaky_slope,
        stride,
        pool_width,
    };
    let shapes = arch.param_shapes()?;
    let count = r.u32()?;
    if count != shapes.len() {
        return Err(NnError::Checkpoint(format!("{count} tensors, architecture implies {}", shapes.len())));
    }
    for (name, shape) in &shapes {
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        if &dims != shape {
            return Err(NnError::Checkpoint(format!("{name}: shape {dims:?}, expected {shape:?}")));
        }
    }
    let mut params = Vec::with_capacity(shapes.len());
    for (_, shape) in &shapes {
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        params.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        );
    }
    if r.pos != bytes.len() {
        return Err(NnError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((arch, params))
}

pub fn network_from_checkpoint(bytes: &[u8]) -> Result<Network<f32>, NnError> {
    let (arch, params) = decode_checkpoint(bytes)?;
    Network::from_params(&arch, params)
}

pub fn save_checkpoint(net: &Network<f32>, path: &Path) -> Result<(), NnError> {
    std::fs::write(path, encode_checkpoint(net)).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Network<f32>, NnError> {
    let bytes = std::fs::read(path).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
    network_from_checkpoint(&bytes)
}
