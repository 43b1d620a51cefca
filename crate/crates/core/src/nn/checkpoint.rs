//! Parameter checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      9 bytes   "SRNRCKPT1"
//! seed       u64       initialization seed
//! depth      u32
//! width      u32
//! n_layers   u32
//! per layer  u32 c_out, u32 c_in, u32 kernel (always 3)
//! n_params   u64
//! params     n_params x f32, each layer's weights then its bias
//! ```

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use super::conv::KERNEL;
use super::munet::{MuNet, NetParams, NetShape};
use super::tensor::Real;
use crate::error::{Result, SrnrError};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"SRNRCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub net: MuNet<f32>,
}

impl Checkpoint {
    pub fn new<T: Real>(net: &MuNet<T>, seed: u64) -> Self {
        Checkpoint {
            seed,
            net: net.cast(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = self.net.shape();
        let layers = shape.layer_shapes();
        let params = self.net.params();
        let mut out = Vec::with_capacity(9 + 8 + 12 + 12 * layers.len() + 8 + 4 * params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(shape.depth as u32).to_le_bytes());
        out.extend_from_slice(&(shape.width as u32).to_le_bytes());
        out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
        for (co, ci) in layers {
            out.extend_from_slice(&(co as u32).to_le_bytes());
            out.extend_from_slice(&(ci as u32).to_le_bytes());
            out.extend_from_slice(&(KERNEL as u32).to_le_bytes());
        }
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for v in &params.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(9)? != CHECKPOINT_MAGIC {
            return Err(SrnrError::Checkpoint("bad magic".into()));
        }
        let seed = cur.u64()?;
        let shape = NetShape {
            depth: cur.u32()? as usize,
            width: cur.u32()? as usize,
        };
        shape
            .validate()
            .map_err(|e| SrnrError::Checkpoint(e.to_string()))?;
        let n_layers = cur.u32()? as usize;
        let expected = shape.layer_shapes();
        if n_layers != expected.len() {
            return Err(SrnrError::Checkpoint(format!(
                "{n_layers} layers recorded, shape implies {}",
                expected.len()
            )));
        }
        for (l, &(co, ci)) in expected.iter().enumerate() {
            let got = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
            if got != (co, ci, KERNEL) {
                return Err(SrnrError::Checkpoint(format!(
                    "layer {l} manifest {got:?} does not match expected {:?}",
                    (co, ci, KERNEL)
                )));
            }
        }
        let n = cur.u64()? as usize;
        if n != shape.param_count() {
            return Err(SrnrError::Checkpoint(format!(
                "{n} parameters recorded, shape implies {}",
                shape.param_count()
            )));
        }
        let raw = cur.take(4 * n)?;
        let values: Vec<f32> = raw.chunks_exact(4).map(LittleEndian::read_f32).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SrnrError::Checkpoint("non-finite parameter".into()));
        }
        if cur.pos != bytes.len() {
            return Err(SrnrError::Checkpoint("trailing bytes".into()));
        }
        let net = MuNet::from_params(&NetParams { shape, values })?;
        Ok(Checkpoint { seed, net })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| SrnrError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| SrnrError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SrnrError::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    #[test]
    fn round_trip() {
        let net = init_params::<f32>(NetShape { depth: 4, width: 3 }, 21).unwrap();
        let ck = Checkpoint::new(&net, 21);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..9], b"SRNRCKPT1");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let net = init_params::<f32>(NetShape { depth: 3, width: 2 }, 1).unwrap();
        let bytes = Checkpoint::new(&net, 1).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
