//! CLBW weights blob.
//!
//! ```text
//! "CLBW"                 4 bytes magic
//! version                u32 LE
//! layer_count            u32 LE
//! per layer:
//!   rows, cols           u32 LE each
//!   weights              rows*cols f32 LE, row-major
//!   bias                 cols f32 LE
//! ```
//!
//! The activation is not part of the blob; it lives in the model spec.

use super::{DenseLayer, NnError, Params, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CLBW";
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

pub fn encode_weights(params: &Params) -> Vec<u8> {
    let floats: usize = params
        .layers
        .iter()
        .map(|l| l.weights.len() + l.bias.len())
        .sum();
    let mut out = Vec::with_capacity(12 + 8 * params.layers.len() + 4 * floats);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for layer in &params.layers {
        out.extend_from_slice(&(layer.rows as u32).to_le_bytes());
        out.extend_from_slice(&(layer.cols as u32).to_le_bytes());
        for v in layer.weights.iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| NnError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| {
            NnError::Format("layer size overflows".into())
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses a CLBW blob. Consecutive layers must chain (`cols` of one equals
/// `rows` of the next) and the blob must contain no trailing bytes.
pub fn decode_weights(bytes: &[u8]) -> Result<Vec<DenseLayer>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != WEIGHTS_FORMAT_VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(NnError::Format("no layers".into()));
    }
    let mut layers: Vec<DenseLayer> = Vec::with_capacity(count.min(64));
    for i in 0..count {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if rows == 0 || cols == 0 {
            return Err(NnError::Format(format!("layer {i} has an empty dimension")));
        }
        if let Some(prev) = layers.last() {
            if prev.cols != rows {
                return Err(NnError::Format(format!(
                    "layer {i} expects {rows} inputs but previous layer emits {}",
                    prev.cols
                )));
            }
        }
        let weights = r.f32s(rows.checked_mul(cols).ok_or_else(|| {
            NnError::Format(format!("layer {i} size overflows"))
        })?)?;
        let bias = r.f32s(cols)?;
        layers.push(DenseLayer {
            rows,
            cols,
            weights,
            bias,
        });
    }
    if r.pos != bytes.len() {
        return Err(NnError::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(layers)
}

impl Params {
    pub fn from_weights(bytes: &[u8], activation: super::Activation) -> Result<Params> {
        Ok(Params {
            activation,
            layers: decode_weights(bytes)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Activation, ModelSpec};
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let p = init_params(&ModelSpec {
            input_dim: 4,
            hidden_layers: vec![3],
            num_classes: 2,
            activation: Activation::Relu,
            seed: 1,
        })
        .unwrap();
        let bytes = encode_weights(&p);
        assert_eq!(&bytes[..4], b"CLBW");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[4, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[3, 0, 0, 0]);
        assert_eq!(bytes.len(), 12 + 8 + 4 * (12 + 3) + 8 + 4 * (6 + 2));
        assert_eq!(
            &bytes[20..24],
            &p.layers[0].weights[0].to_le_bytes(),
            "first weight follows the shape header"
        );
    }

    #[test]
    fn rejects_malformed() {
        let p = init_params(&ModelSpec {
            input_dim: 2,
            hidden_layers: vec![],
            num_classes: 2,
            activation: Activation::Tanh,
            seed: 0,
        })
        .unwrap();
        let good = encode_weights(&p);
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode_weights(&bad_magic).is_err());
        assert!(decode_weights(&good[..good.len() - 1]).is_err());
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(decode_weights(&trailing).is_err());
        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(decode_weights(&bad_version).is_err());
        assert!(decode_weights(b"").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_exact(
            input in 1usize..6,
            hidden in proptest::collection::vec(1usize..6, 0..3),
            classes in 2usize..6,
            seed in any::<u64>(),
        ) {
            let p = init_params(&ModelSpec {
                input_dim: input,
                hidden_layers: hidden,
                num_classes: classes,
                activation: Activation::Relu,
                seed,
            }).unwrap();
            let bytes = encode_weights(&p);
            let back = Params::from_weights(&bytes, Activation::Relu).unwrap();
            prop_assert_eq!(&back, &p);
            prop_assert_eq!(encode_weights(&back), bytes);
        }
    }
}
