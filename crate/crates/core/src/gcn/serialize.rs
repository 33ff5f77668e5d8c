//! Binary model format, all integers and floats little-endian:
//!
//! ```text
//! magic     8 bytes  "BFGCNMDL"
//! version   u32
//! depth     u32
//! input     u32
//! hidden    u32
//! frozen, residual, self_loops, normalization, architecture   5 x u8
//! has_bias  u8
//! reserved  2 bytes (zero)
//! W_0 .. W_{N-1}, [b_0 .. b_{N-1}], head weight, head bias   f64 row-major
//! crc32     u32 over everything above
//! ```

use ndarray::{Array1, Array2};

use super::{GcnModel, ResidualMode, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::graph::Architecture;
use crate::pipeline::NormalizationMode;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"BFGCNMDL";
const HEADER_LEN: usize = 8 + 4 * 4 + 8;

pub fn serialize_model(model: &GcnModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * param_count(model) + 4);
    out.extend_from_slice(MAGIC);
    for v in [
        MODEL_FORMAT_VERSION,
        model.depth as u32,
        model.input_dim as u32,
        model.hidden_dim as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(u8::from(model.frozen));
    out.push(match model.residual {
        ResidualMode::PreActivation => 0,
        ResidualMode::Input => 1,
    });
    out.push(u8::from(model.self_loops));
    out.push(match model.normalization {
        NormalizationMode::PerVector => 0,
        NormalizationMode::PerDimension => 1,
        NormalizationMode::None => 2,
    });
    out.push(match model.architecture {
        None => 0,
        Some(Architecture::C2) => 1,
        Some(Architecture::P2P) => 2,
    });
    out.push(u8::from(model.layer_biases.is_some()));
    out.extend_from_slice(&[0u8; 2]);
    for w in &model.weights {
        for v in w.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for b in model.layer_biases.iter().flatten() {
        for v in b.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in model.head_weight.iter().chain(model.head_bias.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn param_count(model: &GcnModel) -> usize {
    model.weights.iter().map(|w| w.len()).sum::<usize>()
        + model.layer_biases.iter().flatten().map(|b| b.len()).sum::<usize>()
        + model.head_weight.len()
        + model.head_bias.len()
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn deserialize_model(bytes: &[u8]) -> Result<GcnModel> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::CorruptPayload(format!("{} bytes is too short", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::CorruptPayload("bad magic".into()));
    }
    let version = read_u32(bytes, 8);
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptPayload("checksum mismatch".into()));
    }

    let depth = read_u32(body, 12) as usize;
    let input_dim = read_u32(body, 16) as usize;
    let hidden_dim = read_u32(body, 20) as usize;
    let flags = &body[24..30];
    let frozen = match flags[0] {
        0 => false,
        1 => true,
        f => return Err(Error::CorruptPayload(format!("frozen flag {f}"))),
    };
    let residual = match flags[1] {
        0 => ResidualMode::PreActivation,
        1 => ResidualMode::Input,
        f => return Err(Error::CorruptPayload(format!("residual mode {f}"))),
    };
    let self_loops = flags[2] == 1;
    let normalization = match flags[3] {
        0 => NormalizationMode::PerVector,
        1 => NormalizationMode::PerDimension,
        2 => NormalizationMode::None,
        f => return Err(Error::CorruptPayload(format!("normalization mode {f}"))),
    };
    let architecture = match flags[4] {
        0 => None,
        1 => Some(Architecture::C2),
        2 => Some(Architecture::P2P),
        f => return Err(Error::CorruptPayload(format!("architecture {f}"))),
    };

    let has_bias = match flags[5] {
        0 => false,
        1 => true,
        f => return Err(Error::CorruptPayload(format!("bias flag {f}"))),
    };
    let expected = depth
        .checked_mul(hidden_dim * hidden_dim)
        .and_then(|v| v.checked_add(input_dim * hidden_dim))
        .and_then(|v| v.checked_sub(hidden_dim * hidden_dim))
        .and_then(|v| v.checked_add(hidden_dim * NUM_CLASSES + NUM_CLASSES))
        .and_then(|v| v.checked_add(if has_bias { depth * hidden_dim } else { 0 }))
        .ok_or_else(|| Error::CorruptPayload("implausible dimensions".into()))?;
    let payload = &body[HEADER_LEN..];
    if depth == 0 || payload.len() != expected * 8 {
        return Err(Error::CorruptPayload(format!(
            "payload holds {} bytes, header implies {}",
            payload.len(),
            expected * 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = |rows: usize, cols: usize| {
        let v: Vec<f64> = values.by_ref().take(rows * cols).collect();
        Array2::from_shape_vec((rows, cols), v).expect("length checked")
    };
    let weights = (0..depth)
        .map(|k| take(if k == 0 { input_dim } else { hidden_dim }, hidden_dim))
        .collect();
    let layer_biases = has_bias.then(|| {
        (0..depth)
            .map(|_| take(1, hidden_dim).into_shape_with_order(hidden_dim).expect("1 x h"))
            .collect()
    });
    let head_weight = take(hidden_dim, NUM_CLASSES);
    let head_bias: Array1<f64> = take(1, NUM_CLASSES).into_shape_with_order(NUM_CLASSES).expect("1 x 2");
    Ok(GcnModel {
        depth,
        input_dim,
        hidden_dim,
        weights,
        layer_biases,
        head_weight,
        head_bias,
        frozen,
        residual,
        self_loops,
        normalization,
        architecture,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_and_flipped_payloads() {
        let m = GcnModel::new(3, 5, 8, 11).unwrap();
        let bytes = serialize_model(&m);
        assert_eq!(deserialize_model(&bytes).unwrap(), m);
        assert!(matches!(
            deserialize_model(&bytes[..bytes.len() - 9]),
            Err(Error::CorruptPayload(_))
        ));
        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 3] ^= 0x40;
        assert!(matches!(deserialize_model(&flipped), Err(Error::CorruptPayload(_))));
        assert!(matches!(deserialize_model(&bytes[..10]), Err(Error::CorruptPayload(_))));
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = serialize_model(&GcnModel::new(1, 5, 4, 0).unwrap());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            deserialize_model(&bytes),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn depth_is_in_header() {
        let a = serialize_model(&GcnModel::new(12, 5, 32, 0).unwrap());
        let b = serialize_model(&GcnModel::new(24, 5, 32, 0).unwrap());
        assert_ne!(a[..HEADER_LEN], b[..HEADER_LEN]);
        assert_eq!(read_u32(&a, 12), 12);
        assert_eq!(read_u32(&b, 12), 24);
    }
}
