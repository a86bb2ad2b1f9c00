use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{numel, Tensor};
use crate::error::{CatrError, Result};

const MAGIC: &[u8; 4] = b"CATR";
const VERSION: u8 = 1;

/// Element type of a stored tensor file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Serializes a tensor: `"CATR"`, version, dtype, rank, one padding byte,
/// `rank` little-endian u32 dims, then little-endian row-major data.
pub fn write_tensor_to<W: Write>(out: &mut W, t: &Tensor, dtype: DType) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + dtype.size() * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[VERSION, dtype as u8, t.rank() as u8, 0]);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        DType::F32 => t.data().iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    out.write_all(&buf)
}

/// Parses a tensor from bytes. `origin` is only used in error messages.
pub fn read_tensor_from<R: Read>(input: &mut R, origin: &Path) -> Result<Tensor> {
    let fail = |msg: String| CatrError::Format { path: origin.to_path_buf(), msg };
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| CatrError::io(origin, e))?;
    if bytes.len() < 8 {
        return Err(fail(format!("header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(fail(format!("unsupported version {}", bytes[4])));
    }
    let dtype = match bytes[5] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(fail(format!("unknown dtype code {other}"))),
    };
    let rank = bytes[6] as usize;
    let dims_end = 8 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(fail("dims truncated".into()));
    }
    let shape: Vec<usize> = bytes[8..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(fail(format!("zero dimension in {shape:?}")));
    }
    let expected = numel(&shape) * dtype.size();
    let payload = &bytes[dims_end..];
    if payload.len() != expected {
        return Err(fail(format!(
            "payload has {} bytes, shape {shape:?} as {dtype:?} needs {expected}",
            payload.len()
        )));
    }
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    };
    Tensor::new(&shape, data).map_err(|e| fail(e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| CatrError::io(path, e))?;
    write_tensor_to(&mut f, t, dtype).map_err(|e| CatrError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut f = fs::File::open(path).map_err(|e| CatrError::io(path, e))?;
    read_tensor_from(&mut f, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(t: &Tensor, dtype: DType) -> Vec<u8> {
        let mut v = Vec::new();
        write_tensor_to(&mut v, t, dtype).unwrap();
        v
    }

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode(&t, DType::F32);
        assert_eq!(&bytes[..8], &[b'C', b'A', b'T', b'R', 1, 0, 2, 0]);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 6 * 4);
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let t = Tensor::zeros(&[4, 4]);
        let bytes = encode(&t, DType::F64);
        let err = read_tensor_from(&mut &bytes[..bytes.len() - 3], Path::new("x.t")).unwrap_err();
        assert!(matches!(err, CatrError::Format { .. }), "{err}");
        assert!(err.to_string().contains("x.t"));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode(&Tensor::zeros(&[1]), DType::F64);
        bytes[0] = b'X';
        assert!(matches!(
            read_tensor_from(&mut bytes.as_slice(), Path::new("m.t")),
            Err(CatrError::Format { .. })
        ));
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.rotate_left(i as u32) >> 2)).collect();
            let t = Tensor::new(&dims, data).unwrap();
            let back = read_tensor_from(&mut encode(&t, DType::F64).as_slice(), Path::new("p")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
