//! NTF tensor file format, used repo-wide for datasets and checkpoint
//! payloads.
//!
//! Layout: magic "NTF1" (4 bytes) | u8 dtype code {0:f32, 1:f64, 2:u8} |
//! u8 ndim | ndim x u32 little-endian extents | row-major little-endian
//! payload.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{DType, Storage, Tensor};

pub const MAGIC: &[u8; 4] = b"NTF1";

pub fn write_to(w: &mut impl Write, t: &Tensor) -> Result<()> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize
    {
        return Err(Error::Format(format!("rank {} exceeds NTF limit", shape.len())));
    }
    for &e in shape {
        if e > u32::MAX as usize {
            return Err(Error::Format(format!("extent {e} exceeds u32")));
        }
    }
    w.write_all(MAGIC)?;
    w.write_all(&[t.dtype().code(), shape.len() as u8])?;
    for &e in shape {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    match &*t.data() {
        Storage::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Storage::F64(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Storage::U8(v) => w.write_all(v)?,
    }
    Ok(())
}

pub fn to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(6 + 4 * t.shape().len() + t.numel() * t.dtype().size_of());
    write_to(&mut buf, t)?;
    Ok(buf)
}

pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(|_| Error::Format("truncated NTF header".into()))?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad NTF magic".into()));
    }
    let dtype = DType::from_code(head[4])?;
    let ndim = head[5] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut e = [0u8; 4];
        r.read_exact(&mut e).map_err(|_| Error::Format("truncated NTF extents".into()))?;
        shape.push(u32::from_le_bytes(e) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * dtype.size_of()];
    r.read_exact(&mut payload).map_err(|_| Error::Format("truncated NTF payload".into()))?;
    let storage = match dtype {
        DType::F32 => Storage::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()),
        DType::F64 => Storage::F64(
            payload.chunks_exact(8).map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])).collect(),
        ),
        DType::U8 => Storage::U8(payload),
    };
    Tensor::new(&shape, storage)
}

pub fn save(path: &std::path::Path, t: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write_to(&mut f, t)
}

pub fn load(path: &std::path::Path) -> Result<Tensor> {
    let mut f = std::fs::File::open(path)?;
    read_from(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn round_trip_all_dtypes() {
        let mut rng = Stream::new(1);
        let f32t = Tensor::from_f32(&[2, 3], (0..6).map(|_| rng.normal() as f32).collect()).unwrap();
        let f64t = Tensor::from_f64(&[4], (0..4).map(|_| rng.normal()).collect()).unwrap();
        let u8t = Tensor::from_u8(&[2, 2, 2], (0..8).collect()).unwrap();
        let scalar = Tensor::scalar(crate::tensor::DType::F64, 3.25);
        for t in [&f32t, &f64t, &u8t, &scalar] {
            let bytes = to_bytes(t).unwrap();
            assert_eq!(&bytes[..4], MAGIC);
            let back = read_from(&mut &bytes[..]).unwrap();
            assert_eq!(back.shape(), t.shape());
            assert_eq!(back.to_f64_vec(), t.to_f64_vec());
            // byte-identical re-serialization
            assert_eq!(to_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let t = Tensor::from_f32(&[4], vec![1.0; 4]).unwrap();
        let bytes = to_bytes(&t).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match read_from(&mut &cut[..]) {
            Err(Error::Format(msg)) => assert!(msg.contains("truncated")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn header_encodes_dtype_and_extents() {
        let t = Tensor::from_u8(&[300, 2], vec![0; 600]).unwrap();
        let bytes = to_bytes(&t).unwrap();
        assert_eq!(bytes[4], 2); // u8 code
        assert_eq!(bytes[5], 2); // ndim
        assert_eq!(u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]), 300);
    }
}
