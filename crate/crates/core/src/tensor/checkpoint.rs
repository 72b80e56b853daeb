//! Binary tensor map: `IMITKDT\0`, u32 version, u32 count, then per entry
//! u32 name length, UTF-8 name, u32 rank, u64 dims, little-endian f64 values.

use std::io::{Read, Write};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IMITKDT\0";
pub const TENSOR_FORMAT_VERSION: u32 = 1;

pub fn write_tensors<W: Write>(w: &mut W, params: &ParamSet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&TENSOR_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<ParamSet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a tensor checkpoint".into()));
    }
    let version = read_u32(r)?;
    if version != TENSOR_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported tensor format version {version}")));
    }
    let count = read_u32(r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_shape_mismatch() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap())
            .unwrap();
        p.insert("b.bias", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &p).unwrap();
        let q = read_tensors(&mut buf.as_slice()).unwrap();
        assert_eq!(q.by_name("a").unwrap().data(), p.by_name("a").unwrap().data());

        let mut wrong = ParamSet::new();
        wrong.insert("a", Tensor::zeros(vec![4])).unwrap();
        wrong.insert("b.bias", Tensor::zeros(vec![3])).unwrap();
        assert!(wrong.load_from(&q).is_err());
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOTATENSORFILE__".to_vec();
        assert!(matches!(read_tensors(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
