//! Versioned binary container for parameter sets.
//!
//! Layout (all integers little-endian):
//! `b"SSDTPS" | u16 version | u32 n_entries | entries...`, each entry being
//! `u32 name_len | name bytes | u32 ndim | u32 dims... | f64 values...`.
//! Entries appear in the set's stable (sorted) order, so identical parameter
//! sets always serialize to identical bytes.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 6] = b"SSDTPS";
const VERSION: u16 = 1;

pub fn write_param_set(w: &mut impl Write, ps: &ParamSet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ps.len() as u32).to_le_bytes())?;
    for (name, t) in ps.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_param_set(r: &mut impl Read) -> Result<ParamSet> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Serialization("bad parameter container magic".into()));
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(Error::Serialization(format!(
            "unsupported parameter container version {version}"
        )));
    }
    let n = read_u32(r)? as usize;
    let mut ps = ParamSet::new();
    for _ in 0..n {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Serialization("non-utf8 parameter name".into()))?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(r)? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        ps.insert(name, Tensor::new(shape, data)?);
    }
    Ok(ps)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_byte_stability() {
        let mut ps = ParamSet::new();
        ps.insert("conv.w", Tensor::new(vec![2, 2], vec![0.1, -2.5, 3.75, 0.0]).unwrap());
        ps.insert("conv.b", Tensor::new(vec![2], vec![1e-9, -42.0]).unwrap());

        let mut a = Vec::new();
        write_param_set(&mut a, &ps).unwrap();
        let mut b = Vec::new();
        write_param_set(&mut b, &ps).unwrap();
        assert_eq!(a, b);

        let back = read_param_set(&mut a.as_slice()).unwrap();
        assert_eq!(back, ps);
    }

    #[test]
    fn rejects_garbage() {
        let garbage = b"NOTAPARAMSET".to_vec();
        assert!(read_param_set(&mut garbage.as_slice()).is_err());
    }
}
