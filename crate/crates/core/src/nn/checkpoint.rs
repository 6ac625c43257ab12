//! Binary persistence for parameter and optimizer stores.
//!
//! Layout: a header line, then for every tensor in lexicographic name order
//! the name length (u32 LE), the name bytes, the rank (u32 LE), each dim
//! (u32 LE) and the raw f64 LE values.

use std::io::{Read, Write};
use std::path::Path;

use super::optim::RmsProp;
use super::tensor::{ParameterStore, Tensor};
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8] = b"RNAC1\n";
pub const OPTIMIZER_MAGIC: &[u8] = b"RNOPT1\n";

pub fn write_store<W: Write>(
    w: &mut W,
    magic: &[u8],
    store: &ParameterStore,
) -> std::io::Result<()> {
    w.write_all(magic)?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn take_u32(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(
        take(buf, 4)?.try_into().expect("4 bytes"),
    ))
}

pub fn read_store(bytes: &[u8], magic: &[u8]) -> Result<ParameterStore> {
    if !bytes.starts_with(magic) {
        return Err(Error::Version(format!(
            "expected header {:?}",
            String::from_utf8_lossy(magic).trim_end()
        )));
    }
    let mut buf = &bytes[magic.len()..];
    let mut store = ParameterStore::new();
    let mut last: Option<String> = None;
    while !buf.is_empty() {
        let n = take_u32(&mut buf)? as usize;
        let name = String::from_utf8(take(&mut buf, n)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        if last.as_ref().is_some_and(|l| *l >= name) {
            return Err(Error::Format(format!("parameter {name:?} out of order")));
        }
        let rank = take_u32(&mut buf)? as usize;
        let shape = (0..rank)
            .map(|_| take_u32(&mut buf).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = take(&mut buf, count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(name.clone(), Tensor::new(shape, data)?);
        last = Some(name);
    }
    Ok(store)
}

pub fn save_params(path: &Path, params: &ParameterStore) -> Result<()> {
    let mut bytes = Vec::new();
    write_store(&mut bytes, PARAMS_MAGIC, params).expect("in-memory write");
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParameterStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_store(&bytes, PARAMS_MAGIC)
}

pub fn save_optimizer(path: &Path, opt: &RmsProp) -> Result<()> {
    let mut bytes = Vec::new();
    write_store(&mut bytes, OPTIMIZER_MAGIC, &opt.sq).expect("in-memory write");
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Restores squared-gradient statistics; decay, epsilon and learning rate
/// come from configuration.
pub fn load_optimizer(path: &Path, lr: f64) -> Result<RmsProp> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let sq = read_store(&bytes, OPTIMIZER_MAGIC)?;
    Ok(RmsProp {
        sq,
        decay: RmsProp::DEFAULT_DECAY,
        epsilon: RmsProp::DEFAULT_EPSILON,
        lr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let mut s = ParameterStore::new();
        s.insert("b", Tensor::new(vec![1], vec![1.0]).unwrap());
        s.insert("a", Tensor::new(vec![], vec![-2.0]).unwrap());
        let mut bytes = Vec::new();
        write_store(&mut bytes, PARAMS_MAGIC, &s).unwrap();
        let mut want = b"RNAC1\n".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(b"a");
        want.extend(0u32.to_le_bytes());
        want.extend((-2.0f64).to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(b"b");
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(1.0f64.to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(read_store(&bytes, PARAMS_MAGIC).unwrap(), s);
    }

    #[test]
    fn rejects_wrong_header_and_truncation() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut bytes = Vec::new();
        write_store(&mut bytes, OPTIMIZER_MAGIC, &s).unwrap();
        assert!(matches!(
            read_store(&bytes, PARAMS_MAGIC),
            Err(Error::Version(_))
        ));
        assert_eq!(read_store(&bytes, OPTIMIZER_MAGIC).unwrap(), s);
        bytes.pop();
        assert!(matches!(
            read_store(&bytes, OPTIMIZER_MAGIC),
            Err(Error::Format(_))
        ));
    }
}
