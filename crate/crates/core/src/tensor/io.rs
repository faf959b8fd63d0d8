//! DTNS binary tensor serialization.
//!
//! Record layout, all integers little-endian:
//!
//! ```text
//! magic   b"DTNS"
//! version u32      (currently 1)
//! rank    u8
//! dims    u32 * rank
//! data    f32 * product(dims), row-major
//! ```
//!
//! A weights sidecar is a concatenation of named records, sorted by name:
//!
//! ```text
//! name_len u16
//! name     utf-8 bytes
//! record   DTNS record as above
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Tensor, TensorError};

pub const DTNS_MAGIC: [u8; 4] = *b"DTNS";
pub const DTNS_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected \"DTNS\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported DTNS version {found}, expected {DTNS_VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("malformed DTNS stream: {detail}")]
    Malformed { detail: String },
}

fn malformed(detail: impl Into<String>) -> IoError {
    IoError::Malformed {
        detail: detail.into(),
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, IoError> {
    let mut bytes = [0u8; 4];
    r.read_exact(&mut bytes)?;
    Ok(u32::from_le_bytes(bytes))
}

pub fn write_tensor<W: Write>(w: &mut W, tensor: &Tensor) -> Result<(), IoError> {
    w.write_all(&DTNS_MAGIC)?;
    w.write_all(&DTNS_VERSION.to_le_bytes())?;
    let rank = u8::try_from(tensor.rank())
        .map_err(|_| malformed(format!("rank {} exceeds u8", tensor.rank())))?;
    w.write_all(&[rank])?;
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| malformed(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, IoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != DTNS_MAGIC {
        return Err(IoError::BadMagic { found: magic });
    }
    let version = read_u32(r)?;
    if version != DTNS_VERSION {
        return Err(IoError::UnsupportedVersion { found: version });
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        shape.push(read_u32(r)? as usize);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| malformed("dims overflow"))?;
    let mut bytes = vec![0u8; len.checked_mul(4).ok_or_else(|| malformed("payload overflow"))?];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, tensor)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor, IoError> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

/// Writes the sidecar; `BTreeMap` iteration gives the sorted-by-name layout.
pub fn write_weights<W: Write>(
    w: &mut W,
    weights: &BTreeMap<String, Tensor>,
) -> Result<(), IoError> {
    for (name, tensor) in weights {
        let len = u16::try_from(name.len())
            .map_err(|_| malformed(format!("name '{name}' exceeds u16 length")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, tensor)?;
    }
    Ok(())
}

/// Reads records until end of stream; duplicate names are rejected.
pub fn read_weights<R: Read>(r: &mut R) -> Result<BTreeMap<String, Tensor>, IoError> {
    let mut weights = BTreeMap::new();
    loop {
        let mut len_bytes = [0u8; 2];
        match r.read_exact(&mut len_bytes) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let len = u16::from_le_bytes(len_bytes) as usize;
        let mut name_bytes = vec![0u8; len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| malformed("parameter name is not valid utf-8"))?;
        let tensor = read_tensor(r)?;
        if weights.insert(name.clone(), tensor).is_some() {
            return Err(malformed(format!("duplicate parameter name '{name}'")));
        }
    }
    Ok(weights)
}

pub fn save_weights(path: &Path, weights: &BTreeMap<String, Tensor>) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(&mut w, weights)?;
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<BTreeMap<String, Tensor>, IoError> {
    read_weights(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_preserves_bits() {
        let t = Tensor::new(
            vec![2, 3],
            vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-39, -2.5, 1e20],
        )
        .expect("valid tensor");
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).expect("write");
        let back = read_tensor(&mut buf.as_slice()).expect("read");
        assert!(t.bit_eq(&back));
        assert_eq!(back.data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn header_layout_is_stable() {
        let t = Tensor::new(vec![1, 2], vec![0.0, 0.0]).expect("valid tensor");
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).expect("write");
        assert_eq!(&buf[0..4], b"DTNS");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(buf[8], 2);
        assert_eq!(&buf[9..13], &1u32.to_le_bytes());
        assert_eq!(&buf[13..17], &2u32.to_le_bytes());
        assert_eq!(buf.len(), 17 + 8);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::from_vec(vec![1.0]).unwrap()).expect("write");
        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(matches!(
            read_tensor(&mut corrupt.as_slice()),
            Err(IoError::BadMagic { .. })
        ));
        let mut newer = buf.clone();
        newer[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            read_tensor(&mut newer.as_slice()),
            Err(IoError::UnsupportedVersion { found: 9 })
        ));
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::from_vec(vec![1.0, 2.0]).unwrap()).expect("write");
        buf.pop();
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn weights_roundtrip_sorted_by_name() {
        let mut weights = BTreeMap::new();
        weights.insert("z_last".to_string(), Tensor::from_vec(vec![3.0]).unwrap());
        weights.insert("a_first".to_string(), Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let mut buf = Vec::new();
        write_weights(&mut buf, &weights).expect("write");
        // First record on the wire must be the lexicographically smallest name.
        let len = u16::from_le_bytes([buf[0], buf[1]]) as usize;
        assert_eq!(&buf[2..2 + len], b"a_first");
        let back = read_weights(&mut buf.as_slice()).expect("read");
        assert_eq!(back.len(), 2);
        assert!(back["z_last"].bit_eq(&weights["z_last"]));
    }

    #[test]
    fn duplicate_weight_names_rejected() {
        let t = Tensor::from_vec(vec![1.0]).unwrap();
        let mut buf = Vec::new();
        for _ in 0..2 {
            buf.extend_from_slice(&2u16.to_le_bytes());
            buf.extend_from_slice(b"w0");
            write_tensor(&mut buf, &t).expect("write");
        }
        assert!(matches!(
            read_weights(&mut buf.as_slice()),
            Err(IoError::Malformed { .. })
        ));
    }

    #[test]
    fn file_helpers_roundtrip() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("t.dtns");
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_tensor(&path, &t).expect("save");
        assert!(load_tensor(&path).expect("load").bit_eq(&t));
    }
}
