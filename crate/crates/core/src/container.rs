//! Binary tensor container: the checkpoint/tensor interchange format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "CRTN"
//! version u16      currently 1
//! count   u32      number of entries
//! entry:
//!   name_len u32, name bytes (UTF-8)
//!   dtype    u8   1 = f64
//!   rank     u8
//!   dims     rank x u64
//!   payload  product(dims) x 8 bytes (f64 bit patterns)
//! ```
//!
//! Round-trips are bitwise lossless.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CRTN";
pub const VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;

/// One named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: Vec<f64>) -> Result<Self> {
        let expected: u64 = dims.iter().product();
        if expected != data.len() as u64 {
            return Err(Error::ShapeMismatch(format!(
                "tensor entry: dims {:?} imply {} values, got {}",
                dims,
                expected,
                data.len()
            )));
        }
        Ok(TensorEntry {
            name: name.into(),
            dims,
            data,
        })
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    pub entries: Vec<TensorEntry>,
}

impl TensorContainer {
    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[DTYPE_F64, e.dims.len() as u8])?;
            for &d in &e.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            for &v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn write_file(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut reader = Tracked { inner: r, pos: 0 };
        let magic = reader.bytes_arr::<4>("magic")?;
        if &magic != MAGIC {
            return Err(reader.format_err_at(0, "bad magic, expected CRTN"));
        }
        let version = u16::from_le_bytes(reader.bytes_arr::<2>("version")?);
        if version != VERSION {
            return Err(reader.format_err_at(4, format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(reader.bytes_arr::<4>("entry count")?);
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(reader.bytes_arr::<4>("name length")?) as usize;
            let name_pos = reader.pos;
            let name_bytes = reader.bytes_vec(name_len, "name")?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| reader.format_err_at(name_pos, "name is not UTF-8"))?;
            let dtype_pos = reader.pos;
            let meta = reader.bytes_arr::<2>("dtype/rank")?;
            if meta[0] != DTYPE_F64 {
                return Err(
                    reader.format_err_at(dtype_pos, format!("unknown dtype tag {}", meta[0]))
                );
            }
            let rank = meta[1] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(reader.bytes_arr::<8>("dim")?));
            }
            let len: u64 = dims.iter().product();
            let mut data = Vec::with_capacity(len as usize);
            for _ in 0..len {
                data.push(f64::from_le_bytes(reader.bytes_arr::<8>("payload")?));
            }
            entries.push(TensorEntry { name, dims, data });
        }
        Ok(TensorContainer { entries })
    }

    pub fn read_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

/// Reader wrapper that tracks the byte offset for error messages.
struct Tracked<'a, R: Read> {
    inner: &'a mut R,
    pos: usize,
}

impl<R: Read> Tracked<'_, R> {
    fn bytes_arr<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    fn bytes_vec(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.pos;
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            offset: at,
            message: format!("truncated while reading {what}"),
        })?;
        self.pos += buf.len();
        Ok(())
    }

    fn format_err_at(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = Vec::new();
        TensorContainer::default().write_to(&mut bytes).unwrap();
        bytes[0] = b'X';
        let err = TensorContainer::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }

    #[test]
    fn truncation_reports_offset() {
        let c = TensorContainer {
            entries: vec![TensorEntry::new("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()],
        };
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 5);
        let err = TensorContainer::read_from(&mut bytes.as_slice()).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset > 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn entry_rejects_dim_payload_mismatch() {
        assert!(TensorEntry::new("w", vec![3], vec![0.0; 2]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            names in prop::collection::vec("[a-z]{1,12}", 0..5),
            seed in 0u64..10_000,
        ) {
            use rand::Rng;
            use rand_chacha::rand_core::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let entries: Vec<TensorEntry> = names
                .iter()
                .map(|n| {
                    let d0 = rng.gen_range(1u64..5);
                    let d1 = rng.gen_range(1u64..5);
                    let data: Vec<f64> = (0..d0 * d1)
                        .map(|_| f64::from_bits(rng.gen::<u64>() & 0x7FEF_FFFF_FFFF_FFFF))
                        .collect();
                    TensorEntry::new(n.clone(), vec![d0, d1], data).unwrap()
                })
                .collect();
            let c = TensorContainer { entries };
            let mut bytes = Vec::new();
            c.write_to(&mut bytes).unwrap();
            let back = TensorContainer::read_from(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back.entries.len(), c.entries.len());
            for (a, b) in c.entries.iter().zip(back.entries.iter()) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(&a.dims, &b.dims);
                for (x, y) in a.data.iter().zip(b.data.iter()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
