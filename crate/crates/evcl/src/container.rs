//! Minimal binary container for named tensors.
//!
//! Layout, all integers little-endian:
//! magic `EVCLTNSR` (8 bytes), format version u32, kind u8, task index u32,
//! extra u64 (meaning depends on kind), entry count u32, then per entry:
//! name length u16 + UTF-8 name, role u8, rank u8, dims u32 each, and the
//! values as f64 bits. Writing the same tensors twice produces identical
//! bytes, and a read followed by a write round-trips bit-exactly.

use std::io::{self, Read, Write};

use crate::grad::Tensor;

pub(crate) const MAGIC: [u8; 8] = *b"EVCLTNSR";
pub(crate) const VERSION: u32 = 1;

pub(crate) const KIND_POSTERIOR: u8 = 0;
pub(crate) const KIND_FISHER: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Entry {
    pub name: String,
    pub role: u8,
    pub tensor: Tensor,
}

#[derive(Debug)]
pub(crate) struct Container {
    pub kind: u8,
    pub task: u32,
    pub extra: u64,
    pub entries: Vec<Entry>,
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub(crate) fn write_container(w: &mut impl Write, c: &Container) -> io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[c.kind])?;
    w.write_all(&c.task.to_le_bytes())?;
    w.write_all(&c.extra.to_le_bytes())?;
    let count = u32::try_from(c.entries.len()).map_err(|_| bad("too many entries"))?;
    w.write_all(&count.to_le_bytes())?;
    for e in &c.entries {
        let name_len = u16::try_from(e.name.len()).map_err(|_| bad("entry name too long"))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&[e.role])?;
        let rank = u8::try_from(e.tensor.rank()).map_err(|_| bad("rank too large"))?;
        w.write_all(&[rank])?;
        for &d in e.tensor.shape() {
            let d = u32::try_from(d).map_err(|_| bad("dimension too large"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in e.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> io::Result<()> {
    r.read_exact(buf)
        .map_err(|_| bad(format!("truncated container: missing {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> io::Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_container(r: &mut impl Read) -> io::Result<Container> {
    let mut magic = [0u8; 8];
    read_exact_or(r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(bad("not a tensor container (bad magic)"));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(bad(format!("unsupported container version {version}")));
    }
    let mut kind = [0u8; 1];
    read_exact_or(r, &mut kind, "kind")?;
    let task = read_u32(r, "task index")?;
    let mut extra = [0u8; 8];
    read_exact_or(r, &mut extra, "extra field")?;
    let extra = u64::from_le_bytes(extra);
    let count = read_u32(r, "entry count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut nl = [0u8; 2];
        read_exact_or(r, &mut nl, "name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
        read_exact_or(r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| bad("entry name is not UTF-8"))?;
        let mut role_rank = [0u8; 2];
        read_exact_or(r, &mut role_rank, "role and rank")?;
        let mut shape = Vec::with_capacity(role_rank[1] as usize);
        for _ in 0..role_rank[1] {
            shape.push(read_u32(r, "dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut vb = [0u8; 8];
        for _ in 0..numel {
            read_exact_or(r, &mut vb, "tensor values")?;
            data.push(f64::from_le_bytes(vb));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
        entries.push(Entry {
            name,
            role: role_rank[0],
            tensor,
        });
    }
    Ok(Container {
        kind: kind[0],
        task,
        extra,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            kind: KIND_POSTERIOR,
            task: 3,
            extra: 7,
            entries: vec![
                Entry {
                    name: "trunk0".into(),
                    role: 1,
                    tensor: Tensor::matrix(2, 2, vec![1.0, -0.5, 1e-300, f64::MIN_POSITIVE])
                        .unwrap(),
                },
                Entry {
                    name: "head0".into(),
                    role: 0,
                    tensor: Tensor::vector(vec![0.25]),
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact_and_stable() {
        let c = sample();
        let mut buf = Vec::new();
        write_container(&mut buf, &c).unwrap();
        let mut buf2 = Vec::new();
        write_container(&mut buf2, &c).unwrap();
        assert_eq!(buf, buf2, "same input must serialize to identical bytes");

        let back = read_container(&mut buf.as_slice()).unwrap();
        assert_eq!(back.kind, c.kind);
        assert_eq!(back.task, c.task);
        assert_eq!(back.extra, c.extra);
        assert_eq!(back.entries, c.entries);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut buf = Vec::new();
        write_container(&mut buf, &sample()).unwrap();
        buf[0] ^= 0xFF;
        let err = read_container(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn rejects_truncation() {
        let mut buf = Vec::new();
        write_container(&mut buf, &sample()).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_container(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn rejects_future_version() {
        let mut buf = Vec::new();
        write_container(&mut buf, &sample()).unwrap();
        buf[8] = 99;
        let err = read_container(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
