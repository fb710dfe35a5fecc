use std::io::{BufWriter, Write};
use std::path::Path;

use mpm_core::Vec3;

use crate::BenchError;

pub const MAGIC: &[u8; 4] = b"MPMF";
pub const VERSION: u32 = 1;
const HEADER_BYTES: usize = 12;

/// Writes positions as little-endian f32 triples behind a 12-byte header.
pub fn write_snapshot(path: &Path, positions: &[Vec3]) -> Result<(), BenchError> {
    let io = |e| BenchError::Io { path: path.to_owned(), source: e };
    let count = u32::try_from(positions.len())
        .map_err(|_| BenchError::Config(format!("{} particles exceed the snapshot format", positions.len())))?;
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    for p in positions {
        for c in p.iter() {
            w.write_all(&(*c as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_snapshot(path: &Path) -> Result<Vec<[f32; 3]>, BenchError> {
    let bytes = std::fs::read(path).map_err(|e| BenchError::Io { path: path.to_owned(), source: e })?;
    let bad = |reason: String| BenchError::Snapshot { path: path.to_owned(), reason };
    if bytes.len() < HEADER_BYTES || &bytes[..4] != MAGIC {
        return Err(bad("missing magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != VERSION {
        return Err(bad(format!("version {}", word(4))));
    }
    let count = word(8) as usize;
    if bytes.len() != HEADER_BYTES + count * 12 {
        return Err(bad(format!("{} bytes for {count} particles", bytes.len())));
    }
    Ok(bytes[HEADER_BYTES..]
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().expect("4 bytes"));
            [f(0), f(4), f(8)]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_snapshot_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.mpmf");
        write_snapshot(&path, &[]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes, [b'M', b'P', b'M', b'F', 1, 0, 0, 0, 0, 0, 0, 0]);
        assert!(read_snapshot(&path).unwrap().is_empty());
    }

    #[test]
    fn origin_particle_is_24_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.mpmf");
        write_snapshot(&path, &[Vec3::zeros()]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert!(bytes[12..].iter().all(|&b| b == 0));
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.mpmf");
        let pts = [Vec3::new(1.5, -2.25, 1e-7), Vec3::new(123.456, 0.1, 7.0)];
        write_snapshot(&path, &pts).unwrap();
        let back = read_snapshot(&path).unwrap();
        for (a, b) in pts.iter().zip(&back) {
            for k in 0..3 {
                assert_eq!(a[k] as f32, b[k]);
            }
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.mpmf");
        std::fs::write(&path, b"MPMX\x01\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_snapshot(&path), Err(BenchError::Snapshot { .. })));
        assert!(matches!(read_snapshot(&dir.path().join("missing")), Err(BenchError::Io { .. })));
    }
}
