//! Binary interchange formats (little-endian).
//!
//! Descriptor file (`NMDS`):
//!
//! ```text
//! magic "NMDS" | u16 version | u32 N | u32 D_local | u32 D_sem | u32 D_fused
//! N×2 f64 keypoints | N×D_local f32 | N×D_sem f32 | N×D_fused f32
//! ```
//!
//! A zero `D_sem` / `D_fused` means the matrix is absent.
//!
//! Feature-map file (`NMFM`):
//!
//! ```text
//! magic "NMFM" | u16 version | u32 H | u32 W | u32 C | f32 stride | H×W×C f32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{DescriptorMatrix, DescriptorSet, DescriptorSource, FeatureMap};
use crate::error::{Error, Result};
use crate::formats::{DESCRIPTOR_FORMAT_VERSION, FEATURE_MAP_FORMAT_VERSION};
use crate::geometry::Point2;

const DESCRIPTOR_MAGIC: &[u8; 4] = b"NMDS";
const FEATURE_MAP_MAGIC: &[u8; 4] = b"NMFM";

/// Cursor over an in-memory buffer that reports byte offsets in errors.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.buf.len() as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32_block(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos as u64, format!("{what}: size overflow")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes after payload", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn check_magic(r: &mut Reader, magic: &[u8; 4]) -> Result<()> {
    let got = r.take(4, "magic")?;
    if got != magic {
        return Err(Error::format(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    Ok(())
}

fn check_version(r: &mut Reader, expected: u16) -> Result<()> {
    let off = r.pos as u64;
    let v = r.u16("version")?;
    if v != expected {
        return Err(Error::format(
            off,
            format!("unsupported version {v}, expected {expected}"),
        ));
    }
    Ok(())
}

pub fn write_descriptors_to(ds: &DescriptorSet, out: &mut impl Write) -> std::io::Result<()> {
    let n = ds.len() as u32;
    let d_sem = ds.semantic().map_or(0, |m| m.dim()) as u32;
    let d_fused = ds.fused().map_or(0, |m| m.dim()) as u32;
    let mut buf = Vec::with_capacity(22 + ds.len() * 16);
    buf.extend_from_slice(DESCRIPTOR_MAGIC);
    buf.extend_from_slice(&DESCRIPTOR_FORMAT_VERSION.to_le_bytes());
    for v in [n, ds.local().dim() as u32, d_sem, d_fused] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for p in ds.keypoints() {
        buf.extend_from_slice(&p.x.to_le_bytes());
        buf.extend_from_slice(&p.y.to_le_bytes());
    }
    for m in std::iter::once(ds.local()).chain(ds.semantic()).chain(ds.fused()) {
        for v in &m.data()[..ds.len() * m.dim()] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
}

pub fn write_descriptors(ds: &DescriptorSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_descriptors_to(ds, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_descriptors_from(bytes: &[u8]) -> Result<DescriptorSet> {
    let mut r = Reader::new(bytes);
    check_magic(&mut r, DESCRIPTOR_MAGIC)?;
    check_version(&mut r, DESCRIPTOR_FORMAT_VERSION)?;
    let n = r.u32("N")? as usize;
    let dims_off = r.pos as u64;
    let d_local = r.u32("D_local")? as usize;
    let d_sem = r.u32("D_sem")? as usize;
    let d_fused = r.u32("D_fused")? as usize;
    if d_local == 0 && n > 0 {
        return Err(Error::format(dims_off, "D_local is 0 but the set has keypoints"));
    }

    let mut keypoints = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let off = r.pos as u64;
        let p = Point2::new(r.f64("keypoint x")?, r.f64("keypoint y")?);
        if !p.is_finite() {
            return Err(Error::format(off, "non-finite keypoint"));
        }
        keypoints.push(p);
    }
    let mut matrix = |dim: usize, what: &str| -> Result<DescriptorMatrix> {
        let data = r.f32_block(n * dim, what)?;
        DescriptorMatrix::new(dim, data).map_err(|e| Error::format(r.pos as u64, e.to_string()))
    };
    let local = matrix(d_local, "local descriptors")?;
    let semantic = if d_sem > 0 {
        Some(matrix(d_sem, "semantic descriptors")?)
    } else {
        None
    };
    let fused = if d_fused > 0 {
        Some(matrix(d_fused, "fused descriptors")?)
    } else {
        None
    };
    r.finish()?;
    DescriptorSet::new(keypoints, local, semantic, fused, DescriptorSource::External)
        .map_err(|e| Error::format(dims_off, e.to_string()))
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_descriptors_from(&bytes)
}

pub fn write_feature_map_to(map: &FeatureMap, out: &mut impl Write) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(22 + map.data().len() * 4);
    buf.extend_from_slice(FEATURE_MAP_MAGIC);
    buf.extend_from_slice(&FEATURE_MAP_FORMAT_VERSION.to_le_bytes());
    for v in [map.height() as u32, map.width() as u32, map.channels() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&map.stride().to_le_bytes());
    for v in map.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn write_feature_map(map: &FeatureMap, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_feature_map_to(map, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_map_from(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = Reader::new(bytes);
    check_magic(&mut r, FEATURE_MAP_MAGIC)?;
    check_version(&mut r, FEATURE_MAP_FORMAT_VERSION)?;
    let dims_off = r.pos as u64;
    let h = r.u32("H")? as usize;
    let w = r.u32("W")? as usize;
    let c = r.u32("C")? as usize;
    let stride = r.f32("stride")?;
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::format(dims_off, "feature map size overflow"))?;
    let data = r.f32_block(count, "feature map data")?;
    r.finish()?;
    FeatureMap::new(h, w, c, stride, data).map_err(|e| Error::format(dims_off, e.to_string()))
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_feature_map_from(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set(n: usize, with_sem: bool) -> DescriptorSet {
        let kps = (0..n).map(|i| Point2::new(i as f64 * 1.5, 100.0 - i as f64)).collect();
        let local = DescriptorMatrix::new(3, (0..n * 3).map(|v| v as f32 * 0.1).collect()).unwrap();
        let sem = with_sem.then(|| DescriptorMatrix::new(2, (0..n * 2).map(|v| -(v as f32)).collect()).unwrap());
        DescriptorSet::new(kps, local, sem, None, DescriptorSource::BuiltinPatch).unwrap()
    }

    fn bytes_of(ds: &DescriptorSet) -> Vec<u8> {
        let mut b = Vec::new();
        write_descriptors_to(ds, &mut b).unwrap();
        b
    }

    #[test]
    fn header_layout() {
        let b = bytes_of(&sample_set(2, true));
        assert_eq!(&b[..4], b"NMDS");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u32::from_le_bytes(b[6..10].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[10..14].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[14..18].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[18..22].try_into().unwrap()), 0);
        assert_eq!(b.len(), 22 + 2 * 16 + 2 * 3 * 4 + 2 * 2 * 4);
    }

    #[test]
    fn round_trip() {
        let ds = sample_set(5, true);
        let b = bytes_of(&ds);
        let back = read_descriptors_from(&b).unwrap();
        assert_eq!(back, ds);
        assert_eq!(bytes_of(&back), b);
    }

    #[test]
    fn wrong_magic() {
        let mut b = bytes_of(&sample_set(1, false));
        b[0] = b'X';
        let err = read_descriptors_from(&b).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn wrong_version() {
        let mut b = bytes_of(&sample_set(1, false));
        b[4] = 2;
        assert!(matches!(
            read_descriptors_from(&b),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn truncated_rows() {
        let ds = sample_set(5, false);
        let mut b = bytes_of(&ds);
        // drop the last local row
        b.truncate(b.len() - 3 * 4);
        let err = read_descriptors_from(&b).unwrap_err();
        match err {
            Error::Format { offset, message } => {
                assert_eq!(offset, b.len() as u64);
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn trailing_bytes() {
        let mut b = bytes_of(&sample_set(2, false));
        b.push(0);
        assert!(matches!(read_descriptors_from(&b), Err(Error::Format { .. })));
    }

    #[test]
    fn feature_map_round_trip() {
        let map = FeatureMap::new(2, 3, 2, 8.0, (0..12).map(|v| v as f32 / 3.0).collect()).unwrap();
        let mut b = Vec::new();
        write_feature_map_to(&map, &mut b).unwrap();
        assert_eq!(&b[..4], b"NMFM");
        assert_eq!(read_feature_map_from(&b).unwrap(), map);
        b[1] = b'Q';
        assert!(read_feature_map_from(&b).is_err());
    }
}
