//! On-disk formats: the PCL1 point-cloud container and 16-bit PGM depth.
//!
//! PCL1 layout, little-endian: magic `PCL1`, `u32` point count, `u8`
//! has-colors flag, `N*3 f32` coordinates, then `N*3 f32` colors when
//! flagged.
//!
//! Depth maps are binary PGM (`P5`, maxval 65535) holding millimeters in
//! the standard most-significant-byte-first sample order; intrinsics travel
//! in the dataset manifest, not the image.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CameraIntrinsics, DepthMap, PointCloud};
use crate::error::{Error, Result};

const PCL1_MAGIC: &[u8; 4] = b"PCL1";
const PGM_MAXVAL: u32 = 65535;

pub fn write_pcl1(path: &Path, pc: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PCL1_MAGIC)?;
    w.write_all(&(pc.len() as u32).to_le_bytes())?;
    w.write_all(&[u8::from(pc.colors().is_some())])?;
    for p in pc.points() {
        for &c in p {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
    }
    if let Some(cols) = pc.colors() {
        for col in cols {
            for &c in col {
                w.write_all(&(c as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_pcl1(path: &Path) -> Result<PointCloud> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != PCL1_MAGIC {
        return Err(Error::Format(format!(
            "bad PCL1 magic in {}",
            path.display()
        )));
    }
    let mut buf4 = [0u8; 4];
    read_exact(&mut r, &mut buf4, path)?;
    let n = u32::from_le_bytes(buf4) as usize;
    let mut flag = [0u8; 1];
    read_exact(&mut r, &mut flag, path)?;
    let has_colors = match flag[0] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Format(format!(
                "bad has_colors flag {other} in {}",
                path.display()
            )))
        }
    };
    let read_triples = |r: &mut BufReader<File>, n: usize| -> Result<Vec<[f64; 3]>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut triple = [0.0f64; 3];
            for t in &mut triple {
                let mut b = [0u8; 4];
                read_exact(r, &mut b, path)?;
                *t = f32::from_le_bytes(b) as f64;
            }
            out.push(triple);
        }
        Ok(out)
    };
    let points = read_triples(&mut r, n)?;
    let colors = if has_colors {
        Some(read_triples(&mut r, n)?)
    } else {
        None
    };
    PointCloud::new(points, colors)
}

/// Writes depth in millimeters, clamped to the 16-bit PGM range.
pub fn write_pgm16(path: &Path, depth: &DepthMap) -> Result<()> {
    let intr = &depth.intrinsics;
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n{}\n", intr.width, intr.height, PGM_MAXVAL)?;
    for &d in depth.depths() {
        let mm = (d * 1000.0).round().clamp(0.0, PGM_MAXVAL as f64) as u16;
        w.write_all(&mm.to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pgm16(path: &Path, intrinsics: CameraIntrinsics) -> Result<DepthMap> {
    let mut r = BufReader::new(File::open(path)?);
    let mut contents = Vec::new();
    r.read_to_end(&mut contents)?;

    let mut cursor = 0usize;
    let mut next_token = |contents: &[u8]| -> Result<String> {
        while cursor < contents.len() && contents[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        if cursor < contents.len() && contents[cursor] == b'#' {
            while cursor < contents.len() && contents[cursor] != b'\n' {
                cursor += 1;
            }
            while cursor < contents.len() && contents[cursor].is_ascii_whitespace() {
                cursor += 1;
            }
        }
        let start = cursor;
        while cursor < contents.len() && !contents[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        if start == cursor {
            return Err(Error::Format(format!("truncated PGM {}", path.display())));
        }
        Ok(String::from_utf8_lossy(&contents[start..cursor]).into_owned())
    };

    let magic = next_token(&contents)?;
    if magic != "P5" {
        return Err(Error::Format(format!(
            "bad PGM magic {magic:?} in {}",
            path.display()
        )));
    }
    let width: usize = next_token(&contents)?
        .parse()
        .map_err(|_| Error::Format(format!("bad PGM width in {}", path.display())))?;
    let height: usize = next_token(&contents)?
        .parse()
        .map_err(|_| Error::Format(format!("bad PGM height in {}", path.display())))?;
    let maxval: u32 = next_token(&contents)?
        .parse()
        .map_err(|_| Error::Format(format!("bad PGM maxval in {}", path.display())))?;
    if maxval != PGM_MAXVAL {
        return Err(Error::Format(format!(
            "expected maxval {PGM_MAXVAL}, got {maxval} in {}",
            path.display()
        )));
    }
    if width != intrinsics.width || height != intrinsics.height {
        return Err(Error::Format(format!(
            "PGM is {width}x{height} but intrinsics say {}x{} in {}",
            intrinsics.width,
            intrinsics.height,
            path.display()
        )));
    }
    // Exactly one whitespace byte separates the header from the samples.
    cursor += 1;
    let needed = width * height * 2;
    if contents.len() < cursor + needed {
        return Err(Error::Format(format!("truncated PGM {}", path.display())));
    }
    let depths: Vec<f64> = contents[cursor..cursor + needed]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 1000.0)
        .collect();
    DepthMap::new(intrinsics, depths)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated file {}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn pcl1_roundtrip_with_colors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cloud.pcl1");
        let pc = PointCloud::new(
            vec![[1.0, 2.0, 3.0], [-0.5, 0.25, 0.125]],
            Some(vec![[0.1, 0.2, 0.3], [1.0, 0.0, 0.5]]),
        )
        .unwrap();
        write_pcl1(&path, &pc).unwrap();
        let back = read_pcl1(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in pc.points().iter().zip(back.points()) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-6);
            }
        }
        assert!(back.colors().is_some());
    }

    #[test]
    fn pcl1_bad_magic_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.pcl1");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_pcl1(&path), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_roundtrip_quantizes_to_millimeters() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("depth.pgm");
        let intr = CameraIntrinsics {
            fx: 10.0,
            fy: 10.0,
            cx: 1.0,
            cy: 1.0,
            width: 3,
            height: 2,
        };
        let dm = DepthMap::new(
            intr,
            vec![0.0, 1.2345, 2.0, 65.535, 0.0004, 3.1],
        )
        .unwrap();
        write_pgm16(&path, &dm).unwrap();
        let back = read_pgm16(&path, intr).unwrap();
        let expected = [0.0, 1.234, 2.0, 65.535, 0.0, 3.1];
        for (a, b) in back.depths().iter().zip(expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn pgm_truncation_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("short.pgm");
        std::fs::write(&path, b"P5\n4 4\n65535\n\x00\x01").unwrap();
        let intr = CameraIntrinsics {
            fx: 10.0,
            fy: 10.0,
            cx: 1.0,
            cy: 1.0,
            width: 4,
            height: 4,
        };
        assert!(matches!(read_pgm16(&path, intr), Err(Error::Format(_))));
    }
}
