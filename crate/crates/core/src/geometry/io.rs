//! Point-cloud file formats.
//!
//! Two formats are supported and auto-detected on read:
//!
//! - text: one `x y z` triple per line, whitespace separated;
//! - binary: an 8-byte little-endian count header followed by that many
//!   little-endian `f32` (x, y, z) records.

use super::{GeometryError, PointCloud};
use std::fs;
use std::path::Path;

const BINARY_HEADER_LEN: usize = 8;
const BINARY_RECORD_LEN: usize = 12;

/// Reads a point cloud, sniffing the format: a file whose length is exactly
/// `8 + 12·count` for the count in its header is binary, anything else is
/// parsed as text.
pub fn read_pointcloud(path: &Path) -> Result<PointCloud, GeometryError> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        return Err(GeometryError::InvalidInput(format!(
            "{}: empty file",
            path.display()
        )));
    }
    if let Some(pc) = try_parse_binary(&bytes) {
        return Ok(pc);
    }
    let text = String::from_utf8(bytes).map_err(|_| GeometryError::Format {
        line: 1,
        msg: "not valid UTF-8 text and not a binary point-cloud record".into(),
    })?;
    parse_text(&text)
}

fn try_parse_binary(bytes: &[u8]) -> Option<PointCloud> {
    if bytes.len() < BINARY_HEADER_LEN {
        return None;
    }
    let count = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if count == 0 || bytes.len() != BINARY_HEADER_LEN + count * BINARY_RECORD_LEN {
        return None;
    }
    let mut points = Vec::with_capacity(count);
    for rec in bytes[BINARY_HEADER_LEN..].chunks_exact(BINARY_RECORD_LEN) {
        let x = f32::from_le_bytes(rec[0..4].try_into().unwrap());
        let y = f32::from_le_bytes(rec[4..8].try_into().unwrap());
        let z = f32::from_le_bytes(rec[8..12].try_into().unwrap());
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return None;
        }
        points.push([x as f64, y as f64, z as f64]);
    }
    Some(PointCloud::new(points))
}

pub fn parse_text(text: &str) -> Result<PointCloud, GeometryError> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(GeometryError::Format {
                line: i + 1,
                msg: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let mut coord = [0.0f64; 3];
        for (c, field) in fields.iter().enumerate() {
            coord[c] = field.parse::<f64>().map_err(|_| GeometryError::Format {
                line: i + 1,
                msg: format!("cannot parse `{field}` as a number"),
            })?;
            if !coord[c].is_finite() {
                return Err(GeometryError::Format {
                    line: i + 1,
                    msg: format!("non-finite coordinate `{field}`"),
                });
            }
        }
        points.push(coord);
    }
    if points.is_empty() {
        return Err(GeometryError::InvalidInput(
            "no points in text input".into(),
        ));
    }
    Ok(PointCloud::new(points))
}

pub fn write_text(pc: &PointCloud, path: &Path) -> Result<(), GeometryError> {
    let mut out = String::new();
    for p in pc.points() {
        out.push_str(&format!("{:.9} {:.9} {:.9}\n", p[0], p[1], p[2]));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_binary(pc: &PointCloud, path: &Path) -> Result<(), GeometryError> {
    fs::write(path, to_binary(pc))?;
    Ok(())
}

pub fn to_binary(pc: &PointCloud) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(BINARY_HEADER_LEN + pc.len() * BINARY_RECORD_LEN);
    bytes.extend_from_slice(&(pc.len() as u64).to_le_bytes());
    for p in pc.points() {
        for c in 0..3 {
            bytes.extend_from_slice(&(p[c] as f32).to_le_bytes());
        }
    }
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn text_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cloud.xyz");
        std::fs::write(&path, "0 0 0\n1 0 0\n").unwrap();
        let pc = read_pointcloud(&path).unwrap();
        assert_eq!(pc.len(), 2);
        assert_eq!(pc.points()[1], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let err = parse_text("0 0 x\n").unwrap_err();
        match err {
            GeometryError::Format { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn binary_roundtrip_is_stable() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cloud.bin");
        let pc = PointCloud::new(vec![[0.25, -1.5, 3.0], [0.1, 0.2, 0.3]]);
        write_binary(&pc, &path).unwrap();
        // First read quantizes to f32; a second write/read cycle is
        // bit-identical from then on.
        let once = read_pointcloud(&path).unwrap();
        write_binary(&once, &path).unwrap();
        let bytes_a = std::fs::read(&path).unwrap();
        let twice = read_pointcloud(&path).unwrap();
        assert_eq!(once, twice);
        assert_eq!(bytes_a, to_binary(&twice));
        // f32-exact coordinates survive the first cycle too.
        assert_eq!(once.points()[0], [0.25, -1.5, 3.0]);
    }

    #[test]
    fn empty_file_is_invalid_input() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.xyz");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(
            read_pointcloud(&path),
            Err(GeometryError::InvalidInput(_))
        ));
    }
}
