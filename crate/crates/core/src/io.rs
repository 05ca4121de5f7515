//! Volume (`.xwv`) and projection (`.xwp`) files.
//!
//! Both start with a 64-byte ASCII header, space padded and terminated by
//! `\n` in the last byte, followed by little-endian `f32` samples, x-fastest:
//!
//! ```text
//! XWINVOL1 nx ny nz sx sy sz ox oy oz
//! XWINPRJ1 nu nv pitch
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::projector::ProjectionImage;
use crate::volumegen::VoxelVolume;

pub const HEADER_LEN: usize = 64;
const VOLUME_TAG: &str = "XWINVOL1";
const PROJECTION_TAG: &str = "XWINPRJ1";

fn header(fields: &str) -> Result<Vec<u8>> {
    if fields.len() > HEADER_LEN - 1 {
        return Err(Error::Config(format!(
            "header {fields:?} does not fit in {HEADER_LEN} bytes"
        )));
    }
    let mut out = fields.as_bytes().to_vec();
    out.resize(HEADER_LEN - 1, b' ');
    out.push(b'\n');
    Ok(out)
}

fn split_header<'a>(path: &Path, bytes: &'a [u8], tag: &str) -> Result<(Vec<&'a str>, &'a [u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::decode(path, "file shorter than header"));
    }
    let (head, payload) = bytes.split_at(HEADER_LEN);
    if head[HEADER_LEN - 1] != b'\n' {
        return Err(Error::decode(path, "header not newline terminated"));
    }
    let text = std::str::from_utf8(&head[..HEADER_LEN - 1])
        .map_err(|_| Error::decode(path, "header is not ASCII"))?;
    let fields: Vec<&str> = text.split_ascii_whitespace().collect();
    if fields.first() != Some(&tag) {
        return Err(Error::decode(path, format!("expected tag {tag}")));
    }
    Ok((fields[1..].to_vec(), payload))
}

fn parse<T: std::str::FromStr>(path: &Path, s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::decode(path, format!("bad {what} field {s:?}")))
}

fn floats_from(path: &Path, payload: &[u8], count: usize) -> Result<Vec<f32>> {
    if payload.len() != count * 4 {
        return Err(Error::decode(
            path,
            format!("payload has {} bytes, expected {}", payload.len(), count * 4),
        ));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn floats_to(buf: &mut Vec<u8>, data: &[f32]) {
    buf.reserve(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_volume(vol: &VoxelVolume) -> Result<Vec<u8>> {
    vol.validate()?;
    let [nx, ny, nz] = vol.dims;
    let [sx, sy, sz] = vol.spacing;
    let [ox, oy, oz] = vol.origin;
    let mut buf = header(&format!(
        "{VOLUME_TAG} {nx} {ny} {nz} {sx} {sy} {sz} {ox} {oy} {oz}"
    ))?;
    floats_to(&mut buf, &vol.data);
    Ok(buf)
}

pub fn decode_volume(path: &Path, bytes: &[u8]) -> Result<VoxelVolume> {
    let (f, payload) = split_header(path, bytes, VOLUME_TAG)?;
    if f.len() != 9 {
        return Err(Error::decode(path, "volume header needs 9 fields"));
    }
    let mut dims = [0usize; 3];
    let mut spacing = [0.0; 3];
    let mut origin = [0.0; 3];
    for a in 0..3 {
        dims[a] = parse(path, f[a], "dimension")?;
        spacing[a] = parse(path, f[3 + a], "spacing")?;
        origin[a] = parse(path, f[6 + a], "origin")?;
    }
    if dims.iter().any(|&n| n == 0) {
        return Err(Error::decode(path, format!("zero dimension in {dims:?}")));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| Error::decode(path, "dimension product overflows"))?;
    let data = floats_from(path, payload, count)?;
    let vol = VoxelVolume {
        dims,
        spacing,
        origin,
        data,
    };
    vol.validate()
        .map_err(|e| Error::decode(path, e.to_string()))?;
    Ok(vol)
}

pub fn save_volume(path: impl AsRef<Path>, vol: &VoxelVolume) -> Result<()> {
    fs::write(path, encode_volume(vol)?)?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<VoxelVolume> {
    let path = path.as_ref();
    decode_volume(path, &fs::read(path)?)
}

pub fn encode_projection(img: &ProjectionImage) -> Result<Vec<u8>> {
    let mut buf = header(&format!("{PROJECTION_TAG} {} {} {}", img.nu, img.nv, img.pitch))?;
    floats_to(&mut buf, &img.data);
    Ok(buf)
}

pub fn decode_projection(path: &Path, bytes: &[u8]) -> Result<ProjectionImage> {
    let (f, payload) = split_header(path, bytes, PROJECTION_TAG)?;
    if f.len() != 3 {
        return Err(Error::decode(path, "projection header needs 3 fields"));
    }
    let nu: usize = parse(path, f[0], "nu")?;
    let nv: usize = parse(path, f[1], "nv")?;
    let pitch: f64 = parse(path, f[2], "pitch")?;
    if nu == 0 || nv == 0 || !(pitch > 0.0) {
        return Err(Error::decode(path, "degenerate projection header"));
    }
    let data = floats_from(path, payload, nu * nv)?;
    Ok(ProjectionImage {
        nu,
        nv,
        pitch,
        data,
        geometry: None,
    })
}

pub fn save_projection(path: impl AsRef<Path>, img: &ProjectionImage) -> Result<()> {
    fs::write(path, encode_projection(img)?)?;
    Ok(())
}

pub fn load_projection(path: impl AsRef<Path>) -> Result<ProjectionImage> {
    let path = path.as_ref();
    decode_projection(path, &fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumegen::{generate_phantom, GridSpec, PhantomSpec};

    #[test]
    fn volume_round_trip_is_exact() {
        let grid = GridSpec {
            dims: [16, 12, 10],
            spacing: [4.0, 3.5, 2.25],
        };
        let (vol, _) = generate_phantom(&PhantomSpec::random(42, grid)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.xwv");
        save_volume(&p, &vol).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back, vol);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 4 * vol.data.len());
        assert!(bytes[..8].starts_with(b"XWINVOL1"));
        assert_eq!(bytes[HEADER_LEN - 1], b'\n');
    }

    #[test]
    fn truncated_volume_is_a_decode_error() {
        let vol = VoxelVolume::zeros([8; 3], [1.0; 3]).unwrap();
        let bytes = encode_volume(&vol).unwrap();
        let err = decode_volume(Path::new("t.xwv"), &bytes[..bytes.len() - 3]);
        assert!(matches!(err, Err(Error::Decode { .. })));
    }

    #[test]
    fn zero_dims_rejected() {
        let mut bytes = header("XWINVOL1 0 8 8 1 1 1 0 0 0").unwrap();
        bytes.extend_from_slice(&[]);
        assert!(matches!(
            decode_volume(Path::new("z.xwv"), &bytes),
            Err(Error::Decode { .. })
        ));
    }

    #[test]
    fn wrong_tag_rejected() {
        let img = ProjectionImage::zeros(8, 8, 2.0);
        let bytes = encode_projection(&img).unwrap();
        assert!(decode_volume(Path::new("p"), &bytes).is_err());
        let back = decode_projection(Path::new("p"), &bytes).unwrap();
        assert_eq!(back, img);
    }
}
