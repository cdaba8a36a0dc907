//! Intensity and label volumes and their native file format.
//!
//! A file is an 8-byte magic (`NTVOL001` for intensities, `NTLBL001` for
//! labels), one UTF-8 JSON header line terminated by `\n`, then exactly
//! `D*H*W` little-endian elements (`f32` or `u8`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: &[u8; 8] = b"NTVOL001";
pub const LABEL_MAGIC: &[u8; 8] = b"NTLBL001";
pub const NUM_CLASSES: usize = 4;

/// Tissue classes in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Tissue {
    Background = 0,
    Csf = 1,
    Gm = 2,
    Wm = 3,
}

impl Tissue {
    /// CSF, GM, WM: the classes metrics are reported for.
    pub const FOREGROUND: [Tissue; 3] = [Tissue::Csf, Tissue::Gm, Tissue::Wm];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Tissue::Background => "bg",
            Tissue::Csf => "csf",
            Tissue::Gm => "gm",
            Tissue::Wm => "wm",
        }
    }
}

fn check_geometry(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::shape("volume", format!("dims {dims:?} must be positive")));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::shape("volume", format!("spacing {spacing:?} must be positive")));
    }
    if dims.iter().product::<usize>() != len {
        return Err(Error::shape(
            "volume",
            format!("dims {dims:?} need {} voxels, got {len}", dims.iter().product::<usize>()),
        ));
    }
    Ok(())
}

/// Intensities in D-then-H-then-W row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        Ok(Volume { dims, spacing, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn slice(&self, d: usize) -> &[f32] {
        let hw = self.dims[1] * self.dims[2];
        &self.data[d * hw..(d + 1) * hw]
    }

    /// Rescale intensities to `[0, 1]`; a constant volume maps to zeros.
    pub fn min_max_normalized(&self) -> Volume {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data.iter().map(|&v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume { data, ..self.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_tagged(path, None)
    }

    /// Save with an optional provenance hash in the header.
    pub fn save_tagged(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        let mut payload = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        write_file(path, IMAGE_MAGIC, &header(self.dims, self.spacing, "f32", config_hash), &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        match load_volume(path)? {
            AnyVolume::Image(v) => Ok(v),
            AnyVolume::Labels(_) => Err(Error::BadMagic {
                path: path.to_owned(),
                expected: String::from_utf8_lossy(IMAGE_MAGIC).into(),
            }),
        }
    }
}

/// Class labels in `{0, 1, 2, 3}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        check_geometry(dims, spacing, labels.len())?;
        if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= NUM_CLASSES) {
            return Err(Error::shape(
                "label volume",
                format!("label {value} at voxel {index} is not a valid class"),
            ));
        }
        Ok(LabelVolume { dims, spacing, labels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn slice(&self, d: usize) -> &[u8] {
        let hw = self.dims[1] * self.dims[2];
        &self.labels[d * hw..(d + 1) * hw]
    }

    /// Boolean mask of one class.
    pub fn mask(&self, class_id: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class_id).collect()
    }

    pub fn count(&self, class_id: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class_id).count()
    }

    pub fn with_spacing(&self, spacing: [f64; 3]) -> Result<Self> {
        LabelVolume::new(self.dims, spacing, self.labels.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_tagged(path, None)
    }

    pub fn save_tagged(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        write_file(path, LABEL_MAGIC, &header(self.dims, self.spacing, "u8", config_hash), &self.labels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        match load_volume(path)? {
            AnyVolume::Labels(v) => Ok(v),
            AnyVolume::Image(_) => Err(Error::BadMagic {
                path: path.to_owned(),
                expected: String::from_utf8_lossy(LABEL_MAGIC).into(),
            }),
        }
    }
}

/// An intensity volume with its ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub id: String,
    pub image: Volume,
    pub labels: LabelVolume,
}

impl LabeledVolume {
    pub fn new(id: impl Into<String>, image: Volume, labels: LabelVolume) -> Result<Self> {
        if image.dims() != labels.dims() {
            return Err(Error::shape(
                "labeled volume",
                format!("image dims {:?} vs label dims {:?}", image.dims(), labels.dims()),
            ));
        }
        Ok(LabeledVolume {
            id: id.into(),
            image,
            labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Image(Volume),
    Labels(LabelVolume),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

fn header(dims: [usize; 3], spacing: [f64; 3], dtype: &str, config_hash: Option<&str>) -> Vec<u8> {
    let h = Header {
        dims,
        spacing,
        dtype: dtype.into(),
        config_hash: config_hash.map(str::to_owned),
    };
    let mut line = serde_json::to_vec(&h).expect("header serializes");
    line.push(b'\n');
    line
}

/// Write to a sibling temp file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

fn write_file(path: &Path, magic: &[u8; 8], header: &[u8], payload: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + header.len() + payload.len());
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(header);
    bytes.extend_from_slice(payload);
    write_atomic(path, &bytes)
}

pub fn load_volume(path: &Path) -> Result<AnyVolume> {
    let bytes = fs::read(path)?;
    let bad_magic = || Error::BadMagic {
        path: path.to_owned(),
        expected: "NTVOL001 or NTLBL001".into(),
    };
    if bytes.len() < 8 {
        return Err(bad_magic());
    }
    let is_image = match &bytes[..8] {
        m if m == IMAGE_MAGIC => true,
        m if m == LABEL_MAGIC => false,
        _ => return Err(bad_magic()),
    };
    let header_err = |detail: String| Error::Header {
        path: path.to_owned(),
        detail,
    };
    let nl = bytes[8..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| header_err("no newline terminating the header".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[8..8 + nl]).map_err(|e| header_err(e.to_string()))?;
    let payload = &bytes[8 + nl + 1..];
    let (want_dtype, elem) = if is_image { ("f32", 4) } else { ("u8", 1) };
    if header.dtype != want_dtype {
        return Err(header_err(format!("dtype {:?}, expected {want_dtype:?}", header.dtype)));
    }
    if header.dims.contains(&0) {
        return Err(header_err(format!("dims {:?} must be positive", header.dims)));
    }
    let expected = header
        .dims
        .iter()
        .try_fold(elem, |acc: usize, &d| acc.checked_mul(d))
        .ok_or_else(|| header_err("dims overflow".into()))?;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_owned(),
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::PayloadMismatch {
            path: path.to_owned(),
            expected,
            actual: payload.len(),
        });
    }
    let geometry = |e: Error| header_err(e.to_string());
    if is_image {
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(AnyVolume::Image(
            Volume::new(header.dims, header.spacing, data).map_err(geometry)?,
        ))
    } else {
        if let Some((index, &value)) = payload.iter().enumerate().find(|(_, &l)| l as usize >= NUM_CLASSES) {
            return Err(Error::InvalidLabel {
                path: path.to_owned(),
                value,
                index,
            });
        }
        Ok(AnyVolume::Labels(
            LabelVolume::new(header.dims, header.spacing, payload.to_vec()).map_err(geometry)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_image() -> Volume {
        let data = (0..2 * 3 * 4).map(|i| (i as f32 * 0.731).sin() * 1e3).collect();
        Volume::new([2, 3, 4], [0.9375, 1.5, 0.9375], data).unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ntvol");
        let v = sample_image();
        v.save(&p).unwrap();
        let back = Volume::load(&p).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.spacing().map(f64::to_bits), v.spacing().map(f64::to_bits));
        let bits: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
        let want: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, want);

        let l = LabelVolume::new([2, 2, 2], [1.0; 3], vec![0, 1, 2, 3, 3, 2, 1, 0]).unwrap();
        let lp = dir.path().join("a.ntlbl");
        l.save(&lp).unwrap();
        assert_eq!(LabelVolume::load(&lp).unwrap(), l);
    }

    #[test]
    fn truncated_and_oversized_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ntvol");
        sample_image().save(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::TruncatedPayload { .. })));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0, 0, 0]);
        fs::write(&p, &long).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::PayloadMismatch { .. })));
    }

    #[test]
    fn bad_magic_and_bad_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        fs::write(&p, b"NOTAVOL1{}\n").unwrap();
        assert!(matches!(load_volume(&p), Err(Error::BadMagic { .. })));

        let mut bytes = LABEL_MAGIC.to_vec();
        bytes.extend_from_slice(b"{\"dims\":[1,1,2],\"spacing\":[1.0,1.0,1.0],\"dtype\":\"u8\"}\n");
        bytes.extend_from_slice(&[1, 4]);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::InvalidLabel { value: 4, index: 1, .. })));
    }

    #[test]
    fn wrong_kind_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ntvol");
        sample_image().save(&p).unwrap();
        assert!(LabelVolume::load(&p).is_err());
    }

    #[test]
    fn min_max() {
        let v = Volume::new([1, 1, 3], [1.0; 3], vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(v.min_max_normalized().data(), &[0.0, 0.5, 1.0]);
    }
}
