//! Binary descriptor files.
//!
//! Little-endian layout: magic `NRPD`, `u32` version (1), `u32` count T,
//! `u32` dimension, then T records of
//! `[cx, cy, a11, a12, a21, a22, orientation, response, values...]`, all `f32`.

use std::path::Path;

use crate::binio::write_atomic;

use super::{AffineRegion, Descriptor, DescriptorSet, FeatureError};

const MAGIC: &[u8; 4] = b"NRPD";
const VERSION: u32 = 1;
const HEADER: usize = 16;
const REGION_FIELDS: usize = 8;

pub fn encode_descriptors(set: &DescriptorSet) -> Vec<u8> {
    let dim = set.dim();
    let mut out = Vec::with_capacity(HEADER + set.len() * (REGION_FIELDS + dim) * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for d in &set.descriptors {
        assert_eq!(d.values.len(), dim, "descriptor dimension must be uniform within a set");
        let r = &d.region;
        for v in [r.cx, r.cy, r.shape[0], r.shape[1], r.shape[2], r.shape[3], r.orientation, r.response] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &d.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses descriptor-file bytes without renormalizing the values.
pub(crate) fn decode_raw(bytes: &[u8], image_id: &str) -> Result<DescriptorSet, FeatureError> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(FeatureError::UnsupportedFormat);
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(4) != VERSION {
        return Err(FeatureError::UnsupportedFormat);
    }
    if bytes.len() < HEADER {
        return Err(FeatureError::CorruptFile);
    }
    let count = u32_at(8) as usize;
    let dim = u32_at(12) as usize;
    let record = (REGION_FIELDS + dim) * 4;
    let expected = count.checked_mul(record).and_then(|n| n.checked_add(HEADER));
    if expected != Some(bytes.len()) {
        return Err(FeatureError::CorruptFile);
    }
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let mut descriptors = Vec::with_capacity(count);
    for t in 0..count {
        let base = HEADER + t * record;
        let f: Vec<f32> = (0..REGION_FIELDS).map(|i| f32_at(base + 4 * i)).collect();
        let mut region = AffineRegion::with_shape(f[0], f[1], [f[2], f[3], f[4], f[5]]);
        region.orientation = f[6];
        region.response = f[7];
        let values = (0..dim).map(|i| f32_at(base + 4 * (REGION_FIELDS + i))).collect::<Vec<f32>>();
        descriptors.push(Descriptor { values, region, low_contrast: false });
    }
    Ok(DescriptorSet::new(image_id, descriptors))
}

/// Parses descriptor-file bytes; every descriptor is re-L2-normalized.
pub fn decode_descriptors(bytes: &[u8], image_id: &str) -> Result<DescriptorSet, FeatureError> {
    let mut set = decode_raw(bytes, image_id)?;
    for d in &mut set.descriptors {
        super::l2_normalize_f32(&mut d.values);
    }
    Ok(set)
}

/// Loads a descriptor file; the image id is the file stem.
pub fn load_descriptors(path: impl AsRef<Path>) -> Result<DescriptorSet, FeatureError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_descriptors(&bytes, &id)
}

/// Writes a descriptor file atomically (temporary file, then rename).
pub fn save_descriptors(set: &DescriptorSet, path: impl AsRef<Path>) -> Result<(), FeatureError> {
    write_atomic(path.as_ref(), &encode_descriptors(set))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set(t: usize, dim: usize) -> DescriptorSet {
        let descriptors = (0..t)
            .map(|i| {
                let mut r = AffineRegion::with_shape(i as f32, 2.0 * i as f32, [1.5, 0.25, -0.125, 2.0]);
                r.orientation = 0.3 * i as f32;
                r.response = 10.0 - i as f32;
                Descriptor {
                    values: (0..dim).map(|k| ((k + i) % 7) as f32 * 0.1 + 0.01).collect(),
                    region: r,
                    low_contrast: false,
                }
            })
            .collect();
        DescriptorSet::new("img", descriptors)
    }

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let set = sample_set(4, 128);
        let back = decode_raw(&encode_descriptors(&set), "img").unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn payload_size_arithmetic() {
        let bytes = encode_descriptors(&sample_set(3, 128));
        assert_eq!(bytes.len() - HEADER, 3 * (32 + 128 * 4));
    }

    #[test]
    fn load_renormalizes_and_keeps_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.nrpd");
        let set = sample_set(3, 16);
        save_descriptors(&set, &path).unwrap();
        let back = load_descriptors(&path).unwrap();
        assert_eq!(back.image_id, "q");
        for (a, b) in back.descriptors.iter().zip(&set.descriptors) {
            let n: f32 = a.values.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            for k in 0..4 {
                assert!((a.region.shape[k] - b.region.shape[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_set_round_trip() {
        let set = DescriptorSet::new("e", Vec::new());
        let back = decode_descriptors(&encode_descriptors(&set), "e").unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let mut bytes = encode_descriptors(&sample_set(10, 8));
        // Declared T = 10 but only 9 records present.
        bytes.truncate(HEADER + 9 * (REGION_FIELDS + 8) * 4);
        assert!(matches!(decode_descriptors(&bytes, "x"), Err(FeatureError::CorruptFile)));
    }

    #[test]
    fn bad_magic_or_version_unsupported() {
        let mut bytes = encode_descriptors(&sample_set(1, 8));
        bytes[0] = b'X';
        assert!(matches!(decode_descriptors(&bytes, "x"), Err(FeatureError::UnsupportedFormat)));
        let mut bytes = encode_descriptors(&sample_set(1, 8));
        bytes[4] = 2;
        assert!(matches!(decode_descriptors(&bytes, "x"), Err(FeatureError::UnsupportedFormat)));
    }
}
