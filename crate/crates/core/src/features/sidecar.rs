//! `HSFT` feature sidecar files.
//!
//! Little-endian layout:
//!
//! ```text
//! "HSFT" | u32 version=1 | u32 count | u16 roi_w | u16 roi_h | u8 variant
//! count × ( f32 x | f32 y | f32 a | f32 b | f32 c | 128 × f32 descriptor )
//! ```
//!
//! The same format is the import path for externally computed features.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Descriptor, DescriptorVariant, EllipseKeypoint, FeatureError, FeatureSet, DESCRIPTOR_DIM};
use crate::geometry::AffineShape;

pub const MAGIC: &[u8; 4] = b"HSFT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 2 + 2 + 1;
const RECORD_LEN: usize = 4 * (5 + DESCRIPTOR_DIM);

pub fn write_to<W: Write>(features: &FeatureSet, mut out: W) -> Result<(), FeatureError> {
    features.validate()?;
    let roi_w = u16::try_from(features.roi_width)
        .map_err(|_| FeatureError::Format(format!("roi width {} exceeds u16", features.roi_width)))?;
    let roi_h = u16::try_from(features.roi_height)
        .map_err(|_| FeatureError::Format(format!("roi height {} exceeds u16", features.roi_height)))?;
    let count = u32::try_from(features.len()).map_err(|_| FeatureError::Format("too many features".into()))?;

    let mut buf = Vec::with_capacity(HEADER_LEN + features.len() * RECORD_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&roi_w.to_le_bytes());
    buf.extend_from_slice(&roi_h.to_le_bytes());
    buf.push(features.variant.code());
    for (kp, d) in features.keypoints.iter().zip(&features.descriptors) {
        for v in [kp.x, kp.y, kp.shape.a, kp.shape.b, kp.shape.c] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in d.0 {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_from<R: Read>(mut input: R) -> Result<FeatureSet, FeatureError> {
    let mut header = [0u8; HEADER_LEN];
    input.read_exact(&mut header)?;
    if &header[0..4] != MAGIC {
        return Err(FeatureError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(FeatureError::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let roi_w = u16::from_le_bytes(header[12..14].try_into().unwrap());
    let roi_h = u16::from_le_bytes(header[14..16].try_into().unwrap());
    let variant = DescriptorVariant::from_code(header[16])
        .ok_or_else(|| FeatureError::Format(format!("unknown variant {}", header[16])))?;

    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != count * RECORD_LEN {
        return Err(FeatureError::Format(format!(
            "expected {} record bytes, found {}",
            count * RECORD_LEN,
            body.len()
        )));
    }
    let mut keypoints = Vec::with_capacity(count);
    let mut descriptors = Vec::with_capacity(count);
    for rec in body.chunks_exact(RECORD_LEN) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
        let shape = AffineShape::new(f(2), f(3), f(4)).map_err(|e| FeatureError::Format(e.to_string()))?;
        keypoints.push(EllipseKeypoint::new(f(0), f(1), shape));
        let mut d = [0.0f32; DESCRIPTOR_DIM];
        for (i, v) in d.iter_mut().enumerate() {
            *v = f(5 + i);
        }
        descriptors.push(Descriptor(d));
    }
    Ok(FeatureSet { keypoints, descriptors, roi_width: roi_w as u32, roi_height: roi_h as u32, variant })
}

pub fn save(features: &FeatureSet, path: &Path) -> Result<(), FeatureError> {
    let tmp = path.with_extension("hsft.tmp");
    write_to(features, fs::File::create(&tmp)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<FeatureSet, FeatureError> {
    let bytes = fs::read(path)?;
    read_from(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_set(n: usize) -> FeatureSet {
        let mut fs = FeatureSet::empty(512, 300, DescriptorVariant::Sift);
        for i in 0..n {
            fs.keypoints.push(EllipseKeypoint::new(i as f32, 2.5 * i as f32, AffineShape::new(3.0, -0.5, 2.0).unwrap()));
            let mut d = [0.0f32; DESCRIPTOR_DIM];
            d[i % DESCRIPTOR_DIM] = 1.0;
            fs.descriptors.push(Descriptor(d));
        }
        fs
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_to(&sample_set(2), &mut buf).unwrap();
        assert_eq!(&buf[0..4], b"HSFT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(buf[12..14].try_into().unwrap()), 512);
        assert_eq!(u16::from_le_bytes(buf[14..16].try_into().unwrap()), 300);
        assert_eq!(buf[16], 0);
        assert_eq!(buf.len(), 17 + 2 * 532);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut buf = Vec::new();
        write_to(&sample_set(1), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_from(bad.as_slice()), Err(FeatureError::Format(_))));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(read_from(bad.as_slice()), Err(FeatureError::Format(_))));
        let truncated = &buf[..buf.len() - 3];
        assert!(read_from(truncated).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(
            pts in proptest::collection::vec((0.0f32..512.0, 0.0f32..512.0, 0.1f32..40.0, -20.0f32..20.0, 0.1f32..40.0), 0..20),
            root in any::<bool>(),
        ) {
            let variant = if root { DescriptorVariant::RootSift } else { DescriptorVariant::Sift };
            let mut fs = FeatureSet::empty(400, 512, variant);
            for (k, (x, y, a, b, c)) in pts.into_iter().enumerate() {
                fs.keypoints.push(EllipseKeypoint::new(x, y, AffineShape { a, b, c }));
                let mut d = [0.0f32; DESCRIPTOR_DIM];
                d[k] = x / 512.0;
                fs.descriptors.push(Descriptor(d));
            }
            let mut buf = Vec::new();
            write_to(&fs, &mut buf).unwrap();
            prop_assert_eq!(read_from(buf.as_slice()).unwrap(), fs);
        }
    }
}
