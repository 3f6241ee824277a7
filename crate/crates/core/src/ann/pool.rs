use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::IndexError;
use crate::features::{Descriptor, DESCRIPTOR_DIM};

pub type ImageId = u64;

/// Which database image a pooled descriptor came from, and its index there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Owner {
    pub image_id: ImageId,
    pub local_index: u32,
}

/// Identity of a pool's contents: vector count plus SHA-256 of the vector bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolFingerprint {
    pub count: u64,
    pub checksum: String,
}

/// Flat collection of descriptors with per-vector ownership.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DescriptorPool {
    vectors: Vec<Descriptor>,
    owners: Vec<Owner>,
}

impl DescriptorPool {
    pub fn new(vectors: Vec<Descriptor>, owners: Vec<Owner>) -> Result<Self, IndexError> {
        if vectors.len() != owners.len() {
            return Err(IndexError::Ownership(format!(
                "{} vectors but {} owners",
                vectors.len(),
                owners.len()
            )));
        }
        let mut seen = HashSet::with_capacity(owners.len());
        if let Some(dup) = owners.iter().find(|o| !seen.insert(**o)) {
            return Err(IndexError::Ownership(format!("duplicate owner {dup:?}")));
        }
        Ok(Self { vectors, owners })
    }

    /// Pool of anonymous vectors, all owned by image 0 in order.
    pub fn from_descriptors(vectors: Vec<Descriptor>) -> Self {
        let owners = (0..vectors.len() as u32).map(|i| Owner { image_id: 0, local_index: i }).collect();
        Self { vectors, owners }
    }

    pub fn push_image(&mut self, image_id: ImageId, descriptors: &[Descriptor]) {
        for (i, d) in descriptors.iter().enumerate() {
            self.vectors.push(*d);
            self.owners.push(Owner { image_id, local_index: i as u32 });
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Descriptor] {
        &self.vectors
    }

    pub fn owners(&self) -> &[Owner] {
        &self.owners
    }

    #[inline]
    pub fn vector(&self, idx: usize) -> &Descriptor {
        &self.vectors[idx]
    }

    #[inline]
    pub fn owner(&self, idx: usize) -> Owner {
        self.owners[idx]
    }

    pub fn count_owned_by(&self, image_id: ImageId) -> usize {
        self.owners.iter().filter(|o| o.image_id == image_id).count()
    }

    pub fn fingerprint(&self) -> PoolFingerprint {
        let mut hasher = Sha256::new();
        for v in &self.vectors {
            for x in v.0 {
                hasher.update(x.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        PoolFingerprint {
            count: self.vectors.len() as u64,
            checksum: digest.iter().map(|b| format!("{b:02x}")).collect(),
        }
    }
}

/// Squared Euclidean distance, accumulated in eight lanes.
#[inline]
pub fn dist_sq(a: &Descriptor, b: &Descriptor) -> f32 {
    let mut acc = [0.0f32; 8];
    for (ca, cb) in a.0.chunks_exact(8).zip(b.0.chunks_exact(8)) {
        for l in 0..8 {
            let d = ca[l] - cb[l];
            acc[l] += d * d;
        }
    }
    debug_assert_eq!(DESCRIPTOR_DIM % 8, 0);
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(i: usize) -> Descriptor {
        let mut d = [0.0f32; DESCRIPTOR_DIM];
        d[i] = 1.0;
        Descriptor(d)
    }

    #[test]
    fn ownership_must_be_unique_and_aligned() {
        let o = Owner { image_id: 1, local_index: 0 };
        assert!(DescriptorPool::new(vec![unit(0)], vec![]).is_err());
        assert!(DescriptorPool::new(vec![unit(0), unit(1)], vec![o, o]).is_err());
        assert!(DescriptorPool::new(vec![unit(0)], vec![o]).is_ok());
    }

    #[test]
    fn fingerprint_tracks_contents() {
        let mut a = DescriptorPool::default();
        a.push_image(1, &[unit(0), unit(1)]);
        let mut b = DescriptorPool::default();
        b.push_image(1, &[unit(0), unit(1)]);
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.push_image(2, &[unit(2)]);
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(b.fingerprint().count, 3);
    }

    #[test]
    fn distance_matches_naive() {
        let mut x = [0.0f32; DESCRIPTOR_DIM];
        let mut y = [0.0f32; DESCRIPTOR_DIM];
        for i in 0..DESCRIPTOR_DIM {
            x[i] = (i as f32 * 0.37).sin().abs();
            y[i] = (i as f32 * 0.11).cos().abs();
        }
        let naive: f64 = x.iter().zip(&y).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        assert!((dist_sq(&Descriptor(x), &Descriptor(y)) as f64 - naive).abs() < 1e-4);
    }
}
