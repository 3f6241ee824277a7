use super::{dist_sq, DescriptorPool, NeighborList, TopK};
use crate::features::Descriptor;

/// Exact k-NN by full scan; ties go to the lower pool index.
pub fn brute_force_knn(pool: &DescriptorPool, q: &Descriptor, k: usize) -> NeighborList {
    let mut top = TopK::new(k.min(pool.len()));
    for (i, v) in pool.vectors().iter().enumerate() {
        top.push(dist_sq(q, v), i as u32);
    }
    top.into_list()
}
