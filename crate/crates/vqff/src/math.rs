//! Small vector helpers used across the pipeline.
//!
//! Dot products and norms accumulate in f64 with a fixed left-to-right order,
//! so results do not depend on thread count or chunking.

/// Dot product with f64 accumulation.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

/// L2 norm with f64 accumulation.
#[inline]
pub fn norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

/// Scale `v` to unit norm in place. Returns the pre-scaling norm.
#[inline]
pub fn normalize_in_place(v: &mut [f32]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        let inv = 1.0 / n;
        for x in v.iter_mut() {
            *x = (f64::from(*x) * inv) as f32;
        }
    }
    n
}

/// Deterministic seed derivation: splitmix64 finalizer folded over the tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = base;
    for &t in tags {
        state = splitmix64(state ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    splitmix64(state)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_scales_to_unit() {
        let mut v = vec![3.0f32, 4.0];
        let n = normalize_in_place(&mut v);
        assert_eq!(n, 5.0);
        assert_eq!(v, vec![0.6, 0.8]);
    }

    #[test]
    fn derive_seed_varies_with_tags() {
        let a = derive_seed(7, &[1, 2]);
        let b = derive_seed(7, &[2, 1]);
        let c = derive_seed(7, &[1, 2]);
        assert_eq!(a, c);
        assert_ne!(a, b);
    }
}
