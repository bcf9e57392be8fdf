//! Vector primitives used inside fused operators.
//!
//! All kernels operate on caller-owned buffers; add-variants accumulate into
//! the output without zeroing it. Each kernel accounts its flops into the
//! passed counter cell. Offsets and lengths are checked against operand
//! bounds and violate the contract loudly.

#[inline]
fn check(slice: &[f64], off: usize, len: usize) {
    assert!(
        off + len <= slice.len(),
        "kernel operand out of bounds: off={off} len={len} cap={}",
        slice.len()
    );
}

/// Inner product of `a[ai..ai+len]` and `b[bi..bi+len]`; 2n-1 flops.
pub fn dot_product(a: &[f64], b: &[f64], ai: usize, bi: usize, len: usize, flops: &mut u64) -> f64 {
    check(a, ai, len);
    check(b, bi, len);
    let mut acc = 0.0;
    for k in 0..len {
        acc += a[ai + k] * b[bi + k];
    }
    if len > 0 {
        *flops += 2 * len as u64 - 1;
    }
    acc
}

/// Sparse-row inner product: sum of `avals[k] * b[bi + aix[k]]`.
pub fn dot_product_sparse(
    avals: &[f64],
    aix: &[usize],
    b: &[f64],
    bi: usize,
    flops: &mut u64,
) -> f64 {
    let mut acc = 0.0;
    for (v, &c) in avals.iter().zip(aix) {
        acc += v * b[bi + c];
    }
    if !avals.is_empty() {
        *flops += 2 * avals.len() as u64 - 1;
    }
    acc
}

/// c[ci..] += v[vi..] * s
pub fn vect_mult_add(v: &[f64], s: f64, c: &mut [f64], vi: usize, ci: usize, len: usize, flops: &mut u64) {
    check(v, vi, len);
    check(c, ci, len);
    for k in 0..len {
        c[ci + k] += v[vi + k] * s;
    }
    *flops += 2 * len as u64;
}

/// c += a (element-wise vector accumulate)
pub fn vect_add_into(a: &[f64], c: &mut [f64], len: usize, flops: &mut u64) {
    check(a, 0, len);
    check(c, 0, len);
    for k in 0..len {
        c[k] += a[k];
    }
    *flops += len as u64;
}

/// Row-vector times dense matrix: out[q] = sum_p a[ai+p] * m[p*mcols + q].
pub fn vect_mat_mult(
    a: &[f64],
    ai: usize,
    alen: usize,
    m: &[f64],
    mcols: usize,
    out: &mut [f64],
    flops: &mut u64,
) {
    check(a, ai, alen);
    assert!(m.len() >= alen * mcols && out.len() >= mcols);
    out[..mcols].fill(0.0);
    for p in 0..alen {
        let av = a[ai + p];
        if av == 0.0 {
            continue;
        }
        let row = &m[p * mcols..(p + 1) * mcols];
        for q in 0..mcols {
            out[q] += av * row[q];
        }
    }
    *flops += 2 * (alen * mcols) as u64;
}

/// Sparse-row variant of `vect_mat_mult`.
pub fn vect_mat_mult_sparse(
    avals: &[f64],
    aix: &[usize],
    m: &[f64],
    mcols: usize,
    out: &mut [f64],
    flops: &mut u64,
) {
    assert!(out.len() >= mcols);
    out[..mcols].fill(0.0);
    for (v, &p) in avals.iter().zip(aix) {
        let row = &m[p * mcols..(p + 1) * mcols];
        for q in 0..mcols {
            out[q] += v * row[q];
        }
    }
    *flops += 2 * (avals.len() * mcols) as u64;
}

/// Outer-product accumulate: c[p][q] += a[ai+p] * b[q] with c row-major
/// of width `blen`.
pub fn vect_outer_mult_add(
    a: &[f64],
    ai: usize,
    alen: usize,
    b: &[f64],
    blen: usize,
    c: &mut [f64],
    flops: &mut u64,
) {
    check(a, ai, alen);
    check(b, 0, blen);
    assert!(c.len() >= alen * blen);
    for p in 0..alen {
        let av = a[ai + p];
        if av == 0.0 {
            continue;
        }
        let crow = &mut c[p * blen..(p + 1) * blen];
        for q in 0..blen {
            crow[q] += av * b[q];
        }
    }
    *flops += 2 * (alen * blen) as u64;
}

/// Sparse-row variant of `vect_outer_mult_add`.
pub fn vect_outer_mult_add_sparse(
    avals: &[f64],
    aix: &[usize],
    b: &[f64],
    blen: usize,
    c: &mut [f64],
    flops: &mut u64,
) {
    check(b, 0, blen);
    for (v, &p) in avals.iter().zip(aix) {
        let crow = &mut c[p * blen..(p + 1) * blen];
        for q in 0..blen {
            crow[q] += v * b[q];
        }
    }
    *flops += 2 * (avals.len() * blen) as u64;
}

pub fn vect_sum(a: &[f64], ai: usize, len: usize, flops: &mut u64) -> f64 {
    check(a, ai, len);
    let mut acc = 0.0;
    for k in 0..len {
        acc += a[ai + k];
    }
    if len > 0 {
        *flops += len as u64 - 1;
    }
    acc
}

pub fn vect_min(a: &[f64], ai: usize, len: usize, flops: &mut u64) -> f64 {
    check(a, ai, len);
    let mut acc = f64::INFINITY;
    for k in 0..len {
        acc = acc.min(a[ai + k]);
    }
    *flops += len as u64;
    acc
}

pub fn vect_max(a: &[f64], ai: usize, len: usize, flops: &mut u64) -> f64 {
    check(a, ai, len);
    let mut acc = f64::NEG_INFINITY;
    for k in 0..len {
        acc = acc.max(a[ai + k]);
    }
    *flops += len as u64;
    acc
}

/// c = a op b, element-wise over vectors of equal length; 1 flop per cell.
pub fn vect_binary_write<F: Fn(f64, f64) -> f64>(
    op: F,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    len: usize,
    flops: &mut u64,
) {
    check(a, 0, len);
    check(b, 0, len);
    check(c, 0, len);
    for k in 0..len {
        c[k] = op(a[k], b[k]);
    }
    *flops += len as u64;
}

/// c = a op s (vector-scalar)
pub fn vect_scalar_write<F: Fn(f64, f64) -> f64>(
    op: F,
    a: &[f64],
    s: f64,
    c: &mut [f64],
    len: usize,
    flops: &mut u64,
) {
    check(a, 0, len);
    check(c, 0, len);
    for k in 0..len {
        c[k] = op(a[k], s);
    }
    *flops += len as u64;
}

/// c = op(a) (unary element-wise)
pub fn vect_unary_write<F: Fn(f64) -> f64>(
    op: F,
    a: &[f64],
    c: &mut [f64],
    len: usize,
    flops: &mut u64,
) {
    check(a, 0, len);
    check(c, 0, len);
    for k in 0..len {
        c[k] = op(a[k]);
    }
    *flops += len as u64;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_product_example() {
        let mut flops = 0;
        let r = dot_product(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], 0, 0, 3, &mut flops);
        assert_eq!(r, 32.0);
        assert_eq!(flops, 5); // 2n-1 for n=3
    }

    #[test]
    fn mult_add_accumulates() {
        let mut flops = 0;
        let mut c = vec![5.0, 5.0];
        vect_mult_add(&[1.0, 1.0], 2.0, &mut c, 0, 0, 2, &mut flops);
        assert_eq!(c, vec![7.0, 7.0]);
    }

    #[test]
    #[should_panic(expected = "out of bounds")]
    fn out_of_bounds_offsets_panic() {
        let mut flops = 0;
        dot_product(&[1.0], &[1.0, 2.0], 0, 0, 2, &mut flops);
    }

    #[test]
    fn sparse_dot_matches_dense() {
        let mut f1 = 0;
        let mut f2 = 0;
        let dense = [0.0, 2.0, 0.0, 4.0];
        let b = [1.0, 10.0, 100.0, 1000.0];
        let d = dot_product(&dense, &b, 0, 0, 4, &mut f1);
        let s = dot_product_sparse(&[2.0, 4.0], &[1, 3], &b, 0, &mut f2);
        assert_eq!(d, s);
    }
}
