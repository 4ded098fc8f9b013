use crate::tensor::{Real, Tensor};

/// `c += a · b` with `a: p×q`, `b: q×r`, `c: p×r`.
pub(crate) fn mm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let crow = &mut c[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: p×q`, `b: r×q`, `c: p×r`.
pub(crate) fn mm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let brow = &b[j * q..(j + 1) * q];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * r + j] += s;
        }
    }
}

/// `c += aᵀ · b` with `a: p×q`, `b: p×r`, `c: q×r`.
pub(crate) fn mm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    for k in 0..p {
        let brow = &b[k * r..(k + 1) * r];
        for i in 0..q {
            let aki = a[k * q + i];
            if aki == T::zero() {
                continue;
            }
            let crow = &mut c[i * r..(i + 1) * r];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aki * bv;
            }
        }
    }
}

/// Sum `g` over consecutive chunks of length `k` (undo suffix broadcast).
pub(crate) fn suffix_repeat<T: Real>(g: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k];
    for chunk in g.chunks(k) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

/// Reorder axes: output axis `i` is input axis `axes[i]`.
pub(crate) fn permute_data<T: Real>(t: &Tensor<T>, axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let shape = t.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}
