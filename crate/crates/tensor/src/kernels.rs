//! Raw slice kernels shared by the forward and backward passes.
//!
//! Work is split across rayon workers by output rows only, so every output
//! element is accumulated in the same order whatever the thread count.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 16;

/// `a[m,k] * b[k,n] -> [m,n]`
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let row = |(i, orow): (usize, &mut [f32])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `a[m,n] * b[k,n]^T -> [m,k]`
pub fn matmul_bt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * k];
    let row = |(i, orow): (usize, &mut [f32])| {
        let arow = &a[i * n..(i + 1) * n];
        for (p, o) in orow.iter_mut().enumerate() {
            *o = dot(arow, &b[p * n..(p + 1) * n]);
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        out.chunks_mut(k).enumerate().for_each(row);
    }
    out
}

/// `a[m,k]^T * g[m,n] -> [k,n]`
pub fn matmul_at(a: &[f32], g: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; k * n];
    let block = 16usize;
    let work = |(blk, oblock): (usize, &mut [f32])| {
        let p0 = blk * block;
        let rows = oblock.len() / n;
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            let arow = &a[i * k + p0..i * k + p0 + rows];
            for (r, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let orow = &mut oblock[r * n..(r + 1) * n];
                for (o, &gv) in orow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(block * n).enumerate().for_each(work);
    } else {
        out.chunks_mut(block * n).enumerate().for_each(work);
    }
    out
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Four independent accumulators; fixed order keeps results reproducible.
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Geometry of a multi-head attention call over `[batch, seq, dim]` tensors.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub dim: usize,
    pub heads: usize,
    pub causal: bool,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn visible(&self, i: usize) -> usize {
        if self.causal {
            (i + 1).min(self.kv_len)
        } else {
            self.kv_len
        }
    }
}

fn gather_head(src: &[f32], len: usize, dim: usize, h: usize, dh: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(len * dh);
    for s in 0..len {
        out.extend_from_slice(&src[s * dim + h * dh..s * dim + (h + 1) * dh]);
    }
    out
}

fn scatter_head(dst: &mut [f32], src: &[f32], len: usize, dim: usize, h: usize, dh: usize) {
    for s in 0..len {
        dst[s * dim + h * dh..s * dim + (h + 1) * dh].copy_from_slice(&src[s * dh..(s + 1) * dh]);
    }
}

/// Softmax probabilities for one (batch, head): `[q_len, kv_len]`, zero past the causal frontier.
fn head_probs(qh: &[f32], kh: &[f32], d: &AttnDims) -> Vec<f32> {
    let dh = d.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut p = vec![0.0f32; d.q_len * d.kv_len];
    for i in 0..d.q_len {
        let qi = &qh[i * dh..(i + 1) * dh];
        let vis = d.visible(i);
        let row = &mut p[i * d.kv_len..(i + 1) * d.kv_len];
        let mut mx = f32::NEG_INFINITY;
        for j in 0..vis {
            let s = dot(qi, &kh[j * dh..(j + 1) * dh]) * scale;
            row[j] = s;
            mx = mx.max(s);
        }
        let mut sum = 0.0f64;
        for r in row.iter_mut().take(vis) {
            let e = (*r - mx).exp();
            *r = e;
            sum += e as f64;
        }
        let inv = (1.0 / sum) as f32;
        for r in row.iter_mut().take(vis) {
            *r *= inv;
        }
    }
    p
}

pub fn attention_forward(q: &[f32], k: &[f32], v: &[f32], d: AttnDims) -> Vec<f32> {
    let dh = d.head_dim();
    let mut out = vec![0.0f32; d.batch * d.q_len * d.dim];
    let per_batch = |(b, ob): (usize, &mut [f32])| {
        let qb = &q[b * d.q_len * d.dim..(b + 1) * d.q_len * d.dim];
        let kb = &k[b * d.kv_len * d.dim..(b + 1) * d.kv_len * d.dim];
        let vb = &v[b * d.kv_len * d.dim..(b + 1) * d.kv_len * d.dim];
        for h in 0..d.heads {
            let qh = gather_head(qb, d.q_len, d.dim, h, dh);
            let kh = gather_head(kb, d.kv_len, d.dim, h, dh);
            let vh = gather_head(vb, d.kv_len, d.dim, h, dh);
            let p = head_probs(&qh, &kh, &d);
            let oh = matmul(&p, &vh, d.q_len, d.kv_len, dh);
            scatter_head(ob, &oh, d.q_len, d.dim, h, dh);
        }
    };
    let work = d.batch * d.heads * d.q_len * d.kv_len * dh;
    if work >= PAR_THRESHOLD && d.batch > 1 {
        out.par_chunks_mut(d.q_len * d.dim).enumerate().for_each(per_batch);
    } else {
        out.chunks_mut(d.q_len * d.dim).enumerate().for_each(per_batch);
    }
    out
}

/// Returns `(dq, dk, dv)`; probabilities are recomputed rather than stored.
pub fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    dout: &[f32],
    d: AttnDims,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let dh = d.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let qs = d.q_len * d.dim;
    let ks = d.kv_len * d.dim;
    let per_batch = |b: usize| {
        let qb = &q[b * qs..(b + 1) * qs];
        let kb = &k[b * ks..(b + 1) * ks];
        let vb = &v[b * ks..(b + 1) * ks];
        let gb = &dout[b * qs..(b + 1) * qs];
        let mut dq = vec![0.0f32; qs];
        let mut dk = vec![0.0f32; ks];
        let mut dv = vec![0.0f32; ks];
        for h in 0..d.heads {
            let qh = gather_head(qb, d.q_len, d.dim, h, dh);
            let kh = gather_head(kb, d.kv_len, d.dim, h, dh);
            let vh = gather_head(vb, d.kv_len, d.dim, h, dh);
            let gh = gather_head(gb, d.q_len, d.dim, h, dh);
            let p = head_probs(&qh, &kh, &d);
            let dvh = matmul_at(&p, &gh, d.q_len, d.kv_len, dh);
            let mut ds = matmul_bt(&gh, &vh, d.q_len, dh, d.kv_len);
            for i in 0..d.q_len {
                let vis = d.visible(i);
                let prow = &p[i * d.kv_len..(i + 1) * d.kv_len];
                let drow = &mut ds[i * d.kv_len..(i + 1) * d.kv_len];
                let mut inner = 0.0f64;
                for j in 0..vis {
                    inner += (prow[j] * drow[j]) as f64;
                }
                let inner = inner as f32;
                for j in 0..d.kv_len {
                    drow[j] = if j < vis {
                        prow[j] * (drow[j] - inner) * scale
                    } else {
                        0.0
                    };
                }
            }
            let dqh = matmul(&ds, &kh, d.q_len, d.kv_len, dh);
            let dkh = matmul_at(&ds, &qh, d.q_len, d.kv_len, dh);
            scatter_head(&mut dq, &dqh, d.q_len, d.dim, h, dh);
            scatter_head(&mut dk, &dkh, d.kv_len, d.dim, h, dh);
            scatter_head(&mut dv, &dvh, d.kv_len, d.dim, h, dh);
        }
        (dq, dk, dv)
    };
    let work = d.batch * d.heads * d.q_len * d.kv_len * dh;
    let parts: Vec<_> = if work >= PAR_THRESHOLD && d.batch > 1 {
        (0..d.batch).into_par_iter().map(per_batch).collect()
    } else {
        (0..d.batch).map(per_batch).collect()
    };
    let mut dq = Vec::with_capacity(d.batch * qs);
    let mut dk = Vec::with_capacity(d.batch * ks);
    let mut dv = Vec::with_capacity(d.batch * ks);
    for (a, b, c) in parts {
        dq.extend(a);
        dk.extend(b);
        dv.extend(c);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f32> = (0..12).map(|v| v as f32 * 0.5 - 2.0).collect(); // 3x4
        let b: Vec<f32> = (0..8).map(|v| v as f32 - 3.0).collect(); // 4x2
        let c = matmul(&a, &b, 3, 4, 2);
        // bt: b^T is 2x4 stored as k rows of n
        let mut bt = vec![0.0; 8];
        for p in 0..4 {
            for j in 0..2 {
                bt[j * 4 + p] = b[p * 2 + j];
            }
        }
        assert_eq!(c, matmul_bt(&a, &bt, 3, 4, 2));
        // a^T (4x3) * c (3x2)
        let mut at = vec![0.0; 12];
        for i in 0..3 {
            for p in 0..4 {
                at[p * 3 + i] = a[i * 4 + p];
            }
        }
        assert_eq!(matmul(&at, &c, 4, 3, 2), matmul_at(&a, &c, 3, 4, 2));
    }
}
