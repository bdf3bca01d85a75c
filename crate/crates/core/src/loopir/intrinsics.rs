//! Fixed math behind the non-GEMV intrinsics.
//!
//! Every reduction runs left to right, so results are reproducible across
//! machines and thread counts.

/// Added to the mean square before the reciprocal square root.
pub const RMS_EPS: f32 = 1e-5;

/// Base of the rotary position frequencies.
pub const ROPE_THETA: f32 = 10000.0;

/// `out[i] = w[i] * x[i] / sqrt(mean(x^2) + RMS_EPS)`.
pub fn rmsnorm(out: &mut [f32], x: &[f32], w: &[f32]) {
    let n = out.len();
    let mut ss = 0.0f32;
    for &v in &x[..n] {
        ss += v * v;
    }
    ss /= n as f32;
    ss += RMS_EPS;
    let scale = 1.0 / ss.sqrt();
    for i in 0..n {
        out[i] = w[i] * (scale * x[i]);
    }
}

/// In-place softmax, shifted by the maximum for stability.
pub fn softmax(x: &mut [f32]) {
    let Some(&first) = x.first() else { return };
    let max = x.iter().fold(first, |m, &v| if v > m { v } else { m });
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// In-place `x * sigmoid(x)`.
pub fn silu(x: &mut [f32]) {
    for v in x.iter_mut() {
        *v *= 1.0 / (1.0 + (-*v).exp());
    }
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Rotary position embedding over consecutive pairs within each head.
///
/// `q` spans all query heads (`dim` elements), `k` the key heads (`kv_dim`
/// elements, `kv_dim <= dim`); pairs past `kv_dim` rotate only `q`.
pub fn rope(q: &mut [f32], k: &mut [f32], pos: usize, head_dim: usize) {
    let kv_dim = k.len();
    for i in (0..q.len()).step_by(2) {
        let head_i = (i % head_dim) as f32;
        let freq = 1.0 / ROPE_THETA.powf(head_i / head_dim as f32);
        let angle = pos as f32 * freq;
        let (sin, cos) = angle.sin_cos();
        rotate(q, i, cos, sin);
        if i < kv_dim {
            rotate(k, i, cos, sin);
        }
    }
}

fn rotate(v: &mut [f32], i: usize, cos: f32, sin: f32) {
    let (v0, v1) = (v[i], v[i + 1]);
    v[i] = v0 * cos - v1 * sin;
    v[i + 1] = v0 * sin + v1 * cos;
}

/// Head layout of multi-head attention with grouped key/value heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
}

impl AttentionShape {
    pub fn dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }
}

/// Causal attention of query `q` (all heads) over cached positions `0..=pos`.
///
/// `kcache`/`vcache` hold one layer: `seq_len` rows of `kv_dim` values. Query
/// head `h` reads key/value head `h / (n_heads / n_kv_heads)`.
pub fn attention(
    out: &mut [f32],
    q: &[f32],
    kcache: &[f32],
    vcache: &[f32],
    pos: usize,
    shape: AttentionShape,
) {
    let hd = shape.head_dim;
    let kv_dim = shape.kv_dim();
    let group = shape.n_heads / shape.n_kv_heads;
    let scale = (hd as f32).sqrt();
    let mut att = vec![0.0f32; pos + 1];
    for h in 0..shape.n_heads {
        let qh = &q[h * hd..(h + 1) * hd];
        let kv_off = (h / group) * hd;
        for (t, a) in att.iter_mut().enumerate() {
            let kt = &kcache[t * kv_dim + kv_off..t * kv_dim + kv_off + hd];
            let mut score = 0.0f32;
            for i in 0..hd {
                score += qh[i] * kt[i];
            }
            *a = score / scale;
        }
        softmax(&mut att);
        let oh = &mut out[h * hd..(h + 1) * hd];
        oh.fill(0.0);
        for (t, &a) in att.iter().enumerate() {
            let vt = &vcache[t * kv_dim + kv_off..t * kv_dim + kv_off + hd];
            for i in 0..hd {
                oh[i] += a * vt[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsnorm_matches_definition() {
        let x = [1.0f32, -2.0, 3.0];
        let w = [1.0f32, 0.5, 2.0];
        let mut out = [0.0f32; 3];
        rmsnorm(&mut out, &x, &w);
        let rms = ((1.0f64 + 4.0 + 9.0) / 3.0 + 1e-5).sqrt();
        for i in 0..3 {
            let expected = w[i] as f64 * x[i] as f64 / rms;
            assert!((out[i] as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let mut a = [1.0f32, 2.0, 3.0];
        let mut b = [101.0f32, 102.0, 103.0];
        softmax(&mut a);
        softmax(&mut b);
        assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < 1e-6);
        }
        let e = [1.0f64.exp(), 2.0f64.exp(), 3.0f64.exp()];
        let z: f64 = e.iter().sum();
        assert!((a[2] as f64 - e[2] / z).abs() < 1e-6);
        softmax(&mut []);
    }

    #[test]
    fn silu_and_argmax() {
        let mut v = [0.0f32, 1.0, -1.0];
        silu(&mut v);
        assert_eq!(v[0], 0.0);
        assert!((v[1] as f64 - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-6);
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }

    #[test]
    fn rope_at_position_zero_is_identity_and_preserves_norm() {
        let mut q = [1.0f32, 2.0, 3.0, 4.0];
        let mut k = [5.0f32, 6.0];
        rope(&mut q, &mut k, 0, 2);
        assert_eq!(q, [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(k, [5.0, 6.0]);

        rope(&mut q, &mut k, 3, 2);
        // head_dim 2: every pair uses frequency 1, so the angle is the position.
        let (s, c) = 3.0f64.sin_cos();
        assert!((q[0] as f64 - (c - 2.0 * s)).abs() < 1e-5);
        assert!((k[1] as f64 - (5.0 * s + 6.0 * c)).abs() < 1e-5);
        let norm: f32 = q[2] * q[2] + q[3] * q[3];
        assert!((norm - 25.0).abs() < 1e-4);
    }

    #[test]
    fn attention_single_position_returns_value() {
        let shape = AttentionShape {
            n_heads: 2,
            n_kv_heads: 1,
            head_dim: 2,
            seq_len: 4,
        };
        let q = [1.0f32, 0.0, 0.0, 1.0];
        let mut kc = vec![0.0f32; 8];
        let mut vc = vec![0.0f32; 8];
        kc[..2].copy_from_slice(&[0.3, 0.7]);
        vc[..2].copy_from_slice(&[2.0, -1.0]);
        let mut out = [0.0f32; 4];
        attention(&mut out, &q, &kc, &vc, 0, shape);
        assert_eq!(out, [2.0, -1.0, 2.0, -1.0]);

        // two positions, equal scores -> average of the values
        kc[2..4].copy_from_slice(&[0.3, 0.7]);
        vc[2..4].copy_from_slice(&[4.0, 1.0]);
        attention(&mut out, &q, &kc, &vc, 1, shape);
        assert!((out[0] - 3.0).abs() < 1e-6 && (out[3] - 0.0).abs() < 1e-6);
    }
}
