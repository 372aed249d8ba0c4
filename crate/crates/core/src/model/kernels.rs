// Scalar kernels. All reductions run front to back; keep it that way, the
// incremental/batch equivalence relies on it.

/// `out[r] = sum_c w[r * cols + c] * x[c]` with `w` row-major `[rows][cols]`.
pub(super) fn matvec(w: &[f32], x: &[f32], out: &mut [f32]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (row, o) in w.chunks_exact(cols).zip(out.iter_mut()) {
        let mut acc = 0.0f32;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o = acc;
    }
}

pub(super) fn rms_norm(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    let mut ss = 0.0f32;
    for v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f32 + eps).sqrt();
    for ((o, v), g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

/// Rotates consecutive pairs `(x[2i], x[2i+1])` by `pos * theta^(-2i/d)`.
pub(super) fn apply_rope(x: &mut [f32], pos: usize, theta: f32) {
    let d = x.len();
    for i in 0..d / 2 {
        let freq = (theta as f64).powf(-((2 * i) as f64) / d as f64);
        let angle = pos as f64 * freq;
        let (sin, cos) = (angle.sin() as f32, angle.cos() as f32);
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * cos - b * sin;
        x[2 * i + 1] = a * sin + b * cos;
    }
}

/// Single-head attention of `q` over the first `visible` cached tokens.
/// `keys`/`values` are token-major with `stride` floats per token; this
/// head's slice starts at `offset`.
pub(super) fn attend(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    visible: usize,
    stride: usize,
    offset: usize,
    out: &mut [f32],
) {
    let hd = q.len();
    let scale = 1.0 / (hd as f32).sqrt();
    let mut scores = Vec::with_capacity(visible);
    let mut max = f32::NEG_INFINITY;
    for t in 0..visible {
        let k = &keys[t * stride + offset..t * stride + offset + hd];
        let mut s = 0.0f32;
        for (a, b) in q.iter().zip(k) {
            s += a * b;
        }
        s *= scale;
        max = max.max(s);
        scores.push(s);
    }
    let mut denom = 0.0f32;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        denom += *s;
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    for (t, s) in scores.iter().enumerate() {
        let w = s / denom;
        let v = &values[t * stride + offset..t * stride + offset + hd];
        for (o, vv) in out.iter_mut().zip(v) {
            *o += w * vv;
        }
    }
}

/// tanh approximation.
pub(super) fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}
