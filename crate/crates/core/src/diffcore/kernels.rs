//! Scalar and per-row kernels shared by the tape primitives and the plain
//! (non-differentiated) evaluation paths.

use crate::linalg::tri_index;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] on `(0, ∞)`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// `log σ(x)`, stable for large negative `x`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Floor applied to `|x|` inside the abs-power primitive.
pub const ABS_POW_FLOOR: f64 = 1e-12;

/// Number of raw conditioner outputs per flow dimension for `k` sigmoids:
/// `k` mixture logits, `k` raw slopes, `k` offsets, raw amplitude,
/// log-scale and shift.
#[inline]
pub const fn sos_param_count(k: usize) -> usize {
    3 * k + 3
}

/// Constrained view of one dimension's raw conditioner outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SosParams {
    /// Mixture weights, positive and summing to one.
    pub weights: Vec<f64>,
    /// Slopes, positive.
    pub slopes: Vec<f64>,
    pub offsets: Vec<f64>,
    pub amplitude: f64,
    pub log_scale: f64,
    pub shift: f64,
    /// Linear-range constant of the softplus tails.
    pub range: f64,
}

impl SosParams {
    pub fn from_raw(raw: &[f64], k: usize, range: f64) -> Self {
        assert_eq!(raw.len(), sos_param_count(k));
        let logits = &raw[..k];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|u| (u - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self {
            weights: exps.iter().map(|e| e / total).collect(),
            slopes: raw[k..2 * k].iter().map(|&r| softplus(r)).collect(),
            offsets: raw[2 * k..3 * k].to_vec(),
            amplitude: softplus(raw[3 * k]),
            log_scale: raw[3 * k + 1],
            shift: raw[3 * k + 2],
            range,
        }
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// Value and first/second derivative of the bare sum-of-sigmoids map
    /// (without the outer affine part).
    fn core(&self, z: f64) -> (f64, f64, f64) {
        let mut g = 0.0;
        let mut h = 0.0;
        let mut h2 = 0.0;
        for j in 0..self.k() {
            let (v, w) = (self.weights[j], self.slopes[j]);
            let sig = sigmoid(w * z + self.offsets[j]);
            let d1 = sig * (1.0 - sig);
            g += v * sig;
            h += v * w * d1;
            h2 += v * w * w * d1 * (1.0 - 2.0 * sig);
        }
        let s = self.range;
        let hi = sigmoid(z - s);
        let lo = sigmoid(-z - s);
        let value = self.amplitude * g + softplus(z - s) - softplus(-z - s);
        let deriv = self.amplitude * h + hi + lo;
        let deriv2 = self.amplitude * h2 + hi * (1.0 - hi) - lo * (1.0 - lo);
        (value, deriv, deriv2)
    }

    /// `(y, log dy/dz)`.
    pub fn forward(&self, z: f64) -> (f64, f64) {
        let (value, deriv, _) = self.core(z);
        (
            self.log_scale.exp() * value + self.shift,
            self.log_scale + deriv.ln(),
        )
    }

    pub fn derivative(&self, z: f64) -> f64 {
        self.log_scale.exp() * self.core(z).1
    }
}

/// Largest sigmoid count accepted by the flow configuration.
pub const MAX_SOS_K: usize = 64;

/// `(softplus(x), σ(x))` sharing one exponential.
#[inline]
fn softplus_sigmoid(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let sp = x.max(0.0) + e.ln_1p();
    let sig = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (sp, sig)
}

/// Sums shared by the forward and reverse kernels of one element.
struct SosEval {
    amplitude: f64,
    amplitude_grad: f64,
    g: f64,
    h: f64,
    value: f64,
    deriv: f64,
    deriv2: f64,
}

impl SosEval {
    /// When `store` is given (length `4k`) it receives the mixture weights,
    /// slopes, slope derivatives and sigmoid values, in that order.
    #[inline]
    fn new(z: f64, raw: &[f64], k: usize, range: f64, mut store: Option<&mut [f64]>) -> Self {
        debug_assert_eq!(raw.len(), sos_param_count(k));
        let max = raw[..k].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut ex = [0.0; MAX_SOS_K];
        let mut total = 0.0;
        for (e, u) in ex.iter_mut().zip(&raw[..k]) {
            *e = (u - max).exp();
            total += *e;
        }
        let inv_total = 1.0 / total;
        let (mut g, mut h, mut h2) = (0.0, 0.0, 0.0);
        for j in 0..k {
            let v = ex[j] * inv_total;
            let (w, dw) = softplus_sigmoid(raw[k + j]);
            let s = sigmoid(w * z + raw[2 * k + j]);
            let d1 = s * (1.0 - s);
            g += v * s;
            h += v * w * d1;
            h2 += v * w * w * d1 * (1.0 - 2.0 * s);
            if let Some(buf) = store.as_deref_mut() {
                buf[j] = v;
                buf[k + j] = w;
                buf[2 * k + j] = dw;
                buf[3 * k + j] = s;
            }
        }
        let (a, da) = softplus_sigmoid(raw[3 * k]);
        let (sp_hi, hi) = softplus_sigmoid(z - range);
        let (sp_lo, lo) = softplus_sigmoid(-z - range);
        SosEval {
            amplitude: a,
            amplitude_grad: da,
            g,
            h,
            value: a * g + sp_hi - sp_lo,
            deriv: a * h + hi + lo,
            deriv2: a * h2 + hi * (1.0 - hi) - lo * (1.0 - lo),
        }
    }
}

/// Forward pass of one conditional sum-of-sigmoids element.
pub fn sos_forward_raw(z: f64, raw: &[f64], k: usize, range: f64) -> (f64, f64) {
    let e = SosEval::new(z, raw, k, range, None);
    let log_scale = raw[3 * k + 1];
    (log_scale.exp() * e.value + raw[3 * k + 2], log_scale + e.deriv.ln())
}

/// Reverse pass of one element. Accumulates into `graw` and returns the
/// adjoint of `z`, given adjoints `gy` of the output and `gl` of its log
/// derivative. `scratch` must hold at least `4k` values.
#[allow(clippy::too_many_arguments)]
pub fn sos_backward_raw(
    z: f64,
    raw: &[f64],
    k: usize,
    range: f64,
    gy: f64,
    gl: f64,
    graw: &mut [f64],
    scratch: &mut [f64],
) -> f64 {
    let e = SosEval::new(z, raw, k, range, Some(&mut scratch[..4 * k]));
    let (weights, rest) = scratch.split_at(k);
    let (slopes, rest) = rest.split_at(k);
    let (slope_grad, sig) = rest.split_at(k);
    let scale = raw[3 * k + 1].exp();
    let a = e.amplitude;
    let (g, h) = (e.g, e.h);
    let gys = gy * scale;
    let gli = gl / e.deriv;

    for j in 0..k {
        let (w, s) = (slopes[j], sig[j]);
        let d1 = s * (1.0 - s);
        let d2 = d1 * (1.0 - 2.0 * s);
        let av = a * weights[j];
        // mixture logits through the softmax
        graw[j] += av * (gys * (s - g) + gli * (w * d1 - h));
        // raw slopes through softplus
        graw[k + j] += av * (gys * d1 * z + gli * (d1 + w * d2 * z)) * slope_grad[j];
        // offsets
        graw[2 * k + j] += av * (gys * d1 + gli * w * d2);
    }
    graw[3 * k] += (gys * g + gli * h) * e.amplitude_grad;
    graw[3 * k + 1] += gys * e.value + gl;
    graw[3 * k + 2] += gy;

    gys * e.deriv + gli * e.deriv2
}

/// `Ω = L Lᵀ` on packed lower-triangular rows of dimension `d`.
pub fn chol_product_row(l: &[f64], d: usize, out: &mut [f64]) {
    for i in 0..d {
        for j in 0..=i {
            let mut acc = 0.0;
            for k in 0..=j {
                acc += l[tri_index(i, k)] * l[tri_index(j, k)];
            }
            out[tri_index(i, j)] = acc;
        }
    }
}

pub fn chol_product_row_backward(l: &[f64], d: usize, g_omega: &[f64], g_l: &mut [f64]) {
    for i in 0..d {
        for j in 0..=i {
            let g = g_omega[tri_index(i, j)];
            if g == 0.0 {
                continue;
            }
            if i == j {
                for k in 0..=i {
                    g_l[tri_index(i, k)] += 2.0 * g * l[tri_index(i, k)];
                }
            } else {
                for k in 0..=j {
                    g_l[tri_index(i, k)] += g * l[tri_index(j, k)];
                    g_l[tri_index(j, k)] += g * l[tri_index(i, k)];
                }
            }
        }
    }
}

/// Solves `L Y = B` for packed lower-triangular `L` (s×s) and row-major
/// `B` (s×t).
pub fn tri_solve_row(l: &[f64], b: &[f64], s: usize, t: usize, y: &mut [f64]) {
    for c in 0..t {
        for i in 0..s {
            let mut acc = b[i * t + c];
            for k in 0..i {
                acc -= l[tri_index(i, k)] * y[k * t + c];
            }
            y[i * t + c] = acc / l[tri_index(i, i)];
        }
    }
}

/// Adjoints of `Y = L⁻¹ B`: `gB = L⁻ᵀ gY`, `gL = −tril(gB Yᵀ)`.
pub fn tri_solve_row_backward(
    l: &[f64],
    y: &[f64],
    g_y: &[f64],
    s: usize,
    t: usize,
    g_l: &mut [f64],
    g_b: &mut [f64],
) {
    let mut gb = vec![0.0; s * t];
    for c in 0..t {
        for i in (0..s).rev() {
            let mut acc = g_y[i * t + c];
            for k in i + 1..s {
                acc -= l[tri_index(k, i)] * gb[k * t + c];
            }
            gb[i * t + c] = acc / l[tri_index(i, i)];
        }
    }
    for i in 0..s {
        for j in 0..=i {
            let mut acc = 0.0;
            for c in 0..t {
                acc += gb[i * t + c] * y[j * t + c];
            }
            g_l[tri_index(i, j)] -= acc;
        }
    }
    for (dst, src) in g_b.iter_mut().zip(&gb) {
        *dst += src;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_and_sigmoid_reference_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus_inv(softplus(1.7)) - 1.7).abs() < 1e-12);
        assert!((softplus_inv(softplus(45.0)) - 45.0).abs() < 1e-12);
        assert!((softplus_inv(softplus(-8.0)) + 8.0).abs() < 1e-9);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }

    #[test]
    fn sos_backward_matches_central_differences() {
        let k = 3;
        let raw = vec![
            0.3, -0.2, 0.5, 0.1, -0.7, 1.2, 0.4, -1.1, 0.9, 0.6, 0.2, -0.3,
        ];
        let range = 4.0;
        for &z in &[-6.0, -0.4, 0.7, 5.5] {
            for &(gy, gl) in &[(1.0, 0.0), (0.0, 1.0), (0.3, -0.8)] {
                let mut graw = vec![0.0; raw.len()];
                let mut scratch = vec![0.0; 4 * k];
                let gz = sos_backward_raw(z, &raw, k, range, gy, gl, &mut graw, &mut scratch);
                let f = |z: f64, raw: &[f64]| {
                    let (y, l) = sos_forward_raw(z, raw, k, range);
                    gy * y + gl * l
                };
                let eps = 1e-6;
                let num_z = (f(z + eps, &raw) - f(z - eps, &raw)) / (2.0 * eps);
                assert!((num_z - gz).abs() < 1e-7 * (1.0 + gz.abs()), "z: {num_z} vs {gz}");
                for i in 0..raw.len() {
                    let mut rp = raw.clone();
                    let mut rm = raw.clone();
                    rp[i] += eps;
                    rm[i] -= eps;
                    let num = (f(z, &rp) - f(z, &rm)) / (2.0 * eps);
                    assert!(
                        (num - graw[i]).abs() < 1e-7 * (1.0 + num.abs()),
                        "param {i} at z={z}: {num} vs {}",
                        graw[i]
                    );
                }
            }
        }
    }

    #[test]
    fn chol_and_solve_backward_match_differences() {
        let d = 3;
        let l = vec![1.3, 0.4, 0.9, -0.6, 0.2, 1.7];
        let gw = vec![0.5, -1.0, 0.3, 0.7, 0.2, -0.4];
        let mut gl = vec![0.0; 6];
        chol_product_row_backward(&l, d, &gw, &mut gl);
        let f = |l: &[f64]| {
            let mut o = vec![0.0; 6];
            chol_product_row(l, d, &mut o);
            o.iter().zip(&gw).map(|(a, b)| a * b).sum::<f64>()
        };
        for i in 0..6 {
            let (mut p, mut m) = (l.clone(), l.clone());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let num = (f(&p) - f(&m)) / 2e-6;
            assert!((num - gl[i]).abs() < 1e-8, "{i}: {num} vs {}", gl[i]);
        }

        let (s, t) = (3, 2);
        let b = vec![0.2, -0.4, 1.1, 0.5, -0.9, 0.3];
        let gy = vec![0.6, 0.1, -0.2, 0.8, 0.4, -0.5];
        let solve = |l: &[f64], b: &[f64]| {
            let mut y = vec![0.0; s * t];
            tri_solve_row(l, b, s, t, &mut y);
            y.iter().zip(&gy).map(|(a, c)| a * c).sum::<f64>()
        };
        let mut y = vec![0.0; s * t];
        tri_solve_row(&l, &b, s, t, &mut y);
        let mut g_l = vec![0.0; 6];
        let mut g_b = vec![0.0; 6];
        tri_solve_row_backward(&l, &y, &gy, s, t, &mut g_l, &mut g_b);
        for i in 0..6 {
            let (mut p, mut m) = (l.clone(), l.clone());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let num = (solve(&p, &b) - solve(&m, &b)) / 2e-6;
            assert!((num - g_l[i]).abs() < 1e-7, "L{i}: {num} vs {}", g_l[i]);
            let (mut p, mut m) = (b.clone(), b.clone());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let num = (solve(&l, &p) - solve(&l, &m)) / 2e-6;
            assert!((num - g_b[i]).abs() < 1e-7, "B{i}: {num} vs {}", g_b[i]);
        }
    }
}
