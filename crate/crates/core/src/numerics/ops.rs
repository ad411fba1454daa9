//! Dense kernels. Every reduction runs in a fixed left-to-right order so that
//! results are bitwise reproducible.

use std::borrow::Cow;

use crate::error::{MovaError, Result};
use crate::numerics::tensor::{FeatureMap, Tensor};

fn require_matrix(name: &str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(MovaError::Shape(format!(
            "{name} must be a matrix, got dims {:?}",
            t.dims()
        )));
    }
    Ok(())
}

fn transpose(d: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = d[r * cols + c];
        }
    }
    out
}

/// Operand storage: as the product needs it, or transposed.
#[derive(Clone, Copy)]
enum Stored {
    Plain,
    Transposed,
}

/// m×k times k×n. Every output element accumulates its k terms in ascending
/// order starting from zero, whichever orientation is used, so the result is
/// the same bit pattern as the naive triple loop.
fn product(a: &[f64], sa: Stored, b: &[f64], sb: Stored, m: usize, k: usize, n: usize) -> Vec<f64> {
    if n < m && n < 32 {
        // narrow output: run the long dimension innermost on Cᵀ = Bᵀ·Aᵀ
        let at = match sa {
            Stored::Plain => Cow::Owned(transpose(a, m, k)),
            Stored::Transposed => Cow::Borrowed(a),
        };
        let bt = match sb {
            Stored::Plain => Cow::Owned(transpose(b, k, n)),
            Stored::Transposed => Cow::Borrowed(b),
        };
        return transpose(&product_rows(&bt, &at, n, k, m), n, m);
    }
    let a = match sa {
        Stored::Plain => Cow::Borrowed(a),
        Stored::Transposed => Cow::Owned(transpose(a, k, m)),
    };
    let b = match sb {
        Stored::Plain => Cow::Borrowed(b),
        Stored::Transposed => Cow::Owned(transpose(b, n, k)),
    };
    product_rows(&a, &b, m, k, n)
}

fn product_rows(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (out_row, a_row) in out.chunks_mut(n).zip(a.chunks(k)) {
        for (&av, b_row) in a_row.iter().zip(b.chunks(n)) {
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · b` for an m×k and a k×n matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("lhs", a)?;
    require_matrix("rhs", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(MovaError::Shape(format!(
            "matmul inner extents differ: {:?} · {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let out = product(a.data(), Stored::Plain, b.data(), Stored::Plain, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `aᵀ · b` for a k×m and a k×n matrix.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("lhs", a)?;
    require_matrix("rhs", b)?;
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(MovaError::Shape(format!(
            "matmul_tn row counts differ: {:?}ᵀ · {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let out = product(a.data(), Stored::Transposed, b.data(), Stored::Plain, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · bᵀ` for an m×k and an n×k matrix.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("lhs", a)?;
    require_matrix("rhs", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(MovaError::Shape(format!(
            "matmul_nt column counts differ: {:?} · {:?}ᵀ",
            a.dims(),
            b.dims()
        )));
    }
    let out = product(a.data(), Stored::Plain, b.data(), Stored::Transposed, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Numerically stable softmax, optionally restricted to the entries where
/// `mask` is true. Masked-out entries come back as exactly 0.
pub fn softmax(v: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if let Some(m) = mask {
        if m.len() != v.len() {
            return Err(MovaError::Shape(format!(
                "mask length {} does not match vector length {}",
                m.len(),
                v.len()
            )));
        }
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    if !(0..v.len()).any(keep) {
        return Err(MovaError::EmptySupport);
    }
    if let Some(index) = (0..v.len()).find(|&i| keep(i) && !v[i].is_finite()) {
        return Err(MovaError::Numeric {
            context: "softmax logits".into(),
            index,
        });
    }
    let max = (0..v.len())
        .filter(|&i| keep(i))
        .map(|i| v[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; v.len()];
    let mut sum = 0.0;
    for i in 0..v.len() {
        if keep(i) {
            let e = (v[i] - max).exp();
            out[i] = e;
            sum += e;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(out)
}

/// Vector-Jacobian product of softmax: given probabilities `p` and upstream
/// gradient `dp`, returns the gradient w.r.t. the logits.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - dot)).collect()
}

fn lerp_clamped(a: f64, b: f64, t: f64) -> f64 {
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

fn align_corners_source(p: usize, in_extent: usize, out_extent: usize) -> (usize, usize, f64) {
    if out_extent == 1 || in_extent == 1 {
        return (0, 0, 0.0);
    }
    let src = p as f64 * (in_extent - 1) as f64 / (out_extent - 1) as f64;
    let lo = (src.floor() as usize).min(in_extent - 1);
    let hi = (lo + 1).min(in_extent - 1);
    (lo, hi, src - lo as f64)
}

/// Align-corners bilinear resize of every channel to `out_h`×`out_w`.
pub fn bilinear_interpolate(f: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    if out_h == 0 || out_w == 0 {
        return Err(MovaError::Shape("interpolation extents must be positive".into()));
    }
    if f.height() == out_h && f.width() == out_w {
        return Ok(f.clone());
    }
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let rows: Vec<_> = (0..out_h).map(|p| align_corners_source(p, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|p| align_corners_source(p, w, out_w)).collect();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let src = f.channel(ch);
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = lerp_clamped(src[y0 * w + x0], src[y0 * w + x1], fx);
                let bottom = lerp_clamped(src[y1 * w + x0], src[y1 * w + x1], fx);
                out.push(lerp_clamped(top, bottom, fy));
            }
        }
    }
    FeatureMap::new(c, out_h, out_w, out)
}

/// Per-channel spatial mean.
pub fn global_avg_pool(f: &FeatureMap) -> Vec<f64> {
    let n = f.positions() as f64;
    (0..f.channels())
        .map(|c| f.channel(c).iter().fold(0.0, |acc, v| acc + v) / n)
        .collect()
}

/// Non-overlapping 2×2 mean pooling.
pub fn avg_pool_2x(f: &FeatureMap) -> Result<FeatureMap> {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(MovaError::Shape(format!(
            "2x average pooling needs even extents, got {h}×{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let src = f.channel(ch);
        for y in 0..oh {
            for x in 0..ow {
                let top = src[2 * y * w + 2 * x] + src[2 * y * w + 2 * x + 1];
                let bottom = src[(2 * y + 1) * w + 2 * x] + src[(2 * y + 1) * w + 2 * x + 1];
                out.push((top + bottom) / 4.0);
            }
        }
    }
    FeatureMap::new(c, oh, ow, out)
}

/// Gradient of [`avg_pool_2x`] w.r.t. its input.
pub fn avg_pool_2x_backward(grad_out: &FeatureMap) -> FeatureMap {
    let (c, oh, ow) = (grad_out.channels(), grad_out.height(), grad_out.width());
    let (h, w) = (oh * 2, ow * 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = grad_out.channel(ch);
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = g[(y / 2) * ow + x / 2] / 4.0;
            }
        }
    }
    FeatureMap::new(c, h, w, out).expect("finite gradient")
}

fn check_attention_dims(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    require_matrix("query", q)?;
    require_matrix("key", k)?;
    require_matrix("value", v)?;
    if q.cols() != k.cols() {
        return Err(MovaError::Shape(format!(
            "query width {} differs from key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(MovaError::Shape(format!(
            "key count {} differs from value count {}",
            k.rows(),
            v.rows()
        )));
    }
    Ok(())
}

/// Row-softmaxed attention probabilities `softmax(q·kᵀ/√d)`.
pub fn attention_scores(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = matmul_nt(q, k)?;
    let n = scores.cols();
    for row in scores.data_mut().chunks_mut(n) {
        for s in row.iter_mut() {
            *s *= scale;
        }
        let p = softmax(row, None)?;
        row.copy_from_slice(&p);
    }
    Ok(scores)
}

/// Single-head scaled dot-product attention.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_attention_dims(q, k, v)?;
    let probs = attention_scores(q, k)?;
    matmul(&probs, v)
}

fn head_slice(t: &Tensor, head: usize, width: usize) -> Tensor {
    let cols = t.cols();
    let mut out = Vec::with_capacity(t.rows() * width);
    for r in 0..t.rows() {
        out.extend_from_slice(&t.data()[r * cols + head * width..r * cols + (head + 1) * width]);
    }
    Tensor::from_parts(vec![t.rows(), width], out)
}

fn head_scatter(dst: &mut Tensor, src: &Tensor, head: usize) {
    let cols = dst.cols();
    let width = src.cols();
    for r in 0..src.rows() {
        dst.data_mut()[r * cols + head * width..r * cols + (head + 1) * width]
            .copy_from_slice(src.row(r));
    }
}

/// Multi-head attention over column groups of `q`, `k`, `v`. Returns the
/// concatenated head outputs and each head's probability matrix.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    check_attention_dims(q, k, v)?;
    if heads == 0 || !q.cols().is_multiple_of(heads) || !v.cols().is_multiple_of(heads) {
        return Err(MovaError::Shape(format!(
            "width {} not divisible into {heads} heads",
            q.cols()
        )));
    }
    if heads == 1 {
        let probs = attention_scores(q, k)?;
        let out = matmul(&probs, v)?;
        return Ok((out, vec![probs]));
    }
    let (dk, dv) = (q.cols() / heads, v.cols() / heads);
    let mut out = Tensor::zeros(&[q.rows(), v.cols()]);
    let mut all = Vec::with_capacity(heads);
    for h in 0..heads {
        let probs = attention_scores(&head_slice(q, h, dk), &head_slice(k, h, dk))?;
        let o = matmul(&probs, &head_slice(v, h, dv))?;
        head_scatter(&mut out, &o, h);
        all.push(probs);
    }
    Ok((out, all))
}

/// Gradients of [`multi_head_attention`] w.r.t. `q`, `k`, `v`.
pub fn multi_head_attention_backward(
    grad_out: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[Tensor],
) -> Result<(Tensor, Tensor, Tensor)> {
    let heads = probs.len();
    let (dk_w, dv_w) = (q.cols() / heads, v.cols() / heads);
    let mut dq = Tensor::zeros(q.dims());
    let mut dkey = Tensor::zeros(k.dims());
    let mut dval = Tensor::zeros(v.dims());
    let scale = 1.0 / (dk_w as f64).sqrt();
    for (h, p) in probs.iter().enumerate() {
        let (qh, kh, vh) = if heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (head_slice(q, h, dk_w), head_slice(k, h, dk_w), head_slice(v, h, dv_w))
        };
        let go = if heads == 1 {
            grad_out.clone()
        } else {
            head_slice(grad_out, h, dv_w)
        };
        let dvh = matmul_tn(p, &go)?;
        let dp = matmul_nt(&go, &vh)?;
        let n = p.cols();
        let mut ds = Vec::with_capacity(p.len());
        for (prow, dprow) in p.data().chunks(n).zip(dp.data().chunks(n)) {
            for g in softmax_backward(prow, dprow) {
                ds.push(g * scale);
            }
        }
        let ds = Tensor::from_parts(p.dims().to_vec(), ds);
        let dqh = matmul(&ds, &kh)?;
        let dkh = matmul_tn(&ds, &qh)?;
        if heads == 1 {
            dq = dqh;
            dkey = dkh;
            dval = dvh;
        } else {
            head_scatter(&mut dq, &dqh, h);
            head_scatter(&mut dkey, &dkh, h);
            head_scatter(&mut dval, &dvh, h);
        }
    }
    Ok((dq, dkey, dval))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer normalization. Returns the output and the normalized rows
/// plus each row's inverse standard deviation for the backward pass.
pub fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64]) -> (Tensor, Tensor, Vec<f64>) {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in x.data().chunks(c) {
        let mean = row.iter().fold(0.0, |a, v| a + v) / c as f64;
        let var = row.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / c as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for (i, v) in row.iter().enumerate() {
            let n = (v - mean) * is;
            xhat.push(n);
            out.push(gamma[i] * n + beta[i]);
        }
    }
    (
        Tensor::from_parts(x.dims().to_vec(), out),
        Tensor::from_parts(x.dims().to_vec(), xhat),
        inv_std,
    )
}

/// Backward of [`layer_norm`]; accumulates into `dgamma`/`dbeta` and returns dx.
pub fn layer_norm_backward(
    grad_out: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Tensor {
    let c = grad_out.cols();
    let mut dx = Vec::with_capacity(grad_out.len());
    for ((g, xh), &is) in grad_out
        .data()
        .chunks(c)
        .zip(xhat.data().chunks(c))
        .zip(inv_std)
    {
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for i in 0..c {
            dgamma[i] += g[i] * xh[i];
            dbeta[i] += g[i];
            let d = g[i] * gamma[i];
            mean_d += d;
            mean_dx += d * xh[i];
        }
        mean_d /= c as f64;
        mean_dx /= c as f64;
        for i in 0..c {
            let d = g[i] * gamma[i];
            dx.push(is * (d - mean_d - xh[i] * mean_dx));
        }
    }
    Tensor::from_parts(grad_out.dims().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.at2(i, t) * b.at2(t, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn rand_t(dims: &[usize], seed: u64) -> Tensor {
        Tensor::randn(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_identity_zero_and_naive() {
        let a = rand_t(&[3, 3], 1);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let z = matmul(&a, &Tensor::zeros(&[3, 3])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let a = rand_t(&[3, 4], 2);
        let b = rand_t(&[4, 2], 3);
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_operands() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let a = rand_t(&[5, 3], 4);
        let b = rand_t(&[5, 2], 5);
        let mut at = vec![0.0; 15];
        for r in 0..5 {
            for c in 0..3 {
                at[c * 5 + r] = a.at2(r, c);
            }
        }
        let at = Tensor::new(vec![3, 5], at).unwrap();
        let expect = naive_matmul(&at, &b);
        for (x, y) in matmul_tn(&a, &b).unwrap().data().iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = rand_t(&[4, 3], 6);
        let nt = matmul_nt(&c, &a).unwrap();
        assert_eq!(nt.dims(), &[4, 5]);
        for r in 0..4 {
            for s in 0..5 {
                let e: f64 = (0..3).map(|t| c.at2(r, t) * a.at2(s, t)).sum();
                assert!((nt.at2(r, s) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0], None).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()], None).unwrap();
        for (v, e) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-12);
        }
        let v = [0.3, -1.2, 2.5, 0.7];
        let shifted: Vec<f64> = v.iter().map(|x| x + 17.25).collect();
        for (a, b) in softmax(&v, None)
            .unwrap()
            .iter()
            .zip(softmax(&shifted, None).unwrap())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_mask_zeroes_and_errors() {
        let p = softmax(&[5.0, 1.0, 2.0], Some(&[false, true, true])).unwrap();
        assert_eq!(p[0], 0.0);
        assert!((p[1] + p[2] - 1.0).abs() < 1e-12);
        assert!(matches!(
            softmax(&[1.0, 2.0], Some(&[false, false])),
            Err(MovaError::EmptySupport)
        ));
        assert!(softmax(&[1.0, 2.0], Some(&[true])).is_err());
    }

    #[test]
    fn bilinear_examples() {
        let f = FeatureMap::new(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let g = bilinear_interpolate(&f, 3, 3).unwrap();
        assert_eq!(g.data(), &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);

        let c = FeatureMap::filled(3, 4, 5, 0.1);
        let r = bilinear_interpolate(&c, 7, 3).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.1));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = FeatureMap::from_tensor(Tensor::randn(&[4, 5, 7], 1.0, &mut rng)).unwrap();
        assert_eq!(bilinear_interpolate(&f, 5, 7).unwrap(), f);
    }

    #[test]
    fn bilinear_single_extent_samples_origin() {
        let f = FeatureMap::new(1, 2, 2, vec![4.0, 1.0, 2.0, 3.0]).unwrap();
        let g = bilinear_interpolate(&f, 1, 1).unwrap();
        assert_eq!(g.data(), &[4.0]);
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(global_avg_pool(&FeatureMap::filled(3, 2, 5, 7.0)), vec![7.0; 3]);
        let f = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&f), vec![2.5]);
        assert_eq!(avg_pool_2x(&f).unwrap().data(), &[2.5]);
        let c = avg_pool_2x(&FeatureMap::filled(2, 4, 6, 0.3)).unwrap();
        assert_eq!((c.height(), c.width()), (2, 3));
        assert!(c.data().iter().all(|&v| v == 0.3));
        assert!(avg_pool_2x(&FeatureMap::filled(1, 3, 4, 0.0)).is_err());
    }

    #[test]
    fn pooling_backward_spreads_quarter() {
        let g = FeatureMap::new(1, 1, 2, vec![4.0, 8.0]).unwrap();
        let d = avg_pool_2x_backward(&g);
        assert_eq!(d.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn attention_degenerate_cases() {
        let q = rand_t(&[3, 4], 10);
        let k = rand_t(&[1, 4], 11);
        let v = rand_t(&[1, 4], 12);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), v.row(0));
        }
        let q = Tensor::zeros(&[2, 4]);
        let k = rand_t(&[5, 4], 13);
        let v = rand_t(&[5, 3], 14);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for c in 0..3 {
            let mean = (0..5).map(|r| v.at2(r, c)).sum::<f64>() / 5.0;
            assert!((out.at2(0, c) - mean).abs() < 1e-12);
        }
        assert!(scaled_dot_attention(&rand_t(&[2, 3], 1), &k, &v).is_err());
        assert!(scaled_dot_attention(&q, &k, &rand_t(&[4, 3], 1)).is_err());
    }

    #[test]
    fn multi_head_single_head_equals_kernel() {
        let q = rand_t(&[4, 6], 20);
        let k = rand_t(&[5, 6], 21);
        let v = rand_t(&[5, 6], 22);
        let (out, probs) = multi_head_attention(&q, &k, &v, 1).unwrap();
        assert_eq!(out, scaled_dot_attention(&q, &k, &v).unwrap());
        assert_eq!(probs.len(), 1);
        let (two, probs) = multi_head_attention(&q, &k, &v, 2).unwrap();
        assert_eq!(probs.len(), 2);
        let expect = scaled_dot_attention(
            &head_slice(&q, 1, 3),
            &head_slice(&k, 1, 3),
            &head_slice(&v, 1, 3),
        )
        .unwrap();
        assert_eq!(head_slice(&two, 1, 3), expect);
        assert!(multi_head_attention(&q, &k, &v, 4).is_err());
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = rand_t(&[3, 8], 30);
        let (y, _, _) = layer_norm(&x, &[1.0; 8], &[0.0; 8]);
        for row in y.data().chunks(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
