//! Forward and backward kernels for the fixed operator set the surrogate model uses:
//! same-padded cross-correlation, relu, global average pooling, a bias-free linear
//! map, softmax cross-entropy, and sigmoid BCE. All f64, all deterministic.

use crate::error::{Error, Result};
use crate::tensor::TensorF;

/// Cross-correlation with zero ("same") padding, stride 1.
/// input: [H, W, Cin], kernel: [k, k, Cin, Cout], optional bias: [Cout].
pub fn conv2d_same(input: &TensorF, kernel: &TensorF, bias: Option<&TensorF>) -> Result<TensorF> {
    let (h, w, cin) = dims3(input, "conv2d input")?;
    let ks = kernel.shape();
    if ks.len() != 4 || ks[0] != ks[1] {
        return Err(Error::config(format!("conv2d kernel must be [k,k,Cin,Cout], got {:?}", ks)));
    }
    let (k, kcin, cout) = (ks[0], ks[2], ks[3]);
    if k % 2 == 0 {
        return Err(Error::config(format!("conv2d kernel size must be odd, got {}", k)));
    }
    if kcin != cin {
        return Err(Error::config(format!(
            "conv2d channel mismatch: input has {}, kernel expects {}",
            cin, kcin
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::config(format!(
                "conv2d bias shape {:?} does not match Cout {}",
                b.shape(),
                cout
            )));
        }
    }
    let pad = k / 2;
    let mut out = vec![0.0; h * w * cout];
    let idata = input.data();
    let kdata = kernel.data();
    for y in 0..h {
        for x in 0..w {
            let opix = &mut out[(y * w + x) * cout..][..cout];
            if let Some(b) = bias {
                opix.copy_from_slice(b.data());
            }
            for p in 0..k {
                let yy = y + p;
                if yy < pad || yy >= h + pad {
                    continue;
                }
                let yy = yy - pad;
                for q in 0..k {
                    let xx = x + q;
                    if xx < pad || xx >= w + pad {
                        continue;
                    }
                    let xx = xx - pad;
                    let ipix = &idata[(yy * w + xx) * cin..][..cin];
                    let kbase = (p * k + q) * cin * cout;
                    for (ci, &a) in ipix.iter().enumerate() {
                        let krow = &kdata[kbase + ci * cout..][..cout];
                        for (o, &kv) in opix.iter_mut().zip(krow) {
                            *o += a * kv;
                        }
                    }
                }
            }
        }
    }
    TensorF::from_vec(&[h, w, cout], out)
}

/// Gradients of `conv2d_same`. Any of the three outputs can be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &TensorF,
    kernel: &TensorF,
    dout: &TensorF,
    dinput: Option<&mut TensorF>,
    dkernel: Option<&mut TensorF>,
    dbias: Option<&mut TensorF>,
) {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let k = kernel.shape()[0];
    let cout = kernel.shape()[3];
    let pad = k / 2;
    let idata = input.data();
    let kdata = kernel.data();
    let ddata = dout.data();

    if let Some(db) = dbias {
        let db = db.data_mut();
        for pix in ddata.chunks_exact(cout) {
            for (d, &g) in db.iter_mut().zip(pix) {
                *d += g;
            }
        }
    }

    let want_dk = dkernel.is_some();
    let want_di = dinput.is_some();
    let mut dk_buf = dkernel.map(|t| t.data_mut());
    let mut di_buf = dinput.map(|t| t.data_mut());
    if !want_dk && !want_di {
        return;
    }
    for y in 0..h {
        for x in 0..w {
            let dpix = &ddata[(y * w + x) * cout..][..cout];
            for p in 0..k {
                let yy = y + p;
                if yy < pad || yy >= h + pad {
                    continue;
                }
                let yy = yy - pad;
                for q in 0..k {
                    let xx = x + q;
                    if xx < pad || xx >= w + pad {
                        continue;
                    }
                    let xx = xx - pad;
                    let ibase = (yy * w + xx) * cin;
                    let kbase = (p * k + q) * cin * cout;
                    if let Some(dk) = dk_buf.as_deref_mut() {
                        for ci in 0..cin {
                            let a = idata[ibase + ci];
                            let dkrow = &mut dk[kbase + ci * cout..][..cout];
                            for (d, &g) in dkrow.iter_mut().zip(dpix) {
                                *d += a * g;
                            }
                        }
                    }
                    if let Some(di) = di_buf.as_deref_mut() {
                        for ci in 0..cin {
                            let krow = &kdata[kbase + ci * cout..][..cout];
                            let mut acc = 0.0;
                            for (&kv, &g) in krow.iter().zip(dpix) {
                                acc += kv * g;
                            }
                            di[ibase + ci] += acc;
                        }
                    }
                }
            }
        }
    }
}

pub fn relu(input: &TensorF) -> TensorF {
    let data = input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    TensorF::from_vec(input.shape(), data).expect("same shape")
}

/// Subgradient 0 at exactly zero.
pub fn relu_backward(input: &TensorF, dout: &TensorF, dinput: &mut TensorF) {
    for ((d, &x), &g) in dinput.data_mut().iter_mut().zip(input.data()).zip(dout.data()) {
        if x > 0.0 {
            *d += g;
        }
    }
}

/// Mean over the spatial dimensions: [H, W, C] -> [C].
pub fn global_average_pool(input: &TensorF) -> Result<TensorF> {
    let (h, w, c) = dims3(input, "global_average_pool input")?;
    let inv = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; c];
    for pix in input.data().chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(pix) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o *= inv;
    }
    TensorF::from_vec(&[c], out)
}

pub fn gap_backward(input_shape: &[usize], dout: &TensorF, dinput: &mut TensorF) {
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let inv = 1.0 / (h * w) as f64;
    let dv = dout.data();
    for pix in dinput.data_mut().chunks_exact_mut(c) {
        for (d, &g) in pix.iter_mut().zip(dv) {
            *d += g * inv;
        }
    }
}

/// Bias-free linear map: weight [U, K] applied to x [U], giving logits [K].
pub fn matvec(weight: &TensorF, x: &TensorF) -> Result<TensorF> {
    let ws = weight.shape();
    if ws.len() != 2 {
        return Err(Error::config(format!("matvec weight must be [U,K], got {:?}", ws)));
    }
    let (u, k) = (ws[0], ws[1]);
    if x.shape() != [u] {
        return Err(Error::config(format!(
            "matvec input shape {:?} does not match weight rows {}",
            x.shape(),
            u
        )));
    }
    let mut out = vec![0.0; k];
    for (row, &a) in weight.data().chunks_exact(k).zip(x.data()) {
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += a * wv;
        }
    }
    TensorF::from_vec(&[k], out)
}

pub fn matvec_backward(
    weight: &TensorF,
    x: &TensorF,
    dout: &TensorF,
    dweight: Option<&mut TensorF>,
    dx: Option<&mut TensorF>,
) {
    let k = weight.shape()[1];
    let dv = dout.data();
    if let Some(dw) = dweight {
        for (drow, &a) in dw.data_mut().chunks_exact_mut(k).zip(x.data()) {
            for (d, &g) in drow.iter_mut().zip(dv) {
                *d += a * g;
            }
        }
    }
    if let Some(dx) = dx {
        for (d, row) in dx.data_mut().iter_mut().zip(weight.data().chunks_exact(k)) {
            let mut acc = 0.0;
            for (&wv, &g) in row.iter().zip(dv) {
                acc += wv * g;
            }
            *d += acc;
        }
    }
}

/// Softmax cross-entropy against a single true index. Returns (loss, probs).
pub fn softmax_cross_entropy(logits: &TensorF, true_index: usize) -> Result<(f64, TensorF)> {
    if logits.shape().len() != 1 {
        return Err(Error::config(format!(
            "softmax_cross_entropy expects a vector of logits, got {:?}",
            logits.shape()
        )));
    }
    let k = logits.len();
    if true_index >= k {
        return Err(Error::validation(format!(
            "true_index {} out of range for {} classes",
            true_index, k
        )));
    }
    let lv = logits.data();
    let m = lv.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut exps = vec![0.0; k];
    let mut sum = 0.0;
    for (e, &l) in exps.iter_mut().zip(lv) {
        *e = (l - m).exp();
        sum += *e;
    }
    let loss = sum.ln() + m - lv[true_index];
    for e in exps.iter_mut() {
        *e /= sum;
    }
    Ok((loss, TensorF::from_vec(&[k], exps)?))
}

/// dL/dlogits = (probs - onehot) * dloss.
pub fn softmax_ce_backward(probs: &TensorF, true_index: usize, dloss: f64, dlogits: &mut TensorF) {
    for (i, (d, &p)) in dlogits.data_mut().iter_mut().zip(probs.data()).enumerate() {
        let t = if i == true_index { 1.0 } else { 0.0 };
        *d += (p - t) * dloss;
    }
}

/// Numerically stable sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy on logits, log-sum-exp form:
/// max(x,0) - x*t + ln(1 + exp(-|x|)), averaged over all elements.
pub fn binary_cross_entropy(logits: &TensorF, target: &TensorF) -> Result<f64> {
    if logits.shape() != target.shape() {
        return Err(Error::config(format!(
            "binary_cross_entropy shape mismatch: {:?} vs {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    if logits.is_empty() {
        return Err(Error::validation("binary_cross_entropy on empty tensor".to_string()));
    }
    let mut sum = 0.0;
    for (&x, &t) in logits.data().iter().zip(target.data()) {
        if t != 0.0 && t != 1.0 {
            return Err(Error::validation(format!("BCE target must be 0 or 1, got {}", t)));
        }
        sum += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
    }
    Ok(sum / logits.len() as f64)
}

/// dL/dx = (sigmoid(x) - t) / n * dloss.
pub fn bce_backward(logits: &TensorF, target: &TensorF, dloss: f64, dlogits: &mut TensorF) {
    let scale = dloss / logits.len() as f64;
    for ((d, &x), &t) in dlogits.data_mut().iter_mut().zip(logits.data()).zip(target.data()) {
        *d += (sigmoid(x) - t) * scale;
    }
}

fn dims3(t: &TensorF, what: &str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::config(format!("{} must be rank-3 [H,W,C], got {:?}", what, s)));
    }
    Ok((s[0], s[1], s[2]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(h: usize, w: usize, c: usize, data: Vec<f64>) -> TensorF {
        TensorF::from_vec(&[h, w, c], data).unwrap()
    }

    #[test]
    fn conv_1x1_scaling() {
        let img = TensorF::full(&[3, 3, 1], 1.0);
        let kernel = TensorF::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let out = conv2d_same(&img, &kernel, None).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_identity_kernel_is_identity_bit_exact() {
        let img = t3(4, 5, 2, (0..40).map(|v| v as f64 * 0.37 - 3.1).collect());
        // 1x1 kernel that maps each channel to itself
        let kernel = TensorF::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = conv2d_same(&img, &kernel, None).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn conv_impulse_through_ones_kernel() {
        // 5x5 impulse image, 3x3 all-ones kernel -> 3x3 block of ones centered at impulse.
        let mut img = TensorF::zeros(&[5, 5, 1]);
        img.set3(2, 2, 0, 1.0);
        let kernel = TensorF::full(&[3, 3, 1, 1], 1.0);
        let out = conv2d_same(&img, &kernel, None).unwrap();
        // direct convolution oracle: out[y][x] = sum over 3x3 window of impulse
        for y in 0..5 {
            for x in 0..5 {
                let expect = if (1..=3).contains(&y) && (1..=3).contains(&x) { 1.0 } else { 0.0 };
                assert_eq!(out.at3(y, x, 0), expect, "at ({},{})", y, x);
            }
        }
    }

    #[test]
    fn conv_rejects_even_kernel_and_channel_mismatch() {
        let img = TensorF::zeros(&[4, 4, 2]);
        let even = TensorF::zeros(&[2, 2, 2, 1]);
        assert!(conv2d_same(&img, &even, None).is_err());
        let wrong_cin = TensorF::zeros(&[3, 3, 3, 1]);
        assert!(conv2d_same(&img, &wrong_cin, None).is_err());
    }

    #[test]
    fn gap_constant_and_mean() {
        let t = TensorF::full(&[3, 4, 2], 0.7);
        let out = global_average_pool(&t).unwrap();
        assert_eq!(out.data(), &[0.7, 0.7]);

        let t = t3(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let out = global_average_pool(&t).unwrap();
        assert_eq!(out.data(), &[2.5]);

        // 1x1xC is the identity
        let t = t3(1, 1, 3, vec![5.0, -1.0, 0.25]);
        let out = global_average_pool(&t).unwrap();
        assert_eq!(out.data(), &[5.0, -1.0, 0.25]);
    }

    #[test]
    fn softmax_ce_uniform_and_saturated() {
        let (loss, probs) = softmax_cross_entropy(&TensorF::zeros(&[3]), 0).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
        for &p in probs.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }

        let logits = TensorF::from_vec(&[2], vec![30.0, -30.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, 0).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn softmax_ce_formula_oracle() {
        // loss = ln(e^1 + e^2 + e^3) - 3
        let logits = TensorF::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let (loss, probs) = softmax_cross_entropy(&logits, 2).unwrap();
        let expect = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        assert!((loss - expect).abs() < 1e-12);
        let sum: f64 = probs.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn softmax_ce_rejects_bad_index() {
        assert!(softmax_cross_entropy(&TensorF::zeros(&[3]), 3).is_err());
    }

    #[test]
    fn bce_known_values() {
        let ln2 = 2f64.ln();
        let l = TensorF::scalar(0.0);
        let t = TensorF::scalar(1.0);
        assert!((binary_cross_entropy(&l, &t).unwrap() - ln2).abs() < 1e-15);

        let l = TensorF::scalar(40.0);
        assert!(binary_cross_entropy(&l, &t).unwrap().abs() < 1e-9);

        // elementwise oracle then mean: both elements are ln 2
        let l = TensorF::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let t = TensorF::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        assert!((binary_cross_entropy(&l, &t).unwrap() - ln2).abs() < 1e-15);
    }

    #[test]
    fn bce_rejects_nonbinary_target() {
        let l = TensorF::scalar(0.0);
        let t = TensorF::scalar(0.5);
        assert!(matches!(binary_cross_entropy(&l, &t), Err(crate::error::Error::Validation(_))));
    }

    #[test]
    fn matvec_oracle() {
        // logits[k] = sum_u W[u,k] * x[u]
        let w = TensorF::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = TensorF::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let out = matvec(&w, &x).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }
}
