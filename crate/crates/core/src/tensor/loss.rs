use super::{Real, Tensor};
use crate::error::{Result, ZipError};

fn rows_cols<T: Real>(op: &'static str, logits: &Tensor<T>) -> Result<(usize, usize)> {
    match logits.shape() {
        &[r, c] if c > 0 => Ok((r, c)),
        s => Err(ZipError::shape(op, s, &[0, 0])),
    }
}

/// Row-wise softmax of an `(N, K)` tensor.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = rows_cols("softmax", logits)?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let m = row.iter().copied().fold(row[0], T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::from_vec(logits.shape(), out)
}

fn counted<'a>(labels: &'a [usize], ignore: Option<usize>) -> impl Iterator<Item = (usize, usize)> + 'a {
    labels
        .iter()
        .copied()
        .enumerate()
        .filter(move |&(_, l)| Some(l) != ignore)
}

fn validate<T: Real>(
    op: &'static str,
    logits: &Tensor<T>,
    labels: &[usize],
    ignore: Option<usize>,
) -> Result<(usize, usize, usize)> {
    let (n, k) = rows_cols(op, logits)?;
    if labels.len() != n {
        return Err(ZipError::shape(op, logits.shape(), &[labels.len()]));
    }
    if let Some(bad) = counted(labels, ignore).find(|&(_, l)| l >= k) {
        return Err(ZipError::invalid(op, format!("label {} out of range for {k} classes", bad.1)));
    }
    let count = counted(labels, ignore).count();
    if count == 0 {
        return Err(ZipError::EmptyBatch(op));
    }
    Ok((n, k, count))
}

/// Mean negative log-softmax of the labelled class over non-ignored rows.
pub fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &[usize], ignore: Option<usize>) -> Result<Tensor<T>> {
    let (_, k, count) = validate("softmax_xent", logits, labels, ignore)?;
    let mut total = T::zero();
    for (r, l) in counted(labels, ignore) {
        let row = &logits.data()[r * k..(r + 1) * k];
        let m = row.iter().copied().fold(row[0], T::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        total += lse - row[l];
    }
    Ok(Tensor::scalar(total / T::from_f64(count as f64)))
}

/// `(softmax - onehot) / count` on counted rows, zero elsewhere, scaled by
/// the upstream gradient of the scalar loss.
pub fn softmax_xent_backward<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    ignore: Option<usize>,
    upstream: T,
) -> Result<Tensor<T>> {
    let (_, k, count) = validate("softmax_xent_backward", logits, labels, ignore)?;
    let probs = softmax_rows(logits)?;
    let scale = upstream / T::from_f64(count as f64);
    let mut g = vec![T::zero(); logits.len()];
    for (r, l) in counted(labels, ignore) {
        for c in 0..k {
            let onehot = if c == l { T::one() } else { T::zero() };
            g[r * k + c] = (probs.data()[r * k + c] - onehot) * scale;
        }
    }
    Tensor::from_vec(logits.shape(), g)
}

/// Huber-style penalty with unit transition: `0.5 x^2` inside `|x| < 1`.
#[inline]
pub fn smooth_l1_value<T: Real>(x: T) -> T {
    let a = x.abs();
    if a < T::one() {
        T::from_f64(0.5) * x * x
    } else {
        a - T::from_f64(0.5)
    }
}

fn check_pair<T: Real>(op: &'static str, pred: &Tensor<T>, target: &Tensor<T>, mask: &[bool]) -> Result<usize> {
    if pred.shape() != target.shape() {
        return Err(ZipError::shape(op, pred.shape(), target.shape()));
    }
    let rows = pred.shape().first().copied().unwrap_or(0);
    if mask.len() != rows {
        return Err(ZipError::shape(op, pred.shape(), &[mask.len()]));
    }
    Ok(if rows == 0 { 0 } else { pred.len() / rows })
}

/// Smooth-L1 summed over masked rows and divided by the masked row count.
/// No masked rows gives a zero loss.
pub fn smooth_l1<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    let width = check_pair("smooth_l1", pred, target, mask)?;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(Tensor::scalar(T::zero()));
    }
    let mut total = T::zero();
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for i in r * width..(r + 1) * width {
            total += smooth_l1_value(pred.data()[i] - target.data()[i]);
        }
    }
    Ok(Tensor::scalar(total / T::from_f64(count as f64)))
}

/// Gradient w.r.t. `pred`: `clip(pred - target, -1, 1) / count` on masked rows.
pub fn smooth_l1_backward<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &[bool],
    upstream: T,
) -> Result<Tensor<T>> {
    let width = check_pair("smooth_l1_backward", pred, target, mask)?;
    let mut g = vec![T::zero(); pred.len()];
    let count = mask.iter().filter(|&&m| m).count();
    if count > 0 {
        let scale = upstream / T::from_f64(count as f64);
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for i in r * width..(r + 1) * width {
                let d = pred.data()[i] - target.data()[i];
                g[i] = d.max(-T::one()).min(T::one()) * scale;
            }
        }
    }
    Tensor::from_vec(pred.shape(), g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_ln3() {
        let l = Tensor::<f64>::zeros(&[1, 3]);
        let loss = softmax_xent(&l, &[0], None).unwrap();
        assert!((loss.data()[0] - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits() {
        let l = Tensor::<f64>::from_vec(&[1, 2], vec![10.0, -10.0]).unwrap();
        assert!(softmax_xent(&l, &[0], None).unwrap().data()[0] < 1e-4);
    }

    #[test]
    fn brute_force_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = Tensor::<f64>::from_vec(&[5, 3], (0..15).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let labels = [0, 2, 1, 1, 0];
        let mut expect = 0.0;
        for r in 0..5 {
            let row = &l.data()[r * 3..r * 3 + 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[labels[r]].exp() / z).ln();
        }
        expect /= 5.0;
        let loss = softmax_xent(&l, &labels, None).unwrap();
        assert!((loss.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn ignored_rows() {
        let l = Tensor::<f64>::zeros(&[2, 3]);
        let loss = softmax_xent(&l, &[0, 9], Some(9)).unwrap();
        assert!((loss.data()[0] - 3f64.ln()).abs() < 1e-12);
        let g = softmax_xent_backward(&l, &[0, 9], Some(9), 1.0).unwrap();
        assert!(g.data()[3..].iter().all(|&v| v == 0.0));
        assert!(matches!(softmax_xent(&l, &[9, 9], Some(9)), Err(ZipError::EmptyBatch(_))));
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1_value(0.0f64), 0.0);
        assert_eq!(smooth_l1_value(0.5f64), 0.125);
        assert_eq!(smooth_l1_value(2.0f64), 1.5);
        assert_eq!(smooth_l1_value(-2.0f64), 1.5);
    }

    #[test]
    fn smooth_l1_empty_mask() {
        let p = Tensor::<f64>::full(&[2, 4], 3.0);
        let t = Tensor::<f64>::zeros(&[2, 4]);
        assert_eq!(smooth_l1(&p, &t, &[false, false]).unwrap().data(), &[0.0]);
        assert!(smooth_l1_backward(&p, &t, &[false, false], 1.0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smooth_l1_gradient_is_clipped() {
        let p = Tensor::<f64>::from_vec(&[1, 4], vec![3.0, -5.0, 0.25, 0.0]).unwrap();
        let t = Tensor::<f64>::zeros(&[1, 4]);
        let g = smooth_l1_backward(&p, &t, &[true], 1.0).unwrap();
        assert_eq!(g.data(), &[1.0, -1.0, 0.25, 0.0]);
    }
}
