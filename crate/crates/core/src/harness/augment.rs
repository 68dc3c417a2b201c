use spach_tensor::{Element, Rng, Tensor};

use crate::error::Result;

/// Soft targets `[B, K]`: `(1 - eps)` on the label plus `eps / K` everywhere.
pub fn smooth_labels<T: Element>(labels: &[usize], classes: usize, eps: f64) -> Result<Tensor<T>> {
    let off = eps / classes as f64;
    let on = 1.0 - eps + off;
    Ok(Tensor::from_fn([labels.len(), classes], |i| {
        let (b, k) = (i / classes, i % classes);
        T::from_f64_lossy(if labels[b] == k { on } else { off })
    })?)
}

/// Convex combination `lam * a + (1 - lam) * flip(a)` along the batch axis,
/// where sample `i` is paired with sample `B - 1 - i`.
pub fn mix_pairs<T: Element>(a: &Tensor<T>, lam: f64) -> Tensor<T> {
    let b = a.shape()[0];
    let per = a.numel() / b;
    let (l, r) = (T::from_f64_lossy(lam), T::from_f64_lossy(1.0 - lam));
    let src = a.data();
    let mut out = a.clone();
    for (i, chunk) in out.data_mut().chunks_mut(per).enumerate() {
        let j = b - 1 - i;
        for (k, v) in chunk.iter_mut().enumerate() {
            *v = l * src[i * per + k] + r * src[j * per + k];
        }
    }
    out
}

/// Mixup with `lam ~ Beta(alpha, alpha)`; returns mixed images, mixed targets and `lam`.
///
/// `alpha <= 0` or a batch of one leaves the inputs untouched (`lam = 1`).
pub fn mixup<T: Element>(
    images: &Tensor<T>,
    targets: &Tensor<T>,
    alpha: f64,
    rng: &mut Rng,
) -> (Tensor<T>, Tensor<T>, f64) {
    if alpha <= 0.0 || images.shape()[0] < 2 {
        return (images.clone(), targets.clone(), 1.0);
    }
    let lam = rng.beta_symmetric(alpha);
    (mix_pairs(images, lam), mix_pairs(targets, lam), lam)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_rows_sum_to_one() {
        let t = smooth_labels::<f64>(&[0, 2], 4, 0.1).unwrap();
        assert!((t.at(&[0, 0]) - 0.925).abs() < 1e-15);
        assert!((t.at(&[0, 1]) - 0.025).abs() < 1e-15);
        for row in t.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn midpoint_of_two_one_hots() {
        let t = smooth_labels::<f64>(&[0, 1], 3, 0.0).unwrap();
        let m = mix_pairs(&t, 0.5);
        assert_eq!(m.data(), &[0.5, 0.5, 0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn degenerate_alpha_keeps_samples() {
        let x = Tensor::<f64>::from_fn([3, 2], |i| i as f64).unwrap();
        let y = smooth_labels::<f64>(&[0, 1, 2], 3, 0.0).unwrap();
        let (mx, my, lam) = mixup(&x, &y, 0.0, &mut Rng::seed(0));
        assert_eq!((mx, my, lam), (x, y, 1.0));
    }
}
