use crate::tensor::Scalar;

/// Sigmoid binary cross-entropy on a logit: `(loss, dloss/dlogit)`.
///
/// Uses `max(x, 0) - x*y + ln(1 + e^{-|x|})`, finite for any finite logit.
pub fn bce_with_logits<T: Scalar>(logit: T, label: u8) -> (T, T) {
    debug_assert!(label <= 1);
    let y = if label == 1 { T::one() } else { T::zero() };
    let zero = T::zero();
    let loss = logit.max(zero) - logit * y + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - y)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logit_positive_label() {
        let (l, g) = bce_with_logits(0.0f64, 1);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, -0.5);
    }

    #[test]
    fn saturates_without_overflow() {
        let (l, g) = bce_with_logits(1000.0f64, 1);
        assert_eq!(l, 0.0);
        assert_eq!(g, 0.0);
        let (l, _) = bce_with_logits(-1000.0f64, 1);
        assert_eq!(l, 1000.0);
        let (l, _) = bce_with_logits(40.0f32, 1);
        assert!((0.0..1e-15).contains(&l));
    }

    #[test]
    fn gradient_matches_central_difference() {
        let (x, h) = (0.3f64, 1e-5);
        let (_, g) = bce_with_logits(x, 0);
        let fd = (bce_with_logits(x + h, 0).0 - bce_with_logits(x - h, 0).0) / (2.0 * h);
        assert!((fd - g).abs() / g.abs() <= 1e-8, "fd {fd} vs {g}");
    }
}
