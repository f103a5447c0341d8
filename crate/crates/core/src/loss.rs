//! BCE-Dice training loss.
//!
//! `L = L_dice + L_bce`, where the Dice term is averaged over images and
//! the cross-entropy is averaged over every pixel of every image.

use crate::tensor::Scalar;

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Denominator smoothing of the soft Dice term.
pub const DICE_EPS: f64 = 1e-6;

fn clamp_prob<T: Scalar>(p: T) -> (T, bool) {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        (lo, false)
    } else if p > hi {
        (hi, false)
    } else {
        (p, true)
    }
}

/// Loss value for `rows` images of `cols` pixels.
pub fn bce_dice_value<T: Scalar>(p: &[T], y: &[T], rows: usize, cols: usize, eps: T) -> T {
    let mut dice = T::zero();
    let mut bce = T::zero();
    for (pr, yr) in p.chunks_exact(cols).zip(y.chunks_exact(cols)).take(rows) {
        let mut inter = T::zero();
        let mut sy = T::zero();
        let mut sp = T::zero();
        for (&pv, &yv) in pr.iter().zip(yr) {
            inter += yv * pv;
            sy += yv;
            sp += pv;
            let (pc, _) = clamp_prob(pv);
            bce -= yv * pc.ln() + (T::one() - yv) * (T::one() - pc).ln();
        }
        dice += T::one() - T::lit(2.0) * inter / (sy + sp + eps);
    }
    dice / T::lit(rows as f64) + bce / T::lit((rows * cols) as f64)
}

/// Accumulates `upstream · ∂L/∂p` into `dp`.
pub fn bce_dice_grad<T: Scalar>(
    p: &[T],
    y: &[T],
    rows: usize,
    cols: usize,
    eps: T,
    upstream: T,
    dp: &mut [T],
) {
    let dice_scale = upstream / T::lit(rows as f64);
    let bce_scale = upstream / T::lit((rows * cols) as f64);
    let two = T::lit(2.0);
    for ((pr, yr), dr) in p
        .chunks_exact(cols)
        .zip(y.chunks_exact(cols))
        .zip(dp.chunks_exact_mut(cols))
        .take(rows)
    {
        let inter = pr.iter().zip(yr).fold(T::zero(), |a, (&pv, &yv)| a + pv * yv);
        let denom = yr.iter().copied().sum::<T>() + pr.iter().copied().sum::<T>() + eps;
        let denom2 = denom * denom;
        for ((d, &pv), &yv) in dr.iter_mut().zip(pr).zip(yr) {
            let ddice = -two * (yv * denom - inter) / denom2;
            let (pc, inside) = clamp_prob(pv);
            let dbce = if inside {
                -yv / pc + (T::one() - yv) / (T::one() - pc)
            } else {
                T::zero()
            };
            *d += dice_scale * ddice + bce_scale * dbce;
        }
    }
}
