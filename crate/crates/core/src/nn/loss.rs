use crate::error::{invalid, Result};

/// Smooth-L1 breakpoint used for all stage losses.
pub const SMOOTH_L1_BETA: f64 = 0.001;

/// Summed smooth-L1 loss and its gradient with respect to `pred`.
///
/// Per coordinate, `f(x) = 0.5·x²/β` when `|x| < β` and `|x| − 0.5·β`
/// otherwise, with `x = pred − target`.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<(f64, Vec<f64>)> {
    if !(beta > 0.0) {
        return Err(invalid(format!("smooth L1 needs beta > 0, got {beta}")));
    }
    if pred.len() != target.len() {
        return Err(invalid(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let x = p - t;
            if x.abs() < beta {
                loss += 0.5 * x * x / beta;
                x / beta
            } else {
                loss += x.abs() - 0.5 * beta;
                x.signum()
            }
        })
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_inputs_have_zero_loss() {
        let (l, g) = smooth_l1(&[1.0, -2.0], &[1.0, -2.0], 0.001).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn breakpoint_and_linear_branch() {
        let (l, g) = smooth_l1(&[0.001], &[0.0], 0.001).unwrap();
        assert_eq!(l, 0.0005);
        assert_eq!(g, vec![1.0]);
        let quadratic = 0.5 * 0.001f64 * 0.001 / 0.001;
        assert!((quadratic - l).abs() < 1e-15);

        let (l, g) = smooth_l1(&[0.01], &[0.0], 0.001).unwrap();
        assert_eq!(l, 0.0095);
        assert_eq!(g, vec![1.0]);
        let (_, g) = smooth_l1(&[-3.0], &[0.0], 0.001).unwrap();
        assert_eq!(g, vec![-1.0]);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(smooth_l1(&[0.0], &[0.0], 0.0).is_err());
        assert!(smooth_l1(&[0.0], &[0.0], -1.0).is_err());
        assert!(smooth_l1(&[0.0], &[0.0, 1.0], 1.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bounded_gradient_and_nonnegative_loss(
                pred in prop::collection::vec(-10.0f64..10.0, 1..12),
                shift in -0.01f64..0.01,
                beta in 1e-4f64..1.0,
            ) {
                let target: Vec<f64> = pred.iter().map(|p| p + shift).collect();
                let (l, g) = smooth_l1(&pred, &target, beta).unwrap();
                prop_assert!(l >= 0.0);
                prop_assert!(g.iter().all(|v| v.abs() <= 1.0));
                prop_assert_eq!(l == 0.0, shift == 0.0 || pred.iter().zip(&target).all(|(a, b)| a == b));
            }
        }
    }
}
