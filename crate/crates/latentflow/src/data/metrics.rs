//! Flow-error metrics over the ground truth's validity mask.

use super::{DataError, FlowField};

fn check_shapes(pred: &FlowField, gt: &FlowField) -> Result<(), DataError> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(DataError::Shape(format!(
            "pred {}x{} vs gt {}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    if !gt.valid.iter().any(|&v| v) {
        return Err(DataError::EmptyValid);
    }
    Ok(())
}

/// Average endpoint error: mean L2 flow error over valid pixels.
pub fn aepe(pred: &FlowField, gt: &FlowField) -> Result<f64, DataError> {
    check_shapes(pred, gt)?;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for i in 0..gt.h * gt.w {
        if !gt.valid[i] {
            continue;
        }
        let dx = pred.flow[2 * i] as f64 - gt.flow[2 * i] as f64;
        let dy = pred.flow[2 * i + 1] as f64 - gt.flow[2 * i + 1] as f64;
        sum += (dx * dx + dy * dy).sqrt();
        count += 1;
    }
    Ok(sum / count as f64)
}

/// Outlier percentage. A valid pixel is an outlier when its endpoint error
/// exceeds 3 px and 5% of the ground-truth magnitude (both must hold, the
/// benchmark convention). `any_threshold` switches to the looser
/// either-threshold reading.
pub fn f1_all(pred: &FlowField, gt: &FlowField, any_threshold: bool) -> Result<f64, DataError> {
    check_shapes(pred, gt)?;
    let mut outliers = 0usize;
    let mut count = 0usize;
    for i in 0..gt.h * gt.w {
        if !gt.valid[i] {
            continue;
        }
        let dx = pred.flow[2 * i] as f64 - gt.flow[2 * i] as f64;
        let dy = pred.flow[2 * i + 1] as f64 - gt.flow[2 * i + 1] as f64;
        let epe = (dx * dx + dy * dy).sqrt();
        let gx = gt.flow[2 * i] as f64;
        let gy = gt.flow[2 * i + 1] as f64;
        let mag = (gx * gx + gy * gy).sqrt();
        let big_abs = epe > 3.0;
        let big_rel = epe > 0.05 * mag;
        if (any_threshold && (big_abs || big_rel)) || (!any_threshold && big_abs && big_rel) {
            outliers += 1;
        }
        count += 1;
    }
    Ok(100.0 * outliers as f64 / count as f64)
}

/// AEPE of predicting zero flow everywhere; the floor any model must beat.
pub fn zero_flow_aepe(gt: &FlowField) -> Result<f64, DataError> {
    aepe(&FlowField::zeros(gt.h, gt.w), gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_with(h: usize, w: usize, f: &[(usize, usize, f32, f32)]) -> FlowField {
        let mut field = FlowField::zeros(h, w);
        for &(y, x, dx, dy) in f {
            field.set(y, x, dx, dy);
        }
        field
    }

    #[test]
    fn three_four_error_gives_five() {
        let gt = FlowField::zeros(1, 1);
        let pred = field_with(1, 1, &[(0, 0, 3.0, 4.0)]);
        assert_eq!(aepe(&pred, &gt).unwrap(), 5.0);
    }

    #[test]
    fn equal_fields_score_zero() {
        let mut gt = FlowField::zeros(3, 3);
        for (i, v) in gt.flow.iter_mut().enumerate() {
            *v = i as f32 * 0.3;
        }
        let pred = gt.clone();
        assert_eq!(aepe(&pred, &gt).unwrap(), 0.0);
        assert_eq!(f1_all(&pred, &gt, false).unwrap(), 0.0);
    }

    #[test]
    fn epe_five_on_magnitude_ten_is_an_outlier() {
        let gt = field_with(1, 1, &[(0, 0, 10.0, 0.0)]);
        let pred = field_with(1, 1, &[(0, 0, 5.0, 0.0)]);
        // epe 5 > 3 and 5 > 0.5
        assert_eq!(f1_all(&pred, &gt, false).unwrap(), 100.0);
    }

    #[test]
    fn convention_flag_splits_on_large_slow_error()
    {
        // epe 4 on magnitude 100: absolute threshold trips, relative does not
        let gt = field_with(1, 1, &[(0, 0, 100.0, 0.0)]);
        let pred = field_with(1, 1, &[(0, 0, 96.0, 0.0)]);
        assert_eq!(f1_all(&pred, &gt, false).unwrap(), 0.0);
        assert_eq!(f1_all(&pred, &gt, true).unwrap(), 100.0);
    }

    #[test]
    fn invalid_pixels_are_ignored() {
        let mut gt = FlowField::zeros(1, 2);
        gt.valid[1] = false;
        let pred = field_with(1, 2, &[(0, 1, 100.0, 100.0)]);
        assert_eq!(aepe(&pred, &gt).unwrap(), 0.0);
    }

    #[test]
    fn empty_valid_mask_is_an_error() {
        let mut gt = FlowField::zeros(2, 2);
        gt.valid.fill(false);
        assert!(matches!(aepe(&FlowField::zeros(2, 2), &gt), Err(DataError::EmptyValid)));
    }

    #[test]
    fn shifting_both_fields_changes_nothing() {
        let mut gt = FlowField::zeros(4, 4);
        let mut pred = FlowField::zeros(4, 4);
        for i in 0..16 {
            gt.flow[2 * i] = (i as f32).sin();
            gt.flow[2 * i + 1] = (i as f32).cos();
            pred.flow[2 * i] = gt.flow[2 * i] + 0.5;
            pred.flow[2 * i + 1] = gt.flow[2 * i + 1] - 0.25;
        }
        let base = aepe(&pred, &gt).unwrap();
        let mut gt2 = gt.clone();
        let mut pred2 = pred.clone();
        for i in 0..16 {
            gt2.flow[2 * i] += 7.0;
            pred2.flow[2 * i] += 7.0;
            gt2.flow[2 * i + 1] -= 2.0;
            pred2.flow[2 * i + 1] -= 2.0;
        }
        assert!((aepe(&pred2, &gt2).unwrap() - base).abs() < 1e-6);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let gt = FlowField::zeros(2, 2);
        let pred = FlowField::zeros(2, 3);
        assert!(matches!(aepe(&pred, &gt), Err(DataError::Shape(_))));
    }
}
