//! Loss terms on plain matrices. The training loop builds the same terms on
//! the autodiff tape; these versions are the reference definitions.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Contrastive weight of a negative with reward `r_neg` when rewards range
/// up to `r_max`: `(r_max - r_neg + 1) / (r_max + 1)`.
pub fn kappa(r_neg: f64, r_max: f64) -> Result<f64> {
    if !(r_max > 0.0 && r_max.is_finite()) {
        return Err(Error::Domain(format!("r_max must be positive, got {r_max}")));
    }
    if !(0.0..=r_max).contains(&r_neg) {
        return Err(Error::Domain(format!("negative reward {r_neg} outside [0, {r_max}]")));
    }
    Ok((r_max - r_neg + 1.0) / (r_max + 1.0))
}

/// Mean over rows of the row-wise dot product.
pub fn similarity(v: &Array2<f64>, v_neg: &Array2<f64>) -> Result<f64> {
    if v.dim() != v_neg.dim() {
        return Err(Error::Shape(format!(
            "similarity of {:?} and {:?} matrices",
            v.dim(),
            v_neg.dim()
        )));
    }
    if v.nrows() == 0 {
        return Err(Error::Degenerate("similarity of empty matrices".into()));
    }
    let total: f64 = v
        .rows()
        .into_iter()
        .zip(v_neg.rows())
        .map(|(a, b)| a.dot(&b))
        .sum();
    Ok(total / v.nrows() as f64)
}

/// `-sum(kappa * similarity)` over the negatives. With `disabled` set the
/// term is zero whatever the negatives.
pub fn contrastive_loss(
    v: &Array2<f64>,
    negatives: &[(Array2<f64>, f64)],
    disabled: bool,
) -> Result<f64> {
    if disabled {
        return Ok(0.0);
    }
    if negatives.is_empty() {
        return Err(Error::Config(
            "contrastive loss needs at least one negative".into(),
        ));
    }
    let mut total = 0.0;
    for (v_neg, k) in negatives {
        total -= k * similarity(v, v_neg)?;
    }
    Ok(total)
}

/// Mean negative log-probability of the true class over unmasked rows.
pub fn ce_loss(probs: &Array2<f64>, targets: &[usize], valid: &[bool]) -> Result<f64> {
    if targets.len() != probs.nrows() || valid.len() != probs.nrows() {
        return Err(Error::Shape(format!(
            "{} probability rows, {} targets, {} mask entries",
            probs.nrows(),
            targets.len(),
            valid.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (&t, &ok)) in targets.iter().zip(valid).enumerate() {
        if !ok {
            continue;
        }
        if t >= probs.ncols() {
            return Err(Error::Shape(format!("target class {t} out of range")));
        }
        total -= probs[[i, t]].ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Degenerate("no valid positions for cross-entropy".into()));
    }
    Ok(total / count as f64)
}

pub fn total_loss(ce: f64, cl: f64, beta: f64) -> f64 {
    ce + beta * cl
}
