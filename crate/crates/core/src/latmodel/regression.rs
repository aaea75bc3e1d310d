use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `y = slope * x + intercept`, fitted by ordinary least squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

impl LinearFit {
    /// Prediction with the intercept clamped at zero and the result floored
    /// at zero.
    pub fn predict(&self, x: f64) -> f64 {
        (self.slope * x + self.intercept.max(0.0)).max(0.0)
    }
}

/// Affine OLS fit over `(x, y)` points. Needs at least two distinct `x`.
pub fn fit(points: &[(f64, f64)]) -> Result<LinearFit> {
    if points.len() < 2 {
        return Err(Error::Fit(format!(
            "need at least two points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Fit("non-finite sample".into()));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::Fit("all x values are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = points
        .iter()
        .map(|&(x, y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum();
    let r2 = if syy == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(LinearFit {
        slope,
        intercept,
        r2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_is_recovered() {
        let f = fit(&[(1.0, 2.5), (2.0, 4.5), (3.0, 6.5)]).unwrap();
        assert_eq!(f.slope, 2.0);
        assert_eq!(f.intercept, 0.5);
        assert_eq!(f.r2, 1.0);
    }

    #[test]
    fn outlier_matches_closed_form() {
        // y = x except y(4) = 8. By hand: mean_x = 2.5, mean_y = 3.5,
        // Sxx = 5, Sxy = 3.75 + 0.75 - 0.25 + 6.75 = 11,
        // slope = 2.2, intercept = 3.5 - 5.5 = -2.
        // Residuals: 0.8, -0.4, -1.6, 1.2 -> SSres = 4.8; Syy = 29.
        let f = fit(&[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0), (4.0, 8.0)]).unwrap();
        assert!((f.slope - 2.2).abs() < 1e-12);
        assert!((f.intercept + 2.0).abs() < 1e-12);
        assert!((f.r2 - (1.0 - 4.8 / 29.0)).abs() < 1e-12);
        assert!(f.r2 < 1.0);
    }

    #[test]
    fn degenerate_inputs_fail() {
        assert!(matches!(fit(&[(1.0, 1.0), (1.0, 2.0)]), Err(Error::Fit(_))));
        assert!(matches!(fit(&[(1.0, 1.0)]), Err(Error::Fit(_))));
        assert!(fit(&[(1.0, f64::NAN), (2.0, 1.0)]).is_err());
    }

    #[test]
    fn negative_intercept_clamps_at_prediction() {
        let f = LinearFit {
            slope: 1.0,
            intercept: -5.0,
            r2: 1.0,
        };
        assert_eq!(f.predict(0.0), 0.0);
        assert_eq!(f.predict(3.0), 3.0);
    }
}
