//! Training objective: soft-label cross-entropy plus a prototype
//! orthogonality penalty, with exact gradients.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::Prototypes;

/// Prototype rows shorter than this are left out of the normalization.
pub const ZERO_PROTOTYPE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_soft: f64,
    pub l_orth: f64,
    pub l_total: f64,
    pub eta: f64,
}

/// `-(1/N) sum_ij gamma_ij ln s_ij` and its gradient `-gamma_ij / (N s_ij)`.
pub fn soft_ce_loss(gamma: ArrayView2<'_, f64>, scores: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    if gamma.dim() != scores.dim() {
        return Err(Error::Shape(format!(
            "soft labels {:?} vs scores {:?}",
            gamma.dim(),
            scores.dim()
        )));
    }
    if let Some(s) = scores.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Numerical(format!("score {s} is not strictly positive")));
    }
    let n = scores.nrows() as f64;
    let loss = -gamma
        .iter()
        .zip(scores.iter())
        .map(|(&g, &s)| if g == 0.0 { 0.0 } else { g * s.ln() })
        .sum::<f64>()
        / n;
    let mut grad = gamma.to_owned();
    grad.zip_mut_with(&scores, |g, &s| *g = -*g / (n * s));
    Ok((loss, grad))
}

/// Row-mean entropy of the soft labels; the floor of [`soft_ce_loss`].
pub fn mean_entropy(gamma: ArrayView2<'_, f64>) -> f64 {
    let n = gamma.nrows() as f64;
    -gamma
        .iter()
        .filter(|&&g| g > 0.0)
        .map(|&g| g * g.ln())
        .sum::<f64>()
        / n
}

/// `|| C_*^T C_* - I ||_Fr` for the rows of `centers`, where `C_*` holds the
/// unit-normalized rows as columns. Returns the value and `dL/dC`.
pub fn orth_term(centers: ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
    let norms = centers.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut unit = centers.to_owned();
    for (mut row, &norm) in unit.rows_mut().into_iter().zip(&norms) {
        if norm < ZERO_PROTOTYPE_NORM {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| v / norm);
        }
    }
    let mut residual = unit.dot(&unit.t());
    residual.diag_mut().mapv_inplace(|v| v - 1.0);
    let value = residual.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut grad = Array2::zeros(centers.dim());
    if value == 0.0 {
        return (value, grad);
    }
    // dL/dU = 2 (G - I) U / L, then project out the radial part per row.
    let d_unit = residual.dot(&unit) * (2.0 / value);
    for (j, mut g) in grad.rows_mut().into_iter().enumerate() {
        if norms[j] < ZERO_PROTOTYPE_NORM {
            continue;
        }
        let u = unit.row(j);
        let du = d_unit.row(j);
        let radial = du.dot(&u);
        g.assign(&((&du - &(&u * radial)) / norms[j]));
    }
    (value, grad)
}

pub struct OrthLoss {
    pub value: f64,
    pub d_geometric: Array2<f64>,
    pub d_feature: Array2<f64>,
}

pub fn orth_loss(protos: &Prototypes) -> OrthLoss {
    let (ge, d_geometric) = orth_term(protos.geometric.view());
    let (gf, d_feature) = orth_term(protos.feature.view());
    OrthLoss {
        value: ge + gf,
        d_geometric,
        d_feature,
    }
}

/// Gradients of `L_tot` with respect to its direct inputs. The prototype
/// parts still have to be pulled back through the prototype weighting.
pub struct TotalGradients {
    pub d_scores: Array2<f64>,
    pub d_geometric: Array2<f64>,
    pub d_feature: Array2<f64>,
}

/// `L_tot = L_soft + eta * L_orth`. `gamma` is a constant target.
pub fn total_loss(
    gamma: ArrayView2<'_, f64>,
    scores: ArrayView2<'_, f64>,
    protos: &Prototypes,
    eta: f64,
) -> Result<(LossReport, TotalGradients)> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("eta must be non-negative, got {eta}")));
    }
    let (l_soft, d_scores) = soft_ce_loss(gamma, scores)?;
    let orth = orth_loss(protos);
    let report = LossReport {
        l_soft,
        l_orth: orth.value,
        l_total: l_soft + eta * orth.value,
        eta,
    };
    Ok((
        report,
        TotalGradients {
            d_scores,
            d_geometric: orth.d_geometric * eta,
            d_feature: orth.d_feature * eta,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_prediction_costs_log_j() {
        let u = Array2::from_elem((5, 4), 0.25);
        let (l, _) = soft_ce_loss(u.view(), u.view()).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn near_perfect_prediction() {
        let gamma = array![[1.0, 0.0], [0.0, 1.0]];
        let scores = array![[1.0 - 1e-9, 1e-9], [1e-9, 1.0 - 1e-9]];
        let (l, _) = soft_ce_loss(gamma.view(), scores.view()).unwrap();
        assert!((l - 1e-9).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_cross_entropy() {
        let gamma = array![[1.0, 0.0], [0.0, 1.0]];
        let scores = array![[0.5, 0.5], [0.25, 0.75]];
        let (l, g) = soft_ce_loss(gamma.view(), scores.view()).unwrap();
        let expected = (-(0.5f64.ln()) - 0.75f64.ln()) / 2.0;
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 0.490415).abs() < 1e-6);
        assert_eq!(g, array![[-1.0, 0.0], [0.0, -1.0 / 1.5]]);
    }

    #[test]
    fn nonpositive_scores_rejected() {
        let gamma = array![[1.0, 0.0]];
        let scores = array![[1.0, 0.0]];
        assert!(matches!(
            soft_ce_loss(gamma.view(), scores.view()),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(
            soft_ce_loss(gamma.view(), array![[1.0]].view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn orthonormal_prototypes_cost_nothing() {
        let protos = Prototypes {
            geometric: array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            feature: array![[2.0, 0.0, 0.0], [0.0, 0.5, 0.0]],
        };
        let o = orth_loss(&protos);
        assert_eq!(o.value, 0.0);
        assert!(o.d_feature.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collapsed_prototypes() {
        // Gram = all ones, so each space contributes ||[[0,1],[1,0]]||_Fr = sqrt(2).
        let protos = Prototypes {
            geometric: array![[0.6, 0.8, 0.0], [0.6, 0.8, 0.0]],
            feature: array![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]],
        };
        assert!((orth_loss(&protos).value - 2.0 * 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_prototype_is_guarded() {
        let c = array![[0.0, 0.0], [1.0, 0.0]];
        let (v, g) = orth_term(c.view());
        // the zero row contributes its missing unit diagonal only
        assert!((v - 1.0).abs() < 1e-15);
        assert!(g.row(0).iter().all(|&x| x == 0.0));
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn orth_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let c = Array2::from_shape_simple_fn((4, 8), || rng.random_range(-1.0..1.0));
            let (_, g) = orth_term(c.view());
            let h = 1e-6;
            for idx in 0..c.len() {
                let (i, k) = (idx / 8, idx % 8);
                let mut plus = c.clone();
                plus[[i, k]] += h;
                let mut minus = c.clone();
                minus[[i, k]] -= h;
                let fd = (orth_term(plus.view()).0 - orth_term(minus.view()).0) / (2.0 * h);
                let rel = (g[[i, k]] - fd).abs() / (g[[i, k]].abs() + 1e-8);
                assert!(rel < 1e-5, "entry ({i},{k}): analytic {} fd {fd}", g[[i, k]]);
            }
        }
    }

    #[test]
    fn total_loss_combines_terms() {
        let gamma = array![[0.7, 0.3], [0.2, 0.8]];
        let scores = array![[0.6, 0.4], [0.1, 0.9]];
        let protos = Prototypes {
            geometric: array![[1.0, 0.2, 0.0], [0.3, 1.0, 0.1]],
            feature: array![[1.0, 1.0], [0.5, -1.0]],
        };
        let (r, _) = total_loss(gamma.view(), scores.view(), &protos, 0.0).unwrap();
        assert_eq!(r.l_total, r.l_soft);
        let (r, _) = total_loss(gamma.view(), scores.view(), &protos, 0.01).unwrap();
        assert_eq!(r.l_total, r.l_soft + 0.01 * r.l_orth);
        assert!(total_loss(gamma.view(), scores.view(), &protos, -1.0).is_err());
    }
}
