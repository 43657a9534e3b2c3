use serde::{Deserialize, Serialize};

use super::{DistError, Family, PosteriorParams, Result};

/// How Dirichlet posteriors are combined.
///
/// `Average` averages the concentrations elementwise. `Exact` evaluates the
/// 1/n-weighted density product as `1 + mean(alpha - 1)`. The two are equal
/// algebraically and differ only in rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirichletFusion {
    #[default]
    Average,
    Exact,
}

fn check_inputs(posteriors: &[PosteriorParams]) -> Result<(Family, usize)> {
    let first = posteriors.first().ok_or(DistError::EmptyFusion)?;
    let (family, dim) = (first.family(), first.dim());
    for p in posteriors {
        if p.family() != family {
            return Err(DistError::FamilyMismatch(family, p.family()));
        }
        if p.dim() != dim {
            return Err(DistError::DimMismatch {
                expected: dim,
                got: p.dim(),
            });
        }
        if p.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(DistError::NonFinite);
        }
    }
    Ok((family, dim))
}

/// Combines per-context posteriors into one through the normalized product
/// `prod_i q_i(z)^(1/n)`.
pub fn fuse(posteriors: &[PosteriorParams], rule: DirichletFusion) -> Result<PosteriorParams> {
    let (family, dim) = check_inputs(posteriors)?;
    let n = posteriors.len() as f64;
    if posteriors.len() == 1 {
        return Ok(posteriors[0].clone());
    }
    let flats: Vec<Vec<f64>> = posteriors.iter().map(PosteriorParams::to_flat).collect();
    let out = match family {
        Family::Gaussian | Family::LogitNormal => {
            let mut flat = vec![0.0; 2 * dim];
            for j in 0..dim {
                let mut precision = 0.0;
                let mut weighted = 0.0;
                for f in &flats {
                    precision += 1.0 / f[dim + j];
                    weighted += f[j] / f[dim + j];
                }
                flat[j] = weighted / precision;
                flat[dim + j] = n / precision;
            }
            flat
        }
        Family::Categorical => {
            let logs: Vec<f64> = (0..dim)
                .map(|j| flats.iter().map(|f| f[j].ln()).sum::<f64>() / n)
                .collect();
            softmax(&logs)
        }
        Family::Dirichlet => (0..dim)
            .map(|j| match rule {
                DirichletFusion::Average => flats.iter().map(|f| f[j]).sum::<f64>() / n,
                DirichletFusion::Exact => 1.0 + flats.iter().map(|f| f[j] - 1.0).sum::<f64>() / n,
            })
            .collect(),
    };
    Ok(PosteriorParams::from_flat(family, &out))
}

/// Vector-Jacobian product of [`fuse`]: maps a gradient on the fused flat
/// parameters to gradients on each input's flat parameters.
pub fn fuse_vjp(posteriors: &[PosteriorParams], grad_out: &[f64]) -> Result<Vec<Vec<f64>>> {
    let (family, dim) = check_inputs(posteriors)?;
    let n = posteriors.len();
    let nf = n as f64;
    if grad_out.len() != family.param_len(dim) {
        return Err(DistError::DimMismatch {
            expected: family.param_len(dim),
            got: grad_out.len(),
        });
    }
    if n == 1 {
        return Ok(vec![grad_out.to_vec()]);
    }
    let flats: Vec<Vec<f64>> = posteriors.iter().map(PosteriorParams::to_flat).collect();
    let mut grads = vec![vec![0.0; family.param_len(dim)]; n];
    match family {
        Family::Gaussian | Family::LogitNormal => {
            for j in 0..dim {
                let precision: f64 = flats.iter().map(|f| 1.0 / f[dim + j]).sum();
                let weighted: f64 = flats.iter().map(|f| f[j] / f[dim + j]).sum();
                let mean = weighted / precision;
                let (g_mean, g_var) = (grad_out[j], grad_out[dim + j]);
                for (f, g) in flats.iter().zip(grads.iter_mut()) {
                    let v = f[dim + j];
                    g[j] = g_mean / (v * precision);
                    // d mean / d v_i = (mean - mu_i) / (v_i^2 P); d var / d v_i = n / (P^2 v_i^2)
                    g[dim + j] =
                        g_mean * (mean - f[j]) / (v * v * precision) + g_var * nf / (precision * precision * v * v);
                }
            }
        }
        Family::Categorical => {
            let logs: Vec<f64> = (0..dim)
                .map(|j| flats.iter().map(|f| f[j].ln()).sum::<f64>() / nf)
                .collect();
            let y = softmax(&logs);
            let dot: f64 = y.iter().zip(grad_out).map(|(a, b)| a * b).sum();
            for j in 0..dim {
                let g_logit = y[j] * (grad_out[j] - dot);
                for (f, g) in flats.iter().zip(grads.iter_mut()) {
                    g[j] = g_logit / (nf * f[j]);
                }
            }
        }
        Family::Dirichlet => {
            for g in grads.iter_mut() {
                for (gj, go) in g.iter_mut().zip(grad_out) {
                    *gj = go / nf;
                }
            }
        }
    }
    Ok(grads)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}
