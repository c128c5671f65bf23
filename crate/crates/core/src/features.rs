//! Statistics of a batch of generated images relative to their conditions,
//! used to describe a prompt-optimization trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::FrozenGenerator;
use crate::graph::{masked_softmax, Tensor};
use crate::nn::Mlp;

pub const SSIM_WINDOW: usize = 4;
pub const SSIM_STRIDE: usize = 2;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 100.0;

/// Mean SSIM over uniform `4 x 4` windows at stride 2, with dynamic range 1.
/// Grids smaller than the window use a single full-image window.
pub fn ssim(a: &[f64], b: &[f64], grid: usize) -> f64 {
    debug_assert_eq!(a.len(), grid * grid);
    debug_assert_eq!(b.len(), grid * grid);
    let win = SSIM_WINDOW.min(grid);
    let starts: Vec<usize> = (0..=grid - win).step_by(SSIM_STRIDE).collect();
    let mut total = 0.0;
    for &r0 in &starts {
        for &c0 in &starts {
            let n = (win * win) as f64;
            let (mut ma, mut mb) = (0.0, 0.0);
            for r in r0..r0 + win {
                for c in c0..c0 + win {
                    ma += a[r * grid + c];
                    mb += b[r * grid + c];
                }
            }
            ma /= n;
            mb /= n;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for r in r0..r0 + win {
                for c in c0..c0 + win {
                    let da = a[r * grid + c] - ma;
                    let db = b[r * grid + c] - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            va /= n;
            vb /= n;
            cov /= n;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    total / (starts.len() * starts.len()) as f64
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// Peak signal-to-noise ratio for unit dynamic range, capped at 100 dB.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let m = mse(a, b);
    if m <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * m.log10()).min(PSNR_CAP)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        if na == nb {
            1.0
        } else {
            0.0
        }
    } else {
        dot(a, b) / (na * nb)
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Population standard deviation.
fn std(v: &[f64]) -> f64 {
    let m = mean(v.iter().copied());
    mean(v.iter().map(|x| (x - m).powi(2))).sqrt()
}

/// Excess kurtosis; zero for a constant vector.
pub fn kurtosis(v: &[f64]) -> f64 {
    let m = mean(v.iter().copied());
    let m2 = mean(v.iter().map(|x| (x - m).powi(2)));
    if m2 <= f64::EPSILON * f64::EPSILON * m.abs().max(1.0) {
        return 0.0;
    }
    mean(v.iter().map(|x| (x - m).powi(4))) / (m2 * m2) - 3.0
}

/// Mean over columns of the population standard deviation across rows.
fn column_std(t: &Tensor) -> f64 {
    mean(t.columns().into_iter().map(|c| std(&c.to_vec())))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Mean of `f` over unordered pairs of rows; `empty` when fewer than two.
fn pairwise(rows: &[Vec<f64>], empty: f64, f: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let mut vals = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            vals.push(f(&rows[i], &rows[j]));
        }
    }
    if vals.is_empty() {
        empty
    } else {
        mean(vals)
    }
}

fn grid_of(pixels: usize) -> Result<usize> {
    let g = (pixels as f64).sqrt().round() as usize;
    if g * g != pixels {
        return Err(Error::shape(format!("{pixels} pixels is not a square grid")));
    }
    Ok(g)
}

fn check_pair(generated: &Tensor, conditions: &Tensor) -> Result<()> {
    if generated.nrows() == 0 {
        return Err(Error::Empty("generated batch"));
    }
    if generated.dim() != conditions.dim() {
        return Err(Error::shape(format!(
            "generated {:?} against conditions {:?}",
            generated.dim(),
            conditions.dim()
        )));
    }
    Ok(())
}

/// The four trajectory statistics: SSIM to the condition, feature dot
/// product with the condition, quality, and feature spread.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub ssim: f64,
    pub feature_dot: f64,
    pub quality: f64,
    pub feature_std: f64,
}

impl FeatureVector {
    pub const LEN: usize = 4;

    pub fn to_array(self) -> [f64; 4] {
        [self.ssim, self.feature_dot, self.quality, self.feature_std]
    }
}

pub fn compute_features(
    generated: &Tensor,
    conditions: &Tensor,
    net: &Mlp,
    generator: &FrozenGenerator,
) -> Result<FeatureVector> {
    check_pair(generated, conditions)?;
    let grid = grid_of(generated.ncols())?;
    let (_, fg) = net.forward(generated)?;
    let (_, fx) = net.forward(conditions)?;
    let g = rows(generated);
    let x = rows(conditions);
    Ok(FeatureVector {
        ssim: mean(g.iter().zip(&x).map(|(a, b)| ssim(a, b, grid))),
        feature_dot: mean(rows(&fx).iter().zip(rows(&fg).iter()).map(|(a, b)| dot(a, b))),
        quality: mean(generator.quality(generated)?),
        feature_std: column_std(&fg),
    })
}

/// Names of the candidate bank, in output order.
pub const CANDIDATE_NAMES: [&str; 25] = [
    // image level
    "ssim_gen_cond",
    "psnr_gen_cond",
    "mse_gen_cond",
    "ssim_gen_pairwise",
    "psnr_gen_pairwise",
    "mse_gen_pairwise",
    "quality_mean",
    "quality_std",
    "quality_min",
    "pixel_std_gen",
    // feature level
    "feat_dot_gen_cond",
    "feat_cos_gen_cond",
    "feat_mse_gen_cond",
    "feat_std_gen",
    "feat_std_cond",
    "feat_cos_gen_pairwise",
    "feat_norm_gen",
    "feat_norm_ratio",
    // classifier uncertainty
    "logit_var",
    "entropy",
    "logit_range",
    "logit_kurtosis",
    "ce_target",
    "target_prob",
    "target_margin",
];

/// Every candidate statistic. Classifier statistics use the logits of the
/// heads in `mask`; `target` must be one of them. Pairwise statistics of a
/// single-sample batch take the values of identical images.
pub fn compute_candidate_bank(
    generated: &Tensor,
    conditions: &Tensor,
    net: &Mlp,
    generator: &FrozenGenerator,
    target: usize,
    mask: &[bool],
) -> Result<Vec<(&'static str, f64)>> {
    check_pair(generated, conditions)?;
    if mask.len() != net.output_dim() || !mask.get(target).copied().unwrap_or(false) {
        return Err(Error::TargetOutsideMask { target });
    }
    let grid = grid_of(generated.ncols())?;
    let (logits, fg) = net.forward(generated)?;
    let (_, fx) = net.forward(conditions)?;
    let g = rows(generated);
    let x = rows(conditions);
    let fg_rows = rows(&fg);
    let fx_rows = rows(&fx);
    let q = generator.quality(generated)?;
    let probs = masked_softmax(&logits, Some(mask));
    let active: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
    let masked_logits: Vec<Vec<f64>> = logits
        .rows()
        .into_iter()
        .map(|r| active.iter().map(|&j| r[j]).collect())
        .collect();

    let values = [
        mean(g.iter().zip(&x).map(|(a, b)| ssim(a, b, grid))),
        mean(g.iter().zip(&x).map(|(a, b)| psnr(a, b))),
        mean(g.iter().zip(&x).map(|(a, b)| mse(a, b))),
        pairwise(&g, 1.0, |a, b| ssim(a, b, grid)),
        pairwise(&g, PSNR_CAP, psnr),
        pairwise(&g, 0.0, mse),
        mean(q.iter().copied()),
        std(&q),
        q.iter().copied().fold(f64::INFINITY, f64::min),
        column_std(generated),
        mean(fx_rows.iter().zip(&fg_rows).map(|(a, b)| dot(a, b))),
        mean(fx_rows.iter().zip(&fg_rows).map(|(a, b)| cosine(a, b))),
        mean(fx_rows.iter().zip(&fg_rows).map(|(a, b)| mse(a, b))),
        column_std(&fg),
        column_std(&fx),
        pairwise(&fg_rows, 1.0, cosine),
        mean(fg_rows.iter().map(|r| dot(r, r).sqrt())),
        mean(fx_rows.iter().zip(&fg_rows).map(|(a, b)| {
            let na = dot(a, a).sqrt();
            if na == 0.0 {
                0.0
            } else {
                dot(b, b).sqrt() / na
            }
        })),
        mean(masked_logits.iter().map(|r| std(r).powi(2))),
        mean(probs.rows().into_iter().map(|r| {
            -active
                .iter()
                .map(|&j| r[j])
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>()
        })),
        mean(masked_logits.iter().map(|r| {
            let (lo, hi) = r.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
            hi - lo
        })),
        mean(masked_logits.iter().map(|r| kurtosis(r))),
        mean(probs.column(target).iter().map(|&p| -p.max(f64::MIN_POSITIVE).ln())),
        mean(probs.column(target).iter().copied()),
        mean(logits.rows().into_iter().map(|r| {
            let other = active
                .iter()
                .filter(|&&j| j != target)
                .map(|&j| r[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if other.is_finite() {
                r[target] - other
            } else {
                0.0
            }
        })),
    ];
    let out: Vec<(&'static str, f64)> = CANDIDATE_NAMES.iter().copied().zip(values).collect();
    if let Some((name, _)) = out.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite((*name).to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a: Vec<f64> = (0..144).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        assert!((ssim(&a, &a, 12) - 1.0).abs() < 1e-12);
        let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        let s = ssim(&a, &b, 12);
        assert!((-1.0..1.0).contains(&s));
    }

    #[test]
    fn degenerate_conventions() {
        assert_eq!(kurtosis(&[2.0; 6]), 0.0);
        assert_eq!(psnr(&[0.3, 0.4], &[0.3, 0.4]), PSNR_CAP);
        assert!((psnr(&[0.0], &[0.1]) - 20.0).abs() < 1e-9);
        // normal-like symmetric two-point distribution has excess kurtosis -2
        assert!((kurtosis(&[1.0, -1.0, 1.0, -1.0]) + 2.0).abs() < 1e-12);
    }
}
