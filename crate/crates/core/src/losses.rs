//! Training objectives and evaluation metrics.
//!
//! Frames that exist in the input are supervised with a Charbonnier term;
//! interpolated frames get plain L1 against ground truth plus an
//! alpha-weighted L1 against the flow-guided pseudo label. The total loss is
//! the sum of the two per-group means so clip length does not re-weight the
//! terms.

use crate::error::{Error, Result};
use crate::pseudo::luminance;
use crate::tensor::{abs, add, add_scalar, mean_all, mul, mul_scalar, sqrt, sub_const, Tensor};
use ndarray::{Array2, Array3, ArrayD};

/// Loss values of one optimization step, for logging.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct LossReport {
    pub loss_exist: f64,
    pub loss_inter: f64,
    pub loss_total: f64,
    pub alpha: f64,
    pub eps: f64,
}

fn check_shapes(a: &[usize], b: &[usize], context: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            context,
            expected: a.to_vec(),
            got: b.to_vec(),
        });
    }
    Ok(())
}

/// Mean over pixels of `sqrt((pred - gt)^2 + eps^2)`.
pub fn charbonnier(pred: &Tensor, gt: &ArrayD<f64>, eps: f64) -> Result<Tensor> {
    check_shapes(&pred.shape(), gt.shape(), "charbonnier")?;
    if eps <= 0.0 {
        return Err(Error::invalid("charbonnier eps must be positive"));
    }
    let d = sub_const(pred, gt);
    Ok(mean_all(&sqrt(&add_scalar(&mul(&d, &d), eps * eps))))
}

/// `mean-L1(pred, gt) + alpha * mean-L1(pred, pseudo)`. Both targets are
/// constants; the gradient reaches only `pred`.
pub fn inter_loss(
    pred: &Tensor,
    gt: &ArrayD<f64>,
    pseudo: &ArrayD<f64>,
    alpha: f64,
) -> Result<Tensor> {
    check_shapes(&pred.shape(), gt.shape(), "inter_loss gt")?;
    check_shapes(&pred.shape(), pseudo.shape(), "inter_loss pseudo")?;
    let l_gt = mean_all(&abs(&sub_const(pred, gt)));
    let l_pseudo = mean_all(&abs(&sub_const(pred, pseudo)));
    Ok(add(&l_gt, &mul_scalar(&l_pseudo, alpha)))
}

/// Sum of the per-group means of the existing-frame and interpolated-frame
/// terms. A clip must supervise at least one existing frame.
pub fn total_loss(exist_terms: &[Tensor], inter_terms: &[Tensor]) -> Result<Tensor> {
    if exist_terms.is_empty() {
        return Err(Error::EmptyInput("total_loss needs existing-frame terms"));
    }
    let mean_of = |terms: &[Tensor]| {
        let mut acc = terms[0].clone();
        for t in &terms[1..] {
            acc = add(&acc, t);
        }
        mul_scalar(&acc, 1.0 / terms.len() as f64)
    };
    let exist = mean_of(exist_terms);
    if inter_terms.is_empty() {
        return Ok(exist);
    }
    let inter = mean_of(inter_terms);
    Ok(add(&exist, &inter))
}

/// `10 * log10(1 / MSE)` on RGB in `[0,1]`. Identical inputs give
/// `f64::INFINITY`, the guarded sentinel.
pub fn psnr(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch {
            context: "psnr",
            expected: gt.shape().to_vec(),
            got: pred.shape().to_vec(),
        });
    }
    let mse = pred
        .iter()
        .zip(gt.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// PSNR on the luma channel.
pub fn psnr_luma(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch {
            context: "psnr",
            expected: gt.shape().to_vec(),
            got: pred.shape().to_vec(),
        });
    }
    let (lp, lg) = (luminance(pred), luminance(gt));
    let mse = lp
        .iter()
        .zip(lg.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / lp.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

fn gaussian_filter_valid(img: &Array2<f64>) -> Array2<f64> {
    let k = gaussian_kernel();
    let (h, w) = img.dim();
    let r = SSIM_WINDOW / 2;
    let mut tmp = Array2::zeros((h, w - 2 * r));
    for y in 0..h {
        for x in 0..w - 2 * r {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * img[[y, x + i]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h - 2 * r, w - 2 * r));
    for y in 0..h - 2 * r {
        for x in 0..w - 2 * r {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[[y + i, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Windowed structural similarity on luminance: 11x11 Gaussian window with
/// sigma 1.5, averaged over the valid region. Images smaller than the window
/// fall back to global statistics over a single window.
pub fn ssim(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch {
            context: "ssim",
            expected: gt.shape().to_vec(),
            got: pred.shape().to_vec(),
        });
    }
    let a = luminance(pred);
    let b = luminance(gt);
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        // single global window
        let n = (h * w) as f64;
        let mu_a = a.sum() / n;
        let mu_b = b.sum() / n;
        let var_a = a.iter().map(|v| (v - mu_a) * (v - mu_a)).sum::<f64>() / n;
        let var_b = b.iter().map(|v| (v - mu_b) * (v - mu_b)).sum::<f64>() / n;
        let cov = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - mu_a) * (y - mu_b))
            .sum::<f64>()
            / n;
        let v = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
        return Ok(v);
    }
    let mu_a = gaussian_filter_valid(&a);
    let mu_b = gaussian_filter_valid(&b);
    let e_aa = gaussian_filter_valid(&(&a * &a));
    let e_bb = gaussian_filter_valid(&(&b * &b));
    let e_ab = gaussian_filter_valid(&(&a * &b));
    let (vh, vw) = mu_a.dim();
    let mut acc = 0.0;
    for y in 0..vh {
        for x in 0..vw {
            let ma = mu_a[[y, x]];
            let mb = mu_b[[y, x]];
            let va = (e_aa[[y, x]] - ma * ma).max(0.0);
            let vb = (e_bb[[y, x]] - mb * mb).max(0.0);
            let cov = e_ab[[y, x]] - ma * mb;
            acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(acc / (vh * vw) as f64)
}
