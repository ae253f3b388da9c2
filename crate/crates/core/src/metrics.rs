//! PSNR and SSIM against ground truth, with per-method aggregation.

use std::fmt::Write as _;

use crate::error::{invalid, Result};
use crate::projection::Image;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_RANGE: f64 = 1.0;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.size() != b.size() {
        return Err(invalid(format!(
            "image sizes differ: {} vs {}",
            a.size(),
            b.size()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Peak signal-to-noise ratio in dB. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

/// PSNR restricted to the pixels where `mask` is set.
pub fn psnr_masked(a: &Image, b: &Image, mask: &[bool], peak: f64) -> Result<f64> {
    check_dims(a, b)?;
    if mask.len() != a.data().len() {
        return Err(invalid("mask length does not match the images"));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for ((x, y), &m) in a.data().iter().zip(b.data()).zip(mask) {
        if m {
            sum += (x - y) * (x - y);
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid("mask selects no pixels"));
    }
    if sum == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak * count as f64 / sum).log10())
}

fn gaussian_taps() -> Vec<f64> {
    (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let d = i as f64 - SSIM_RADIUS as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect()
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5). The window is
/// evaluated at every pixel; near the border it is truncated to the image
/// and renormalized.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.size();
    if n < 2 * SSIM_RADIUS + 1 {
        return Err(invalid(format!(
            "image size {n} is smaller than the {0}x{0} SSIM window",
            2 * SSIM_RADIUS + 1
        )));
    }
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let (xa, xb) = (a.data(), b.data());
    let r = SSIM_RADIUS as isize;
    let mut total = 0.0;
    for y in 0..n {
        for x in 0..n {
            let rows = (y as isize - r).max(0) as usize..=(y as isize + r).min(n as isize - 1) as usize;
            let cols = (x as isize - r).max(0) as usize..=(x as isize + r).min(n as isize - 1) as usize;
            let weight = |i: usize, j: usize| {
                taps[(i as isize - y as isize + r) as usize] * taps[(j as isize - x as isize + r) as usize]
            };
            let (mut wsum, mut ma, mut mb) = (0.0, 0.0, 0.0);
            for i in rows.clone() {
                for j in cols.clone() {
                    let w = weight(i, j);
                    wsum += w;
                    ma += w * xa[i * n + j];
                    mb += w * xb[i * n + j];
                }
            }
            ma /= wsum;
            mb /= wsum;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in rows.clone() {
                for j in cols.clone() {
                    let w = weight(i, j);
                    let da = xa[i * n + j] - ma;
                    let db = xb[i * n + j] - mb;
                    va += w * da * da;
                    vb += w * db * db;
                    cov += w * da * db;
                }
            }
            va /= wsum;
            vb /= wsum;
            cov /= wsum;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (n * n) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub scan: usize,
    pub method: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Mean and sample standard deviation; `std` is `None` below two samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: Option<f64>,
    pub count: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.len() > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Self {
            mean,
            std,
            count: v.len(),
        })
    }

    /// `mean ± std` with two decimals.
    pub fn display(summary: Option<Self>) -> String {
        match summary {
            None => "n/a".to_string(),
            Some(Self { mean, std: Some(s), .. }) => format!("{mean:.2} ± {s:.2}"),
            Some(Self { mean, std: None, .. }) => format!("{mean:.2} ± n/a"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub method: String,
    /// Infinite PSNR rows are left out.
    pub psnr: Option<Summary>,
    pub ssim: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    /// Methods in order of first appearance.
    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn aggregate(&self, method: &str) -> Aggregate {
        let rows = || self.rows.iter().filter(|r| r.method == method);
        Aggregate {
            method: method.to_string(),
            psnr: Summary::of(rows().map(|r| r.psnr_db)),
            ssim: Summary::of(rows().map(|r| r.ssim)),
        }
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        self.methods().iter().map(|m| self.aggregate(m)).collect()
    }

    /// Comma-separated rows followed by `# aggregate` comment lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scan,method,psnr_db,ssim\n");
        for r in &self.rows {
            let p = if r.psnr_db.is_infinite() {
                "inf".to_string()
            } else {
                format!("{:.6}", r.psnr_db)
            };
            writeln!(s, "{},{},{},{:.6}", r.scan, r.method, p, r.ssim).unwrap();
        }
        for agg in self.aggregates() {
            writeln!(
                s,
                "# aggregate,{},{},{}",
                agg.method,
                Summary::display(agg.psnr),
                Summary::display(agg.ssim)
            )
            .unwrap();
        }
        s
    }
}

/// Scores every `(scan, prediction)` against the ground truth with the same
/// scan id.
pub fn evaluate(method: &str, predictions: &[(usize, Image)], truth: &[(usize, Image)]) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    evaluate_into(&mut report, method, predictions, truth)?;
    Ok(report)
}

pub fn evaluate_into(
    report: &mut MetricsReport,
    method: &str,
    predictions: &[(usize, Image)],
    truth: &[(usize, Image)],
) -> Result<()> {
    if predictions.len() != truth.len() {
        return Err(invalid(format!(
            "{} predictions for {} ground-truth scans",
            predictions.len(),
            truth.len()
        )));
    }
    for ((pid, pred), (tid, gt)) in predictions.iter().zip(truth) {
        if pid != tid {
            return Err(invalid(format!("scan id mismatch: prediction {pid} vs truth {tid}")));
        }
        report.push(MetricRow {
            scan: *pid,
            method: method.to_string(),
            psnr_db: psnr(pred, gt, 1.0)?,
            ssim: ssim(pred, gt)?,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(n: usize, v: f64) -> Image {
        Image::new(n, vec![v; n * n]).unwrap()
    }

    fn ramp(n: usize) -> Image {
        Image::new(n, (0..n * n).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ramp(16);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let a = constant(16, 0.3);
        let b = constant(16, 0.4);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &constant(8, 0.0), 1.0).is_err());
    }

    #[test]
    fn psnr_falls_as_error_grows_and_is_symmetric() {
        let a = ramp(16);
        let mut last = f64::INFINITY;
        for k in 1..10 {
            let b = Image::new(16, a.data().iter().map(|v| v + 0.01 * k as f64).collect()).unwrap();
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < last);
            assert_eq!(p, psnr(&b, &a, 1.0).unwrap());
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = ramp(16);
        let b = Image::new(16, a.data().iter().map(|v| (v * 0.8 + 0.05f64).sqrt()).collect()).unwrap();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let ab = ssim(&a, &b).unwrap();
        assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ab.abs() <= 1.0);
    }

    #[test]
    fn ssim_of_constants() {
        let (x, y) = (0.2, 0.7);
        let c1 = (0.01f64 * 1.0).powi(2);
        let expected = (2.0 * x * y + c1) / (x * x + y * y + c1);
        let got = ssim(&constant(16, x), &constant(16, y)).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        assert!(ssim(&constant(10, 0.0), &constant(10, 0.0)).is_err());
    }

    #[test]
    fn aggregates_match_hand_computation() {
        let mut report = MetricsReport::default();
        for (scan, p, s) in [(0, 18.0, 0.5), (1, 20.0, 0.6), (2, 25.0, 0.9)] {
            report.push(MetricRow { scan, method: "FBP".into(), psnr_db: p, ssim: s });
        }
        let agg = report.aggregate("FBP");
        let p = agg.psnr.unwrap();
        // mean 21, deviations -3, -1, 4 -> 26 / 2 = 13
        assert!((p.mean - 21.0).abs() < 1e-12);
        assert!((p.std.unwrap() - 13f64.sqrt()).abs() < 1e-12);
        let s = agg.ssim.unwrap();
        assert!((s.mean - 2.0 / 3.0).abs() < 1e-12);
        // deviations -1/6, -1/15, 7/30 -> (25 + 4 + 49) / 900 / 2
        assert!((s.std.unwrap() - (78.0f64 / 1800.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_scan_has_no_std() {
        let a = ramp(16);
        let b = constant(16, 0.5);
        let report = evaluate("DBP", &[(4, b.clone())], &[(4, a.clone())]).unwrap();
        let agg = report.aggregate("DBP");
        assert_eq!(agg.psnr.unwrap().mean, report.rows[0].psnr_db);
        assert_eq!(agg.psnr.unwrap().std, None);
        assert!(evaluate("DBP", &[(4, b)], &[(5, a)]).is_err());
    }

    #[test]
    fn infinite_rows_are_kept_but_not_aggregated() {
        let a = ramp(16);
        let report = evaluate("X", &[(0, a.clone())], &[(0, a)]).unwrap();
        assert_eq!(report.rows[0].psnr_db, f64::INFINITY);
        assert_eq!(report.rows[0].ssim, 1.0);
        assert!(report.aggregate("X").psnr.is_none());
        let csv = report.to_csv();
        assert!(csv.starts_with("scan,method,psnr_db,ssim\n0,X,inf,1.000000\n"));
        assert!(csv.contains("# aggregate,X,n/a,1.00 ± n/a"));
    }
}
