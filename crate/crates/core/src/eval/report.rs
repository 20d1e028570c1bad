use super::{ciede2000, psnr, ssim, NiqeModel};
use crate::{Error, Image, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub ciede2000: f64,
    /// Present only when a NIQE model was supplied.
    pub niqe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub ciede2000: f64,
    pub niqe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub mean: MetricSummary,
}

impl MetricReport {
    /// Aligned plain-text table: one row per image plus the mean.
    pub fn to_table(&self) -> String {
        let name_w = self
            .images
            .iter()
            .map(|m| m.name.len())
            .chain(std::iter::once(4))
            .max()
            .unwrap_or(4);
        let niqe = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<name_w$}  {:>9}  {:>7}  {:>9}  {:>8}", "image", "PSNR", "SSIM", "CIEDE", "NIQE");
        for m in &self.images {
            let _ = writeln!(
                out,
                "{:<name_w$}  {:>9.4}  {:>7.4}  {:>9.4}  {:>8}",
                m.name,
                m.psnr,
                m.ssim,
                m.ciede2000,
                niqe(m.niqe)
            );
        }
        let s = &self.mean;
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>9.4}  {:>7.4}  {:>9.4}  {:>8}",
            "mean",
            s.psnr,
            s.ssim,
            s.ciede2000,
            niqe(s.niqe)
        );
        out
    }
}

/// Scores `(name, estimate, reference)` triples. `threads > 1` spreads images
/// over scoped threads; results are identical either way.
pub fn evaluate_pairs(pairs: &[(String, &Image, &Image)], niqe: Option<&NiqeModel>, threads: usize) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no image pairs to evaluate".into()));
    }
    let score = |(name, est, reference): &(String, &Image, &Image)| -> Result<ImageMetrics> {
        Ok(ImageMetrics {
            name: name.clone(),
            psnr: psnr(est, reference)?,
            ssim: ssim(est, reference)?,
            ciede2000: ciede2000(est, reference)?,
            niqe: niqe.map(|m| m.score(est)).transpose()?,
        })
    };
    let threads = threads.clamp(1, pairs.len());
    let images: Vec<ImageMetrics> = if threads == 1 {
        pairs.iter().map(score).collect::<Result<_>>()?
    } else {
        let chunk = pairs.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = pairs
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(score).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(pairs.len());
            for h in handles {
                all.extend(h.join().expect("metric worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let n = images.len() as f64;
    let avg = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
    let mean = MetricSummary {
        count: images.len(),
        psnr: avg(|m| m.psnr),
        ssim: avg(|m| m.ssim),
        ciede2000: avg(|m| m.ciede2000),
        niqe: niqe.map(|_| images.iter().filter_map(|m| m.niqe).sum::<f64>() / n),
    };
    Ok(MetricReport { images, mean })
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn write_report(report: &MetricReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Json {
        path: json_path.clone(),
        source: e,
    })?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let txt = dir.join("report.txt");
    std::fs::write(&txt, report.to_table()).map_err(|e| Error::io(&txt, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f32) -> Image {
        Image::from_fn(16, 16, |y, x, c| v + 0.01 * ((x + 2 * y + c) % 7) as f32).unwrap()
    }

    #[test]
    fn identical_pairs_hit_best_values() {
        let a = img(0.3);
        let r = evaluate_pairs(&[("a".into(), &a, &a)], None, 1).unwrap();
        assert_eq!(r.mean.psnr, 100.0);
        assert!((r.mean.ssim - 1.0).abs() < 1e-12);
        assert_eq!(r.mean.ciede2000, 0.0);
        assert!(r.mean.niqe.is_none());
    }

    #[test]
    fn threading_does_not_change_results() {
        let imgs: Vec<(Image, Image)> = (0..7).map(|i| (img(0.1 * i as f32), img(0.05 * i as f32 + 0.2))).collect();
        let pairs: Vec<_> = imgs.iter().enumerate().map(|(i, (a, b))| (format!("{i}"), a, b)).collect();
        let one = evaluate_pairs(&pairs, None, 1).unwrap();
        let many = evaluate_pairs(&pairs, None, 3).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn report_files_round_trip() {
        let (a, b) = (img(0.2), img(0.4));
        let r = evaluate_pairs(&[("x".into(), &a, &b)], None, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(&r, dir.path()).unwrap();
        let back: MetricReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, r);
        let table = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(table.lines().next().unwrap().contains("PSNR"));
        assert!(table.lines().last().unwrap().starts_with("mean"));
    }
}
