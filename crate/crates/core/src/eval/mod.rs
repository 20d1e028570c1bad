//! Image quality metrics.
//!
//! Full-reference metrics ([`psnr`], [`ssim`], [`ciede2000`]) compare an
//! estimate against ground truth; [`NiqeModel`] scores naturalness without a
//! reference, against statistics fitted on a pristine corpus.
//!
//! Images are linear intensities in `[0, 1]`. PSNR and SSIM work on those
//! values directly; CIEDE2000 converts to CIELAB internally.

mod color;
mod fullref;
mod niqe;
mod report;

pub use color::{ciede2000, delta_e00, linear_rgb_to_lab, Lab};
pub use fullref::{psnr, ssim, PSNR_CAP_DB};
pub use niqe::{NiqeConfig, NiqeModel};
pub use report::{evaluate_pairs, write_report, ImageMetrics, MetricReport, MetricSummary};
