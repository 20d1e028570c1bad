use super::objective::AblationMode;
use super::train::{EpochSummary, TrainConfig, Trainer};
use crate::autodiff::{Graph, ParamStore};
use crate::eval::{psnr, ssim};
use crate::model::{images_to_tensor, tensor_to_images, DehazeNet};
use crate::synth::{Dataset, PairedSample};
use crate::{Error, Image, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TXT: &str = "ablation.txt";
const EVAL_BATCH: usize = 8;

/// Mean fidelity of a trained model against the ideal clean images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    /// One `Dehaze` pass on the hazy input.
    pub psnr: f64,
    pub ssim: f64,
    /// Second pass applied to the first pass's output.
    pub psnr_two_stage: f64,
    pub ssim_two_stage: f64,
}

/// Dehazes every sample's hazy input (inference only) and scores the result
/// against its ideal clean image.
pub fn evaluate_model(net: &DehazeNet, store: &ParamStore<f32>, samples: &[&PairedSample]) -> Result<ModelScore> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples to evaluate".into()));
    }
    let mut acc = [0.0f64; 4];
    for chunk in samples.chunks(EVAL_BATCH) {
        let hazy: Vec<&Image> = chunk.iter().map(|s| &s.synthetic_hazy).collect();
        let mut g = Graph::new();
        let x = g.input(images_to_tensor(&hazy)?)?;
        let s1 = net.forward_frozen(&mut g, store, x)?;
        let s2 = net.forward_frozen(&mut g, store, s1.clean)?;
        let one = tensor_to_images(g.value(s1.clean))?;
        let two = tensor_to_images(g.value(s2.clean))?;
        for ((s, a), b) in chunk.iter().zip(&one).zip(&two) {
            acc[0] += psnr(a, &s.ideal_clean)?;
            acc[1] += ssim(a, &s.ideal_clean)?;
            acc[2] += psnr(b, &s.ideal_clean)?;
            acc[3] += ssim(b, &s.ideal_clean)?;
        }
    }
    let n = samples.len() as f64;
    Ok(ModelScore {
        psnr: acc[0] / n,
        ssim: acc[1] / n,
        psnr_two_stage: acc[2] / n,
        ssim_two_stage: acc[3] / n,
    })
}

/// The identity "dehazer": hazy input scored directly.
pub fn input_baseline(samples: &[&PairedSample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples to evaluate".into()));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for x in samples {
        p += psnr(&x.synthetic_hazy, &x.ideal_clean)?;
        s += ssim(&x.synthetic_hazy, &x.ideal_clean)?;
    }
    let n = samples.len() as f64;
    Ok((p / n, s / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub modes: Vec<AblationMode>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            modes: AblationMode::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            train: TrainConfig::default(),
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Config("ablation needs at least one mode".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        let mut m = self.modes.clone();
        m.sort();
        m.dedup();
        if m.len() != self.modes.len() {
            return Err(Error::Config("ablation modes must be distinct".into()));
        }
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub mode: AblationMode,
    pub seed: u64,
    #[serde(flatten)]
    pub score: ModelScore,
    /// Mean total loss of the final epoch.
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: AblationMode,
    pub seeds: usize,
    /// Medians over seeds.
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_two_stage: f64,
    pub ssim_two_stage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config: AblationConfig,
    pub test_samples: usize,
    /// Hazy input scored directly.
    pub input_psnr: f64,
    pub input_ssim: f64,
    pub runs: Vec<AblationRun>,
    pub summary: Vec<ModeSummary>,
}

impl AblationTable {
    pub fn mode(&self, mode: AblationMode) -> Option<&ModeSummary> {
        self.summary.iter().find(|s| s.mode == mode)
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<6} {:>6} {:>9} {:>8} {:>11} {:>10} {:>10}",
            "mode", "seed", "PSNR", "SSIM", "PSNR(2x)", "SSIM(2x)", "loss"
        );
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{:<6} {:>6} {:>9.3} {:>8.4} {:>11.3} {:>10.4} {:>10.5}",
                r.mode.to_string(),
                r.seed,
                r.score.psnr,
                r.score.ssim,
                r.score.psnr_two_stage,
                r.score.ssim_two_stage,
                r.final_loss
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<6} {:>6} {:>9} {:>8} {:>11} {:>10}",
            "median", "seeds", "PSNR", "SSIM", "PSNR(2x)", "SSIM(2x)"
        );
        for m in &self.summary {
            let _ = writeln!(
                s,
                "{:<6} {:>6} {:>9.3} {:>8.4} {:>11.3} {:>10.4}",
                m.mode.to_string(),
                m.seeds,
                m.psnr,
                m.ssim,
                m.psnr_two_stage,
                m.ssim_two_stage
            );
        }
        let _ = writeln!(
            s,
            "{:<6} {:>6} {:>9.3} {:>8.4}",
            "input", "-", self.input_psnr, self.input_ssim
        );
        s
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Progress notifications from [`run_ablation`].
#[derive(Debug)]
pub enum AblationEvent<'a> {
    /// An epoch finished; during warm-up it is shared by all `modes`.
    Epoch {
        seed: u64,
        modes: &'a [AblationMode],
        summary: &'a EpochSummary,
    },
    Finished(&'a AblationRun),
}

/// Trains every mode for every seed on the training split and scores each
/// on the test split. Warm-up is identical across modes, so it runs once
/// per seed and the trainer is forked for each mode.
pub fn run_ablation(
    config: &AblationConfig,
    dataset: &Dataset,
    mut progress: impl FnMut(AblationEvent<'_>),
) -> Result<AblationTable> {
    config.validate()?;
    let train = dataset.train();
    let test = dataset.test();
    if test.is_empty() {
        return Err(Error::InvalidInput("ablation needs a nonempty test split".into()));
    }
    let (input_psnr, input_ssim) = input_baseline(&test)?;
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let tc = TrainConfig {
            seed,
            ..config.train.clone()
        };
        let mut shared = Trainer::new(tc.clone(), train.clone())?;
        shared.run_until(tc.phase1_epochs, |s| {
            progress(AblationEvent::Epoch {
                seed,
                modes: &config.modes,
                summary: s,
            })
        })?;
        for &mode in &config.modes {
            let mut t = shared.fork(mode)?;
            let mut last_loss = None;
            t.run_until(tc.total_epochs(), |s| {
                last_loss = Some(s.mean_total);
                progress(AblationEvent::Epoch {
                    seed,
                    modes: std::slice::from_ref(&mode),
                    summary: s,
                })
            })?;
            let final_loss = match last_loss {
                Some(l) => l,
                None => t.history().last().map_or(f64::NAN, |r| r.total),
            };
            let out = t.finish()?;
            let score = evaluate_model(&out.net, &out.params, &test)?;
            let run = AblationRun {
                mode,
                seed,
                score,
                final_loss,
            };
            progress(AblationEvent::Finished(&run));
            runs.push(run);
        }
    }
    let summary = config
        .modes
        .iter()
        .map(|&mode| {
            let rs: Vec<&AblationRun> = runs.iter().filter(|r| r.mode == mode).collect();
            let med = |f: fn(&ModelScore) -> f64| median(&rs.iter().map(|r| f(&r.score)).collect::<Vec<_>>());
            ModeSummary {
                mode,
                seeds: rs.len(),
                psnr: med(|s| s.psnr),
                ssim: med(|s| s.ssim),
                psnr_two_stage: med(|s| s.psnr_two_stage),
                ssim_two_stage: med(|s| s.ssim_two_stage),
            }
        })
        .collect();
    Ok(AblationTable {
        config: config.clone(),
        test_samples: test.len(),
        input_psnr,
        input_ssim,
        runs,
        summary,
    })
}

/// Writes `ablation.json` and `ablation.txt` into `dir`.
pub fn write_ablation(table: &AblationTable, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join(ABLATION_JSON);
    let text = serde_json::to_string_pretty(table).map_err(|source| Error::Json {
        path: json_path.clone(),
        source,
    })?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let txt = dir.join(ABLATION_TXT);
    fs::write(&txt, table.to_table()).map_err(|e| Error::io(&txt, e))
}
