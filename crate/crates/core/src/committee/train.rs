use super::losses::{KlDirection, ScVariant};
use super::objective::{build_committee, AblationMode, ActiveLosses, CommitteeSetup, LossReport, LossValues, LossWeights, Phase};
use crate::autodiff::{load_checkpoint, save_checkpoint, Adam, AdamConfig, Graph, ParamStore, Tensor};
use crate::model::{depths_to_tensor, images_to_tensor, DehazeNet, FeatureExtractor, NetworkConfig};
use crate::synth::PairedSample;
use crate::{DepthMap, Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const FINAL_STEM: &str = "final";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Synthesis-only warm-up epochs.
    pub phase1_epochs: usize,
    /// Committee epochs after warm-up.
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Final weights are the mean of this many trailing epoch snapshots.
    pub average_last_k: usize,
    pub mode: AblationMode,
    /// Drives weight init, shuffling and teacher noise; overrides
    /// `network.seed`.
    pub seed: u64,
    /// Teacher depth noise std as a fraction of each map's depth range.
    pub teacher_noise: f64,
    pub weights: LossWeights,
    pub sc_variant: ScVariant,
    pub kl_direction: KlDirection,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1_epochs: 30,
            phase2_epochs: 70,
            batch_size: 8,
            optimizer: AdamConfig::default(),
            average_last_k: 5,
            mode: AblationMode::M4,
            seed: 0,
            teacher_noise: 0.05,
            weights: LossWeights::default(),
            sc_variant: ScVariant::Stage1,
            kl_direction: KlDirection::EstimateToClean,
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.total_epochs() == 0 {
            return fail("training needs at least one epoch".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be >= 1".into());
        }
        if self.average_last_k == 0 || self.average_last_k > self.total_epochs() {
            return fail(format!(
                "average_last_k = {} must lie in 1..={}",
                self.average_last_k,
                self.total_epochs()
            ));
        }
        if !(self.teacher_noise >= 0.0) || !self.teacher_noise.is_finite() {
            return fail(format!("teacher noise must be finite and >= 0, got {}", self.teacher_noise));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return fail(format!("invalid optimizer settings {o:?}"));
        }
        self.weights.validate()?;
        self.network.validate()
    }

    /// Phase of 1-based epoch `epoch`.
    pub fn phase_of(&self, epoch: usize) -> Phase {
        if epoch <= self.phase1_epochs {
            Phase::Warmup
        } else {
            Phase::Committee
        }
    }

    fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            seed: self.seed,
            ..self.network
        }
    }

    fn setup(&self, phase: Phase) -> CommitteeSetup {
        CommitteeSetup {
            weights: self.weights,
            active: ActiveLosses::for_phase(self.mode, phase),
            sc_variant: self.sc_variant,
            kl_direction: self.kl_direction,
        }
    }
}

/// Mean loss values over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub phase: Phase,
    pub batches: usize,
    pub mean: LossValues,
    pub mean_total: f64,
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: DehazeNet,
    /// Averaged over the trailing snapshots.
    pub params: ParamStore<f32>,
    /// Weights after the final epoch, before averaging.
    pub last: ParamStore<f32>,
    pub history: Vec<LossReport>,
    /// Epochs whose snapshots were averaged.
    pub averaged_epochs: Vec<usize>,
}

/// Smallest depth a noisy teacher may report.
pub const TEACHER_DEPTH_FLOOR: f64 = 1e-3;

/// Ground-truth depth plus fixed Gaussian noise, drawn once per sample and
/// floored at [`TEACHER_DEPTH_FLOOR`].
pub fn noisy_teacher(depth: &DepthMap, fraction: f64, seed: u64) -> Result<DepthMap> {
    if fraction == 0.0 {
        return Ok(depth.clone());
    }
    let sigma = fraction * (depth.max() - depth.min()) as f64;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("teacher noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = depth.data().iter().map(|z| (*z as f64 + normal.sample(&mut rng)).max(TEACHER_DEPTH_FLOOR) as f32).collect();
    DepthMap::new(depth.height(), depth.width(), data)
}

/// Elementwise mean of same-layout stores, accumulated in f64.
pub fn average_params(stores: &[&ParamStore<f32>]) -> Result<ParamStore<f32>> {
    let first = *stores
        .first()
        .ok_or_else(|| Error::InvalidInput("nothing to average".into()))?;
    let n = stores.len() as f64;
    let mut out = ParamStore::new();
    for id in first.ids() {
        let shape = first.tensor(id).shape().to_vec();
        let mut acc = vec![0.0f64; first.tensor(id).len()];
        for s in stores {
            if s.len() != first.len() || s.name(id) != first.name(id) || s.tensor(id).shape() != shape.as_slice() {
                return Err(Error::Contract(format!("parameter {} differs between snapshots", first.name(id))));
            }
            acc.iter_mut().zip(s.tensor(id).data()).for_each(|(a, v)| *a += *v as f64);
        }
        let data = acc.into_iter().map(|a| (a / n) as f32).collect();
        out.add(first.name(id), Tensor::new(shape, data)?);
    }
    Ok(out)
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(23)
}

fn teacher_seed(seed: u64, sample_seed: u64) -> u64 {
    seed.rotate_left(32) ^ sample_seed ^ 0x7EAC_4E55
}

/// Epoch-by-epoch driver. Cloning a trainer forks the full state
/// (parameters, optimizer moments, snapshots, history).
#[derive(Clone, Debug)]
pub struct Trainer<'a> {
    config: TrainConfig,
    net: DehazeNet,
    store: ParamStore<f32>,
    adam: Adam<f32>,
    features: FeatureExtractor<f32>,
    samples: Vec<&'a PairedSample>,
    teachers: Vec<DepthMap>,
    epoch: usize,
    snapshots: VecDeque<(usize, ParamStore<f32>)>,
    history: Vec<LossReport>,
    out_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, samples: Vec<&'a PairedSample>) -> Result<Self> {
        config.validate()?;
        let Some(first) = samples.first() else {
            return Err(Error::InvalidInput("training set is empty".into()));
        };
        let (h, w) = (first.depth.height(), first.depth.width());
        if samples.iter().any(|s| s.depth.height() != h || s.depth.width() != w) {
            return Err(Error::InvalidInput("training samples must share one size".into()));
        }
        let (net, store) = DehazeNet::init(config.network_config())?;
        let adam = Adam::new(config.optimizer, &store);
        let features = FeatureExtractor::new(config.network.feature_seed);
        let teachers = samples
            .iter()
            .map(|s| noisy_teacher(&s.depth, config.teacher_noise, teacher_seed(config.seed, s.seed)))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            net,
            store,
            adam,
            features,
            samples,
            teachers,
            epoch: 0,
            snapshots: VecDeque::new(),
            history: Vec::new(),
            out_dir: None,
        })
    }

    /// Persist per-epoch checkpoints and `history.jsonl` under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        if self.epoch != 0 {
            return Err(Error::Contract("output directory must be set before the first epoch".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hist = dir.join(HISTORY_FILE);
        fs::write(&hist, b"").map_err(|e| Error::io(&hist, e))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn net(&self) -> &DehazeNet {
        &self.net
    }

    /// Current (non-averaged) parameters.
    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn features(&self) -> &FeatureExtractor<f32> {
        &self.features
    }

    pub fn teachers(&self) -> &[DepthMap] {
        &self.teachers
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.total_epochs()
    }

    pub fn history(&self) -> &[LossReport] {
        &self.history
    }

    /// Copy of this trainer that continues under `mode`. Only valid while
    /// still in warm-up, where every mode trains identically.
    pub fn fork(&self, mode: AblationMode) -> Result<Self> {
        if self.epoch > self.config.phase1_epochs {
            return Err(Error::Contract(format!(
                "cannot change mode after warm-up (epoch {} > {})",
                self.epoch, self.config.phase1_epochs
            )));
        }
        let mut t = self.clone();
        t.config.mode = mode;
        t.out_dir = None;
        Ok(t)
    }

    /// Trains one epoch over a freshly shuffled order.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        if self.is_finished() {
            return Err(Error::Contract("training already finished".into()));
        }
        let epoch = self.epoch + 1;
        let phase = self.config.phase_of(epoch);
        let setup = self.config.setup(phase);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(self.config.seed, epoch)));

        let first_report = self.history.len();
        for (batch, idx) in order.chunks(self.config.batch_size).enumerate() {
            let report = self.step(epoch, batch, phase, &setup, idx)?;
            self.history.push(report);
        }
        self.epoch = epoch;

        self.snapshots.push_back((epoch, self.store.clone()));
        while self.snapshots.len() > self.config.average_last_k {
            self.snapshots.pop_front();
        }
        let reports = &self.history[first_report..];
        if let Some(dir) = &self.out_dir {
            append_history(dir, reports)?;
            let meta = serde_json::json!({ "train": &self.config, "epoch": epoch });
            save_checkpoint(dir, &epoch_stem(epoch), &self.store, self.adam.step_count(), meta)?;
        }
        Ok(summarize(epoch, phase, reports))
    }

    fn step(&mut self, epoch: usize, batch: usize, phase: Phase, setup: &CommitteeSetup, idx: &[usize]) -> Result<LossReport> {
        let hazy: Vec<_> = idx.iter().map(|&i| &self.samples[i].synthetic_hazy).collect();
        let teach: Vec<_> = idx.iter().map(|&i| &self.teachers[i]).collect();
        let mut g = Graph::new();
        let x = g.input(images_to_tensor(&hazy)?)?;
        let t = g.input(depths_to_tensor(&teach)?)?;
        let terms = build_committee(&mut g, &self.net, &self.store, &self.features, x, t, setup)?;
        let v = terms.values(&g);
        let total = g.value(terms.total).item() as f64;
        let named = [("L_sc", Some(v.sc)), ("L_cc", v.cc), ("L_dc", v.dc), ("L_is", v.is), ("total", Some(total))];
        if let Some((term, _)) = named.iter().find(|(_, x)| x.is_some_and(|x| !x.is_finite())) {
            return Err(Error::NonFinite {
                epoch,
                batch,
                term: term.to_string(),
            });
        }
        self.store.zero_grads();
        g.backward(terms.total, Some(&mut self.store))?;
        self.adam.step(&mut self.store)?;
        Ok(LossReport {
            epoch,
            batch,
            phase,
            sc: v.sc,
            cc: v.cc,
            dc: v.dc,
            is: v.is,
            total,
        })
    }

    /// Runs epochs until `epoch` are done (or training ends).
    pub fn run_until(&mut self, epoch: usize, mut on_epoch: impl FnMut(&EpochSummary)) -> Result<()> {
        while self.epoch < epoch.min(self.config.total_epochs()) {
            let s = self.run_epoch()?;
            on_epoch(&s);
        }
        Ok(())
    }

    /// Averages the trailing snapshots into the final weights.
    pub fn finish(self) -> Result<TrainOutcome> {
        if !self.is_finished() {
            return Err(Error::Contract(format!(
                "finish called after {} of {} epochs",
                self.epoch,
                self.config.total_epochs()
            )));
        }
        let stores: Vec<_> = self.snapshots.iter().map(|(_, s)| s).collect();
        let params = average_params(&stores)?;
        let averaged_epochs: Vec<usize> = self.snapshots.iter().map(|(e, _)| *e).collect();
        if let Some(dir) = &self.out_dir {
            let meta = serde_json::json!({ "train": &self.config, "averaged_epochs": &averaged_epochs });
            save_checkpoint(dir, FINAL_STEM, &params, self.adam.step_count(), meta)?;
        }
        Ok(TrainOutcome {
            net: self.net,
            params,
            last: self.store,
            history: self.history,
            averaged_epochs,
        })
    }
}

pub fn epoch_stem(epoch: usize) -> String {
    format!("epoch_{epoch:03}")
}

fn append_history(dir: &Path, reports: &[LossReport]) -> Result<()> {
    let path = dir.join(HISTORY_FILE);
    let mut text = String::new();
    for r in reports {
        let line = serde_json::to_string(r).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        text.push_str(&line);
        text.push('\n');
    }
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
}

fn summarize(epoch: usize, phase: Phase, reports: &[LossReport]) -> EpochSummary {
    let n = reports.len().max(1) as f64;
    let mean_opt = |f: fn(&LossReport) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = reports.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    EpochSummary {
        epoch,
        phase,
        batches: reports.len(),
        mean: LossValues {
            sc: reports.iter().map(|r| r.sc).sum::<f64>() / n,
            cc: mean_opt(|r| r.cc),
            dc: mean_opt(|r| r.dc),
            is: mean_opt(|r| r.is),
        },
        mean_total: reports.iter().map(|r| r.total).sum::<f64>() / n,
    }
}

/// Trains from scratch to completion, optionally persisting to `out_dir`.
pub fn train(config: TrainConfig, samples: Vec<&PairedSample>, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config, samples)?;
    if let Some(dir) = out_dir {
        t = t.with_output(dir)?;
    }
    let total = t.config.total_epochs();
    t.run_until(total, |_| {})?;
    t.finish()
}

/// Reads a checkpoint written by [`Trainer`] and rebuilds the network.
pub fn load_trained(dir: &Path, stem: &str) -> Result<(DehazeNet, ParamStore<f32>, TrainConfig)> {
    let (store, header) = load_checkpoint(dir, stem)?;
    let json_path = dir.join(format!("{stem}.json"));
    let config: TrainConfig = serde_json::from_value(header.config["train"].clone()).map_err(|source| Error::Json {
        path: json_path.clone(),
        source,
    })?;
    let net = DehazeNet::for_store(config.network_config(), &store).map_err(|e| Error::Format {
        path: json_path,
        detail: e.to_string(),
    })?;
    Ok((net, store, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, Dataset, DatasetConfig};

    fn tiny_dataset() -> Dataset {
        let cfg = DatasetConfig {
            seed: 3,
            train_count: 6,
            test_count: 2,
            height: 32,
            width: 32,
            ..Default::default()
        };
        generate_dataset(&cfg, 1).unwrap()
    }

    fn tiny_config(p1: usize, p2: usize) -> TrainConfig {
        TrainConfig {
            phase1_epochs: p1,
            phase2_epochs: p2,
            batch_size: 4,
            average_last_k: 2,
            network: NetworkConfig {
                base_channels: 4,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                average_last_k: 0,
                ..Default::default()
            },
            TrainConfig {
                average_last_k: 101,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                phase1_epochs: 0,
                phase2_epochs: 0,
                average_last_k: 0,
                ..Default::default()
            },
            TrainConfig {
                teacher_noise: f64::NAN,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn partial_json_config_fills_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"mode": "m2", "phase2_epochs": 3}"#).unwrap();
        assert_eq!(c.mode, AblationMode::M2);
        assert_eq!(c.phase2_epochs, 3);
        assert_eq!(c.phase1_epochs, 30);
        assert_eq!(c.weights, LossWeights::default());
    }

    #[test]
    fn schedule_switches_terms_on_after_warmup() {
        let ds = tiny_dataset();
        let out = train(tiny_config(2, 2), ds.train(), None).unwrap();
        assert_eq!(out.history.len(), 4 * 2);
        for r in &out.history {
            let warm = r.epoch <= 2;
            assert_eq!(r.phase == Phase::Warmup, warm);
            assert_eq!(r.cc.is_some(), !warm);
            assert_eq!(r.dc.is_some(), !warm);
            assert_eq!(r.is.is_some(), !warm);
            let want = super::super::objective::total_loss(&r.values(), &LossWeights::default()).unwrap();
            assert!((r.total - want).abs() <= 1e-6, "{r:?}");
        }
    }

    #[test]
    fn single_snapshot_average_is_bit_exact() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            average_last_k: 1,
            ..tiny_config(1, 1)
        };
        let out = train(cfg, ds.train(), None).unwrap();
        assert!(out.params.bit_eq(&out.last));
        assert_eq!(out.averaged_epochs, vec![2]);
    }

    #[test]
    fn averaging_matches_saved_checkpoints() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let out = train(tiny_config(1, 2), ds.train(), Some(dir.path())).unwrap();
        assert_eq!(out.averaged_epochs, vec![2, 3]);
        let (a, _) = load_checkpoint(dir.path(), "epoch_002").unwrap();
        let (b, _) = load_checkpoint(dir.path(), "epoch_003").unwrap();
        let (fin, _) = load_checkpoint(dir.path(), FINAL_STEM).unwrap();
        for id in a.ids() {
            let want: Vec<f32> = a
                .tensor(id)
                .data()
                .iter()
                .zip(b.tensor(id).data())
                .map(|(x, y)| ((*x as f64 + *y as f64) / 2.0) as f32)
                .collect();
            assert_eq!(fin.tensor(id).data(), want.as_slice());
        }
        let lines = fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
        assert_eq!(lines.lines().count(), out.history.len());
        let first: LossReport = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(first, out.history[0]);
        let (net, store, cfg) = load_trained(dir.path(), FINAL_STEM).unwrap();
        assert!(store.bit_eq(&out.params));
        assert_eq!(cfg.phase2_epochs, 2);
        assert_eq!(net.config().base_channels, 4);
    }

    #[test]
    fn runs_are_deterministic_and_seed_dependent() {
        let ds = tiny_dataset();
        let a = train(tiny_config(1, 1), ds.train(), None).unwrap();
        let b = train(tiny_config(1, 1), ds.train(), None).unwrap();
        assert!(a.params.bit_eq(&b.params));
        assert_eq!(a.history, b.history);
        let c = train(
            TrainConfig {
                seed: 1,
                ..tiny_config(1, 1)
            },
            ds.train(),
            None,
        )
        .unwrap();
        assert!(!a.params.bit_eq(&c.params));
    }

    #[test]
    fn fork_after_warmup_equals_fresh_run() {
        let ds = tiny_dataset();
        let mut base = Trainer::new(tiny_config(2, 2), ds.train()).unwrap();
        base.run_until(2, |_| {}).unwrap();
        for mode in [AblationMode::M1, AblationMode::M3] {
            let mut forked = base.fork(mode).unwrap();
            forked.run_until(4, |_| {}).unwrap();
            let forked = forked.finish().unwrap();
            let fresh = train(TrainConfig { mode, ..tiny_config(2, 2) }, ds.train(), None).unwrap();
            assert!(forked.params.bit_eq(&fresh.params), "{mode}");
            assert_eq!(forked.history, fresh.history);
        }
        base.run_epoch().unwrap();
        assert!(base.fork(AblationMode::M1).is_err());
    }

    #[test]
    fn warmup_ignores_committee_weights() {
        let ds = tiny_dataset();
        let a = train(tiny_config(2, 0), ds.train(), None).unwrap();
        let cfg = TrainConfig {
            weights: LossWeights {
                alpha_cc: 7.0,
                alpha_dc: 3.0,
                alpha_is: 0.0,
                ..Default::default()
            },
            ..tiny_config(2, 0)
        };
        let b = train(cfg, ds.train(), None).unwrap();
        assert!(a.params.bit_eq(&b.params));
    }

    #[test]
    fn teacher_noise_is_fixed_and_scaled() {
        let ds = tiny_dataset();
        let z = &ds.train()[0].depth;
        assert_eq!(&noisy_teacher(z, 0.0, 1).unwrap(), z);
        let a = noisy_teacher(z, 0.05, 1).unwrap();
        assert_eq!(a, noisy_teacher(z, 0.05, 1).unwrap());
        let range = (z.max() - z.min()) as f64;
        let diffs: Vec<f64> = a.data().iter().zip(z.data()).map(|(x, y)| (*x - *y) as f64).collect();
        let sd = (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt();
        assert!((sd / range - 0.05).abs() < 0.01, "{}", sd / range);
    }

    #[test]
    fn empty_training_set_rejected() {
        assert!(matches!(
            Trainer::new(TrainConfig::default(), vec![]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn average_rejects_mismatched_layouts() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::<f32>::zeros(&[2]));
        let mut b = ParamStore::new();
        b.add("w", Tensor::<f32>::zeros(&[3]));
        assert!(average_params(&[&a, &b]).is_err());
        assert!(average_params(&[]).is_err());
    }
}
