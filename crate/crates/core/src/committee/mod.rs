//! The loss committee, the two-phase training schedule with trailing weight
//! averaging, and the m1–m4 loss ablation.
//!
//! Phase 1 ("warm-up") optimizes `α_sc·L_sc` alone on the first `Dehaze`
//! pass. Phase 2 adds the second pass and whichever of `L_cc`, `L_dc`,
//! `L_is` the ablation mode enables.

mod ablation;
mod losses;
mod objective;
mod train;

pub use ablation::{
    evaluate_model, input_baseline, median, run_ablation, write_ablation, AblationConfig, AblationEvent, AblationRun,
    AblationTable, ModeSummary, ModelScore, ABLATION_JSON, ABLATION_TXT,
};
pub use losses::{
    channel_stats, gaussian_kl, loss_cc, loss_dc, loss_is, loss_sc, loss_sc_stage2_params, oracle_batch, KlDirection,
    OracleBatch, ScVariant, VARIANCE_FLOOR,
};
pub use objective::{
    build_committee, total_loss, AblationMode, ActiveLosses, CommitteeSetup, CommitteeTerms, LossReport, LossValues,
    LossWeights, Phase,
};
pub use train::{
    average_params, epoch_stem, load_trained, noisy_teacher, train, EpochSummary, TrainConfig, TrainOutcome, Trainer,
    FINAL_STEM, HISTORY_FILE, TEACHER_DEPTH_FLOOR,
};

use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport, Tensor};
use crate::model::{DehazeNet, FeatureExtractor, NetworkConfig};
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finite-difference check of the full two-stage network under the complete
/// committee (all four terms, phase 2) on a random `batch x 3 x size x size`
/// input, in f64.
pub fn committee_gradcheck(batch: usize, size: usize, config: GradCheckConfig) -> Result<GradCheckReport> {
    let net_cfg = NetworkConfig {
        seed: config.seed,
        ..Default::default()
    };
    let (net, store) = DehazeNet::init(net_cfg)?;
    let store = store.cast::<f64>();
    let features = FeatureExtractor::<f32>::new(net_cfg.feature_seed).cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x00C0_FFEE);
    let mut rand = |shape: &[usize], lo: f64, hi: f64| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
    };
    let hazy = rand(&[batch, 3, size, size], 0.05, 0.95)?;
    let teacher = rand(&[batch, 1, size, size], net_cfg.z_min, net_cfg.z_max)?;
    let setup = CommitteeSetup {
        weights: LossWeights::default(),
        active: ActiveLosses::for_phase(AblationMode::M4, Phase::Committee),
        sc_variant: ScVariant::Stage1,
        kl_direction: KlDirection::EstimateToClean,
    };
    grad_check(
        &store,
        |g, st| {
            let x = g.input(hazy.clone())?;
            let t = g.input(teacher.clone())?;
            Ok(build_committee(g, &net, st, &features, x, t, &setup)?.total)
        },
        config,
    )
}
