//! The four committee terms as graph builders, generic over precision so the
//! same code trains in f32 and is gradient-checked in f64.

use crate::autodiff::{Graph, Tensor, Var};
use crate::model::{DehazeOutputs, FeatureExtractor};
use crate::synth::PairedSample;
use crate::{Error, Real, Result};
use serde::{Deserialize, Serialize};

/// Floor applied to per-channel feature variances inside the KL term.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Which prediction set reconstructs the hazy input in the synthesis term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScVariant {
    /// Stage-1 `(β̂_h, ẑ_h, Â_h)`, the same parameters that synthesized `I_h`.
    #[default]
    Stage1,
    /// Stage-2 `(β̂_c, ẑ_c, Â_c)`, the subscripts read literally.
    Stage2Params,
}

/// Argument order of the feature-distribution KL.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(feat(Ĵ) ‖ feat(Î_c))`.
    #[default]
    EstimateToClean,
    /// `KL(feat(Î_c) ‖ feat(Ĵ))`.
    CleanToEstimate,
}

fn dims<T: Real>(g: &Graph<T>, v: Var, channels: Option<usize>, op: &'static str) -> Result<[usize; 4]> {
    let s = g.shape(v);
    if s.len() != 4 || channels.is_some_and(|c| s[1] != c) {
        return Err(Error::shape(op, format!("unexpected shape {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

fn check_outputs<T: Real>(g: &Graph<T>, o: &DehazeOutputs, op: &'static str) -> Result<[usize; 4]> {
    let [b, _, h, w] = dims(g, o.clean, Some(3), op)?;
    let expect = |v: Var, want: [usize; 4]| {
        if g.shape(v) != want {
            Err(Error::shape(op, format!("expected {want:?}, got {:?}", g.shape(v))))
        } else {
            Ok(())
        }
    };
    expect(o.airlight, [b, 3, 1, 1])?;
    expect(o.beta, [b, 1, 1, 1])?;
    expect(o.depth, [b, 1, h, w])?;
    Ok([b, 3, h, w])
}

/// Mean absolute difference of two same-shaped tensors.
fn l1<T: Real>(g: &mut Graph<T>, a: Var, b: Var, op: &'static str) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// `exp(-beta * z)`.
fn transmission<T: Real>(g: &mut Graph<T>, beta: Var, depth: Var) -> Result<Var> {
    let bz = g.mul(beta, depth)?;
    let nbz = g.neg(bz)?;
    g.exp(nbz)
}

/// `t * x + (1 - t) * a`, written as `a + t * (x - a)`.
fn scatter<T: Real>(g: &mut Graph<T>, x: Var, t: Var, airlight: Var) -> Result<Var> {
    let d = g.sub(x, airlight)?;
    let td = g.mul(t, d)?;
    g.add(td, airlight)
}

/// Synthesis-domain consistency: re-haze the stage-1 clean estimate with the
/// stage-1 parameters and compare against the hazy input.
pub fn loss_sc<T: Real>(g: &mut Graph<T>, stage1: &DehazeOutputs, hazy: Var) -> Result<Var> {
    check_outputs(g, stage1, "loss_sc")?;
    let t = transmission(g, stage1.beta, stage1.depth)?;
    let rec = scatter(g, stage1.clean, t, stage1.airlight)?;
    l1(g, rec, hazy, "loss_sc")
}

/// Variant of [`loss_sc`] that re-hazes `Î_c` with the stage-2 parameters.
pub fn loss_sc_stage2_params<T: Real>(
    g: &mut Graph<T>,
    stage1: &DehazeOutputs,
    stage2: &DehazeOutputs,
    hazy: Var,
) -> Result<Var> {
    check_outputs(g, stage1, "loss_sc")?;
    check_outputs(g, stage2, "loss_sc")?;
    let t = transmission(g, stage2.beta, stage2.depth)?;
    let rec = scatter(g, stage1.clean, t, stage2.airlight)?;
    l1(g, rec, hazy, "loss_sc")
}

/// Cross-domain consistency: haze `Ĵ` twice (stage-2 then stage-1
/// parameters) over the shared depth `ẑ_h` and compare against the input.
pub fn loss_cc<T: Real>(g: &mut Graph<T>, stage1: &DehazeOutputs, stage2: &DehazeOutputs, hazy: Var) -> Result<Var> {
    let s1 = check_outputs(g, stage1, "loss_cc")?;
    let s2 = check_outputs(g, stage2, "loss_cc")?;
    if s1 != s2 {
        return Err(Error::shape("loss_cc", format!("stage shapes {s1:?} vs {s2:?}")));
    }
    let z = stage1.depth;
    let tc = transmission(g, stage2.beta, z)?;
    let inner = scatter(g, stage2.clean, tc, stage2.airlight)?;
    let th = transmission(g, stage1.beta, z)?;
    let outer = scatter(g, inner, th, stage1.airlight)?;
    l1(g, outer, hazy, "loss_cc")
}

/// Depth consistency: both stage depths against the teacher.
pub fn loss_dc<T: Real>(g: &mut Graph<T>, stage1: &DehazeOutputs, stage2: &DehazeOutputs, teacher: Var) -> Result<Var> {
    dims(g, teacher, Some(1), "loss_dc")?;
    let a = l1(g, stage1.depth, teacher, "loss_dc")?;
    let b = l1(g, stage2.depth, teacher, "loss_dc")?;
    g.add(a, b)
}

/// Spatial mean and floored variance per channel, each `B x C x 1 x 1`.
pub fn channel_stats<T: Real>(g: &mut Graph<T>, features: Var) -> Result<(Var, Var)> {
    dims(g, features, None, "channel_stats")?;
    let mu = g.global_avg_pool(features)?;
    let d = g.sub(features, mu)?;
    let d2 = g.mul(d, d)?;
    let var = g.global_avg_pool(d2)?;
    let var = g.clamp_min(var, T::from_f64c(VARIANCE_FLOOR))?;
    Ok((mu, var))
}

/// Elementwise closed-form `KL(N(μp, vp) ‖ N(μq, vq))`.
pub fn gaussian_kl<T: Real>(g: &mut Graph<T>, mu_p: Var, var_p: Var, mu_q: Var, var_q: Var) -> Result<Var> {
    let ln_q = g.ln(var_q)?;
    let ln_p = g.ln(var_p)?;
    let log_ratio = g.sub(ln_q, ln_p)?;
    let dm = g.sub(mu_p, mu_q)?;
    let dm2 = g.mul(dm, dm)?;
    let num = g.add(var_p, dm2)?;
    let frac = g.div(num, var_q)?;
    let s = g.add(log_ratio, frac)?;
    let one = g.scalar(T::one())?;
    let s = g.sub(s, one)?;
    let half = g.scalar(T::from_f64c(0.5))?;
    g.mul(s, half)
}

/// Implicit supervision: Gaussian channel-statistics KL between frozen
/// features of the estimate `Ĵ` and of `Î_c`, summed over channels and
/// averaged over the batch.
pub fn loss_is<T: Real>(
    g: &mut Graph<T>,
    features: &FeatureExtractor<T>,
    estimate: Var,
    clean: Var,
    direction: KlDirection,
) -> Result<Var> {
    let a = dims(g, estimate, Some(3), "loss_is")?;
    let b = dims(g, clean, Some(3), "loss_is")?;
    if a != b {
        return Err(Error::shape("loss_is", format!("{a:?} vs {b:?}")));
    }
    let fe = features.extract(g, estimate)?;
    let fc = features.extract(g, clean)?;
    let (me, ve) = channel_stats(g, fe)?;
    let (mc, vc) = channel_stats(g, fc)?;
    let kl = match direction {
        KlDirection::EstimateToClean => gaussian_kl(g, me, ve, mc, vc)?,
        KlDirection::CleanToEstimate => gaussian_kl(g, mc, vc, me, ve)?,
    };
    let channels = g.shape(kl)[1];
    let m = g.mean(kl)?;
    let c = g.scalar(T::from_usize(channels).expect("small count"))?;
    g.mul(m, c)
}

/// Ground-truth stand-ins for both stages of a batch, plus the hazy input
/// and true depth, all as graph inputs.
#[derive(Clone, Copy, Debug)]
pub struct OracleBatch {
    pub hazy: Var,
    pub depth: Var,
    pub stage1: DehazeOutputs,
    pub stage2: DehazeOutputs,
}

/// Stage 1 gets `(I_c, A_h, β_h, z)`, stage 2 gets `(J, A_c, β_c, z)`.
pub fn oracle_batch<T: Real>(g: &mut Graph<T>, samples: &[&PairedSample]) -> Result<OracleBatch> {
    use crate::model::{depths_to_tensor, images_to_tensor};
    let b = samples.len();
    let pick = |f: &dyn Fn(&PairedSample) -> &crate::Image| samples.iter().map(|s| f(s)).collect::<Vec<_>>();
    let hazy = g.input(images_to_tensor(&pick(&|s| &s.synthetic_hazy))?)?;
    let ic = g.input(images_to_tensor(&pick(&|s| &s.nonideal_clean))?)?;
    let j = g.input(images_to_tensor(&pick(&|s| &s.ideal_clean))?)?;
    let depths: Vec<_> = samples.iter().map(|s| &s.depth).collect();
    let depth = g.input(depths_to_tensor(&depths)?)?;
    let betas = |f: &dyn Fn(&PairedSample) -> f64| -> Result<Tensor<T>> {
        Tensor::new(vec![b, 1, 1, 1], samples.iter().map(|s| T::from_f64c(f(s))).collect())
    };
    let lights = |f: &dyn Fn(&PairedSample) -> [f64; 3]| -> Result<Tensor<T>> {
        let data = samples.iter().flat_map(|s| f(s).map(T::from_f64c)).collect();
        Tensor::new(vec![b, 3, 1, 1], data)
    };
    let beta_h = g.input(betas(&|s| s.synth_params.beta)?)?;
    let beta_c = g.input(betas(&|s| s.clean_params.beta)?)?;
    let a_h = g.input(lights(&|s| s.synth_params.airlight)?)?;
    let a_c = g.input(lights(&|s| s.clean_params.airlight)?)?;
    Ok(OracleBatch {
        hazy,
        depth,
        stage1: DehazeOutputs {
            clean: ic,
            airlight: a_h,
            beta: beta_h,
            depth,
        },
        stage2: DehazeOutputs {
            clean: j,
            airlight: a_c,
            beta: beta_c,
            depth,
        },
    })
}
