use super::losses::{loss_cc, loss_dc, loss_is, loss_sc, loss_sc_stage2_params, KlDirection, ScVariant};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::model::{DehazeNet, DehazeOutputs, FeatureExtractor};
use crate::{Error, Real, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Committee weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha_sc: f64,
    pub alpha_cc: f64,
    pub alpha_dc: f64,
    pub alpha_is: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_sc: 0.5,
            alpha_cc: 0.3,
            alpha_dc: 0.05,
            alpha_is: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("alpha_sc", self.alpha_sc),
            ("alpha_cc", self.alpha_cc),
            ("alpha_dc", self.alpha_dc),
            ("alpha_is", self.alpha_is),
        ]
    }
}

/// Rows of the loss ablation: which committee terms are on after warm-up.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    /// Synthesis term only.
    M1,
    /// + cross-domain.
    M2,
    /// + implicit supervision.
    M3,
    /// Full committee.
    #[default]
    M4,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [Self::M1, Self::M2, Self::M3, Self::M4];

    pub fn active(self) -> ActiveLosses {
        let (cc, is, dc) = match self {
            Self::M1 => (false, false, false),
            Self::M2 => (true, false, false),
            Self::M3 => (true, true, false),
            Self::M4 => (true, true, true),
        };
        ActiveLosses { sc: true, cc, dc, is }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::M1 => "m1",
            Self::M2 => "m2",
            Self::M3 => "m3",
            Self::M4 => "m4",
        };
        f.write_str(s)
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m1" => Ok(Self::M1),
            "m2" => Ok(Self::M2),
            "m3" => Ok(Self::M3),
            "m4" => Ok(Self::M4),
            other => Err(Error::Config(format!("unknown ablation mode {other:?} (expected m1..m4)"))),
        }
    }
}

/// Training phase: synthesis-only warm-up, then the committee.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "phase1")]
    Warmup,
    #[serde(rename = "phase2")]
    Committee,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "phase1",
            Phase::Committee => "phase2",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveLosses {
    pub sc: bool,
    pub cc: bool,
    pub dc: bool,
    pub is: bool,
}

impl ActiveLosses {
    pub fn for_phase(mode: AblationMode, phase: Phase) -> Self {
        match phase {
            Phase::Warmup => AblationMode::M1.active(),
            Phase::Committee => mode.active(),
        }
    }

    /// Whether the second `Dehaze` pass has to be built.
    pub fn needs_stage2(self) -> bool {
        self.cc || self.dc || self.is
    }
}

/// Per-term values; `None` marks an inactive term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub sc: f64,
    pub cc: Option<f64>,
    pub dc: Option<f64>,
    pub is: Option<f64>,
}

/// `Σ αᵢ·Lᵢ` over the active terms in `values`.
pub fn total_loss(values: &LossValues, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    let w = weights;
    Ok(w.alpha_sc * values.sc
        + values.cc.map_or(0.0, |v| w.alpha_cc * v)
        + values.dc.map_or(0.0, |v| w.alpha_dc * v)
        + values.is.map_or(0.0, |v| w.alpha_is * v))
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// 1-based.
    pub epoch: usize,
    /// 0-based within the epoch.
    pub batch: usize,
    pub phase: Phase,
    pub sc: f64,
    pub cc: Option<f64>,
    pub dc: Option<f64>,
    pub is: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn values(&self) -> LossValues {
        LossValues {
            sc: self.sc,
            cc: self.cc,
            dc: self.dc,
            is: self.is,
        }
    }
}

/// Everything except data needed to build the committee objective.
#[derive(Clone, Copy, Debug)]
pub struct CommitteeSetup {
    pub weights: LossWeights,
    pub active: ActiveLosses,
    pub sc_variant: ScVariant,
    pub kl_direction: KlDirection,
}

/// Graph handles of a built objective.
#[derive(Clone, Copy, Debug)]
pub struct CommitteeTerms {
    pub stage1: DehazeOutputs,
    pub stage2: Option<DehazeOutputs>,
    pub sc: Var,
    pub cc: Option<Var>,
    pub dc: Option<Var>,
    pub is: Option<Var>,
    pub total: Var,
}

impl CommitteeTerms {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossValues {
        let v = |x: Var| g.value(x).item().as_f64();
        LossValues {
            sc: v(self.sc),
            cc: self.cc.map(v),
            dc: self.dc.map(v),
            is: self.is.map(v),
        }
    }
}

/// Runs the network (one or two stages as needed) on `hazy` and assembles
/// the weighted committee objective.
#[allow(clippy::too_many_arguments)]
pub fn build_committee<T: Real>(
    g: &mut Graph<T>,
    net: &DehazeNet,
    store: &ParamStore<T>,
    features: &FeatureExtractor<T>,
    hazy: Var,
    teacher: Var,
    setup: &CommitteeSetup,
) -> Result<CommitteeTerms> {
    setup.weights.validate()?;
    let active = setup.active;
    let needs_stage2 = active.needs_stage2() || (active.sc && setup.sc_variant == ScVariant::Stage2Params);
    let (stage1, stage2) = if needs_stage2 {
        let (s1, s2) = net.two_stage(g, store, hazy)?;
        (s1, Some(s2))
    } else {
        (net.forward(g, store, hazy)?, None)
    };
    let s2 = || stage2.ok_or_else(|| Error::Contract("committee term needs stage 2".into()));

    let sc = match setup.sc_variant {
        ScVariant::Stage1 => loss_sc(g, &stage1, hazy)?,
        ScVariant::Stage2Params => loss_sc_stage2_params(g, &stage1, &s2()?, hazy)?,
    };
    let cc = if active.cc { Some(loss_cc(g, &stage1, &s2()?, hazy)?) } else { None };
    let dc = if active.dc { Some(loss_dc(g, &stage1, &s2()?, teacher)?) } else { None };
    let is = if active.is {
        Some(loss_is(g, features, s2()?.clean, stage1.clean, setup.kl_direction)?)
    } else {
        None
    };

    let w = setup.weights;
    let mut total = weighted(g, sc, w.alpha_sc)?;
    for (term, alpha) in [(cc, w.alpha_cc), (dc, w.alpha_dc), (is, w.alpha_is)] {
        if let Some(term) = term {
            let t = weighted(g, term, alpha)?;
            total = g.add(total, t)?;
        }
    }
    Ok(CommitteeTerms {
        stage1,
        stage2,
        sc,
        cc,
        dc,
        is,
        total,
    })
}

fn weighted<T: Real>(g: &mut Graph<T>, v: Var, alpha: f64) -> Result<Var> {
    let a = g.scalar(T::from_f64c(alpha))?;
    g.mul(v, a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights_on_unit_losses() {
        let ones = LossValues {
            sc: 1.0,
            cc: Some(1.0),
            dc: Some(1.0),
            is: Some(1.0),
        };
        let t = total_loss(&ones, &LossWeights::default()).unwrap();
        assert!((t - 0.95).abs() < 1e-12);
    }

    #[test]
    fn warmup_uses_synthesis_term_only() {
        for mode in AblationMode::ALL {
            let a = ActiveLosses::for_phase(mode, Phase::Warmup);
            assert_eq!(a, AblationMode::M1.active());
            assert!(!a.needs_stage2());
        }
        let v = LossValues {
            sc: 0.7,
            ..Default::default()
        };
        assert!((total_loss(&v, &LossWeights::default()).unwrap() - 0.35).abs() < 1e-12);
    }

    #[test]
    fn modes_mask_terms() {
        let m2 = ActiveLosses::for_phase(AblationMode::M2, Phase::Committee);
        assert!(m2.sc && m2.cc && !m2.dc && !m2.is);
        let m3 = AblationMode::M3.active();
        assert!(m3.cc && m3.is && !m3.dc);
        let m4 = AblationMode::M4.active();
        assert!(m4.sc && m4.cc && m4.dc && m4.is);
    }

    #[test]
    fn negative_weight_is_config_error() {
        let w = LossWeights {
            alpha_dc: -0.1,
            ..Default::default()
        };
        assert!(matches!(w.validate(), Err(Error::Config(_))));
        assert!(total_loss(&LossValues::default(), &w).is_err());
    }

    #[test]
    fn mode_round_trips_through_text_and_json() {
        for m in AblationMode::ALL {
            assert_eq!(m.to_string().parse::<AblationMode>().unwrap(), m);
            let j = serde_json::to_string(&m).unwrap();
            assert_eq!(j, format!("\"{m}\""));
        }
        assert!("m5".parse::<AblationMode>().is_err());
        assert_eq!(serde_json::to_string(&Phase::Warmup).unwrap(), "\"phase1\"");
    }
}
