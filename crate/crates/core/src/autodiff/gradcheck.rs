use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::Result;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Settings for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Entries checked per parameter tensor; smaller tensors are checked fully.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            samples_per_param: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries skipped because a perturbation crossed a relu/abs/clamp kink.
    pub excluded: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Compares backprop gradients of the loss built by `build` with central
/// finite differences. The graph is rebuilt for every perturbation.
pub fn grad_check<F>(store: &ParamStore<f64>, mut build: F, config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(config.epsilon > 0.0) {
        return Err(crate::Error::InvalidInput(format!(
            "epsilon must be > 0, got {}",
            config.epsilon
        )));
    }
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, &analytic_store)?;
    let base_sig = g.kink_signature();
    g.backward(loss, Some(&mut analytic_store))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.tensor(id).len();
        let entries: Vec<usize> = if n <= config.samples_per_param {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, config.samples_per_param).into_vec();
            v.sort_unstable();
            v
        };
        let grad = analytic_store.grad(id).expect("zeroed above").to_vec();
        for i in entries {
            let orig = store.tensor(id).data()[i];
            let mut eval = |v: f64| -> Result<(f64, Vec<i8>)> {
                probe.tensor_mut(id).data_mut()[i] = v;
                let mut g = Graph::new();
                let l = build(&mut g, &probe)?;
                Ok((g.value(l).item(), g.kink_signature()))
            };
            let (plus, sig_p) = eval(orig + config.epsilon)?;
            let (minus, sig_m) = eval(orig - config.epsilon)?;
            probe.tensor_mut(id).data_mut()[i] = orig;
            if sig_p != base_sig || sig_m != base_sig {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * config.epsilon);
            let analytic = grad[i];
            let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
