//! Finite-difference checks of every differentiable op on randomized shapes.

use super::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Worst-case result for one op across all trials.
#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub trials: usize,
    pub checked: usize,
    pub excluded: usize,
    pub max_rel_error: f64,
}

pub(crate) fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Reduces `out` with fixed random weights so every element gets a distinct
/// upstream gradient.
fn weighted_mean(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, g.shape(out), -1.0, 1.0);
    let w = g.input(w)?;
    let p = g.mul(out, w)?;
    g.mean(p)
}

type OpFn = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn check_op(shapes: &[Vec<usize>], range: (f64, f64), seed: u64, epsilon: f64, op: &OpFn) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("x{i}"), rand_tensor(&mut rng, s, range.0, range.1)))
        .collect();
    grad_check(
        &store,
        |g, st| {
            let vars = ids.iter().map(|id| g.param(st, *id)).collect::<Result<Vec<_>>>()?;
            let out = op(g, &vars)?;
            weighted_mean(g, out, seed)
        },
        GradCheckConfig {
            epsilon,
            samples_per_param: 12,
            seed,
        },
    )
}

fn rand_nchw(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.random_range(1..3), rng.random_range(1..4), rng.random_range(2..6), rng.random_range(2..6)]
}

struct Trial {
    op: &'static str,
    shapes: Vec<Vec<usize>>,
    range: (f64, f64),
    f: Box<OpFn>,
}

fn trials_for_seed(seed: u64) -> Vec<Trial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = rand_nchw(&mut rng);
    let mut bcast = s.clone();
    bcast[1] = 1;
    let chan = vec![s[0], s[1], 1, 1];
    let mut even = s.clone();
    even[2] *= 2;
    even[3] *= 2;
    let mut other = even.clone();
    other[1] = rng.random_range(1..4);

    let (b, cin, cout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
    let k = [1, 2, 3][rng.random_range(0..3)];
    let stride = rng.random_range(1..3);
    let pad = rng.random_range(0..2);
    let h = rng.random_range(k.max(3)..7);
    let w = rng.random_range(k.max(3)..7);

    let t = |op, shapes: Vec<Vec<usize>>, range, f: Box<OpFn>| Trial { op, shapes, range, f };
    vec![
        t("add", vec![s.clone(), bcast.clone()], (-1.0, 1.0), Box::new(|g, v| g.add(v[0], v[1]))),
        t("sub", vec![chan.clone(), s.clone()], (-1.0, 1.0), Box::new(|g, v| g.sub(v[0], v[1]))),
        t("mul", vec![s.clone(), chan.clone()], (-1.0, 1.0), Box::new(|g, v| g.mul(v[0], v[1]))),
        t("div", vec![s.clone(), bcast.clone()], (0.5, 2.0), Box::new(|g, v| g.div(v[0], v[1]))),
        t("neg", vec![s.clone()], (-2.0, 2.0), Box::new(|g, v| g.neg(v[0]))),
        t("exp", vec![s.clone()], (-2.0, 2.0), Box::new(|g, v| g.exp(v[0]))),
        t("ln", vec![s.clone()], (0.2, 3.0), Box::new(|g, v| g.ln(v[0]))),
        t("abs", vec![s.clone()], (-2.0, 2.0), Box::new(|g, v| g.abs(v[0]))),
        t("relu", vec![s.clone()], (-2.0, 2.0), Box::new(|g, v| g.relu(v[0]))),
        t("sigmoid", vec![s.clone()], (-4.0, 4.0), Box::new(|g, v| g.sigmoid(v[0]))),
        t("softplus", vec![s.clone()], (-4.0, 4.0), Box::new(|g, v| g.softplus(v[0]))),
        t("clamp_min", vec![s.clone()], (-1.0, 1.0), Box::new(|g, v| g.clamp_min(v[0], 0.1))),
        t(
            "mean",
            vec![s.clone()],
            (-1.0, 1.0),
            Box::new(|g, v| {
                let m = g.mean(v[0])?;
                let e = g.exp(m)?;
                g.mul(e, m)
            }),
        ),
        t("broadcast_scalar", vec![vec![]], (-1.0, 1.0), Box::new(|g, v| g.broadcast_scalar(v[0], &[2, 3, 2, 2]))),
        t("avg_pool2d", vec![even.clone()], (-1.0, 1.0), Box::new(|g, v| g.avg_pool2d(v[0], 2))),
        t("upsample_nearest", vec![even.clone()], (-1.0, 1.0), Box::new(|g, v| g.upsample_nearest(v[0], 3))),
        t("global_avg_pool", vec![even.clone()], (-1.0, 1.0), Box::new(|g, v| g.global_avg_pool(v[0]))),
        t("concat", vec![even, other], (-1.0, 1.0), Box::new(|g, v| g.concat(&[v[0], v[1]]))),
        t(
            "conv2d",
            vec![vec![b, cin, h, w], vec![cout, cin, k, k], vec![cout]],
            (-1.0, 1.0),
            Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
        ),
    ]
}

/// Runs every op through [`grad_check`] for `seeds` randomized trials and
/// returns the worst relative error per op, in a fixed op order.
pub fn op_suite(seeds: u64, epsilon: f64) -> Result<Vec<OpCheck>> {
    let mut out: Vec<OpCheck> = Vec::new();
    for seed in 0..seeds {
        for trial in trials_for_seed(seed) {
            let report = check_op(&trial.shapes, trial.range, seed, epsilon, trial.f.as_ref())?;
            let entry = match out.iter_mut().find(|c| c.op == trial.op) {
                Some(e) => e,
                None => {
                    out.push(OpCheck {
                        op: trial.op,
                        trials: 0,
                        checked: 0,
                        excluded: 0,
                        max_rel_error: 0.0,
                    });
                    out.last_mut().expect("just pushed")
                }
            };
            entry.trials += 1;
            entry.checked += report.checked;
            entry.excluded += report.excluded;
            entry.max_rel_error = entry.max_rel_error.max(report.max_rel_error);
        }
    }
    Ok(out)
}
