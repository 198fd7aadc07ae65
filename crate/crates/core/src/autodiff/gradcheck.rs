use std::error::Error as StdError;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::{Float, Graph, ParamStore, Var};

/// A scalar function of a parameter store, written once and evaluated at
/// any precision.
pub trait Objective {
    fn loss<F: Float>(&self, graph: &mut Graph<F>, params: &[Var]) -> Result<Var, Box<dyn StdError + Send + Sync>>;
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("objective failed: {0}")]
    Objective(String),
    #[error("non-finite loss {loss} while perturbing {param}[{index}]")]
    NonFiniteLoss { param: String, index: usize, loss: f64 },
}

#[derive(Clone, Debug)]
pub struct GroupError {
    pub name: String,
    pub numel: usize,
    pub max_abs_err: f64,
    /// `max |analytic - numeric| / max(‖analytic‖∞, ‖numeric‖∞, floor)`
    /// with `floor = 1e-6 · max(1, |loss|)`.
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
    pub worst_rel_err: f64,
    pub passed: bool,
    pub elapsed: Duration,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn failing_groups(&self) -> impl Iterator<Item = &GroupError> {
        self.groups.iter().filter(|g| g.max_rel_err >= self.tolerance)
    }
}

/// Denominator floor per unit of `max(1, |loss|)`.
const REL_FLOOR: f64 = 1e-6;

fn eval<F: Float, O: Objective>(store: &ParamStore<F>, objective: &O) -> Result<(Graph<F>, Var), GradCheckError> {
    let mut g = Graph::new();
    let params = g.bind(store);
    let loss = objective
        .loss(&mut g, &params)
        .map_err(|e| GradCheckError::Objective(e.to_string()))?;
    Ok((g, loss))
}

/// Compares reverse-mode gradients computed at precision `F` against
/// centered finite differences evaluated in `f64` at the same parameter
/// point. The step for parameter value `θ` is `1e-4 · max(1, |θ|)`.
///
/// `corrupt` lets callers tamper with the analytic gradients before the
/// comparison; pass `|_| ()` for a plain check.
pub fn grad_check<F: Float, O: Objective>(
    store: &ParamStore<F>,
    objective: &O,
    tolerance: f64,
    corrupt: impl FnOnce(&mut [super::Tensor<F>]),
) -> Result<GradCheckReport, GradCheckError> {
    let start = Instant::now();
    let (g, loss) = eval(store, objective)?;
    let loss_value = g.value(loss).data()[0].as_f64();
    if !loss_value.is_finite() {
        return Err(GradCheckError::NonFiniteLoss {
            param: "<unperturbed>".into(),
            index: 0,
            loss: loss_value,
        });
    }
    let mut analytic = g.backward(loss).map_err(|e| GradCheckError::Objective(e.to_string()))?;
    corrupt(analytic.params_mut());
    drop(g);

    let floor = REL_FLOOR * loss_value.abs().max(1.0);
    let mut probe = store.cast::<f64>();
    let scalar = |s: &ParamStore<f64>, name: &str, index: usize| -> Result<f64, GradCheckError> {
        let (g, l) = eval(s, objective)?;
        let v = g.value(l).data()[0];
        if !v.is_finite() {
            return Err(GradCheckError::NonFiniteLoss {
                param: name.to_string(),
                index,
                loss: v,
            });
        }
        Ok(v)
    };

    let mut groups = Vec::with_capacity(store.len());
    for p in 0..store.len() {
        if !store.get(p).requires_grad {
            continue;
        }
        let name = store.get(p).name.clone();
        let n = store.get(p).value.numel();
        let mut numeric = vec![0.0; n];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let theta = probe.get(p).value.data()[k];
            let h = 1e-4 * theta.abs().max(1.0);
            probe.get_mut(p).value.data_mut()[k] = theta + h;
            let up = scalar(&probe, &name, k)?;
            probe.get_mut(p).value.data_mut()[k] = theta - h;
            let down = scalar(&probe, &name, k)?;
            probe.get_mut(p).value.data_mut()[k] = theta;
            *slot = (up - down) / (2.0 * h);
        }
        let a: Vec<f64> = analytic.param(p).to_f64_vec();
        let max_abs_err = a.iter().zip(&numeric).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = a.iter().chain(&numeric).map(|x| x.abs()).fold(floor, f64::max);
        groups.push(GroupError {
            name,
            numel: n,
            max_abs_err,
            max_rel_err: max_abs_err / scale,
        });
    }
    let worst_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: worst_rel_err < tolerance,
        groups,
        tolerance,
        worst_rel_err,
        elapsed: start.elapsed(),
        loss: loss_value,
    })
}
