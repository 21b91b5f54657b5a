use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// A named, ordered collection of trainable tensors.
pub trait Parameters {
    /// Names and values, in a fixed canonical order.
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;

    /// Mutable values, in the same order as [`Parameters::named_tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
}

impl Parameters for Vec<(String, Tensor)> {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().map(|(_, t)| t).collect()
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Tensors with more elements than this are checked on a seeded subsample
    /// of this many elements.
    pub max_elements_per_tensor: usize,
    pub seed: u64,
    /// Test hook: adds 1.0 to every analytic gradient entry of the named
    /// parameter, so callers can exercise the failure path.
    #[doc(hidden)]
    pub corrupt_param: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_elements_per_tensor: 16,
            seed: 0,
            corrupt_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub elements_checked: usize,
}

fn eval_loss<P, F>(params: &P, f: &F) -> Result<f64>
where
    P: Parameters,
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .named_tensors()
        .into_iter()
        .map(|(_, t)| g.constant(t.clone()))
        .collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Relative error per element is `|a - n| / max(|a|, |n|, 1e-12)`; the report
/// carries the worst one. `params` is perturbed in place and restored.
pub fn grad_check<P, F>(params: &mut P, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    P: Parameters,
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    // Steps above 1e-3 are accepted as a coarse diagnostic; callers decide
    // whether the resulting error is meaningful.
    if !(cfg.eps > 0.0 && cfg.eps < 1.0) {
        return Err(Error::config(format!("grad_check eps must be in (0, 1), got {}", cfg.eps)));
    }

    let (names, analytic): (Vec<String>, Vec<Tensor>) = {
        let mut g = Graph::new();
        let named = params.named_tensors();
        let vars: Vec<Var> = named.iter().map(|(_, t)| g.param((*t).clone())).collect();
        let loss = f(&mut g, &vars)?;
        if !g.value(loss).is_finite() {
            return Err(Error::NonFinite("grad_check: loss".into()));
        }
        g.backward(loss)?;
        let names = named.iter().map(|(n, _)| n.clone()).collect();
        let grads = vars.iter().map(|&v| g.grad_tensor(v)).collect();
        (names, grads)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        elements_checked: 0,
    };

    for (t, name) in names.iter().enumerate() {
        let numel = analytic[t].numel();
        let indices: Vec<usize> = if numel <= cfg.max_elements_per_tensor {
            (0..numel).collect()
        } else {
            let mut idx = sample(&mut rng, numel, cfg.max_elements_per_tensor).into_vec();
            idx.sort_unstable();
            idx
        };
        for idx in indices {
            let original = params.tensors_mut()[t].data()[idx];
            params.tensors_mut()[t].data_mut()[idx] = original + cfg.eps;
            let plus = eval_loss(params, &f);
            params.tensors_mut()[t].data_mut()[idx] = original - cfg.eps;
            let minus = eval_loss(params, &f);
            params.tensors_mut()[t].data_mut()[idx] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::GradCheck {
                    param: name.clone(),
                    index: idx,
                    msg: "non-finite loss under perturbation".into(),
                });
            }

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let mut a = analytic[t].data()[idx];
            if cfg.corrupt_param.as_deref() == Some(name.as_str()) {
                a += 1.0;
            }
            if !a.is_finite() {
                return Err(Error::GradCheck {
                    param: name.clone(),
                    index: idx,
                    msg: "non-finite analytic gradient".into(),
                });
            }
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            let rel = (a - numeric).abs() / denom;
            report.elements_checked += 1;
            if rel > report.max_relative_error || report.worst_param.is_empty() {
                report.max_relative_error = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
