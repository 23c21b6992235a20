//! Central finite-difference verification of analytic gradients.

use super::exec::{map_indexed, Exec};
use super::graph::NodeId;
use super::params::{Forward, ParamStore};
use crate::error::{Error, Result};

/// A model whose parameters live in one [`ParamStore`].
pub trait HasParams: Clone + Send + Sync {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Magnitudes below this are compared absolutely rather than relatively.
    pub abs_floor: f64,
    pub exec: Exec,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tol: 1e-4, abs_floor: 1e-6, exec: Exec::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub id: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub step: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| !(p.max_rel_err <= self.tol)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn into_result(self) -> Result<Self> {
        let failures: Vec<String> =
            self.failures().iter().map(|p| format!("{} (max rel err {:.3e})", p.id, p.max_rel_err)).collect();
        if failures.is_empty() {
            Ok(self)
        } else {
            Err(Error::GradCheck { failures })
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(abs_floor)
}

/// Compare analytic and finite-difference gradients for every trainable entry
/// without failing; see [`grad_check`] for the erroring variant.
pub fn grad_check_report<M, F>(model: &M, loss_fn: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    M: HasParams,
    F: Fn(&M, &mut Forward) -> Result<NodeId> + Sync,
{
    if !(opts.step > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let analytic = {
        let mut fwd = Forward::new(model.params(), true);
        let loss = loss_fn(model, &mut fwd)?;
        let mut grads = fwd.g.backward(loss)?;
        fwd.param_grads(&mut grads)
    };
    let eval = |m: &M| -> Result<f64> {
        let mut fwd = Forward::new(m.params(), false);
        let loss = loss_fn(m, &mut fwd)?;
        Ok(fwd.g.value(loss).data()[0])
    };

    // Flat list of (param index, entry) to perturb, split into fixed chunks.
    let entries: Vec<(usize, usize)> =
        analytic.iter().flat_map(|(pi, g)| (0..g.len()).map(move |j| (*pi, j))).collect();
    const CHUNK: usize = 64;
    let chunks = entries.len().div_ceil(CHUNK);
    let numeric: Vec<Result<Vec<f64>>> = map_indexed(opts.exec, chunks, |c| {
        let mut m = model.clone();
        let mut out = Vec::with_capacity(CHUNK);
        for &(pi, j) in &entries[c * CHUNK..((c + 1) * CHUNK).min(entries.len())] {
            let orig = m.params().by_index(pi).value.data()[j];
            m.params_mut().by_index_mut(pi).value.data_mut()[j] = orig + opts.step;
            let plus = eval(&m)?;
            m.params_mut().by_index_mut(pi).value.data_mut()[j] = orig - opts.step;
            let minus = eval(&m)?;
            m.params_mut().by_index_mut(pi).value.data_mut()[j] = orig;
            out.push((plus - minus) / (2.0 * opts.step));
        }
        Ok(out)
    });
    let mut numeric_flat = Vec::with_capacity(entries.len());
    for chunk in numeric {
        numeric_flat.extend(chunk?);
    }

    let mut params = Vec::with_capacity(analytic.len());
    let mut cursor = 0;
    for (pi, g) in &analytic {
        let max_rel_err = g
            .iter()
            .zip(&numeric_flat[cursor..cursor + g.len()])
            .map(|(&a, &n)| relative_error(a, n, opts.abs_floor))
            .fold(0.0, |acc: f64, e| if e.is_nan() { f64::NAN } else { acc.max(e) });
        cursor += g.len();
        params.push(ParamCheck { id: model.params().by_index(*pi).id.clone(), entries: g.len(), max_rel_err });
    }
    Ok(GradCheckReport { tol: opts.tol, step: opts.step, params })
}

/// Like [`grad_check_report`], but any parameter above `tol` is an error
/// naming that parameter.
pub fn grad_check<M, F>(model: &M, loss_fn: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    M: HasParams,
    F: Fn(&M, &mut Forward) -> Result<NodeId> + Sync,
{
    grad_check_report(model, loss_fn, opts)?.into_result()
}

impl HasParams for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}
