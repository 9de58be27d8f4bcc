//! Central finite-difference verification of analytic gradients.
//!
//! The loss is probed as a pure function of the [`ParameterStore`], so this
//! route never touches the reverse-mode code it is checking. Callers compute
//! the analytic gradient map once (via [`crate::tape::Tape::backward`]) and
//! hand it in alongside the loss closure.

use std::collections::BTreeMap;

use rand::{seq::index::sample, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::GradMap;
use crate::tensor::{NumericsError, ParameterStore};

/// At most this many elements are probed per tensor; larger tensors get a
/// fixed-seed random subsample.
pub const MAX_PROBES_PER_TENSOR: usize = 64;

const SUBSAMPLE_SEED: u64 = 0x9e37_79b9;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step h.
    pub step: f64,
    /// Pass iff the max relative error is <= tol.
    pub tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-4, tol: 1e-4 }
    }
}

/// Worst probed element of one tensor.
#[derive(Debug, Clone)]
pub struct WorstElement {
    pub flat_index: usize,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Max relative error per parameter tensor.
    pub per_parameter: BTreeMap<String, f64>,
    /// Worst probed element per parameter tensor.
    pub worst: BTreeMap<String, WorstElement>,
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub probes: usize,
    pub pass: bool,
}

impl GradReport {
    pub fn summary(&self) -> String {
        format!(
            "grad_check: {} ({} probes, max rel error {:.3e} in {:?})",
            if self.pass { "PASS" } else { "FAIL" },
            self.probes,
            self.max_rel_error,
            self.worst_parameter,
        )
    }
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare `analytic` against central differences of `loss_fn` around
/// `store`. Every tensor in `analytic` is probed; tensors above
/// [`MAX_PROBES_PER_TENSOR`] elements get a deterministic subsample. A
/// non-finite loss at any probe point is a numeric error.
pub fn grad_check<F>(
    loss_fn: F,
    store: &ParameterStore,
    analytic: &GradMap,
    opts: &GradCheckOptions,
) -> Result<GradReport, NumericsError>
where
    F: Fn(&ParameterStore) -> Result<f64, NumericsError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(SUBSAMPLE_SEED);
    let mut probed = store.clone();
    let mut report = GradReport {
        per_parameter: BTreeMap::new(),
        worst: BTreeMap::new(),
        max_rel_error: 0.0,
        worst_parameter: String::new(),
        probes: 0,
        pass: false,
    };

    // BTreeMap iteration gives a fixed lexicographic order, so the subsample
    // stream is identical across runs.
    for (name, grad) in analytic {
        let base = store.get(name)?;
        assert_eq!(
            base.shape(),
            grad.shape(),
            "analytic gradient shape mismatch for {name}"
        );
        let numel = base.numel();
        let indices: Vec<usize> = if numel <= MAX_PROBES_PER_TENSOR {
            (0..numel).collect()
        } else {
            let mut v = sample(&mut rng, numel, MAX_PROBES_PER_TENSOR).into_vec();
            v.sort_unstable();
            v
        };

        let mut tensor_max = 0.0_f64;
        let mut tensor_worst: Option<WorstElement> = None;
        for idx in indices {
            let original = base.values[idx];
            probed.get_mut(name)?.values[idx] = original + opts.step;
            let up = loss_fn(&probed)?;
            probed.get_mut(name)?.values[idx] = original - opts.step;
            let down = loss_fn(&probed)?;
            probed.get_mut(name)?.values[idx] = original;
            if !up.is_finite() || !down.is_finite() {
                return Err(NumericsError::NonFinite { op: "grad_check probe", node: idx });
            }
            let numeric = (up - down) / (2.0 * opts.step);
            let a = grad.values[idx];
            let rel = rel_error(a, numeric);
            report.probes += 1;
            if rel >= tensor_max {
                tensor_max = rel;
                tensor_worst = Some(WorstElement {
                    flat_index: idx,
                    row: idx / base.cols,
                    col: idx % base.cols,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.per_parameter.insert(name.clone(), tensor_max);
        if let Some(w) = tensor_worst {
            report.worst.insert(name.clone(), w);
        }
        if tensor_max >= report.max_rel_error {
            report.max_rel_error = tensor_max;
            report.worst_parameter = name.clone();
        }
    }

    report.pass = report.max_rel_error <= opts.tol;
    Ok(report)
}
