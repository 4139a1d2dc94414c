//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::ParamStore;

pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub max_relative_error: f64,
    /// Entries whose relative error is within the tolerance.
    pub pass_fraction: f64,
    pub checked: usize,
    /// Worst error per parameter tensor.
    pub per_param: Vec<(String, f64)>,
}

/// Compare analytic gradients of `f` to central differences for every scalar
/// parameter entry.
pub fn grad_check<F>(params: &ParamStore, f: F, tolerance: f64) -> Result<GradientReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_sampled(params, f, tolerance, None, 0)
}

/// Like [`grad_check`] but checks at most `max_entries` entries per parameter
/// tensor, selected with a seeded RNG.
pub fn grad_check_sampled<F>(
    params: &ParamStore,
    f: F,
    tolerance: f64,
    max_entries: Option<usize>,
    seed: u64,
) -> Result<GradientReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    scalar_of(&g, out)?;
    let analytic = g.backward(out)?.params(params);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut max_err = 0.0f64;
    let mut passed = 0usize;
    let mut checked = 0usize;
    let mut per_param = Vec::new();

    for (name, grad) in &analytic {
        let n = grad.len();
        let entries: Vec<usize> = match max_entries {
            Some(m) if m < n => {
                let mut e = sample(&mut rng, n, m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for i in entries {
            let orig = params.get(name).expect("bound").data()[i];
            work.get_mut(name).expect("bound").data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work)?;
            work.get_mut(name).expect("bound").data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work)?;
            work.get_mut(name).expect("bound").data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            worst = worst.max(err);
            checked += 1;
            if err <= tolerance {
                passed += 1;
            }
        }
        max_err = max_err.max(worst);
        per_param.push((name.clone(), worst));
    }

    Ok(GradientReport {
        max_relative_error: max_err,
        pass_fraction: if checked == 0 { 1.0 } else { passed as f64 / checked as f64 },
        checked,
        per_param,
    })
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar output, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}
