use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BoundParams, NumericsError, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Above this many scalar entries, a random subsample of this size is checked.
    pub max_entries: usize,
    /// Denominator floor in the relative error, so that entries whose true
    /// gradient is zero are judged on absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries: 4096,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Entries left out because the perturbation moved a ReLU input across
    /// zero, where the objective is not differentiable.
    pub skipped_kinks: usize,
    pub passed: bool,
}

fn evaluate<F>(params: &ParamStore, f: &F) -> Result<(f64, Vec<bool>), NumericsError>
where
    F: Fn(&mut Tape<'_>, &BoundParams) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(NumericsError::Shape("objective must be scalar".into()));
    }
    if !v[0].is_finite() {
        return Err(NumericsError::NonFinite("objective value".into()));
    }
    Ok((v[0], tape.relu_pattern()))
}

/// Compares the tape gradient of a scalar objective against central
/// differences `(f(p + h) - f(p - h)) / 2h`.
pub fn grad_check<F>(
    params: &ParamStore,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape<'_>, &BoundParams) -> Result<Var, NumericsError>,
{
    let (analytic, pattern) = {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = f(&mut tape, &bound)?;
        if !tape.value(out).iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite("objective value".into()));
        }
        tape.backward(out)?;
        (params.collect_grads(&tape, &bound), tape.relu_pattern())
    };

    let mut entries: Vec<(usize, usize)> = params
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(t, tensor)| (0..tensor.len()).map(move |i| (t, i)))
        .collect();
    if entries.len() > opts.max_entries {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked = sample(&mut rng, entries.len(), opts.max_entries).into_vec();
        picked.sort_unstable();
        entries = picked.into_iter().map(|i| entries[i]).collect();
    }

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut skipped = 0;
    for &(t, i) in &entries {
        let name = params.names()[t].clone();
        let base = params.tensors()[t].data()[i];
        work.get_mut(&name)?.data_mut()[i] = base + opts.step;
        let (up, up_pattern) = evaluate(&work, &f)?;
        work.get_mut(&name)?.data_mut()[i] = base - opts.step;
        let (down, down_pattern) = evaluate(&work, &f)?;
        work.get_mut(&name)?.data_mut()[i] = base;
        if up_pattern != pattern || down_pattern != pattern {
            skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * opts.step);
        let exact = analytic[t][i];
        let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(opts.floor);
        if rel > max_rel || worst.is_none() {
            max_rel = max_rel.max(rel);
            worst = Some((name, i));
        }
    }
    let checked = entries.len() - skipped;
    Ok(GradCheckReport {
        checked,
        max_rel_error: max_rel,
        worst,
        skipped_kinks: skipped,
        passed: checked > 0 && max_rel < opts.tolerance,
    })
}
