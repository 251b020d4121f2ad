use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Parameters;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per slot; larger slots are subsampled.
    pub max_coords_per_slot: Option<usize>,
    pub seed: u64,
    /// Slots skipped entirely, e.g. parameters whose gradient is zero by
    /// construction and would only measure round-off.
    pub exclude: Vec<String>,
    /// Relative tolerance used to decide which coordinates are resolvable
    /// above round-off.
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords_per_slot: Some(24),
            seed: 0,
            exclude: Vec::new(),
            tolerance: 1e-4,
        }
    }
}

/// One loss evaluation plus a signature of the piecewise-smooth regime it
/// was evaluated in (e.g. a hash of ReLU activation signs). Probes whose
/// regime differs from the base point straddle a kink and are skipped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub loss: f64,
    pub regime: u64,
}

impl From<f64> for Probe {
    fn from(loss: f64) -> Self {
        Probe { loss, regime: 0 }
    }
}

/// Multiple of `eps * |loss| / (2h)` taken as the finite-difference noise.
const ROUNDOFF_FACTOR: f64 = 32.0;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over every compared coordinate.
    pub max_rel_error: f64,
    /// Slot name, flat coordinate, analytic, numeric of `max_rel_error`.
    pub worst: Option<(String, usize, f64, f64)>,
    pub coords_checked: usize,
    /// Probes that crossed a regime boundary.
    pub kinks_skipped: usize,
    /// Relative error over coordinates large enough that `tolerance` is
    /// measurable above round-off.
    pub max_resolved_rel_error: f64,
    /// Slot name, flat coordinate, analytic, numeric of `max_resolved_rel_error`.
    pub worst_resolved: Option<(String, usize, f64, f64)>,
    /// Coordinates below that resolution.
    pub unresolved: usize,
    /// `max |a - n| / noise` over unresolved coordinates; at most 1 when
    /// they agree within round-off.
    pub max_unresolved_noise_ratio: f64,
}

impl GradCheckReport {
    /// Resolved coordinates meet `tolerance`; the rest agree within noise.
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_resolved_rel_error < tolerance && self.max_unresolved_noise_ratio <= 1.0
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `loss(params, with_grad)` must return the scalar loss (or a [`Probe`])
/// and, when `with_grad` is set, accumulate its gradient into the slots.
/// The relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check<P, F, T>(params: &mut P, mut loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    P: Parameters,
    F: FnMut(&mut P, bool) -> Result<T>,
    T: Into<Probe>,
{
    if opts.step <= 0.0 {
        return Err(Error::Argument("finite-difference step must be positive".into()));
    }
    params.zero_grads();
    let base: Probe = loss(params, true)?.into();
    if !base.loss.is_finite() {
        return Err(Error::numeric("loss at the unperturbed point"));
    }

    let mut slots: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    params.visit_params(&mut |name, p| {
        slots.push((name.to_string(), p.grad.data().to_vec(), p.value.data().to_vec()))
    });

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let h = opts.step;
    for (slot_idx, (name, analytic, original)) in slots.iter().enumerate() {
        if opts.exclude.iter().any(|e| e == name) {
            continue;
        }
        let coords: Vec<usize> = match opts.max_coords_per_slot {
            Some(k) if analytic.len() > k => {
                let mut c = rand::seq::index::sample(&mut rng, analytic.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..analytic.len()).collect(),
        };
        for coord in coords {
            let x0 = original[coord];
            let a = analytic[coord];
            let Some(coarse) = central_difference(params, &mut loss, slot_idx, coord, x0, h, base.regime, name)? else {
                report.kinks_skipped += 1;
                continue;
            };
            let (mut numeric, mut noise) = coarse;
            if !agrees(a, numeric, noise, opts.tolerance) {
                // Richardson step: cancels the h^2 truncation term, which
                // dominates near sharp mixture components.
                if let Some((fine, fine_noise)) =
                    central_difference(params, &mut loss, slot_idx, coord, x0, h / 2.0, base.regime, name)?
                {
                    numeric = (4.0 * fine - numeric) / 3.0;
                    noise = (4.0 * fine_noise + noise) / 3.0;
                }
            }
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = diff / scale.max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), coord, a, numeric));
            }
            if scale * opts.tolerance >= noise {
                if rel > report.max_resolved_rel_error || report.worst_resolved.is_none() {
                    report.max_resolved_rel_error = rel;
                    report.worst_resolved = Some((name.clone(), coord, a, numeric));
                }
            } else {
                report.unresolved += 1;
                report.max_unresolved_noise_ratio = report.max_unresolved_noise_ratio.max(diff / noise);
            }
        }
    }
    Ok(report)
}

fn agrees(a: f64, numeric: f64, noise: f64, tolerance: f64) -> bool {
    let diff = (a - numeric).abs();
    let scale = a.abs().max(numeric.abs());
    if scale * tolerance >= noise {
        diff < tolerance * scale
    } else {
        diff <= noise
    }
}

/// `Some((derivative, noise))`, or `None` when a probe leaves the base regime.
#[allow(clippy::too_many_arguments)]
fn central_difference<P, F, T>(
    params: &mut P,
    loss: &mut F,
    slot_idx: usize,
    coord: usize,
    x0: f64,
    h: f64,
    regime: u64,
    name: &str,
) -> Result<Option<(f64, f64)>>
where
    P: Parameters,
    F: FnMut(&mut P, bool) -> Result<T>,
    T: Into<Probe>,
{
    set_coord(params, slot_idx, coord, x0 + h);
    let plus = loss(params, false);
    set_coord(params, slot_idx, coord, x0 - h);
    let minus = loss(params, false);
    set_coord(params, slot_idx, coord, x0);
    let (plus, minus): (Probe, Probe) = (plus?.into(), minus?.into());
    if !plus.loss.is_finite() || !minus.loss.is_finite() {
        return Err(Error::numeric(format!("loss while probing {name}[{coord}]")));
    }
    if plus.regime != regime || minus.regime != regime {
        return Ok(None);
    }
    let magnitude = plus.loss.abs().max(minus.loss.abs()).max(1.0);
    let noise = ROUNDOFF_FACTOR * f64::EPSILON * magnitude / (2.0 * h);
    Ok(Some(((plus.loss - minus.loss) / (2.0 * h), noise)))
}

fn set_coord<P: Parameters>(params: &mut P, slot_idx: usize, coord: usize, value: f64) {
    let mut i = 0;
    params.visit_params_mut(&mut |_, p| {
        if i == slot_idx {
            p.value.data_mut()[coord] = value;
        }
        i += 1;
    });
}
