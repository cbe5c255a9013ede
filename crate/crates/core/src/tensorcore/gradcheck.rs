use super::params::ParameterSet;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per parameter, in parameter-set order.
    pub per_param: Vec<(String, f64)>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, e)| (n.as_str(), *e))
    }
}

/// Denominator floor of [`relative_error`]. A central difference at
/// `h = 1e-5` on an O(1) loss resolves derivatives only to about
/// `ulp(loss) / 2h ≈ 2e-11`, so smaller components are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks `d loss / d θ` for every parameter coordinate (or an evenly spaced
/// subset of at most `max_coords` per parameter) with step `h`.
///
/// `loss_fn` must build a fresh forward pass on the given tape and return the
/// scalar loss; it is called once for the analytic pass and twice per checked
/// coordinate.
pub fn grad_check<F>(
    params: &mut ParameterSet,
    h: f64,
    max_coords: Option<usize>,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    tape.backward_into(loss, params)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| t.grad().to_vec()).collect();
    params.zero_grads();

    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut tape = Tape::inference();
        let loss = loss_fn(&mut tape, p)?;
        Ok(tape.value(loss).item())
    };

    let ids: Vec<_> = params.iter().map(|(id, name, t)| (id, name.to_string(), t.numel())).collect();
    let mut per_param = Vec::with_capacity(ids.len());
    let mut coords_checked = 0;
    for (k, (id, name, numel)) in ids.into_iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(cap) if numel > cap => (0..cap).map(|i| i * numel / cap).collect(),
            _ => (0..numel).collect(),
        };
        let mut worst: f64 = 0.0;
        for i in coords {
            let orig = params.get(id).values()[i];
            params.get_mut(id).values_mut()[i] = orig + h;
            let plus = eval(params);
            params.get_mut(id).values_mut()[i] = orig - h;
            let minus = eval(params);
            params.get_mut(id).values_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            worst = worst.max(relative_error(analytic[k][i], numeric));
            coords_checked += 1;
        }
        per_param.push((name, worst));
    }
    let max_rel_error = per_param.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
        coords_checked,
    })
}
