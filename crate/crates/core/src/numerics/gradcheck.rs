//! Central finite-difference gradient checking.
//!
//! The relative error of one coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, ABS_FLOOR)`; the floor
//! keeps coordinates whose true gradient is zero from dividing noise by noise.

use super::{Gradients, NumericsError, ParamStore, Tape, Var};

const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamGradCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&ParamGradCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Runs `loss_fn` once for analytic gradients, then compares them against
/// central differences with step `h` for every coordinate of every parameter.
pub fn check_gradients<F, E>(store: &mut ParamStore, loss_fn: F, h: f64, tol: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };
    compare_gradients(store, loss_fn, &analytic, h, tol)
}

/// Compares supplied gradients against central differences. Parameters the
/// loss never reached are compared against zero.
pub fn compare_gradients<F, E>(
    store: &mut ParamStore,
    loss_fn: F,
    analytic: &Gradients,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let eval = |store: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::inference(store);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.scalar(loss))
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).len();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let orig = store.value(id).data()[j];
            store.get_mut(id).tensor.data_mut()[j] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).tensor.data_mut()[j] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).tensor.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g[j]);
            let denom = a.abs().max(numeric.abs()).max(ABS_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        params.push(ParamGradCheck {
            name: store.get(id).name.clone(),
            max_rel_error: worst,
            checked: n,
        });
    }
    Ok(GradCheckReport { params, tolerance: tol })
}
