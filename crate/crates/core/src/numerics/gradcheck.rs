//! Central finite-difference oracle for tape gradients.

use thiserror::Error;

use super::{Bound, NumericsError, Params, Tape, TensorId};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("forward pass failed: {0}")]
    Forward(#[from] NumericsError),
    #[error("loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite evaluation while perturbing `{name}`[{index}]")]
    NonFinite { name: String, index: usize },
    #[error("no gradient recorded for parameter `{name}`")]
    MissingGrad { name: String },
}

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn eval_scalar<F>(params: &Params, build: &F) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, &Bound) -> Result<TensorId, NumericsError>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = build(&mut tape, &bound)?;
    if tape.shape(loss).iter().product::<usize>() != 1 {
        return Err(GradCheckError::NonScalarLoss {
            shape: tape.shape(loss).to_vec(),
        });
    }
    Ok(tape.data(loss)[0])
}

/// Compare tape gradients of `build`'s scalar output against central
/// differences `(f(p+h) - f(p-h)) / 2h` for every element of every parameter.
/// Relative error uses a `max(|analytic|, |numeric|, 1e-8)` denominator.
pub fn grad_check<F>(
    params: &Params,
    build: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape, &Bound) -> Result<TensorId, NumericsError>,
{
    assert!(h > 0.0, "step size must be positive");

    // analytic pass
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = build(&mut tape, &bound)?;
    if tape.shape(loss).iter().product::<usize>() != 1 {
        return Err(GradCheckError::NonScalarLoss {
            shape: tape.shape(loss).to_vec(),
        });
    }
    tape.backward(loss)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, id) in bound.iter() {
        let g = tape
            .grad(*id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; tape.data(*id).len()]);
        analytic.push((name.clone(), g));
    }
    drop(tape);

    // numeric pass, one central difference per scalar
    let mut work = params.clone();
    let mut per_param = Vec::new();
    let mut max_rel_err = 0.0f64;
    for (name, grad) in &analytic {
        let n = work.get(name).expect("bound name exists").numel();
        let mut worst = (0.0f64, 0usize);
        for i in 0..n {
            let orig = work.get(name).unwrap().data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let f_plus = eval_scalar(&work, &build)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let f_minus = eval_scalar(&work, &build)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(GradCheckError::NonFinite {
                    name: name.clone(),
                    index: i,
                });
            }
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let denom = grad[i].abs().max(numeric.abs()).max(1e-8);
            let rel = (grad[i] - numeric).abs() / denom;
            if rel > worst.0 {
                worst = (rel, i);
            }
        }
        max_rel_err = max_rel_err.max(worst.0);
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: worst.0,
            worst_index: worst.1,
        });
    }

    Ok(GradCheckReport {
        h,
        tol,
        per_param,
        max_rel_err,
        pass: max_rel_err < tol,
    })
}
