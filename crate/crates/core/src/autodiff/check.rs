use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Coordinates per input above which a random subset is checked instead.
const FULL_CHECK_LIMIT: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric|` over checked coordinates, divided by the
    /// largest gradient magnitude seen.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn projected<F>(op: &F, inputs: &[Tensor], projection: &mut Option<Vec<f64>>, rng: &mut ChaCha8Rng) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = op(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    if tape.value(out).len() == 1 {
        return Ok((tape, vars, out));
    }
    let r = projection
        .get_or_insert_with(|| (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .clone();
    let r = tape.constant(Tensor::new(shape, r)?);
    let p = tape.mul(out, r)?;
    let s = tape.sum(p);
    Ok((tape, vars, s))
}

/// Compares tape gradients of `op` with central finite differences.
///
/// Non-scalar outputs are reduced with a fixed random projection. Inputs with
/// more than 256 values are checked on a seeded random subset of 256
/// coordinates.
pub fn gradient_check<F>(op: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut projection = None;
    let (tape, vars, root) = projected(&op, inputs, &mut projection, &mut rng)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
        .collect();
    drop(tape);

    let eval = |perturbed: &[Tensor], projection: &mut Option<Vec<f64>>, rng: &mut ChaCha8Rng| -> Result<f64> {
        let (tape, _, root) = projected(&op, perturbed, projection, rng)?;
        Ok(tape.value(root).item())
    };

    let mut work = inputs.to_vec();
    let (mut max_abs, mut scale, mut count) = (0.0f64, 0.0f64, 0usize);
    for (k, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if input.len() <= FULL_CHECK_LIMIT {
            (0..input.len()).collect()
        } else {
            rand::seq::index::sample(&mut rng, input.len(), FULL_CHECK_LIMIT).into_vec()
        };
        for i in coords {
            let x0 = input.data()[i];
            work[k].data_mut()[i] = x0 + step;
            let fp = eval(&work, &mut projection, &mut rng)?;
            work[k].data_mut()[i] = x0 - step;
            let fm = eval(&work, &mut projection, &mut rng)?;
            work[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[k][i];
            max_abs = max_abs.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            count += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: if scale > 0.0 { max_abs / scale } else { max_abs },
        max_abs_error: max_abs,
        coords_checked: count,
    })
}

/// Directional variant of [`gradient_check`] for models too large to probe
/// coordinate by coordinate.
///
/// For each input, `directions` seeded random directions supported on that
/// input alone compare `grad . d` with a central difference along `d`. As in
/// [`gradient_check`], the worst absolute error is divided by the largest
/// directional derivative seen.
pub fn directional_check<F>(op: F, inputs: &[Tensor], step: f64, directions: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x6469_7265);
    let mut projection = None;
    let (tape, vars, root) = projected(&op, inputs, &mut projection, &mut rng)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
        .collect();
    drop(tape);

    let mut work = inputs.to_vec();
    let (mut scale, mut max_abs, mut count) = (0.0f64, 0.0f64, 0usize);
    for (k, input) in inputs.iter().enumerate() {
        for _ in 0..directions {
            let d: Vec<f64> = (0..input.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a: f64 = analytic[k].iter().zip(&d).map(|(g, di)| g * di).sum();
            let mut probe = |sign: f64, rng: &mut ChaCha8Rng| -> Result<f64> {
                for ((w, x0), di) in work[k].data_mut().iter_mut().zip(input.data()).zip(&d) {
                    *w = x0 + sign * step * di;
                }
                let (tape, _, root) = projected(&op, &work, &mut projection, rng)?;
                Ok(tape.value(root).item())
            };
            let fp = probe(1.0, &mut rng)?;
            let fm = probe(-1.0, &mut rng)?;
            work[k] = input.clone();
            let numeric = (fp - fm) / (2.0 * step);
            max_abs = max_abs.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            count += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: if scale > 0.0 { max_abs / scale } else { max_abs },
        max_abs_error: max_abs,
        coords_checked: count,
    })
}
