use super::{Tape, Var};
use crate::error::{CatrError, Result};
use crate::tensor::Tensor;

/// Worst relative error between analytic and central-difference gradients
/// of a scalar function of one tensor.
///
/// Error per coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradcheck_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`gradcheck`] over several inputs at once; every coordinate of every input
/// is perturbed.
pub fn gradcheck_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_coords(f, xs, eps, |_, n| (0..n).collect())
}

/// Like [`gradcheck_many`] but perturbs at most `per_input` coordinates of each
/// input, drawn without replacement by a seeded generator. Inputs with fewer
/// coordinates are checked exhaustively.
pub fn gradcheck_sampled<F>(f: F, xs: &[Tensor], eps: f64, per_input: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    use rand::seq::index::sample;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    check_coords(f, xs, eps, |_, n| {
        if n <= per_input {
            (0..n).collect()
        } else {
            let mut picked = sample(&mut rng, n, per_input).into_vec();
            picked.sort_unstable();
            picked
        }
    })
}

fn check_coords<F, S>(f: F, xs: &[Tensor], eps: f64, mut select: S) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    S: FnMut(usize, usize) -> Vec<usize>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
        let y = f(&mut tape, &vars)?;
        scalar_value(&tape, y)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.variable(t)).collect();
    let y = f(&mut tape, &vars)?;
    scalar_value(&tape, y)?;
    let grads = tape.backward(y)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (k, x) in xs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
        for i in select(k, x.numel()) {
            let orig = x.data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if !numeric.is_finite() || !analytic[i].is_finite() {
                return Err(CatrError::Numeric(format!(
                    "non-finite gradient at input {k} coordinate {i}"
                )));
            }
            worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn scalar_value(tape: &Tape, y: Var) -> Result<f64> {
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(CatrError::Dimension(format!(
            "gradcheck needs a scalar output, got shape {:?}",
            tape.shape(y)
        )));
    }
    if !v[0].is_finite() {
        return Err(CatrError::Numeric("function value is not finite".into()));
    }
    Ok(v[0])
}
