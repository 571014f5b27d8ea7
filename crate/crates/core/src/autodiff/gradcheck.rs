use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per input, `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks an operation's analytic gradients against central finite
/// differences at inputs drawn uniformly from `[-1, 1]` with `seed`.
pub fn gradient_check<F>(op: F, input_shapes: &[Vec<usize>], tolerance: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = input_shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(s.clone(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        })
        .collect::<Result<_>>()?;
    gradient_check_at(op, &inputs, tolerance, seed)
}

/// Like [`gradient_check`] at caller-supplied inputs. Non-scalar outputs are
/// reduced with fixed random weights so every output element contributes.
pub fn gradient_check_at<F>(op: F, inputs: &[Tensor], tolerance: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut weights: Option<Tensor> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut eval = |xs: &[Tensor], record: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = if record { Graph::new() } else { Graph::inference() };
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = op(&mut g, &vars)?;
        let w = weights.get_or_insert_with(|| {
            let shape = g.value(out).shape().to_vec();
            let n = g.value(out).len();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap()
        });
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv)?;
        let loss = g.sum_all(prod);
        let value = g.value(loss).item();
        if !value.is_finite() || !g.value(out).is_finite() {
            return Err(Error::Instability(format!("non-finite output {value}")));
        }
        let mut grads = Vec::new();
        if record {
            g.backward(loss)?;
            for &v in &vars {
                grads.push(
                    g.grad(v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; g.value(v).len()]),
                );
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, an) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(an.len());
        for i in 0..an.len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + FD_EPSILON;
            let (fp, _) = eval(&work, false)?;
            work[k].data_mut()[i] = orig - FD_EPSILON;
            let (fm, _) = eval(&work, false)?;
            work[k].data_mut()[i] = orig;
            numeric.push((fp - fm) / (2.0 * FD_EPSILON));
        }
        per_input.push(relative_error(an, &numeric));
    }
    let max_rel_error = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        // Both gradients vanish.
        return norm(&diff);
    }
    norm(&diff) / scale
}
