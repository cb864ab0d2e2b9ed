//! Central finite-difference checks against the tape's analytic gradients.

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::DenseTensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputCheck {
    pub name: String,
    pub rel_err: f64,
    pub passed: bool,
}

/// Gradient norm below which differences are measured in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖, ABS_FLOOR)`.
pub fn relative_error(analytic: &DenseTensor, numeric: &DenseTensor) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    diff / analytic.norm().max(numeric.norm()).max(ABS_FLOOR)
}

/// Analytic gradient of `f` with respect to every named input, optionally
/// multiplied by `corrupt.1` for input index `corrupt.0` (detector sanity hook).
pub fn analytic_gradients<F>(
    inputs: &[(String, DenseTensor)],
    f: &F,
    corrupt: Option<(usize, f64)>,
) -> Result<Vec<DenseTensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| DenseTensor::zeros(inputs[i].1.shape()));
            match corrupt {
                Some((idx, k)) if idx == i => g.map(|x| x * k),
                _ => g,
            }
        })
        .collect())
}

fn evaluate<F>(inputs: &[(String, DenseTensor)], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Central differences of `f` with respect to every input element.
pub fn numeric_gradients<F>(inputs: &[(String, DenseTensor)], f: &F, step: f64) -> Result<Vec<DenseTensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<(String, DenseTensor)> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = DenseTensor::zeros(inputs[i].1.shape());
        for k in 0..inputs[i].1.len() {
            let orig = inputs[i].1.data()[k];
            work[i].1.data_mut()[k] = orig + step;
            let plus = evaluate(&work, f)?;
            work[i].1.data_mut()[k] = orig - step;
            let minus = evaluate(&work, f)?;
            work[i].1.data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares analytic and numeric gradients input by input.
pub fn check_gradients<F>(
    inputs: &[(String, DenseTensor)],
    f: F,
    step: f64,
    tolerance: f64,
    corrupt: Option<(usize, f64)>,
) -> Result<Vec<InputCheck>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f, corrupt)?;
    let numeric = numeric_gradients(inputs, &f, step)?;
    Ok(inputs
        .iter()
        .zip(analytic.iter().zip(&numeric))
        .map(|((name, _), (a, n))| {
            let rel_err = relative_error(a, n);
            InputCheck {
                name: name.clone(),
                rel_err,
                passed: rel_err <= tolerance,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::BN_EPS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
        DenseTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn primitive_ops_pass_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probe = rand_t(&mut rng, &[6, 3]);
            let probe2 = rand_t(&mut rng, &[2, 4]);
            let inputs = vec![
                ("x".to_string(), rand_t(&mut rng, &[6, 5])),
                ("w".to_string(), rand_t(&mut rng, &[5, 3])),
                ("b".to_string(), rand_t(&mut rng, &[3])),
                ("gamma".to_string(), rand_t(&mut rng, &[3]).map(|v| v + 1.5)),
                ("beta".to_string(), rand_t(&mut rng, &[3])),
            ];
            let checks = check_gradients(
                &inputs,
                |t, v| {
                    let h = t.matmul(v[0], v[1])?;
                    let h = t.add_row_bias(h, v[2])?;
                    let (h, _, _) = t.batch_norm_train(h, v[3], v[4], BN_EPS)?;
                    let h = t.relu(h)?;
                    let s = t.softmax_rows(h)?;
                    let n = t.l2_normalize_rows(s)?;
                    t.weighted_sum(n, probe.clone())
                },
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
                None,
            )
            .unwrap();
            for c in &checks {
                assert!(c.passed, "seed {seed}: {c:?}");
            }

            let tokens = vec![vec![0, 2, 2], vec![1]];
            let inputs = vec![
                ("keys".to_string(), rand_t(&mut rng, &[6, 4])),
                ("queries".to_string(), rand_t(&mut rng, &[2, 4])),
                ("values".to_string(), rand_t(&mut rng, &[6, 4])),
                ("table".to_string(), rand_t(&mut rng, &[3, 4])),
            ];
            let checks = check_gradients(
                &inputs,
                |t, v| {
                    let e = t.embed_mean(v[3], &tokens)?;
                    let q = t.add(v[1], e)?;
                    let s = t.grouped_scores(v[0], q, 3)?;
                    let w = t.softmax_rows(s)?;
                    let f = t.grouped_weighted_sum(w, v[2])?;
                    let m = t.group_mean(v[2], 3)?;
                    let tr = t.transpose(m)?;
                    let tr = t.transpose(tr)?;
                    let both = t.concat_rows(&[f, tr])?;
                    let both = t.reshape(both, &[2, 8])?;
                    let both = t.scale(both, 0.7)?;
                    let sq = t.sum_squares(both)?;
                    let p = t.weighted_sum(f, probe2.clone())?;
                    t.add(sq, p)
                },
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
                None,
            )
            .unwrap();
            for c in &checks {
                assert!(c.passed, "seed {seed}: {c:?}");
            }
        }
    }

    #[test]
    fn inference_batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rm = vec![0.3, -0.2];
        let rv = vec![1.7, 0.4];
        let probe = rand_t(&mut rng, &[3, 2]);
        let inputs = vec![
            ("x".to_string(), rand_t(&mut rng, &[3, 2])),
            ("gamma".to_string(), rand_t(&mut rng, &[2])),
            ("beta".to_string(), rand_t(&mut rng, &[2])),
        ];
        let checks = check_gradients(
            &inputs,
            |t, v| {
                let y = t.batch_norm_infer(v[0], v[1], v[2], &rm, &rv, BN_EPS)?;
                t.weighted_sum(y, probe.clone())
            },
            DEFAULT_STEP,
            DEFAULT_TOLERANCE,
            None,
        )
        .unwrap();
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let inputs = vec![("x".to_string(), DenseTensor::vector(vec![0.3, -0.7, 1.1]))];
        let checks = check_gradients(
            &inputs,
            |t, v| t.sum_squares(v[0]),
            DEFAULT_STEP,
            DEFAULT_TOLERANCE,
            Some((0, 1.01)),
        )
        .unwrap();
        assert!(!checks[0].passed);
    }
}
