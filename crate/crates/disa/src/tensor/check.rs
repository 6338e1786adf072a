//! Finite-difference gradient checking.
//!
//! The numerical side never touches `backward`: it re-evaluates the
//! forward function at perturbed inputs and forms central differences,
//! so it stays an independent oracle for the analytic rules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{concat, cosine_similarity, kl_divergence, Tensor};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Input sampling domain, chosen to keep finite differences away from
/// domain boundaries and kinks.
#[derive(Clone, Copy)]
pub enum Domain {
    /// Standard normal.
    Real,
    /// Uniform in [0.5, 2.0]; safe for log/sqrt/fractional powers.
    Positive,
    /// Magnitude in [0.2, 2.0] with random sign; keeps |x| off zero.
    NonZero,
}

pub struct InputSpec {
    pub shape: Vec<usize>,
    pub domain: Domain,
}

impl InputSpec {
    pub fn real(shape: &[usize]) -> Self {
        InputSpec {
            shape: shape.to_vec(),
            domain: Domain::Real,
        }
    }
    pub fn positive(shape: &[usize]) -> Self {
        InputSpec {
            shape: shape.to_vec(),
            domain: Domain::Positive,
        }
    }
    pub fn nonzero(shape: &[usize]) -> Self {
        InputSpec {
            shape: shape.to_vec(),
            domain: Domain::NonZero,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n: usize = self.shape.iter().product();
        (0..n)
            .map(|_| match self.domain {
                Domain::Real => crate::rng::gaussian(rng),
                Domain::Positive => rng.gen_range(0.5..2.0),
                Domain::NonZero => {
                    let m: f64 = rng.gen_range(0.2..2.0);
                    if rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRAD_TOL
    }
}

/// Relative error with a unit floor: behaves like absolute error for
/// small gradients and relative error for large ones.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Compares `backward` against central finite differences on `cases`
/// random inputs. Non-scalar outputs are contracted with a random
/// constant weight vector so the root is scalar.
pub fn check_gradients(
    name: &str,
    inputs: &[InputSpec],
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    cases: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CheckReport> {
    let mut max_err: f64 = 0.0;
    for _ in 0..cases {
        let vals: Vec<Vec<f64>> = inputs.iter().map(|s| s.sample(rng)).collect();

        // Analytic pass.
        let leaves: Vec<Tensor> = inputs
            .iter()
            .zip(&vals)
            .map(|(s, v)| Tensor::leaf(s.shape.clone(), v.clone(), true))
            .collect::<Result<_>>()?;
        let out = f(&leaves)?;
        let w: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weight = Tensor::vector(w.clone());
        let root = out.reshape(vec![out.len()])?.mul(&weight)?.sum_axis(0)?;
        root.backward()?;

        // Numerical pass: plain re-evaluation, no graph.
        let eval = |vals: &[Vec<f64>]| -> Result<f64> {
            let consts: Vec<Tensor> = inputs
                .iter()
                .zip(vals)
                .map(|(s, v)| Tensor::constant(s.shape.clone(), v.clone()))
                .collect::<Result<_>>()?;
            let out = f(&consts)?;
            Ok(out.values().iter().zip(&w).map(|(a, b)| a * b).sum())
        };

        for (i, leaf) in leaves.iter().enumerate() {
            let analytic = leaf
                .grad()
                .unwrap_or_else(|| vec![0.0; leaf.len()]);
            for e in 0..vals[i].len() {
                let mut plus = vals.to_vec();
                plus[i][e] += FD_STEP;
                let mut minus = vals.to_vec();
                minus[i][e] -= FD_STEP;
                let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
                max_err = max_err.max(rel_err(analytic[e], numeric));
            }
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        cases,
        max_rel_err: max_err,
    })
}

/// Gradient checks for every differentiable primitive.
pub fn check_primitives(cases: usize, rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    let r = InputSpec::real;
    let pos = InputSpec::positive;
    let nz = InputSpec::nonzero;

    reports.push(check_gradients(
        "add",
        &[r(&[2, 3]), r(&[2, 3])],
        &|t| t[0].add(&t[1]),
        cases,
        rng,
    )?);
    reports.push(check_gradients(
        "sub",
        &[r(&[2, 3]), r(&[2, 3])],
        &|t| t[0].sub(&t[1]),
        cases,
        rng,
    )?);
    reports.push(check_gradients(
        "mul",
        &[r(&[2, 3]), r(&[2, 3])],
        &|t| t[0].mul(&t[1]),
        cases,
        rng,
    )?);
    reports.push(check_gradients(
        "scale",
        &[r(&[5])],
        &|t| Ok(t[0].scale(-1.7)),
        cases,
        rng,
    )?);
    reports.push(check_gradients(
        "matmul",
        &[r(&[2, 3]), r(&[3, 4])],
        &|t| t[0].matmul(&t[1]),
        cases,
        rng,
    )?);
    reports.push(check_gradients(
        "transpose",
        &[r(&[3, 2])],
        &|t| t[0].transpose(),
        cases,
        rng,
    )?);
    reports.push(check_gradients(
        "concat",
        &[r(&[2, 3]), r(&[1, 3]), r(&[2, 2])],
        &|t| {
            let rows = concat(&t[0..2].to_vec(), 0)?;
            concat(&[rows.slice(0, 0, 2)?, t[2].clone()], 1)
        },
        cases,
        rng,
    )?);
    reports.push(check_gradients(
        "slice",
        &[r(&[4, 5])],
        &|t| t[0].slice(0, 1, 3)?.slice(1, 2, 5),
        cases,
        rng,
    )?);
    reports.push(check_gradients(
        "mean-over-axis",
        &[r(&[3, 4])],
        &|t| {
            let a = t[0].mean_axis(0)?;
            let b = t[0].mean_axis(1)?;
            concat(&[a, b], 0)
        },
        cases,
        rng,
    )?);
    reports.push(check_gradients(
        "sum-over-axis",
        &[r(&[3, 4])],
        &|t| {
            let a = t[0].sum_axis(0)?;
            let b = t[0].sum_axis(1)?;
            concat(&[a, b], 0)
        },
        cases,
        rng,
    )?);
    reports.push(check_gradients("exp", &[r(&[2, 3])], &|t| Ok(t[0].exp()), cases, rng)?);
    reports.push(check_gradients("log", &[pos(&[6])], &|t| t[0].log(), cases, rng)?);
    reports.push(check_gradients("sqrt", &[pos(&[6])], &|t| t[0].sqrt(), cases, rng)?);
    reports.push(check_gradients(
        "power",
        &[pos(&[5])],
        &|t| {
            let a = t[0].powf(1.7)?;
            let b = t[0].powf(-0.5)?;
            let c = t[0].powf(2.0)?;
            concat(&[a, b, c], 0)
        },
        cases,
        rng,
    )?);
    reports.push(check_gradients("abs", &[nz(&[6])], &|t| Ok(t[0].abs()), cases, rng)?);
    reports.push(check_gradients("gelu", &[r(&[7])], &|t| Ok(t[0].gelu()), cases, rng)?);
    reports.push(check_gradients(
        "layer-norm",
        &[r(&[3, 5])],
        &|t| t[0].layer_norm(),
        cases,
        rng,
    )?);
    reports.push(check_gradients(
        "embedding-lookup",
        &[r(&[5, 3])],
        &|t| t[0].select_rows(&[0, 2, 4, 2]),
        cases,
        rng,
    )?);
    reports.push(check_gradients(
        "softmax-over-axis",
        &[r(&[2, 5])],
        &|t| t[0].softmax_rows(),
        cases,
        rng,
    )?);
    reports.push(check_gradients(
        "multi-head-attention",
        &[r(&[3, 4]), r(&[5, 4]), r(&[5, 4])],
        &|t| t[0].multi_head_attention(&t[1], &t[2], 2),
        cases,
        rng,
    )?);
    reports.push(check_gradients(
        "softmax-temperature",
        &[r(&[6])],
        &|t| t[0].softmax(0.07),
        cases,
        rng,
    )?);
    reports.push(check_gradients(
        "cosine-similarity",
        &[r(&[5]), r(&[5])],
        &|t| cosine_similarity(&t[0], &t[1]),
        cases,
        rng,
    )?);
    // KL is exercised through softmax so perturbed inputs stay on the
    // probability simplex required by its contract.
    reports.push(check_gradients(
        "kl-divergence",
        &[r(&[6]), r(&[6])],
        &|t| kl_divergence(&t[0].softmax(1.0)?, &t[1].softmax(1.0)?),
        cases,
        rng,
    )?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_small_check() {
        let mut rng = crate::rng::stream(3, "gradcheck-unit");
        for report in check_primitives(5, &mut rng).unwrap() {
            assert!(
                report.passed(),
                "{}: max rel err {}",
                report.name,
                report.max_rel_err
            );
        }
    }
}
