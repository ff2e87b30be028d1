//! Finite-difference gradient checking used by unit and acceptance tests.
//!
//! Cases pair a graph builder with leaf inputs; the harness compares the
//! reverse-mode gradient of a scalar loss against central differences
//! rebuilt from scratch, so the check is independent of the tape's own
//! backward rules.

use crate::error::Result;
use crate::rng;
use crate::tensor::{Graph, Reduction, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<(Vec<usize>, Vec<f64>)>,
    pub build: Builder,
}

/// Checks one case; returns a description of the first mismatch, if any.
pub fn check_case(case: &GradCase) -> std::result::Result<(), String> {
    let eval = |data: &[Vec<f64>]| -> std::result::Result<f64, String> {
        let mut g = Graph::new();
        let vars: Vec<Var> = case
            .inputs
            .iter()
            .zip(data)
            .map(|((shape, _), d)| g.leaf(d.clone(), shape, false))
            .collect::<Result<_>>()
            .map_err(|e| format!("{}: forward failed: {e}", case.name))?;
        let loss = (case.build)(&mut g, &vars).map_err(|e| format!("{}: {e}", case.name))?;
        g.scalar(loss).map_err(|e| format!("{}: {e}", case.name))
    };

    // Analytic gradients.
    let mut g = Graph::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|(shape, d)| g.leaf(d.clone(), shape, true))
        .collect::<Result<_>>()
        .map_err(|e| format!("{}: leaf failed: {e}", case.name))?;
    let loss = (case.build)(&mut g, &vars).map_err(|e| format!("{}: {e}", case.name))?;
    g.backward(loss)
        .map_err(|e| format!("{}: backward failed: {e}", case.name))?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, (_, d))| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; d.len()])
        })
        .collect();

    // Central differences.
    let base: Vec<Vec<f64>> = case.inputs.iter().map(|(_, d)| d.clone()).collect();
    for (pi, grads) in analytic.iter().enumerate() {
        for j in 0..grads.len() {
            let mut plus = base.clone();
            plus[pi][j] += FD_STEP;
            let mut minus = base.clone();
            minus[pi][j] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let diff = (grads[j] - numeric).abs();
            if diff > FD_TOL * numeric.abs().max(1.0) {
                return Err(format!(
                    "{}: input {pi} element {j}: analytic {} vs numeric {numeric} (diff {diff})",
                    case.name, grads[j]
                ));
            }
        }
    }
    Ok(())
}

fn rand_input(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let numel = shape.iter().product();
    (shape.to_vec(), rng::randn_vec(rng, numel, 1.0))
}

/// Weighted-sum loss; random weights make the check sensitive to element
/// placement (transpose/slice bugs cannot cancel out).
fn weighted_loss(g: &mut Graph, out: Var, weights: &[f64]) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.leaf(weights.to_vec(), &shape, false)?;
    let prod = g.mul(out, w)?;
    Ok(g.sum_all(prod))
}

/// Builds `cases_per_op` random cases for every differentiable graph op,
/// tagged by op name.
pub fn all_op_cases(seed: u64, cases_per_op: usize) -> Vec<GradCase> {
    let mut cases = Vec::new();
    let mut rng = rng::substream(seed, "gradcheck", &[]);

    for c in 0..cases_per_op {
        let m = 2 + (c % 3);
        let k = 2 + ((c + 1) % 3);
        let n = 2 + ((c + 2) % 3);
        let cu = c as u64;

        // matmul
        {
            let a = rand_input(&mut rng, &[m, k]);
            let b = rand_input(&mut rng, &[k, n]);
            let w = rng::randn_vec(&mut rng, m * n, 1.0);
            cases.push(GradCase {
                name: format!("matmul/{cu}"),
                inputs: vec![a, b],
                build: Box::new(move |g, v| {
                    let out = g.matmul(v[0], v[1])?;
                    weighted_loss(g, out, &w)
                }),
            });
        }
        // add / sub / mul
        for (op_name, which) in [("add", 0u8), ("sub", 1), ("mul", 2)] {
            let a = rand_input(&mut rng, &[m, n]);
            let b = rand_input(&mut rng, &[m, n]);
            let w = rng::randn_vec(&mut rng, m * n, 1.0);
            cases.push(GradCase {
                name: format!("{op_name}/{cu}"),
                inputs: vec![a, b],
                build: Box::new(move |g, v| {
                    let out = match which {
                        0 => g.add(v[0], v[1])?,
                        1 => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    weighted_loss(g, out, &w)
                }),
            });
        }
        // scale
        {
            let a = rand_input(&mut rng, &[m, n]);
            let w = rng::randn_vec(&mut rng, m * n, 1.0);
            let c_val = 0.3 + c as f64;
            cases.push(GradCase {
                name: format!("scale/{cu}"),
                inputs: vec![a],
                build: Box::new(move |g, v| {
                    let out = g.scale(v[0], c_val);
                    weighted_loss(g, out, &w)
                }),
            });
        }
        // add_bias
        {
            let a = rand_input(&mut rng, &[m, n]);
            let b = rand_input(&mut rng, &[n]);
            let w = rng::randn_vec(&mut rng, m * n, 1.0);
            cases.push(GradCase {
                name: format!("add_bias/{cu}"),
                inputs: vec![a, b],
                build: Box::new(move |g, v| {
                    let out = g.add_bias(v[0], v[1])?;
                    weighted_loss(g, out, &w)
                }),
            });
        }
        // transpose
        {
            let a = rand_input(&mut rng, &[m, n]);
            let w = rng::randn_vec(&mut rng, m * n, 1.0);
            cases.push(GradCase {
                name: format!("transpose/{cu}"),
                inputs: vec![a],
                build: Box::new(move |g, v| {
                    let out = g.transpose(v[0])?;
                    weighted_loss(g, out, &w)
                }),
            });
        }
        // reshape
        {
            let a = rand_input(&mut rng, &[m, n]);
            let w = rng::randn_vec(&mut rng, m * n, 1.0);
            let new_shape = vec![n, m];
            cases.push(GradCase {
                name: format!("reshape/{cu}"),
                inputs: vec![a],
                build: Box::new(move |g, v| {
                    let out = g.reshape(v[0], &new_shape)?;
                    weighted_loss(g, out, &w)
                }),
            });
        }
        // cols
        {
            let a = rand_input(&mut rng, &[m, 4]);
            let w = rng::randn_vec(&mut rng, m * 2, 1.0);
            let start = c % 3;
            cases.push(GradCase {
                name: format!("cols/{cu}"),
                inputs: vec![a],
                build: Box::new(move |g, v| {
                    let out = g.cols(v[0], start, 2)?;
                    weighted_loss(g, out, &w)
                }),
            });
        }
        // concat_cols
        {
            let a = rand_input(&mut rng, &[m, 2]);
            let b = rand_input(&mut rng, &[m, 3]);
            let w = rng::randn_vec(&mut rng, m * 5, 1.0);
            cases.push(GradCase {
                name: format!("concat_cols/{cu}"),
                inputs: vec![a, b],
                build: Box::new(move |g, v| {
                    let out = g.concat_cols(&[v[0], v[1]])?;
                    weighted_loss(g, out, &w)
                }),
            });
        }
        // gelu
        {
            let a = rand_input(&mut rng, &[m, n]);
            let w = rng::randn_vec(&mut rng, m * n, 1.0);
            cases.push(GradCase {
                name: format!("gelu/{cu}"),
                inputs: vec![a],
                build: Box::new(move |g, v| {
                    let out = g.gelu(v[0]);
                    weighted_loss(g, out, &w)
                }),
            });
        }
        // softmax along both axes
        for axis in [0usize, 1] {
            let a = rand_input(&mut rng, &[m, n]);
            let w = rng::randn_vec(&mut rng, m * n, 1.0);
            cases.push(GradCase {
                name: format!("softmax_axis{axis}/{cu}"),
                inputs: vec![a],
                build: Box::new(move |g, v| {
                    let out = g.softmax(v[0], axis)?;
                    weighted_loss(g, out, &w)
                }),
            });
        }
        // layer_norm (x, gamma, beta)
        {
            let x = rand_input(&mut rng, &[m, 4]);
            let gamma_data: Vec<f64> = rng::uniform_vec(&mut rng, 4)
                .iter()
                .map(|u| 0.5 + u)
                .collect();
            let gamma = (vec![4], gamma_data);
            let beta = rand_input(&mut rng, &[4]);
            let w = rng::randn_vec(&mut rng, m * 4, 1.0);
            cases.push(GradCase {
                name: format!("layer_norm/{cu}"),
                inputs: vec![x, gamma, beta],
                build: Box::new(move |g, v| {
                    let out = g.layer_norm(v[0], v[1], v[2])?;
                    weighted_loss(g, out, &w)
                }),
            });
        }
        // embedding (w.r.t. the table; repeated ids exercise scatter-add)
        {
            let table = rand_input(&mut rng, &[4, 3]);
            let ids = vec![c % 4, (c + 1) % 4, c % 4];
            let w = rng::randn_vec(&mut rng, ids.len() * 3, 1.0);
            cases.push(GradCase {
                name: format!("embedding/{cu}"),
                inputs: vec![table],
                build: Box::new(move |g, v| {
                    let out = g.embedding(v[0], &ids)?;
                    weighted_loss(g, out, &w)
                }),
            });
        }
        // sum_all / mean_all
        for (op_name, is_mean) in [("sum_all", false), ("mean_all", true)] {
            let a = rand_input(&mut rng, &[m, n]);
            cases.push(GradCase {
                name: format!("{op_name}/{cu}"),
                inputs: vec![a],
                build: Box::new(move |g, v| {
                    Ok(if is_mean {
                        g.mean_all(v[0])
                    } else {
                        g.sum_all(v[0])
                    })
                }),
            });
        }
        // cross_entropy (w.r.t. logits), both reductions
        for (red_name, red) in [("mean", Reduction::Mean), ("sum", Reduction::Sum)] {
            let logits = rand_input(&mut rng, &[m, 4]);
            let targets: Vec<usize> = (0..m).map(|i| (i + c) % 4).collect();
            cases.push(GradCase {
                name: format!("cross_entropy_{red_name}/{cu}"),
                inputs: vec![logits],
                build: Box::new(move |g, v| g.cross_entropy(v[0], &targets, red)),
            });
        }
        // Random multi-op compositions.
        {
            let x = rand_input(&mut rng, &[3, 3]);
            let y = rand_input(&mut rng, &[3, 3]);
            let w = rng::randn_vec(&mut rng, 9, 1.0);
            let variant = c % 3;
            cases.push(GradCase {
                name: format!("composite/{cu}"),
                inputs: vec![x, y],
                build: Box::new(move |g, v| {
                    let out = match variant {
                        0 => {
                            let p = g.matmul(v[0], v[1])?;
                            let a = g.gelu(p);
                            g.softmax(a, 1)?
                        }
                        1 => {
                            let t = g.transpose(v[0])?;
                            let s = g.add(t, v[1])?;
                            let p = g.matmul(s, v[0])?;
                            g.scale(p, 0.5)
                        }
                        _ => {
                            let m1 = g.mul(v[0], v[1])?;
                            let s = g.softmax(m1, 0)?;
                            g.matmul(s, v[1])?
                        }
                    };
                    weighted_loss(g, out, &w)
                }),
            });
        }
    }
    cases
}

/// Runs finite-difference checks for every op; returns (ops, cases) on
/// success or the first failure message.
pub fn gradcheck_all_ops(
    seed: u64,
    cases_per_op: usize,
) -> std::result::Result<(usize, usize), String> {
    let cases = all_op_cases(seed, cases_per_op);
    for case in &cases {
        check_case(case)?;
    }
    let mut op_names: Vec<&str> = cases
        .iter()
        .map(|c| c.name.split('/').next().unwrap())
        .collect();
    op_names.sort_unstable();
    op_names.dedup();
    Ok((op_names.len(), cases.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_finite_difference_checks() {
        match gradcheck_all_ops(42, 4) {
            Ok((ops, cases)) => assert!(ops >= 15 && cases >= 60, "{ops} ops, {cases} cases"),
            Err(msg) => panic!("{msg}"),
        }
    }

    #[test]
    fn harness_catches_a_wrong_gradient() {
        // A deliberately wrong "gradient" via mismatched forward: loss uses
        // 2x but we check against x's analytic gradient of sum(x) by
        // constructing a case whose builder is fine; instead corrupt inputs.
        let case = GradCase {
            name: "broken".into(),
            inputs: vec![(vec![2], vec![1.0, 2.0])],
            build: Box::new(|g, v| {
                // Non-differentiable-looking trick: detach by rebuilding a
                // leaf from values, so analytic grad is zero but FD is not.
                let vals = g.data(v[0]).to_vec();
                let detached = g.leaf(vals, &[2], false)?;
                let s = g.mul(detached, detached)?;
                Ok(g.sum_all(s))
            }),
        };
        assert!(check_case(&case).is_err());
    }
}
