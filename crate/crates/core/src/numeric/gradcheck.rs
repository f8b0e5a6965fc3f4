//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Below this magnitude the relative error is meaningless and the absolute
/// error is reported instead.
pub const ZERO_GRAD_FLOOR: f64 = 1e-12;
/// Absolute error accepted regardless of the relative tolerance.
pub const ABS_TOLERANCE: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// Per-parameter error: relative where the gradient is non-negligible,
    /// absolute otherwise.
    pub errors: Vec<f64>,
    /// Largest relative error among parameters whose absolute error exceeds
    /// [`ABS_TOLERANCE`]; the others pass outright.
    pub max_error: f64,
    pub worst_index: Option<usize>,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        // With every absolute error under the floor there is no meaningful
        // relative error to report.
        let rel = match self.worst_index {
            Some(_) => format!("{:.3e}", self.max_error),
            None => "n/a".to_string(),
        };
        format!(
            "{:<28} {:>6} params  max rel err {:>9}  max abs err {:.3e}  tol {:.0e}  {}",
            self.name,
            self.errors.len(),
            rel,
            self.max_abs_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Compares the analytic gradient returned by `f` at `params` with central
/// differences `(f(x+h) − f(x−h)) / 2h`.
///
/// `f` returns `(value, gradient)`; only the value is used at perturbed
/// points. A parameter passes when its relative error is within `tol` or its
/// absolute error is within [`ABS_TOLERANCE`].
pub fn finite_diff_check<F>(
    name: &str,
    mut f: F,
    params: &[f64],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Usage(format!("finite-difference step must be > 0, got {step}")));
    }
    let (v0, analytic) = f(params)?;
    if !v0.is_finite() {
        return Err(Error::Numerical(format!("{name}: objective is {v0} at the base point")));
    }
    if analytic.len() != params.len() {
        return Err(Error::dim(
            "finite_diff_check",
            format!("{} gradient entries for {} params", analytic.len(), params.len()),
        ));
    }
    let mut x = params.to_vec();
    let mut errors = Vec::with_capacity(params.len());
    let mut passed = true;
    let (mut worst_index, mut max_error, mut max_abs_error) = (None, 0.0, 0.0f64);
    for i in 0..params.len() {
        let orig = x[i];
        x[i] = orig + step;
        let (fp, _) = f(&x)?;
        x[i] = orig - step;
        let (fm, _) = f(&x)?;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numerical(format!(
                "{name}: objective is non-finite when perturbing parameter {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * step);
        let abs = (analytic[i] - numeric).abs();
        let scale = analytic[i].abs().max(numeric.abs());
        let err = if scale < ZERO_GRAD_FLOOR { abs } else { abs / scale };
        if abs > ABS_TOLERANCE && abs > tol * scale {
            passed = false;
        }
        if abs > ABS_TOLERANCE && err > max_error {
            max_error = err;
            worst_index = Some(i);
        }
        max_abs_error = max_abs_error.max(abs);
        errors.push(err);
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        errors,
        max_error,
        worst_index,
        max_abs_error,
        tolerance: tol,
        passed,
    })
}

fn split_flat(flat: &[f64], shapes: &[Vec<usize>]) -> Vec<Tensor> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), flat[off..off + n].to_vec()).expect("shape");
            off += n;
            t
        })
        .collect()
}

/// Checks one graph operation: `loss = Σ out ⊙ R` for a fixed random `R`, so
/// the full Jacobian is exercised rather than only its column sums.
pub fn check_graph_op<B>(
    name: &str,
    inputs: &[Tensor],
    build: B,
    weight_seed: u64,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();

    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(weight_seed);
    let n_out: usize = out_shape.iter().product();
    let weights = Tensor::new(
        out_shape,
        (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;

    let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = split_flat(x, &shapes).into_iter().map(|t| g.param(t)).collect();
        let out = build(&mut g, &vars)?;
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        let grads = g.backward(loss)?;
        let grad = vars
            .iter()
            .flat_map(|v| grads.get(*v).expect("leaf grad").data().to_vec())
            .collect();
        Ok((value, grad))
    };
    finite_diff_check(name, f, &flat, step, tol)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from a kink at `±at` so central differences never
/// straddle it.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], at: f64) -> Tensor {
    let mut t = rand_tensor(rng, shape, -2.0, 2.0);
    for v in t.data_mut() {
        for k in [-at, at] {
            if (*v - k).abs() < 1e-2 {
                *v = k + 0.05;
            }
        }
    }
    t
}

/// Randomized gradient checks over every differentiable graph operation.
///
/// Runs `cases` random shape/value draws per operation.
pub fn op_suite(seed: u64, cases: usize, tol: f64) -> Result<Vec<GradCheckReport>> {
    const STEP: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    for case in 0..cases {
        let m = rng.gen_range(1..5);
        let k = rng.gen_range(1..5);
        let n = rng.gen_range(1..5);
        let ws = seed.wrapping_mul(1_000_003).wrapping_add(case as u64);
        let mut run = |name: &str,
                       inputs: Vec<Tensor>,
                       build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>|
         -> Result<()> {
            let r = check_graph_op(&format!("{name}#{case}"), &inputs, build, ws, STEP, tol)?;
            reports.push(r);
            Ok(())
        };

        let a = rand_tensor(&mut rng, &[m, k], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[k, n], -2.0, 2.0);
        run("matmul", vec![a, b], &|g, v| g.matmul(v[0], v[1]))?;

        let a = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        run("transpose", vec![a], &|g, v| g.transpose(v[0]))?;

        let a = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        run("add", vec![a, b], &|g, v| g.add(v[0], v[1]))?;

        let a = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[n], -2.0, 2.0);
        run("add_row_broadcast", vec![a, b], &|g, v| g.add(v[0], v[1]))?;

        let a = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[1], -2.0, 2.0);
        run("sub_scalar_broadcast", vec![a, b], &|g, v| g.sub(v[0], v[1]))?;

        let a = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        run("mul", vec![a, b], &|g, v| g.mul(v[0], v[1]))?;

        let a = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[n], -2.0, 2.0);
        run("mul_row_broadcast", vec![a, b], &|g, v| g.mul(v[0], v[1]))?;

        let a = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        let c: f64 = rng.gen_range(-3.0..3.0);
        run("scale", vec![a], &move |g, v| Ok(g.scale(v[0], c)))?;

        let a = away_from(&mut rng, &[m, n], 0.0);
        run("relu", vec![a], &|g, v| Ok(g.relu(v[0])))?;

        let a = rand_tensor(&mut rng, &[m, n], -4.0, 4.0);
        run("sigmoid", vec![a], &|g, v| Ok(g.sigmoid(v[0])))?;

        let a = rand_tensor(&mut rng, &[m, n], -3.0, 3.0);
        run("tanh", vec![a], &|g, v| Ok(g.tanh(v[0])))?;

        let a = rand_tensor(&mut rng, &[m, n], -3.0, 3.0);
        run("softmax", vec![a], &|g, v| Ok(g.softmax(v[0])))?;

        let a = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[m, k], -2.0, 2.0);
        run("concat_last", vec![a, b], &|g, v| g.concat_last(&[v[0], v[1], v[0]]))?;

        let a = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[k, n], -2.0, 2.0);
        run("concat_rows", vec![a, b], &|g, v| g.concat_rows(&[v[0], v[1]]))?;

        let a = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        let i = rng.gen_range(0..m);
        run("row", vec![a], &move |g, v| g.row(v[0], i))?;

        let a = rand_tensor(&mut rng, &[n], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[n], -2.0, 2.0);
        run("stack_rows", vec![a, b], &|g, v| g.stack_rows(&[v[0], v[1], v[0]]))?;

        let a = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        run("reshape", vec![a], &move |g, v| g.reshape(v[0], &[m * n]))?;

        let a = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        let mask: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.5)).collect();
        run("mask_rows", vec![a], &move |g, v| g.mask_rows(v[0], &mask))?;

        let t = rng.gen_range(1..8);
        let w = rng.gen_range(1..=t);
        let input = rand_tensor(&mut rng, &[t, k], -2.0, 2.0);
        let kernel = rand_tensor(&mut rng, &[w, k, n], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[n], -1.0, 1.0);
        run("conv1d", vec![input, kernel, bias], &|g, v| g.conv1d(v[0], v[1], v[2]))?;

        let x = rand_tensor(&mut rng, &[k], -2.0, 2.0);
        let h = rand_tensor(&mut rng, &[n], -1.0, 1.0);
        let wm = rand_tensor(&mut rng, &[k, 3 * n], -1.0, 1.0);
        let um = rand_tensor(&mut rng, &[n, 3 * n], -1.0, 1.0);
        let bv = rand_tensor(&mut rng, &[3 * n], -1.0, 1.0);
        run("gru_cell", vec![x, h, wm, um, bv], &|g, v| {
            g.gru_cell(v[0], v[1], v[2], v[3], v[4])
        })?;

        let a = away_from(&mut rng, &[m, n], 1.0);
        run("smooth_l1", vec![a], &|g, v| Ok(g.smooth_l1(v[0])))?;

        let a = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        run("sum", vec![a], &|g, v| Ok(g.sum(v[0])))?;

        let a = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        run("mean", vec![a], &|g, v| Ok(g.mean(v[0])))?;

        let a = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        let i = rng.gen_range(0..m * n);
        run("index", vec![a], &move |g, v| g.index(v[0], i))?;

        let r = rand_tensor(&mut rng, &[m * n], 0.05, 0.95);
        let targets: Vec<f64> = (0..m * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        run("soft_bce", vec![r], &move |g, v| g.soft_bce(v[0], &targets, 1e-7))?;
    }
    Ok(reports)
}

/// Merges per-case reports named `op#case` into one report per operation,
/// in first-seen order.
pub fn merge_by_op(reports: &[GradCheckReport]) -> Vec<GradCheckReport> {
    let mut merged: Vec<GradCheckReport> = Vec::new();
    for r in reports {
        let op = r.name.split('#').next().unwrap_or(&r.name);
        let i = match merged.iter().position(|m| m.name == op) {
            Some(i) => i,
            None => {
                merged.push(GradCheckReport {
                    name: op.to_string(),
                    errors: Vec::new(),
                    max_error: 0.0,
                    worst_index: None,
                    max_abs_error: 0.0,
                    tolerance: r.tolerance,
                    passed: true,
                });
                merged.len() - 1
            }
        };
        let m = &mut merged[i];
        if r.max_error > m.max_error {
            m.max_error = r.max_error;
            m.worst_index = r.worst_index.map(|w| m.errors.len() + w);
        }
        m.max_abs_error = m.max_abs_error.max(r.max_abs_error);
        m.errors.extend_from_slice(&r.errors);
        m.passed &= r.passed;
    }
    merged
}
