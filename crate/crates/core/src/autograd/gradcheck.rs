//! Central finite-difference checks of reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Step size used throughout the test suite.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }

    pub(crate) fn record(&mut self, m: Mismatch) {
        self.checked += 1;
        if m.rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(m.rel_err);
            self.worst = Some(m);
        }
    }
}

/// Compares the tape gradient of a scalar function of `inputs` against central
/// differences. With `sample_per_input = Some((k, rng))` only `k` random
/// elements of each input are perturbed; otherwise every element is.
pub fn check_gradients<F, R>(
    inputs: &[Tensor],
    f: F,
    h: f64,
    floor: f64,
    mut sample_per_input: Option<(usize, &mut R)>,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    R: Rng,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| {
            v.grad()
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![0.0; v.with_value(Tensor::len)])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        if !loss.item().is_finite() {
            return Err(Error::Numeric("non-finite loss during finite differences".into()));
        }
        Ok(loss.item())
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (input, tensor) in inputs.iter().enumerate() {
        let n = tensor.len();
        let elements: Vec<usize> = match sample_per_input.as_mut() {
            Some((k, rng)) if *k < n => sample(*rng, n, *k).into_vec(),
            _ => (0..n).collect(),
        };
        for element in elements {
            let base = tensor.data()[element];
            work[input].data_mut()[element] = base + h;
            let plus = eval(&work)?;
            work[input].data_mut()[element] = base - h;
            let minus = eval(&work)?;
            work[input].data_mut()[element] = base;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[input][element];
            report.record(Mismatch {
                input,
                element,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric, floor),
            });
        }
    }
    Ok(report)
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap_or_else(|_| unreachable!("shape and data agree"))
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// has a distinct sensitivity.
fn project<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = random_tensor(&y.shape(), &mut rng);
    Ok(y.mul(y.tape().constant(w))?.sum())
}

/// Runs the finite-difference check on every differentiable primitive of the
/// tape at one fixed random configuration. Returns one report per primitive.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use super::nn::{batch_norm1d, dropout, dropout_shared_rows, RunningStats};
    use super::ops::concat;
    use rand_chacha::ChaCha8Rng;

    type Case = (
        &'static str,
        Vec<Vec<usize>>,
        Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>,
    );

    let s = seed;
    let away_from_kinks = |v: f64| {
        if [0.0, -0.5, 0.7].iter().any(|k| (v - k).abs() < 0.05) {
            v + 0.1
        } else {
            v
        }
    };
    let cases: Vec<Case> = vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            Box::new(move |_, v| project(v[0].matmul(v[1])?, s)),
        ),
        (
            "matmul_t",
            vec![vec![3, 4], vec![2, 4]],
            Box::new(move |_, v| project(v[0].matmul_t(v[1])?, s)),
        ),
        (
            "transpose",
            vec![vec![3, 4]],
            Box::new(move |_, v| project(v[0].transpose()?, s)),
        ),
        (
            "add",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(move |_, v| project(v[0].add(v[1])?, s)),
        ),
        (
            "sub",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(move |_, v| project(v[0].sub(v[1])?, s)),
        ),
        (
            "mul",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(move |_, v| project(v[0].mul(v[1])?, s)),
        ),
        (
            "scale",
            vec![vec![3, 4]],
            Box::new(move |_, v| project(v[0].scale(-1.7).add_const(0.4).neg(), s)),
        ),
        (
            "add_row",
            vec![vec![3, 4], vec![4]],
            Box::new(move |_, v| project(v[0].add_row(v[1])?, s)),
        ),
        (
            "mul_row",
            vec![vec![3, 4], vec![4]],
            Box::new(move |_, v| project(v[0].mul_row(v[1])?, s)),
        ),
        (
            "mul_col",
            vec![vec![3, 4], vec![3]],
            Box::new(move |_, v| project(v[0].mul_col(v[1])?, s)),
        ),
        (
            "scale_by",
            vec![vec![3, 4], vec![1]],
            Box::new(move |_, v| project(v[0].scale_by(v[1])?, s)),
        ),
        (
            "sigmoid",
            vec![vec![3, 4]],
            Box::new(move |_, v| project(v[0].sigmoid(), s)),
        ),
        (
            "exp",
            vec![vec![3, 4]],
            Box::new(move |_, v| project(v[0].exp(), s)),
        ),
        (
            "log",
            vec![vec![3, 4]],
            Box::new(move |_, v| project(v[0].mul(v[0])?.add_const(0.5).log()?, s)),
        ),
        (
            "relu",
            vec![vec![3, 4]],
            Box::new(move |_, v| project(v[0].relu(), s)),
        ),
        (
            "clamp",
            vec![vec![3, 4]],
            Box::new(move |_, v| project(v[0].clamp(-0.5, 0.7), s)),
        ),
        (
            "softmax",
            vec![vec![3, 5]],
            Box::new(move |_, v| project(v[0].softmax()?, s)),
        ),
        (
            "layer_norm",
            vec![vec![3, 6], vec![6], vec![6]],
            Box::new(move |_, v| project(v[0].layer_norm(v[1], v[2], 1e-6)?, s)),
        ),
        (
            "batch_norm_train",
            vec![vec![5, 3], vec![3], vec![3]],
            Box::new(move |_, v| {
                project(
                    batch_norm1d(v[0], v[1], v[2], &RunningStats::new(3), true, 1e-5)?.0,
                    s,
                )
            }),
        ),
        (
            "batch_norm_eval",
            vec![vec![5, 3], vec![3], vec![3]],
            Box::new(move |_, v| {
                let running = RunningStats {
                    mean: vec![0.3; 3],
                    var: vec![1.7; 3],
                };
                project(batch_norm1d(v[0], v[1], v[2], &running, false, 1e-5)?.0, s)
            }),
        ),
        (
            "conv1d",
            vec![vec![9, 2], vec![3, 2, 3]],
            Box::new(move |_, v| project(v[0].conv1d(v[1], 2, 1)?, s)),
        ),
        (
            "concat_rows",
            vec![vec![2, 3], vec![1, 3]],
            Box::new(move |_, v| project(concat(&[v[0], v[1]], 0)?, s)),
        ),
        (
            "concat_cols",
            vec![vec![2, 3], vec![2, 1]],
            Box::new(move |_, v| project(concat(&[v[0], v[1]], 1)?, s)),
        ),
        (
            "gather_rows",
            vec![vec![3, 4]],
            Box::new(move |_, v| project(v[0].gather_rows(&[2, 0, 2])?, s)),
        ),
        (
            "select",
            vec![vec![3, 4]],
            Box::new(move |_, v| project(v[0].select(&[0, 5, 0, 11])?, s)),
        ),
        (
            "slice_cols",
            vec![vec![3, 4]],
            Box::new(move |_, v| project(v[0].slice_cols(1, 2)?, s)),
        ),
        (
            "reshape",
            vec![vec![3, 4]],
            Box::new(move |_, v| project(v[0].reshape(&[12])?, s)),
        ),
        ("mean", vec![vec![3, 4]], Box::new(|_, v| Ok(v[0].mean()))),
        (
            "sinusoid",
            vec![vec![1]],
            Box::new(move |_, v| project(v[0].scale(20.0).sinusoid(8)?, s)),
        ),
        (
            "softmax_cross_entropy",
            vec![vec![3, 5]],
            Box::new(|_, v| v[0].softmax_cross_entropy(&[4, 0, 2])),
        ),
        (
            "bce_with_logits",
            vec![vec![6]],
            Box::new(|_, v| v[0].bce_with_logits(&[1.0, 0.0, 0.25, 0.9, 0.0, 1.0])),
        ),
        (
            "smooth_l1",
            vec![vec![6]],
            Box::new(|_, v| v[0].scale(0.4).smooth_l1(&[0.0, 3.0, -3.0, 0.1, 2.5, -0.2])),
        ),
        (
            "dropout",
            vec![vec![3, 4]],
            Box::new(move |_, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let y = dropout(v[0], 0.3, true, &mut rng)?;
                project(dropout_shared_rows(y, 0.3, true, &mut rng)?, s)
            }),
        ),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases.len());
    for (name, shapes, f) in cases {
        let mut inputs: Vec<Tensor> = shapes.iter().map(|sh| random_tensor(sh, &mut rng)).collect();
        if matches!(name, "relu" | "clamp") {
            for x in &mut inputs {
                x.data_mut().iter_mut().for_each(|v| *v = away_from_kinks(*v));
            }
        }
        let report = check_gradients::<_, ChaCha8Rng>(&inputs, &*f, DEFAULT_STEP, DEFAULT_FLOOR, None)?;
        out.push((name, report));
    }
    Ok(out)
}
