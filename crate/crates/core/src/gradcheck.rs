//! Central finite-difference gradient checking against the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{attn_aggr, fuse, sage_aggr, AggrVars};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{bce_loss, bpr_loss, l1_loss};

/// Worst disagreement found between analytic and numeric gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub entries_checked: usize,
}

impl GradCheck {
    /// Near-zero gradient pairs (both below `1e-7`) count as relative
    /// error 0 when they agree to `1e-10` absolute, and infinity otherwise.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error < tol
    }
}

/// Compares tape gradients of a scalar function of `inputs` against central
/// differences with step `h`. `build` must construct a `1 x 1` output from
/// the leaves it is given, using only operations recorded on `tape`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&tape, &leaves)?;
    let grads = tape.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&t, &vars)?;
        let v = t.value(o).item();
        Ok(v)
    };

    let mut report = GradCheck {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        entries_checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].rows(), inputs[k].cols());
        let analytic = grads.get(*leaf).unwrap_or(&zeros).clone();
        for idx in 0..inputs[k].data().len() {
            let orig = inputs[k].data()[idx];
            work[k].data_mut()[idx] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[idx] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[idx];
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale > 1e-7 {
                abs / scale
            } else if abs < 1e-10 {
                0.0
            } else {
                f64::INFINITY
            };
            report.max_relative_error = report.max_relative_error.max(rel);
            report.max_absolute_error = report.max_absolute_error.max(abs);
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

/// Aggregate result of one operation over many random cases.
#[derive(Clone, Copy, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub worst: GradCheck,
}

type Build = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).expect("shape matches data")
}

/// Entries of magnitude at least 0.05, so a step of `1e-4` never crosses
/// the kink of relu or abs.
fn off_kink(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = uniform(rng, rows, cols, 0.05, 1.0);
    for x in t.data_mut() {
        if rng.gen_bool(0.5) {
            *x = -*x;
        }
    }
    t
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

/// Sorted segment ids of `m` rows spread over `n` segments.
fn segments(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
    s.sort_unstable();
    s
}

/// Reduces any output to a scalar through a fixed random weighting, so
/// every output entry contributes its own gradient.
fn readout(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    uniform(rng, rows, cols, -1.0, 1.0)
}

fn weigh(tape: &Tape, y: Var, r: &Tensor) -> Result<Var> {
    let w = tape.constant(r.clone());
    Ok(tape.sum(tape.mul(y, w)?))
}

fn unary(rng: &mut ChaCha8Rng, x: Tensor, f: fn(&Tape, Var) -> Var) -> (Vec<Tensor>, Build) {
    let r = readout(rng, x.rows(), x.cols());
    (vec![x], Box::new(move |t, v| weigh(t, f(t, v[0]), &r)))
}

fn case(op: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Build) {
    let (n, c) = (dim(rng), dim(rng));
    match op {
        "matmul" => {
            let k = dim(rng);
            let r = readout(rng, n, c);
            (
                vec![uniform(rng, n, k, -1.0, 1.0), uniform(rng, k, c, -1.0, 1.0)],
                Box::new(move |t, v| weigh(t, t.matmul(v[0], v[1])?, &r)),
            )
        }
        "add" | "sub" | "mul" => {
            let r = readout(rng, n, c);
            let op = op.to_string();
            (
                vec![uniform(rng, n, c, -1.0, 1.0), uniform(rng, n, c, -1.0, 1.0)],
                Box::new(move |t, v| {
                    let y = match op.as_str() {
                        "add" => t.add(v[0], v[1])?,
                        "sub" => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    weigh(t, y, &r)
                }),
            )
        }
        "add_row" => {
            let r = readout(rng, n, c);
            (
                vec![uniform(rng, n, c, -1.0, 1.0), uniform(rng, 1, c, -1.0, 1.0)],
                Box::new(move |t, v| weigh(t, t.add_row(v[0], v[1])?, &r)),
            )
        }
        "scale" => {
            let s = rng.gen_range(-2.0..2.0);
            let r = readout(rng, n, c);
            (vec![uniform(rng, n, c, -1.0, 1.0)], Box::new(move |t, v| weigh(t, t.scale(v[0], s), &r)))
        }
        "mul_col" => {
            let r = readout(rng, n, c);
            (
                vec![uniform(rng, n, c, -1.0, 1.0), uniform(rng, n, 1, -1.0, 1.0)],
                Box::new(move |t, v| weigh(t, t.mul_col(v[0], v[1])?, &r)),
            )
        }
        "relu" => {
            let x = off_kink(rng, n, c);
            unary(rng, x, Tape::relu)
        }
        "abs" => {
            let x = off_kink(rng, n, c);
            unary(rng, x, Tape::abs)
        }
        "sigmoid" => {
            let x = uniform(rng, n, c, -4.0, 4.0);
            unary(rng, x, Tape::sigmoid)
        }
        "softplus" => {
            let x = uniform(rng, n, c, -4.0, 4.0);
            unary(rng, x, Tape::softplus)
        }
        "sin" => {
            let x = uniform(rng, n, c, -3.0, 3.0);
            unary(rng, x, Tape::sin)
        }
        "log" => {
            let x = uniform(rng, n, c, 0.5, 2.0);
            unary(rng, x, Tape::log)
        }
        "row_sum" => {
            let r = readout(rng, n, 1);
            (vec![uniform(rng, n, c, -1.0, 1.0)], Box::new(move |t, v| weigh(t, t.row_sum(v[0]), &r)))
        }
        "sum" | "mean" => {
            let s = rng.gen_range(0.5..2.0);
            let mean = op == "mean";
            (
                vec![uniform(rng, n, c, -1.0, 1.0)],
                Box::new(move |t, v| {
                    let y = if mean { t.mean(v[0]) } else { t.sum(v[0]) };
                    Ok(t.scale(t.sin(y), s))
                }),
            )
        }
        "concat_cols" => {
            let c2 = dim(rng);
            let r = readout(rng, n, c + c2);
            (
                vec![uniform(rng, n, c, -1.0, 1.0), uniform(rng, n, c2, -1.0, 1.0)],
                Box::new(move |t, v| weigh(t, t.concat_cols(&[v[0], v[1]])?, &r)),
            )
        }
        "slice_cols" => {
            let start = rng.gen_range(0..c);
            let end = rng.gen_range(start + 1..=c);
            let r = readout(rng, n, end - start);
            (
                vec![uniform(rng, n, c, -1.0, 1.0)],
                Box::new(move |t, v| weigh(t, t.slice_cols(v[0], start, end)?, &r)),
            )
        }
        "gather_rows" => {
            let m = rng.gen_range(1..=6);
            let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
            let r = readout(rng, m, c);
            (
                vec![uniform(rng, n, c, -1.0, 1.0)],
                Box::new(move |t, v| weigh(t, t.gather_rows(v[0], &idx)?, &r)),
            )
        }
        "segment_sum" | "segment_mean" => {
            let m = rng.gen_range(1..=8);
            let seg = segments(rng, m, n);
            let r = readout(rng, n, c);
            let mean = op == "segment_mean";
            (
                vec![uniform(rng, m, c, -1.0, 1.0)],
                Box::new(move |t, v| {
                    let y = if mean {
                        t.segment_mean(v[0], &seg, n)?
                    } else {
                        t.segment_sum(v[0], &seg, n)?
                    };
                    weigh(t, y, &r)
                }),
            )
        }
        "segment_softmax" => {
            let m = rng.gen_range(1..=8);
            let seg = segments(rng, m, n);
            let r = readout(rng, m, c);
            (
                vec![uniform(rng, m, c, -2.0, 2.0)],
                Box::new(move |t, v| weigh(t, t.segment_softmax(v[0], &seg)?, &r)),
            )
        }
        "add_scaled_row" => {
            let r = readout(rng, n, c);
            (
                vec![uniform(rng, n, c, -1.0, 1.0), uniform(rng, 1, 1, -1.0, 1.0), uniform(rng, 1, c, -1.0, 1.0)],
                Box::new(move |t, v| weigh(t, t.add_scaled_row(v[0], v[1], v[2])?, &r)),
            )
        }
        "fuse" => {
            let (m, d) = (rng.gen_range(1..=6), dim(rng));
            let r = readout(rng, m, d);
            let mut inputs = vec![uniform(rng, m, d, -1.0, 1.0), uniform(rng, m, d, -1.0, 1.0)];
            inputs.extend((0..2).map(|_| uniform(rng, d, d, -1.0, 1.0)));
            (inputs, Box::new(move |t, v| weigh(t, fuse(t, v[0], v[1], v[2], v[3])?, &r)))
        }
        "attn_aggr" | "sage_aggr" => {
            let heads = rng.gen_range(1..=2);
            let d = heads * rng.gen_range(1..=3);
            let m = rng.gen_range(1..=8);
            let seg = segments(rng, m, n);
            let r = readout(rng, n, d);
            let attention = op == "attn_aggr";
            let mut inputs = vec![uniform(rng, n, d, -1.0, 1.0), uniform(rng, m, d, -1.0, 1.0)];
            let weights = if attention { 4 } else { 2 };
            inputs.extend((0..weights).map(|_| uniform(rng, d, d, -1.0, 1.0)));
            (
                inputs,
                Box::new(move |t, v| {
                    let y = if attention {
                        let w = AggrVars {
                            query_key: Some((v[2], v[3])),
                            value: v[4],
                            proj: v[5],
                        };
                        attn_aggr(t, v[0], v[1], &seg, &w, heads)?
                    } else {
                        let w = AggrVars {
                            query_key: None,
                            value: v[2],
                            proj: v[3],
                        };
                        sage_aggr(t, v[0], v[1], &seg, &w)?
                    };
                    weigh(t, y, &r)
                }),
            )
        }
        "bce_loss" => {
            let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect();
            (vec![uniform(rng, n, 1, -4.0, 4.0)], Box::new(move |t, v| bce_loss(t, v[0], &labels)))
        }
        "l1_loss" => {
            let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let gap = off_kink(rng, n, 1);
            let pred = Tensor::column(target.iter().zip(gap.data()).map(|(t, g)| t + g).collect());
            (vec![pred], Box::new(move |t, v| l1_loss(t, v[0], &target)))
        }
        "bpr_loss" => (
            vec![uniform(rng, n, 1, -3.0, 3.0), uniform(rng, n, 1, -3.0, 3.0)],
            Box::new(|t, v| bpr_loss(t, v[0], v[1])),
        ),
        other => unreachable!("no generator for `{other}`"),
    }
}

/// Every differentiable operation the models are built from.
pub const SUITE_OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "add_row",
    "scale",
    "mul",
    "mul_col",
    "relu",
    "sigmoid",
    "log",
    "sin",
    "abs",
    "softplus",
    "concat_cols",
    "slice_cols",
    "gather_rows",
    "segment_sum",
    "segment_mean",
    "segment_softmax",
    "row_sum",
    "sum",
    "mean",
    "add_scaled_row",
    "fuse",
    "attn_aggr",
    "sage_aggr",
    "bce_loss",
    "l1_loss",
    "bpr_loss",
];

/// Runs `cases` random checks of every operation in [`SUITE_OPS`].
pub fn run_suite(cases: usize, h: f64, seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(SUITE_OPS.len());
    for &op in SUITE_OPS {
        let mut worst = GradCheck {
            max_relative_error: 0.0,
            max_absolute_error: 0.0,
            entries_checked: 0,
        };
        for _ in 0..cases {
            let (inputs, build) = case(op, &mut rng);
            let r = check_gradients(&inputs, h, build)?;
            worst.max_relative_error = worst.max_relative_error.max(r.max_relative_error);
            worst.max_absolute_error = worst.max_absolute_error.max(r.max_absolute_error);
            worst.entries_checked += r.entries_checked;
        }
        out.push(OpReport { op, cases, worst });
    }
    Ok(out)
}
