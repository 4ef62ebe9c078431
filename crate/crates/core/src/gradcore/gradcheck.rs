//! Central finite-difference verification of tape gradients.
//!
//! Graphs are rebuilt in `f64` for every perturbed evaluation, and the output
//! is reduced to a scalar with fixed pseudo-random weights accumulated in
//! `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GradError, OpKind, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOLERANCE: f64 = 1e-3;
/// Magnitude below which errors are measured absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-3;

pub type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, GradError> + Send + Sync>;

/// A named graph with concrete inputs whose gradients can be checked.
pub struct GradCheck {
    pub name: String,
    pub kind: Option<OpKind>,
    inputs: Vec<Tensor<f64>>,
    build: Builder,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOLERANCE
    }
}

impl GradCheck {
    pub fn new(
        name: impl Into<String>,
        kind: Option<OpKind>,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, GradError> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), kind, inputs, build: Box::new(build) }
    }

    pub fn run(&self, fault: Option<OpKind>) -> Result<CheckResult, GradError> {
        let (max_rel_error, checked) = check_gradients(&self.inputs, &self.build, fault)?;
        Ok(CheckResult { name: self.name.clone(), max_rel_error, checked })
    }
}

fn readout_weights(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn evaluate(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, GradError>,
) -> Result<f64, GradError> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let y = tape.value(out).data();
    let w = readout_weights(y.len());
    Ok(y.iter().zip(&w).map(|(a, b)| a * b).sum())
}

/// Compares tape gradients of every input element against central differences.
/// Returns the worst relative error and the number of elements checked.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, GradError>,
    fault: Option<OpKind>,
) -> Result<(f64, usize), GradError> {
    let mut tape = match fault {
        Some(k) => Tape::<f64>::with_fault(k),
        None => Tape::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let seed = readout_weights(tape.value(out).len());
    tape.backward_seeded(out, seed)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].len()];
        let analytic = tape.grad(*var).unwrap_or(&zeros).to_vec();
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + FD_STEP;
            let up = evaluate(&probe, build)?;
            probe[i].data_mut()[j] = x0 - FD_STEP;
            let down = evaluate(&probe, build)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok((worst, checked))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// One check per differentiable operation, each on at most 100 input elements.
pub fn op_suite() -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut r = |shape: &[usize]| uniform(&mut rng, shape, -1.0, 1.0);
    let mut checks = vec![
        GradCheck::new("matmul", Some(OpKind::MatMul), vec![r(&[3, 4]), r(&[4, 5])], |t, v| t.matmul(v[0], v[1])),
        GradCheck::new(
            "matmul_batched_broadcast",
            Some(OpKind::MatMul),
            vec![r(&[2, 3, 4]), r(&[4, 2])],
            |t, v| t.matmul(v[0], v[1]),
        ),
        GradCheck::new(
            "matmul_batched",
            Some(OpKind::MatMul),
            vec![r(&[2, 2, 3]), r(&[2, 3, 2])],
            |t, v| t.matmul(v[0], v[1]),
        ),
        GradCheck::new("add", Some(OpKind::Add), vec![r(&[3, 4]), r(&[4])], |t, v| t.add(v[0], v[1])),
        GradCheck::new("sub", Some(OpKind::Sub), vec![r(&[3, 4]), r(&[3, 4])], |t, v| t.sub(v[0], v[1])),
        GradCheck::new("mul", Some(OpKind::Mul), vec![r(&[2, 3, 4]), r(&[3, 4])], |t, v| t.mul(v[0], v[1])),
        GradCheck::new("scale", Some(OpKind::Scale), vec![r(&[10])], |t, v| Ok(t.scale(v[0], -2.5))),
        GradCheck::new("add_scalar", Some(OpKind::AddScalar), vec![r(&[10])], |t, v| Ok(t.add_scalar(v[0], 0.7))),
        GradCheck::new("gelu", Some(OpKind::Gelu), vec![uniform(&mut ChaCha8Rng::seed_from_u64(1), &[20], -3.0, 3.0)], |t, v| {
            Ok(t.gelu(v[0]))
        }),
        GradCheck::new("square", Some(OpKind::Square), vec![r(&[10])], |t, v| Ok(t.square(v[0]))),
        GradCheck::new("softmax_last", Some(OpKind::Softmax), vec![r(&[3, 5])], |t, v| t.softmax(v[0], 1)),
        GradCheck::new("softmax_inner_axis", Some(OpKind::Softmax), vec![r(&[2, 3, 4])], |t, v| t.softmax(v[0], 1)),
        GradCheck::new(
            "layernorm",
            Some(OpKind::LayerNorm),
            vec![r(&[4, 6]), uniform(&mut ChaCha8Rng::seed_from_u64(2), &[6], 0.5, 1.5), r(&[6])],
            |t, v| t.layernorm(v[0], v[1], v[2], 1e-5),
        ),
        GradCheck::new("reshape", Some(OpKind::Reshape), vec![r(&[2, 6])], |t, v| {
            let x = t.reshape(v[0], &[3, 4])?;
            let w = t.constant(Tensor::from_fn(vec![3, 4], |i| i as f64 * 0.1));
            t.mul(x, w)
        }),
        GradCheck::new("permute", Some(OpKind::Permute), vec![r(&[2, 3, 4])], |t, v| {
            let x = t.permute(v[0], &[2, 0, 1])?;
            let w = t.constant(Tensor::from_fn(vec![4, 2, 3], |i| (i as f64).sin()));
            t.mul(x, w)
        }),
        GradCheck::new("mean_axis", Some(OpKind::MeanAxis), vec![r(&[3, 4, 2])], |t, v| t.mean_axis(v[0], 1)),
        GradCheck::new("sum", Some(OpKind::Sum), vec![r(&[3, 4])], |t, v| Ok(t.sum(v[0]))),
        GradCheck::new("mean", Some(OpKind::Mean), vec![r(&[3, 4])], |t, v| Ok(t.mean(v[0]))),
        GradCheck::new("expand", Some(OpKind::Expand), vec![r(&[2, 3])], |t, v| t.expand(v[0], 1, 4)),
        GradCheck::new("narrow", Some(OpKind::Narrow), vec![r(&[3, 6])], |t, v| t.narrow(v[0], 1, 2, 3)),
        GradCheck::new("concat", Some(OpKind::Concat), vec![r(&[3, 2]), r(&[3, 4])], |t, v| t.concat(v[0], v[1], 1)),
        GradCheck::new("mse", Some(OpKind::Mse), vec![r(&[4, 5]), r(&[4, 5])], |t, v| t.mse(v[0], v[1])),
        GradCheck::new("cross_entropy", Some(OpKind::CrossEntropy), vec![r(&[5, 4])], |t, v| {
            t.cross_entropy(v[0], &[0, 3, 1, 2, 3])
        }),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    checks.push(GradCheck::new("relu", Some(OpKind::Relu), vec![away_from_zero(&mut rng, &[20])], |t, v| {
        Ok(t.relu(v[0]))
    }));
    checks.push(GradCheck::new(
        "sqrt",
        Some(OpKind::Sqrt),
        vec![uniform(&mut rng, &[10], 0.5, 2.0)],
        |t, v| Ok(t.sqrt(v[0])),
    ));
    checks.push(GradCheck::new(
        "composite_two_layer_softmax_mse",
        None,
        vec![r2(&mut rng, &[4, 6]), r2(&mut rng, &[6, 5]), r2(&mut rng, &[5]), r2(&mut rng, &[5, 3]), r2(&mut rng, &[4, 3])],
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add(h, v[2])?;
            let h = t.gelu(h);
            let o = t.matmul(h, v[3])?;
            let p = t.softmax(o, 1)?;
            t.mse(p, v[4])
        },
    ));
    checks
}

fn r2(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_differentiable_op_is_covered() {
        let suite = op_suite();
        for kind in OpKind::DIFFERENTIABLE {
            assert!(suite.iter().any(|c| c.kind == Some(kind)), "no check for {}", kind.name());
        }
    }

    #[test]
    fn suite_passes() {
        for check in op_suite() {
            let r = check.run(None).unwrap();
            assert!(r.passed(), "{} worst relative error {}", r.name, r.max_rel_error);
            assert!(r.checked <= 100);
        }
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let suite = op_suite();
        let check = suite.iter().find(|c| c.kind == Some(OpKind::Softmax)).unwrap();
        let r = check.run(Some(OpKind::Softmax)).unwrap();
        assert!(!r.passed());
    }
}
