//! VICReg invariance loss on the invariant embeddings, pixel reconstruction
//! loss, and their weighted combination.

use crate::gradcore::{GradError, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_ssl: f64,
    pub lambda_recon: f64,
    pub sim: f64,
    pub var: f64,
    pub cov: f64,
    /// Target standard deviation of the variance hinge.
    pub gamma: f64,
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_ssl: 1.0, lambda_recon: 1.0, sim: 25.0, var: 25.0, cov: 1.0, gamma: 1.0, eps: 1e-4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), GradError> {
        let all = [self.lambda_ssl, self.lambda_recon, self.sim, self.var, self.cov, self.gamma, self.eps];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(GradError::Contract(format!("loss weights must be finite and nonnegative: {:?}", self)));
        }
        Ok(())
    }

    /// `sim * invariance + var * variance + cov * covariance`.
    pub fn ssl(&self, invariance: f64, variance: f64, covariance: f64) -> f64 {
        self.sim * invariance + self.var * variance + self.cov * covariance
    }

    pub fn total(&self, ssl: f64, recon: f64) -> f64 {
        self.lambda_ssl * ssl + self.lambda_recon * recon
    }
}

/// Unweighted VICReg terms as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct VicregTerms {
    pub invariance: Var,
    pub variance: Var,
    pub covariance: Var,
}

/// Per-step loss values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
    pub recon: f64,
    pub total: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [self.invariance, self.variance, self.covariance, self.recon, self.total].iter().all(|v| v.is_finite())
    }
}

/// Centered embeddings and unbiased per-dimension variance of `z` `[N, d]`.
fn centered<T: Scalar>(tape: &mut Tape<T>, z: Var) -> Result<(Var, Var), GradError> {
    let n = tape.shape(z)[0];
    let mean = tape.mean_axis(z, 0)?;
    let zc = tape.sub(z, mean)?;
    let sq = tape.square(zc);
    let var = tape.mean_axis(sq, 0)?;
    let var = tape.scale(var, T::lit(n as f64 / (n as f64 - 1.0)));
    Ok((zc, var))
}

fn variance_term<T: Scalar>(tape: &mut Tape<T>, var: Var, w: &LossWeights) -> Var {
    let v = tape.add_scalar(var, T::lit(w.eps));
    let std = tape.sqrt(v);
    let neg = tape.scale(std, -T::one());
    let gap = tape.add_scalar(neg, T::lit(w.gamma));
    let hinge = tape.relu(gap);
    tape.mean(hinge)
}

fn covariance_term<T: Scalar>(tape: &mut Tape<T>, zc: Var) -> Result<Var, GradError> {
    let (n, d) = (tape.shape(zc)[0], tape.shape(zc)[1]);
    let zt = tape.transpose(zc)?;
    let c = tape.matmul(zt, zc)?;
    let c = tape.scale(c, T::lit(1.0 / (n as f64 - 1.0)));
    let off = tape.constant(Tensor::from_fn(vec![d, d], |i| if i / d == i % d { T::zero() } else { T::one() }));
    let sq = tape.square(c);
    let masked = tape.mul(sq, off)?;
    let s = tape.sum(masked);
    Ok(tape.scale(s, T::lit(1.0 / d as f64)))
}

/// VICReg terms of two `[N, d]` embedding batches. Variance is averaged over
/// the two views; covariance is summed over them.
pub fn vicreg_loss<T: Scalar>(tape: &mut Tape<T>, z1: Var, z2: Var, w: &LossWeights) -> Result<VicregTerms, GradError> {
    let (s1, s2) = (tape.shape(z1).to_vec(), tape.shape(z2).to_vec());
    if s1.len() != 2 || s1 != s2 {
        return Err(GradError::Shape(format!("vicreg_loss: embeddings {:?} and {:?}", s1, s2)));
    }
    if s1[0] < 2 {
        return Err(GradError::Contract(format!(
            "vicreg_loss needs at least 2 samples for the covariance, got {}",
            s1[0]
        )));
    }
    let invariance = tape.mse(z1, z2)?;
    let (c1, var1) = centered(tape, z1)?;
    let (c2, var2) = centered(tape, z2)?;
    let h1 = variance_term(tape, var1, w);
    let h2 = variance_term(tape, var2, w);
    let hs = tape.add(h1, h2)?;
    let variance = tape.scale(hs, T::lit(0.5));
    let cov1 = covariance_term(tape, c1)?;
    let cov2 = covariance_term(tape, c2)?;
    let covariance = tape.add(cov1, cov2)?;
    Ok(VicregTerms { invariance, variance, covariance })
}

/// Pixel-wise mean squared error against the second view.
pub fn recon_loss<T: Scalar>(tape: &mut Tape<T>, y_recon: Var, v2: Var) -> Result<Var, GradError> {
    tape.mse(y_recon, v2)
}

/// `lambda_ssl * L_SSL + lambda_recon * L_recon`. Terms with a zero weight
/// are left out of the graph, so parameters reached only through them get no
/// gradient.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vicreg: &VicregTerms,
    recon: Option<Var>,
    w: &LossWeights,
) -> Result<Var, GradError> {
    w.validate()?;
    let mut parts = Vec::new();
    if w.lambda_ssl > 0.0 {
        for (v, c) in [(vicreg.invariance, w.sim), (vicreg.variance, w.var), (vicreg.covariance, w.cov)] {
            if c > 0.0 {
                parts.push(tape.scale(v, T::lit(w.lambda_ssl * c)));
            }
        }
    }
    if w.lambda_recon > 0.0 {
        let r = recon.ok_or_else(|| GradError::Contract("lambda_recon > 0 but no reconstruction given".into()))?;
        parts.push(tape.scale(r, T::lit(w.lambda_recon)));
    }
    let mut total = match parts.first() {
        Some(&p) => p,
        None => {
            let zero = tape.constant(Tensor::scalar(T::zero()));
            return Ok(zero);
        }
    };
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    Ok(total)
}

/// Reads the scalar values of a step's loss graph.
pub fn report<T: Scalar>(tape: &Tape<T>, vicreg: &VicregTerms, recon: Option<Var>, total: Var) -> LossReport {
    let f = |v: Var| tape.value(v).item().to_f64().unwrap_or(f64::NAN);
    LossReport {
        invariance: f(vicreg.invariance),
        variance: f(vicreg.variance),
        covariance: f(vicreg.covariance),
        recon: recon.map(f).unwrap_or(0.0),
        total: f(total),
    }
}
