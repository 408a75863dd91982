//! Flow-matching arithmetic shared by the planning and generation experts.
//!
//! Sign convention: the forward path is `x_τ = τ·clean + (1 − τ)·ε`, the
//! regression target is `ε − clean`, and a single denoising step from `τ`
//! subtracts `(1 − τ)·u`. τ = 0 is pure noise, τ = 1 is data.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Default number of Euler steps at inference.
pub const DEFAULT_STEPS: usize = 10;

/// One training tuple of the flow.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub clean: Matrix,
    pub noise: Matrix,
    pub tau: f64,
    pub noised: Matrix,
    pub target: Matrix,
}

impl FlowSample {
    pub fn new(clean: Matrix, noise: Matrix, tau: f64) -> Result<Self> {
        let noised = self::noise(&clean, &noise, tau)?;
        let target = velocity_target(&clean, &noise)?;
        Ok(Self {
            clean,
            noise,
            tau,
            noised,
            target,
        })
    }

    /// Draw `ε ~ N(0, I)` and `τ ~ U[0, 1)` for `clean`.
    pub fn draw<R: Rng + ?Sized>(clean: Matrix, rng: &mut R) -> Self {
        let eps = standard_normal(clean.rows(), clean.cols(), rng);
        let tau = sample_tau(rng);
        Self::new(clean, eps, tau).expect("shapes agree by construction")
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    Ok(())
}

/// `τ·clean + (1 − τ)·eps`.
pub fn noise(clean: &Matrix, eps: &Matrix, tau: f64) -> Result<Matrix> {
    clean.ensure_same_shape(eps, "noise")?;
    check_tau(tau)?;
    Ok(clean.zip_map(eps, |a, e| tau * a + (1.0 - tau) * e))
}

/// `eps − clean`.
pub fn velocity_target(clean: &Matrix, eps: &Matrix) -> Result<Matrix> {
    clean.ensure_same_shape(eps, "velocity_target")?;
    Ok(eps.zip_map(clean, |e, a| e - a))
}

/// `noised − (1 − τ)·u`.
pub fn single_step_denoise(noised: &Matrix, u: &Matrix, tau: f64) -> Result<Matrix> {
    noised.ensure_same_shape(u, "single_step_denoise")?;
    check_tau(tau)?;
    Ok(noised.zip_map(u, |x, v| x - (1.0 - tau) * v))
}

/// Integrate from noise at τ = 0 towards data at τ = 1 with `steps` uniform
/// Euler steps. The drift towards data is `−u`.
pub fn euler_sample<F>(mut velocity_fn: F, eps: &Matrix, steps: usize) -> Result<Matrix>
where
    F: FnMut(&Matrix, f64) -> Result<Matrix>,
{
    if steps == 0 {
        return Err(Error::InvalidArgument("euler_sample needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = eps.clone();
    for k in 0..steps {
        let tau = k as f64 / steps as f64;
        let u = velocity_fn(&x, tau)?;
        x.ensure_same_shape(&u, "velocity field output")?;
        x.scaled_add_assign(-dt, &u);
        if !x.is_finite() {
            return Err(Error::NonFinite {
                stage: "euler_sample".into(),
                step: k,
            });
        }
    }
    Ok(x)
}

/// τ ~ U[0, 1); 1 is excluded so `1 − τ` never vanishes.
pub fn sample_tau<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Sinusoidal embedding of a flow time, `dim` even. The fastest component
/// has angular frequency `scale` in τ.
pub fn time_features(tau: f64, dim: usize, scale: f64) -> Matrix {
    let half = dim / 2;
    let mut out = Matrix::zeros(1, dim);
    let t = tau * scale;
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out.set(0, i, (t * freq).sin());
        out.set(0, half + i, (t * freq).cos());
    }
    out
}
