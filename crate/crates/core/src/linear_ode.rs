//! Exact integration of piecewise-affine latent dynamics.
//!
//! On each token interval the latent state follows `ż = A z + b`. The
//! transition over a duration `Δ` is read off the exponential of the
//! augmented generator `Δ·[[A, b], [0, 0]]`, which stays valid for singular
//! `A`. A fixed-step RK4 integrator is provided as an independent oracle
//! and as the integrator of the nonlinear-field benchmark baseline.

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Padé(13) numerator/denominator coefficients.
const PADE13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

/// Largest 1-norm for which Padé(13) is accurate to unit roundoff.
const THETA13: f64 = 5.371_920_351_148_152;

/// States whose magnitude exceeds this abort oracle integration.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// Matrix exponential by scaling and squaring with a Padé(13) approximant.
pub fn expm(a: &Mat) -> Result<Mat> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("expm", format!("{}x{} is not square", n, a.cols())));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite {
            context: "expm input".into(),
        });
    }
    if a.as_slice().iter().all(|&v| v == 0.0) {
        return Ok(Mat::eye(n));
    }
    let norm = a.norm1();
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as u32
    } else {
        0
    };
    let scaled = if squarings > 0 {
        a.scale(0.5f64.powi(squarings as i32))
    } else {
        a.clone()
    };
    let mut e = pade13(&scaled)?;
    for _ in 0..squarings {
        e = e.matmul(&e);
    }
    Ok(e)
}

fn pade13(a: &Mat) -> Result<Mat> {
    let n = a.rows();
    let b = &PADE13;
    let ident = Mat::eye(n);
    let a2 = a.matmul(a);
    let a4 = a2.matmul(&a2);
    let a6 = a4.matmul(&a2);

    let mut w1 = a6.scale(b[13]);
    w1.axpy(b[11], &a4);
    w1.axpy(b[9], &a2);
    let mut w = a6.matmul(&w1);
    w.axpy(b[7], &a6);
    w.axpy(b[5], &a4);
    w.axpy(b[3], &a2);
    w.axpy(b[1], &ident);
    let u = a.matmul(&w);

    let mut z1 = a6.scale(b[12]);
    z1.axpy(b[10], &a4);
    z1.axpy(b[8], &a2);
    let mut v = a6.matmul(&z1);
    v.axpy(b[6], &a6);
    v.axpy(b[4], &a4);
    v.axpy(b[2], &a2);
    v.axpy(b[0], &ident);

    let p = v.add(&u);
    let q = v.sub(&u);
    q.solve(&p)
}

/// Fréchet derivative `L(X, E)` of the exponential at `X` in direction `E`,
/// read from the upper-right block of `exp([[X, E], [0, X]])`.
pub fn expm_frechet(x: &Mat, e: &Mat) -> Result<Mat> {
    let n = x.rows();
    if e.shape() != (n, n) || x.cols() != n {
        return Err(Error::shape("expm_frechet", "X and E must be square and equal size"));
    }
    let en = e.norm1();
    if en == 0.0 {
        return Ok(Mat::zeros(n, n));
    }
    // L is linear in E; rescaling keeps the block norm, and so the squaring
    // count, governed by X.
    let xn = x.norm1().max(1e-3);
    let c = xn / en;
    let mut big = Mat::zeros(2 * n, 2 * n);
    big.set_block(0, 0, x);
    big.set_block(0, n, &e.scale(c));
    big.set_block(n, n, x);
    let out = expm(&big)?;
    Ok(out.block(0, n, n, n).scale(1.0 / c))
}

/// Adjoint of the exponential: given `G = ∂ℓ/∂exp(X)`, returns `∂ℓ/∂X`.
pub fn expm_adjoint(x: &Mat, g: &Mat) -> Result<Mat> {
    expm_frechet(&x.transpose(), g)
}

/// Transition of `ż = A z + b` over `Δ`: `z(t+Δ) = Φ z(t) + ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransition {
    pub phi: Mat,
    pub psi: Vec<f64>,
}

impl AffineTransition {
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let d = self.psi.len();
        (0..d)
            .map(|i| {
                let row = self.phi.row(i);
                row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + self.psi[i]
            })
            .collect()
    }
}

/// Builds `[[A, b], [0, 0]]`.
pub fn augmented_generator(a: &Mat, b: &[f64]) -> Result<Mat> {
    let d = a.rows();
    if a.cols() != d || b.len() != d {
        return Err(Error::shape(
            "augmented_generator",
            format!("A {}x{}, b {}", a.rows(), a.cols(), b.len()),
        ));
    }
    let mut m = Mat::zeros(d + 1, d + 1);
    m.set_block(0, 0, a);
    for (i, &bi) in b.iter().enumerate() {
        m[(i, d)] = bi;
    }
    Ok(m)
}

pub fn augmented_expm(a: &Mat, b: &[f64], delta: f64) -> Result<AffineTransition> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("duration {delta} must be finite and >= 0")));
    }
    if !a.is_finite() || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "augmented_expm inputs".into(),
        });
    }
    let d = a.rows();
    let gen = augmented_generator(a, b)?;
    let e = expm(&gen.scale(delta))?;
    Ok(AffineTransition {
        phi: e.block(0, 0, d, d),
        psi: (0..d).map(|i| e[(i, d)]).collect(),
    })
}

/// One token's latent dynamics on `[t_start, t_end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSegment {
    pub a: Mat,
    pub b: Vec<f64>,
    pub t_start: f64,
    pub t_end: f64,
}

impl LinearSegment {
    pub fn new(a: Mat, b: Vec<f64>, t_start: f64, t_end: f64) -> Result<Self> {
        if !(t_start < t_end) {
            return Err(Error::InvalidArgument(format!(
                "segment interval [{t_start}, {t_end}] is empty"
            )));
        }
        if a.rows() != a.cols() || a.rows() != b.len() {
            return Err(Error::shape("LinearSegment", "A must be d×d and b length d"));
        }
        if !a.is_finite() || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "LinearSegment".into(),
            });
        }
        Ok(LinearSegment {
            a,
            b,
            t_start,
            t_end,
        })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn transition(&self, delta: f64) -> Result<AffineTransition> {
        augmented_expm(&self.a, &self.b, delta)
    }
}

pub fn step_segment(z: &[f64], seg: &LinearSegment, t_from: f64, t_to: f64) -> Result<Vec<f64>> {
    if t_from < seg.t_start || t_to > seg.t_end || t_to < t_from {
        return Err(Error::Interval {
            from: t_from,
            to: t_to,
            start: seg.t_start,
            end: seg.t_end,
        });
    }
    if z.len() != seg.dim() {
        return Err(Error::shape("step_segment", "state length differs from segment dim"));
    }
    Ok(seg.transition(t_to - t_from)?.apply(z))
}

/// Equal-width token boundaries on `[0, 1]`: `k / K` for `k = 0..=K`.
pub fn token_boundaries(k_token: usize) -> Vec<f64> {
    (0..=k_token).map(|k| k as f64 / k_token as f64).collect()
}

/// Index of the segment owning normalized time `t` (the last boundary
/// `≤ t`; `t = 1` belongs to the final segment).
pub fn segment_index(boundaries: &[f64], t: f64) -> usize {
    let k_token = boundaries.len() - 1;
    let mut k = 0;
    while k + 1 < k_token && boundaries[k + 1] <= t {
        k += 1;
    }
    k
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseFlow {
    pub segments: Vec<LinearSegment>,
    pub z0: Vec<f64>,
}

impl PiecewiseFlow {
    pub fn new(segments: Vec<LinearSegment>, z0: Vec<f64>) -> Result<Self> {
        let first = segments
            .first()
            .ok_or_else(|| Error::InvalidArgument("flow needs at least one segment".into()))?;
        if first.t_start != 0.0 || segments.last().map(|s| s.t_end) != Some(1.0) {
            return Err(Error::InvalidArgument("segments must tile [0, 1]".into()));
        }
        for pair in segments.windows(2) {
            if pair[0].t_end != pair[1].t_start {
                return Err(Error::InvalidArgument(
                    "segments must be contiguous and non-overlapping".into(),
                ));
            }
        }
        if segments.iter().any(|s| s.dim() != z0.len()) {
            return Err(Error::shape("PiecewiseFlow", "segment dim differs from z0"));
        }
        Ok(PiecewiseFlow { segments, z0 })
    }

    /// States at every segment start plus the final state at `t = 1`.
    pub fn knot_states(&self) -> Result<Vec<Vec<f64>>> {
        let mut states = Vec::with_capacity(self.segments.len() + 1);
        let mut z = self.z0.clone();
        states.push(z.clone());
        for seg in &self.segments {
            z = seg.transition(seg.t_end - seg.t_start)?.apply(&z);
            states.push(z.clone());
        }
        Ok(states)
    }
}

/// Evaluates the flow at sorted query times in a single left-to-right sweep.
///
/// Knot states come from whole-segment transitions only, and every query is
/// evaluated from its own segment's knot, so values at a given time do not
/// depend on which other times are queried.
pub fn integrate_piecewise(flow: &PiecewiseFlow, query_times: &[f64]) -> Result<Vec<Vec<f64>>> {
    if query_times
        .windows(2)
        .any(|w| !(w[0] <= w[1]))
        || query_times.iter().any(|&t| !(0.0..=1.0).contains(&t))
    {
        return Err(Error::UnsortedQueries);
    }
    let mut boundaries: Vec<f64> = flow.segments.iter().map(|s| s.t_start).collect();
    boundaries.push(1.0);
    let knots = flow.knot_states()?;
    let mut out = Vec::with_capacity(query_times.len());
    for &t in query_times {
        let k = segment_index(&boundaries, t);
        let seg = &flow.segments[k];
        let delta = t - seg.t_start;
        if delta == 0.0 {
            out.push(knots[k].clone());
        } else {
            out.push(seg.transition(delta)?.apply(&knots[k]));
        }
    }
    Ok(out)
}

/// A vector field `ż = f(t, z)`.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, z: &[f64], dz: &mut [f64]);
}

/// `ż = A z + b`.
#[derive(Debug, Clone)]
pub struct AffineField<'a> {
    pub a: &'a Mat,
    pub b: &'a [f64],
}

impl VectorField for AffineField<'_> {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn eval(&self, _t: f64, z: &[f64], dz: &mut [f64]) {
        for (i, out) in dz.iter_mut().enumerate() {
            let row = self.a.row(i);
            *out = row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + self.b[i];
        }
    }
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64])> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64, z: &[f64], dz: &mut [f64]) {
        (self.f)(t, z, dz)
    }
}

/// Reusable RK4 stage buffers.
#[derive(Debug, Clone)]
pub struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    pub fn new(dim: usize) -> Self {
        Rk4Workspace {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    pub fn step<F: VectorField + ?Sized>(&mut self, field: &F, t: f64, z: &mut [f64], h: f64) {
        let n = z.len();
        field.eval(t, z, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = z[i] + 0.5 * h * self.k1[i];
        }
        field.eval(t + 0.5 * h, &self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = z[i] + 0.5 * h * self.k2[i];
        }
        field.eval(t + 0.5 * h, &self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = z[i] + h * self.k3[i];
        }
        field.eval(t + h, &self.tmp, &mut self.k4);
        for i in 0..n {
            z[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Classical fixed-step RK4 from `t0` to `t1`; the final step is shortened
/// to land exactly on `t1`.
pub fn rk4_oracle<F: VectorField + ?Sized>(
    field: &F,
    z0: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt = {dt} must be positive")));
    }
    if z0.len() != field.dim() {
        return Err(Error::shape("rk4_oracle", "z0 length differs from field dim"));
    }
    let mut z = z0.to_vec();
    let mut ws = Rk4Workspace::new(z.len());
    let span = t1 - t0;
    let n_full = (span / dt).floor() as usize;
    let mut t = t0;
    for i in 0..n_full {
        ws.step(field, t, &mut z, dt);
        t = t0 + (i + 1) as f64 * dt;
        check_bound(&z, t)?;
    }
    let rest = t1 - t;
    if rest > dt * 1e-9 {
        ws.step(field, t, &mut z, rest);
        check_bound(&z, t1)?;
    }
    Ok(z)
}

fn check_bound(z: &[f64], t: f64) -> Result<()> {
    let m = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(m <= DIVERGENCE_BOUND) {
        return Err(Error::Divergence { time: t, magnitude: m });
    }
    Ok(())
}
