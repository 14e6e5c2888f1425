//! Synthetic time-varying plants, trajectory generation and partial observation.
//!
//! Plants are stateless generators: the next state depends only on
//! `(x, u, k, seed)`. Process noise for step `k` comes from its own ChaCha
//! stream, so any step can be reproduced in isolation. Ground-truth data is
//! always `f64`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{DdklError, Result};

const NOISE_STREAM_SALT: u64 = 0x6e_6f69_7365;
const INPUT_STREAM_SALT: u64 = 0x69_6e70_7574;
const DIVERGENCE_LIMIT: f64 = 1e12;

/// Parameters of `x(k+1) = A(k) x(k) + B(k) u(k) + w(k)`.
///
/// `A(k) = Q(k) A₀ Q(k)ᵀ` and `B(k) = Q(k) B₀`, where `A₀` is block diagonal
/// with one block per pole and `Q(k) = R(drift_rate·k) Q₀` for a seeded random
/// orthogonal `Q₀` and a chain of Givens rotations `R`. Since `A(k)` is normal,
/// `‖A(k)‖₂` equals the largest pole radius.
#[derive(Debug, Clone, PartialEq)]
pub struct TvlParams {
    /// `(radius, angle)` pairs. Angle 0 yields a 1x1 real block, any other
    /// angle a 2x2 scaled rotation.
    pub poles: Vec<(f64, f64)>,
    /// Rotation angle per step of the drift (radians).
    pub drift_rate: f64,
    pub input_gain: f64,
    pub coupling: InputCoupling,
}

/// How inputs enter the unrotated coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputCoupling {
    /// Seeded Gaussian `B₀`.
    Random,
    /// Every input drives only the first coordinate of the leading block.
    Leading,
}

/// Coupled bank of forced Van der Pol oscillators with drifting damping
/// `μ(k) = μ₀ + amplitude · sin(drift_rate · k · Δt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VdpParams {
    pub mu0: f64,
    pub amplitude: f64,
    pub drift_rate: f64,
    pub input_gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlantKind {
    TimeVaryingLinear(TvlParams),
    VanDerPolDrift(VdpParams),
    /// Recorded trajectory replayed from a CSV file.
    CustomCsv(PathBuf),
}

impl PlantKind {
    pub fn tag(&self) -> &'static str {
        match self {
            PlantKind::TimeVaryingLinear(_) => "time-varying-linear",
            PlantKind::VanDerPolDrift(_) => "van-der-pol-drift",
            PlantKind::CustomCsv(_) => "custom-csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantSpec {
    pub kind: PlantKind,
    pub n: usize,
    pub m: usize,
    /// Sample interval in seconds.
    pub dt: f64,
    /// Process-noise standard deviation per state component.
    pub noise_std: Vec<f64>,
    pub seed: u64,
}

impl PlantSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(DdklError::config("plant.n", "state dimension must be at least 1"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DdklError::config("plant.dt", "sample interval must be positive"));
        }
        if self.noise_std.len() != self.n {
            return Err(DdklError::config(
                "plant.noise_std",
                format!("expected {} entries, got {}", self.n, self.noise_std.len()),
            ));
        }
        if self.noise_std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(DdklError::config("plant.noise_std", "standard deviations must be finite and >= 0"));
        }
        match &self.kind {
            PlantKind::TimeVaryingLinear(p) => {
                let dim: usize = p.poles.iter().map(|&(_, w)| if w == 0.0 { 1 } else { 2 }).sum();
                if dim != self.n {
                    return Err(DdklError::config(
                        "plant.poles",
                        format!("pole blocks span {dim} dimensions, state has {}", self.n),
                    ));
                }
                if p.poles.iter().any(|&(r, w)| !r.is_finite() || !w.is_finite() || r < 0.0) {
                    return Err(DdklError::config("plant.poles", "radii must be finite and non-negative"));
                }
            }
            PlantKind::VanDerPolDrift(_) => {
                if !self.n.is_multiple_of(2) {
                    return Err(DdklError::config("plant.n", "van-der-pol-drift needs an even state dimension"));
                }
            }
            PlantKind::CustomCsv(_) => {}
        }
        Ok(())
    }

    /// Seeded orthogonal base rotation `Q₀`.
    fn base_rotation(&self) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let g = DMatrix::from_fn(self.n, self.n, |_, _| StandardNormal.sample(&mut rng));
        g.qr().q()
    }

    fn rotation(&self, drift_rate: f64, k: usize) -> DMatrix<f64> {
        let mut q = self.base_rotation();
        let phi = drift_rate * k as f64;
        if phi != 0.0 {
            let (s, c) = phi.sin_cos();
            for p in 0..self.n.saturating_sub(1) {
                // left-multiply by a Givens rotation in plane (p, p+1)
                for col in 0..self.n {
                    let (a, b) = (q[(p, col)], q[(p + 1, col)]);
                    q[(p, col)] = c * a - s * b;
                    q[(p + 1, col)] = s * a + c * b;
                }
            }
        }
        q
    }

    /// Ground-truth `(A(k), B(k))` of a time-varying linear plant.
    pub fn linear_matrices(&self, k: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let PlantKind::TimeVaryingLinear(p) = &self.kind else {
            return Err(DdklError::InvalidInput(format!("{} plant has no linear matrices", self.kind.tag())));
        };
        let mut a0 = DMatrix::zeros(self.n, self.n);
        let mut idx = 0;
        for &(r, w) in &p.poles {
            if w == 0.0 {
                a0[(idx, idx)] = r;
                idx += 1;
            } else {
                let (s, c) = w.sin_cos();
                a0[(idx, idx)] = r * c;
                a0[(idx, idx + 1)] = -r * s;
                a0[(idx + 1, idx)] = r * s;
                a0[(idx + 1, idx + 1)] = r * c;
                idx += 2;
            }
        }
        let b0 = match p.coupling {
            InputCoupling::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1));
                let scale = p.input_gain / (self.n as f64).sqrt();
                DMatrix::from_fn(self.n, self.m, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
            }
            InputCoupling::Leading => {
                let mut b = DMatrix::zeros(self.n, self.m);
                b.row_mut(0).fill(p.input_gain);
                b
            }
        };
        let q = self.rotation(p.drift_rate, k);
        Ok((&q * a0 * q.transpose(), q * b0))
    }

    fn vdp_rhs(&self, p: &VdpParams, mu: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut dx = DVector::zeros(self.n);
        for osc in 0..self.n / 2 {
            let (x1, x2) = (x[2 * osc], x[2 * osc + 1]);
            let force = if self.m > 0 { p.input_gain * u[osc % self.m] } else { 0.0 };
            dx[2 * osc] = x2;
            dx[2 * osc + 1] = mu * (1.0 - x1 * x1) * x2 - x1 + force;
        }
        dx
    }

    /// Noise draw `w(k)`, reproducible from `(seed, k)` alone.
    pub fn noise(&self, k: usize) -> DVector<f64> {
        if self.noise_std.iter().all(|&s| s == 0.0) {
            return DVector::zeros(self.n);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ NOISE_STREAM_SALT);
        rng.set_stream(k as u64);
        DVector::from_iterator(
            self.n,
            self.noise_std.iter().map(|&s| {
                let z: f64 = StandardNormal.sample(&mut rng);
                s * z
            }),
        )
    }
}

/// Advances the plant one sample.
pub fn step(plant: &PlantSpec, x: &DVector<f64>, u: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
    if x.len() != plant.n {
        return Err(DdklError::dims("plant state", plant.n, x.len()));
    }
    if u.len() != plant.m {
        return Err(DdklError::dims("plant input", plant.m, u.len()));
    }
    let next = match &plant.kind {
        PlantKind::TimeVaryingLinear(_) => {
            let (a, b) = plant.linear_matrices(k)?;
            a * x + b * u
        }
        PlantKind::VanDerPolDrift(p) => {
            let mu = p.mu0 + p.amplitude * (p.drift_rate * k as f64 * plant.dt).sin();
            rk4(|s| plant.vdp_rhs(p, mu, s, u), x, plant.dt)
        }
        PlantKind::CustomCsv(_) => {
            return Err(DdklError::InvalidInput("custom-csv plants replay data and cannot be stepped".into()))
        }
    } + plant.noise(k);
    if next.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
        return Err(DdklError::Divergence { k });
    }
    Ok(next)
}

/// Classic fourth-order Runge–Kutta step.
pub fn rk4(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, dt: f64) -> DVector<f64> {
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (dt / 2.0)));
    let k3 = f(&(x + &k2 * (dt / 2.0)));
    let k4 = f(&(x + &k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Input signal applied during data collection.
#[derive(Debug, Clone, PartialEq)]
pub enum InputPolicy {
    Zero,
    /// Independent uniform draws in `[low, high]` per component and step.
    Uniform { low: f64, high: f64, seed: u64 },
    /// Explicit input sequence, one row per step.
    Scripted(Vec<Vec<f64>>),
}

impl InputPolicy {
    pub fn input(&self, m: usize, k: usize) -> Result<DVector<f64>> {
        match self {
            InputPolicy::Zero => Ok(DVector::zeros(m)),
            InputPolicy::Uniform { low, high, seed } => {
                #[allow(clippy::neg_cmp_op_on_partial_ord)]
                if !(low <= high) {
                    return Err(DdklError::config("input", "uniform input box needs low <= high"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ INPUT_STREAM_SALT);
                rng.set_stream(k as u64);
                Ok(DVector::from_fn(m, |_, _| if low == high { *low } else { rng.random_range(*low..=*high) }))
            }
            InputPolicy::Scripted(rows) => {
                let row = rows.get(k).ok_or(DdklError::InsufficientData { needed: k + 1, available: rows.len() })?;
                if row.len() != m {
                    return Err(DdklError::dims(format!("scripted input row {k}"), m, row.len()));
                }
                Ok(DVector::from_column_slice(row))
            }
        }
    }
}

/// Consecutive samples `x(0..=T)` with inputs `u(0..T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `n x (T+1)`.
    pub states: DMatrix<f64>,
    /// `m x T`.
    pub inputs: DMatrix<f64>,
    /// Plant kind tag the data came from.
    pub source: String,
}

impl Trajectory {
    /// Number of state samples.
    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.ncols() == 0
    }

    pub fn horizon(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn state(&self, k: usize) -> DVector<f64> {
        self.states.column(k).into_owned()
    }

    /// CSV with header `k,x1..xn,u1..um`; the final row has empty input fields.
    pub fn to_csv(&self) -> String {
        let (n, m) = (self.states.nrows(), self.inputs.nrows());
        let mut out = String::from("k");
        (1..=n).for_each(|i| {
            let _ = write!(out, ",x{i}");
        });
        (1..=m).for_each(|i| {
            let _ = write!(out, ",u{i}");
        });
        out.push('\n');
        for k in 0..self.len() {
            let _ = write!(out, "{k}");
            for v in self.states.column(k).iter() {
                let _ = write!(out, ",{v}");
            }
            for i in 0..m {
                if k < self.horizon() {
                    let _ = write!(out, ",{}", self.inputs[(i, k)]);
                } else {
                    out.push(',');
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| DdklError::Parse("empty trajectory csv".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"k") {
            return Err(DdklError::Parse("trajectory header must start with `k`".into()));
        }
        let n = cols.iter().filter(|c| c.starts_with('x')).count();
        let m = cols.iter().filter(|c| c.starts_with('u')).count();
        let expected: Vec<String> = std::iter::once("k".to_string())
            .chain((1..=n).map(|i| format!("x{i}")))
            .chain((1..=m).map(|i| format!("u{i}")))
            .collect();
        if cols != expected {
            return Err(DdklError::Parse(format!("trajectory header must read `{}`", expected.join(","))));
        }
        if n == 0 {
            return Err(DdklError::Parse("trajectory has no state columns".into()));
        }
        let mut states: Vec<f64> = Vec::new();
        let mut inputs: Vec<Option<Vec<f64>>> = Vec::new();
        for (expected_k, (line_no, line)) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let ctx = |msg: String| DdklError::Parse(format!("line {}: {msg}", line_no + 1));
            if fields.len() != 1 + n + m {
                return Err(ctx(format!("expected {} fields, found {}", 1 + n + m, fields.len())));
            }
            let k: usize = fields[0].parse().map_err(|_| ctx(format!("bad index `{}`", fields[0])))?;
            if k != expected_k {
                return Err(ctx(format!("index {k} breaks consecutiveness (expected {expected_k})")));
            }
            let num = |s: &str| -> Result<f64> {
                let v: f64 = s.parse().map_err(|_| ctx(format!("bad number `{s}`")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(ctx(format!("non-finite value `{s}`")))
                }
            };
            for s in &fields[1..=n] {
                states.push(num(s)?);
            }
            let u_fields = &fields[1 + n..];
            if m > 0 && u_fields.iter().all(|s| s.is_empty()) {
                inputs.push(None);
            } else {
                inputs.push(Some(u_fields.iter().map(|s| num(s)).collect::<Result<_>>()?));
            }
        }
        let len = inputs.len();
        if len == 0 {
            return Err(DdklError::InsufficientData { needed: 1, available: 0 });
        }
        let horizon = len - 1;
        let mut u = DMatrix::zeros(m, horizon);
        for (k, row) in inputs.iter().take(horizon).enumerate() {
            match row {
                Some(vals) => u.column_mut(k).copy_from_slice(vals),
                None if m > 0 => {
                    return Err(DdklError::Parse(format!("sample {k}: missing inputs before the final row")))
                }
                None => {}
            }
        }
        Ok(Self { states: DMatrix::from_vec(n, len, states), inputs: u, source: "custom-csv".into() })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Rolls the plant forward `horizon` steps from `x0`.
///
/// Custom-CSV plants ignore `x0` and `policy` and return the first
/// `horizon + 1` recorded samples.
pub fn simulate(plant: &PlantSpec, x0: &DVector<f64>, policy: &InputPolicy, horizon: usize) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(DdklError::InvalidInput("horizon must be at least 1".into()));
    }
    plant.validate()?;
    if let PlantKind::CustomCsv(path) = &plant.kind {
        let traj = Trajectory::load_csv(path)?;
        if traj.states.nrows() != plant.n || traj.inputs.nrows() != plant.m {
            return Err(DdklError::dims(
                "custom-csv trajectory",
                format!("n={}, m={}", plant.n, plant.m),
                format!("n={}, m={}", traj.states.nrows(), traj.inputs.nrows()),
            ));
        }
        if traj.len() < horizon + 1 {
            return Err(DdklError::InsufficientData { needed: horizon + 1, available: traj.len() });
        }
        return Ok(Trajectory {
            states: traj.states.columns(0, horizon + 1).into_owned(),
            inputs: traj.inputs.columns(0, horizon).into_owned(),
            source: plant.kind.tag().into(),
        });
    }
    if x0.len() != plant.n {
        return Err(DdklError::dims("initial state", plant.n, x0.len()));
    }
    let mut states = DMatrix::zeros(plant.n, horizon + 1);
    let mut inputs = DMatrix::zeros(plant.m, horizon);
    states.set_column(0, x0);
    let mut x = x0.clone();
    for k in 0..horizon {
        let u = policy.input(plant.m, k)?;
        x = step(plant, &x, &u, k)?;
        inputs.set_column(k, &u);
        states.set_column(k + 1, &x);
    }
    Ok(Trajectory { states, inputs, source: plant.kind.tag().into() })
}

/// Seeded Gaussian initial state with the given standard deviation.
pub fn random_initial_state(n: usize, std: f64, seed: u64) -> Result<DVector<f64>> {
    let normal = Normal::new(0.0, std).map_err(|e| DdklError::config("initial_state_std", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(DVector::from_fn(n, |_, _| normal.sample(&mut rng)))
}

/// `y = C x`.
pub fn observe(c: &DMatrix<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    if c.ncols() != x.len() {
        return Err(DdklError::dims("observation", c.ncols(), x.len()));
    }
    Ok(c * x)
}

/// `C` applied to every state column.
pub fn observe_all(c: &DMatrix<f64>, states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if c.ncols() != states.nrows() {
        return Err(DdklError::dims("observation", c.ncols(), states.nrows()));
    }
    Ok(c * states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::{prop_assert, proptest};

    fn tvl(noise: f64) -> PlantSpec {
        PlantSpec {
            kind: PlantKind::TimeVaryingLinear(TvlParams {
                poles: vec![(0.95, 0.3), (0.9, 0.0), (0.8, 0.7), (0.5, 0.0)],
                drift_rate: 0.01,
                input_gain: 0.5,
                coupling: InputCoupling::Random,
            }),
            n: 6,
            m: 2,
            dt: 0.1,
            noise_std: vec![noise; 6],
            seed: 3,
        }
    }

    fn vdp(drift: f64) -> PlantSpec {
        PlantSpec {
            kind: PlantKind::VanDerPolDrift(VdpParams { mu0: 1.2, amplitude: 0.5, drift_rate: drift, input_gain: 1.0 }),
            n: 2,
            m: 1,
            dt: 0.1,
            noise_std: vec![0.0; 2],
            seed: 1,
        }
    }

    #[test]
    fn origin_is_fixed_point_of_linear_plant() {
        let p = tvl(0.0);
        let x = step(&p, &DVector::zeros(6), &DVector::zeros(2), 17).unwrap();
        assert_eq!(x, DVector::zeros(6));
    }

    #[test]
    fn frozen_van_der_pol_matches_independent_rk4() {
        let p = vdp(0.0);
        let (x1, x2, u, mu, h) = (0.7_f64, -0.3_f64, 0.25_f64, 1.2_f64, 0.1_f64);
        // scalar RK4 written out by hand
        let f = |a: f64, b: f64| (b, mu * (1.0 - a * a) * b - a + u);
        let (k1a, k1b) = f(x1, x2);
        let (k2a, k2b) = f(x1 + h / 2.0 * k1a, x2 + h / 2.0 * k1b);
        let (k3a, k3b) = f(x1 + h / 2.0 * k2a, x2 + h / 2.0 * k2b);
        let (k4a, k4b) = f(x1 + h * k3a, x2 + h * k3b);
        let ea = x1 + h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a);
        let eb = x2 + h / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b);
        let next = step(&p, &dvector![x1, x2], &dvector![u], 40).unwrap();
        assert!((next[0] - ea).abs() < 1e-14 && (next[1] - eb).abs() < 1e-14);
    }

    #[test]
    fn noisy_step_is_reproducible() {
        let p = tvl(0.05);
        let x = DVector::from_element(6, 1.0);
        let u = dvector![0.1, -0.2];
        assert_eq!(step(&p, &x, &u, 5).unwrap(), step(&p, &x, &u, 5).unwrap());
        assert_ne!(step(&p, &x, &u, 5).unwrap(), step(&p, &x, &u, 6).unwrap());
    }

    #[test]
    fn horizon_one_is_one_step() {
        let p = tvl(0.01);
        let x0 = DVector::from_element(6, 0.5);
        let policy = InputPolicy::Uniform { low: -1.0, high: 1.0, seed: 4 };
        let traj = simulate(&p, &x0, &policy, 1).unwrap();
        let u0 = policy.input(2, 0).unwrap();
        assert_eq!(traj.len(), 2);
        assert_eq!(traj.state(1), step(&p, &x0, &u0, 0).unwrap());
    }

    #[test]
    fn zero_input_stable_plant_contracts_by_spectral_radius() {
        let p = tvl(0.0);
        let traj = simulate(&p, &DVector::from_element(6, 1.0), &InputPolicy::Zero, 60).unwrap();
        for k in 0..60 {
            let (a, _) = p.linear_matrices(k).unwrap();
            let rho = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!((rho - 0.95).abs() < 1e-10);
            assert!(traj.state(k + 1).norm() <= rho * traj.state(k).norm() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn experiment_shaped_trajectory() {
        let p = tvl(0.01);
        let policy = InputPolicy::Uniform { low: -1.0, high: 1.0, seed: 9 };
        let traj = simulate(&p, &DVector::zeros(6), &policy, 200).unwrap();
        assert_eq!(traj.states.shape(), (6, 201));
        assert_eq!(traj.inputs.shape(), (2, 200));
        let again = simulate(&p, &DVector::zeros(6), &policy, 200).unwrap();
        assert_eq!(traj, again);
    }

    #[test]
    fn divergence_reports_step() {
        let mut p = tvl(0.0);
        if let PlantKind::TimeVaryingLinear(params) = &mut p.kind {
            params.poles = vec![(1e5, 0.0); 6];
        }
        let err = simulate(&p, &DVector::from_element(6, 1.0), &InputPolicy::Zero, 10).unwrap_err();
        assert!(matches!(err, DdklError::Divergence { k: 2 }));
    }

    #[test]
    fn observations() {
        let x = DVector::from_fn(6, |i, _| i as f64 + 1.0);
        assert_eq!(observe(&DMatrix::identity(6, 6), &x).unwrap(), x);
        let c5 = dmatrix![0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let mut e6 = DVector::zeros(6);
        e6[5] = 1.0;
        assert_eq!(observe(&c5, &e6).unwrap(), dvector![1.0]);
        let c1 = dmatrix![4.0 / 7.0, 3.0 / 7.0, 0.0, 0.0, 0.0, 0.0];
        let y = observe(&c1, &DVector::from_element(6, 7.0)).unwrap();
        assert!((y[0] - 7.0).abs() < 1e-14);
        assert!(observe(&c1, &DVector::zeros(5)).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let p = tvl(0.02);
        let policy = InputPolicy::Uniform { low: -1.0, high: 1.0, seed: 2 };
        let traj = simulate(&p, &DVector::from_element(6, 0.1), &policy, 15).unwrap();
        let text = traj.to_csv();
        assert!(text.starts_with("k,x1,x2,x3,x4,x5,x6,u1,u2\n"));
        assert!(text.lines().last().unwrap().ends_with(",,"));
        let back = Trajectory::from_csv(&text).unwrap();
        assert_eq!(back.states, traj.states);
        assert_eq!(back.inputs, traj.inputs);
    }

    #[test]
    fn csv_ingestion_validates() {
        let skip = "k,x1,u1\n0,1.0,0.5\n2,1.0,\n";
        assert!(Trajectory::from_csv(skip).unwrap_err().to_string().contains("consecutiveness"));
        let nan = "k,x1,u1\n0,NaN,0.5\n1,1.0,\n";
        assert!(Trajectory::from_csv(nan).unwrap_err().to_string().contains("non-finite"));
    }

    proptest! {
        #[test]
        fn observe_is_linear(a in -5.0f64..5.0, b in -5.0f64..5.0, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = DMatrix::from_fn(2, 6, |_, _| rng.random_range(-1.0..1.0));
            let x = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let z = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let lhs = observe(&c, &(&x * a + &z * b)).unwrap();
            let rhs = observe(&c, &x).unwrap() * a + observe(&c, &z).unwrap() * b;
            prop_assert!((lhs - rhs).norm() < 1e-13);
        }
    }
}
