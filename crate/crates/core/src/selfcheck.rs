//! Built-in self-test suites behind the `check` command.
//!
//! 1. finite-difference gradients of every tape operation and of the full
//!    registration loss
//! 2. compositional versus additive pyramids on random residuals
//! 3. scaling and squaring against many-step Euler integration
//! 4. inverse consistency of `exp(v)` and `exp(-v)`
//! 6. untrained models emit the identity

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{directional_check, gradient_check, GradCheckReport, Tape, Tensor, Var, NORM_EPS};
use crate::deform::{self, compose, exp_svf, ndv_percent, sdlogj, Deformation};
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, ScalarField, VectorField, Vol};
use crate::net::{self, ModelConfig, ModelParams, ParamVars};
use crate::objectives::{self, LabelPair, LossConfig};
use crate::synth::{self, PhantomKind, PhantomOptions};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
/// Small enough that directional probes of the whole model rarely straddle
/// a ReLU or interpolation-cell boundary.
pub const PIPELINE_FD_STEP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradients = 1,
    Diffeomorphism = 2,
    Integration = 3,
    InverseConsistency = 4,
    ZeroInit = 6,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Gradients,
        Suite::Diffeomorphism,
        Suite::Integration,
        Suite::InverseConsistency,
        Suite::ZeroInit,
    ];

    pub fn number(self) -> usize {
        self as usize
    }

    pub fn from_number(n: usize) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|s| s.number() == n)
            .ok_or_else(|| Error::InvalidArgument(format!("no self-check suite {n}")))
    }

    pub fn title(self) -> &'static str {
        match self {
            Suite::Gradients => "gradients",
            Suite::Diffeomorphism => "diffeomorphism",
            Suite::Integration => "integration",
            Suite::InverseConsistency => "inverse-consistency",
            Suite::ZeroInit => "zero-init",
        }
    }
}

/// One measured quantity with the bound it must respect.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub passed: bool,
}

impl CheckLine {
    fn below(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: format!("< {limit:e}"),
            passed: value < limit,
        }
    }

    fn holds(name: impl Into<String>, value: f64, bound: impl Into<String>, passed: bool) -> Self {
        Self {
            name: name.into(),
            value,
            bound: bound.into(),
            passed,
        }
    }
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {} = {:.6e} ({})", self.name, self.value, self.bound)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub lines: Vec<CheckLine>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    let lines = match suite {
        Suite::Gradients => gradient_suite()?,
        Suite::Diffeomorphism => diffeomorphism_suite()?,
        Suite::Integration => integration_suite()?,
        Suite::InverseConsistency => inverse_suite()?,
        Suite::ZeroInit => zero_init_suite()?,
    };
    Ok(SuiteReport { suite, lines })
}

fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Values with magnitude in `[0.1, 1)` and random sign, away from the ReLU kink.
fn signed_away_from_zero(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

type Op = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Named finite-difference checks of every differentiable tape operation,
/// each on seeded random inputs.
pub fn operation_gradient_checks() -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = &mut rng;
    let cases: Vec<(&str, Op, Vec<Tensor>)> = vec![
        ("add", Box::new(|t, v| t.add(v[0], v[1])), vec![uniform(vec![2, 4, 5], -1., 1., r), uniform(vec![2, 4, 5], -1., 1., r)]),
        ("sub", Box::new(|t, v| t.sub(v[0], v[1])), vec![uniform(vec![2, 4, 5], -1., 1., r), uniform(vec![2, 4, 5], -1., 1., r)]),
        ("mul", Box::new(|t, v| t.mul(v[0], v[1])), vec![uniform(vec![2, 4, 5], -1., 1., r), uniform(vec![2, 4, 5], -1., 1., r)]),
        ("scale", Box::new(|t, v| Ok(t.scale(v[0], -2.5))), vec![uniform(vec![1, 4, 5], -1., 1., r)]),
        ("relu", Box::new(|t, v| Ok(t.relu(v[0]))), vec![signed_away_from_zero(vec![2, 5, 5], r)]),
        (
            "hadamard_pair",
            Box::new(|t, v| {
                let (s, d) = t.hadamard_pair(v[0], v[1])?;
                let dd = t.mul(d, d)?;
                t.mul(s, dd)
            }),
            vec![uniform(vec![2, 4, 4], -1., 1., r), uniform(vec![2, 4, 4], -1., 1., r)],
        ),
        ("concat", Box::new(|t, v| t.concat(&[v[0], v[1], v[0]])), vec![uniform(vec![2, 4, 5], -1., 1., r), uniform(vec![3, 4, 5], -1., 1., r)]),
        ("sum", Box::new(|t, v| Ok(t.sum(v[0]))), vec![uniform(vec![2, 3, 4], -1., 1., r)]),
        ("mean", Box::new(|t, v| Ok(t.mean(v[0]))), vec![uniform(vec![2, 3, 4], -1., 1., r)]),
        (
            "weighted_sum",
            Box::new(|t, v| {
                let a = t.sum(v[0]);
                let b = t.mean(v[1]);
                t.weighted_sum(&[(a, 0.5), (b, -3.0)])
            }),
            vec![uniform(vec![1, 3, 4], -1., 1., r), uniform(vec![2, 3, 4], -1., 1., r)],
        ),
        (
            "conv2d",
            Box::new(|t, v| t.conv(v[0], v[1], v[2])),
            vec![uniform(vec![3, 6, 7], -1., 1., r), uniform(vec![4, 3, 3, 3], -0.5, 0.5, r), uniform(vec![4], -0.5, 0.5, r)],
        ),
        (
            "conv3d",
            Box::new(|t, v| t.conv(v[0], v[1], v[2])),
            vec![uniform(vec![2, 5, 4, 6], -1., 1., r), uniform(vec![3, 2, 3, 3, 3], -0.5, 0.5, r), uniform(vec![3], -0.5, 0.5, r)],
        ),
        (
            "conv1x1",
            Box::new(|t, v| t.conv(v[0], v[1], v[2])),
            vec![uniform(vec![3, 4, 4], -1., 1., r), uniform(vec![2, 3, 1, 1], -0.5, 0.5, r), uniform(vec![2], -0.5, 0.5, r)],
        ),
        (
            "instance_norm",
            Box::new(|t, v| t.instance_norm(v[0], v[1], v[2], NORM_EPS)),
            vec![uniform(vec![3, 5, 6], -1., 1., r), uniform(vec![3], 0.5, 1.5, r), uniform(vec![3], -0.5, 0.5, r)],
        ),
        (
            "warp2d",
            Box::new(|t, v| t.warp(v[0], v[1])),
            vec![uniform(vec![2, 6, 7], -1., 1., r), uniform(vec![2, 6, 7], -1.5, 1.5, r)],
        ),
        (
            "warp3d",
            Box::new(|t, v| t.warp(v[0], v[1])),
            vec![uniform(vec![1, 5, 4, 6], -1., 1., r), uniform(vec![3, 5, 4, 6], -1.5, 1.5, r)],
        ),
        ("resize_down", Box::new(|t, v| t.resize(v[0], 0.5)), vec![uniform(vec![3, 8, 6], -1., 1., r)]),
        ("resize_up", Box::new(|t, v| t.resize(v[0], 2.0)), vec![uniform(vec![2, 3, 4, 3], -1., 1., r)]),
        (
            "compose",
            Box::new(|t, v| t.compose(v[0], v[1])),
            vec![uniform(vec![2, 6, 6], -1., 1., r), uniform(vec![2, 6, 6], -1., 1., r)],
        ),
        ("exp_svf", Box::new(|t, v| t.exp_svf(v[0], 3)), vec![uniform(vec![2, 6, 5], -0.5, 0.5, r)]),
        ("upsample_displacement", Box::new(|t, v| t.upsample_displacement(v[0])), vec![uniform(vec![3, 3, 4, 3], -1., 1., r)]),
        (
            "ncc2d",
            Box::new(|t, v| objectives::ncc_loss(t, v[0], v[1], 3)),
            vec![uniform(vec![1, 7, 8], 0., 1., r), uniform(vec![1, 7, 8], 0., 1., r)],
        ),
        (
            "ncc3d",
            Box::new(|t, v| objectives::ncc_loss(t, v[0], v[1], 3)),
            vec![uniform(vec![1, 5, 6, 5], 0., 1., r), uniform(vec![1, 5, 6, 5], 0., 1., r)],
        ),
        (
            "mse",
            Box::new(|t, v| objectives::mse_loss(t, v[0], v[1])),
            vec![uniform(vec![1, 5, 6], 0., 1., r), uniform(vec![1, 5, 6], 0., 1., r)],
        ),
        (
            "soft_dice",
            Box::new(|t, v| objectives::soft_dice_loss(t, v[0], v[1])),
            vec![uniform(vec![3, 5, 6], 0.05, 1., r), uniform(vec![3, 5, 6], 0.05, 1., r)],
        ),
        ("smoothness2d", Box::new(|t, v| objectives::smoothness(t, v[0])), vec![uniform(vec![2, 6, 7], -1., 1., r)]),
        ("smoothness3d", Box::new(|t, v| objectives::smoothness(t, v[0])), vec![uniform(vec![3, 4, 5, 4], -1., 1., r)]),
    ];
    cases
        .into_iter()
        .map(|(name, op, inputs)| Ok((name.to_string(), gradient_check(op, &inputs, FD_STEP)?)))
        .collect()
}

fn pipeline_inputs() -> Result<(ModelParams, synth::Phantom, synth::Phantom, LossConfig)> {
    let config = ModelConfig {
        start_channels: 4,
        levels: 2,
        ndim: 3,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(&config, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let names: Vec<String> = params.names().to_vec();
    for name in names.iter().filter(|n| n.contains(".flow.")) {
        let t = params.get_mut(name).expect("layout name");
        for v in t.data_mut() {
            *v = rng.random_range(-0.02..0.02);
        }
    }
    let grid = GridSpec::isotropic(&[12, 12, 12])?;
    let options = PhantomOptions {
        labels: 3,
        noise_sigma: 0.02,
        ..PhantomOptions::default()
    };
    let phantom = synth::make_phantom_with(PhantomKind::Blobs, &grid, 5, &options)?;
    let warp = synth::random_diffeo(&grid, 1.5, 2.0, 6)?;
    let (moving, fixed) = synth::make_pair(&phantom, &warp)?;
    let loss = LossConfig {
        ncc_window: 5,
        dice_weight: 1.0,
        levels: 2,
        ..LossConfig::default()
    };
    Ok((params, moving, fixed, loss))
}

/// Directional finite-difference check of the deep-supervised loss with
/// respect to every parameter tensor of a 12^3, two-level model.
pub fn pipeline_gradient_check() -> Result<GradCheckReport> {
    let (params, moving, fixed, loss) = pipeline_inputs()?;
    let config = params.config().clone();
    let op = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let pv = ParamVars::from_vars(vars.to_vec());
        let m = tape.constant(Tensor::from_field(&moving.image));
        let f = tape.constant(Tensor::from_field(&fixed.image));
        let reg = net::register_tape(tape, &pv, &config, m, f)?;
        let labels = Some(LabelPair {
            moving: &moving.labels,
            fixed: &fixed.labels,
        });
        let terms = objectives::deep_supervised_loss(tape, &reg.phis, &reg.residuals, &moving.image, &fixed.image, labels, &loss)?;
        Ok(terms.total)
    };
    directional_check(op, params.tensors(), PIPELINE_FD_STEP, 2)
}

fn gradient_suite() -> Result<Vec<CheckLine>> {
    let mut lines: Vec<CheckLine> = operation_gradient_checks()?
        .into_iter()
        .map(|(name, r)| CheckLine::below(format!("grad {name}"), r.max_rel_error, GRADIENT_TOLERANCE))
        .collect();
    let r = pipeline_gradient_check()?;
    lines.push(CheckLine::below("grad register+loss 12^3 n=2", r.max_rel_error, GRADIENT_TOLERANCE));
    Ok(lines)
}

/// Smooth random field with the given maximum vector norm.
pub(crate) fn smooth_field(grid: &GridSpec, sigma: f64, max_norm: f64, rng: &mut ChaCha8Rng) -> Result<VectorField> {
    let base = synth::smooth_noise(grid, sigma, rng)?;
    Ok(base.scaled(max_norm / base.max_norm()))
}

pub const PYRAMID_TRIALS: u64 = 100;
pub const PYRAMID_RESIDUAL_NORM: f64 = 0.4;
pub const ADDITIVE_AMPLITUDE: f64 = 3.0;
const PYRAMID_SIGMA: f64 = 1.0;

/// NDV percentages `(compositional, additive)` for one seeded residual
/// pyramid on a 32^3 grid with three levels.
pub fn pyramid_trial(seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = GridSpec::isotropic(&[32, 32, 32])?;
    let mut residuals = Vec::with_capacity(3);
    for _ in 0..3 {
        residuals.push(smooth_field(&grid, PYRAMID_SIGMA, PYRAMID_RESIDUAL_NORM, &mut rng)?);
        grid = grid.resized(0.5)?;
    }
    let comp = deform::compose_pyramid(&residuals, deform::DEFAULT_SQUARING_STEPS)?;
    let loud: Vec<VectorField> = residuals.iter().map(|r| r.scaled(ADDITIVE_AMPLITUDE)).collect();
    let add = deform::compose_pyramid_additive(&loud, deform::DEFAULT_SQUARING_STEPS)?;
    Ok((ndv_percent(&comp)?, ndv_percent(&add)?))
}

fn diffeomorphism_suite() -> Result<Vec<CheckLine>> {
    let (mut worst_comp, mut folded, mut unpaired) = (0.0f64, 0usize, 0usize);
    let mut max_add = 0.0f64;
    for seed in 0..PYRAMID_TRIALS {
        let (c, a) = pyramid_trial(seed)?;
        worst_comp = worst_comp.max(c);
        max_add = max_add.max(a);
        folded += usize::from(a > 0.0);
        unpaired += usize::from(a < c);
    }
    Ok(vec![
        CheckLine::holds("max NDV compositional", worst_comp, "= 0", worst_comp == 0.0),
        CheckLine::holds("trials with additive NDV > 0", folded as f64, ">= 1", folded >= 1),
        CheckLine::holds("max NDV additive", max_add, "reported", true),
        CheckLine::holds("trials with NDV(add) < NDV(comp)", unpaired as f64, "= 0", unpaired == 0),
    ])
}

pub const INTEGRATION_FIELDS: u64 = 20;
pub const INTEGRATION_MAX_NORM: f64 = 0.5;
pub const EULER_STEPS: usize = 1024;
const INTEGRATION_SIGMA: f64 = 6.0;
const INTERIOR_MARGIN: usize = 2;

/// The seeded smooth velocity fields shared by suites 3 and 4.
pub fn integration_field(seed: u64) -> Result<VectorField> {
    let grid = GridSpec::isotropic(&[24, 24, 24])?;
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    smooth_field(&grid, INTEGRATION_SIGMA, INTEGRATION_MAX_NORM, &mut rng)
}

/// Clamped trilinear sample of a 3D vector field at a voxel coordinate.
fn trilinear(v: &VectorField, vol: &Vol, p: [f64; 3]) -> [f64; 3] {
    let n = vol.len();
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let hi = (vol.extent(a) - 1) as f64;
        let x = p[a].clamp(0.0, hi);
        let f = x.floor().min((hi - 1.0).max(0.0));
        base[a] = f as usize;
        frac[a] = x - f;
    }
    let mut out = [0.0; 3];
    for corner in 0..8 {
        let mut w = 1.0;
        let mut q = [0usize; 3];
        for a in 0..3 {
            let bit = (corner >> a) & 1;
            q[a] = (base[a] + bit).min(vol.extent(a) - 1);
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        let i = vol.index(q[0], q[1], q[2]);
        for (c, o) in out.iter_mut().enumerate() {
            *o += w * v.values()[c * n + i];
        }
    }
    out
}

/// Endpoint of `dx/dt = v(x)` over unit time by forward Euler.
pub fn euler_endpoint(v: &VectorField, start: [f64; 3], steps: usize) -> [f64; 3] {
    let vol = v.grid().vol();
    let h = 1.0 / steps as f64;
    let mut x = start;
    for _ in 0..steps {
        let s = trilinear(v, &vol, x);
        for a in 0..3 {
            x[a] += h * s[a];
        }
    }
    x
}

/// Largest interior deviation between `exp_svf(v, 7)` and the Euler endpoint.
pub fn integration_error(v: &VectorField) -> Result<f64> {
    let phi = exp_svf(v, deform::DEFAULT_SQUARING_STEPS)?;
    let vol = v.grid().vol();
    let mut worst = 0.0f64;
    for (i, p) in vol.iter_coords().enumerate() {
        if !vol.is_interior(p, INTERIOR_MARGIN) {
            continue;
        }
        let start = [p[0] as f64, p[1] as f64, p[2] as f64];
        let end = euler_endpoint(v, start, EULER_STEPS);
        let u = phi.displacement().at(i);
        let e: f64 = (0..3).map(|a| (start[a] + u[a] - end[a]).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Largest interior norm of `exp(v) o exp(-v)` minus the identity.
pub fn inverse_consistency_error(v: &VectorField) -> Result<f64> {
    let k = deform::DEFAULT_SQUARING_STEPS;
    let round = compose(&exp_svf(v, k)?, &exp_svf(&v.scaled(-1.0), k)?)?;
    let vol = v.grid().vol();
    Ok(round.displacement().max_norm_where(|p| vol.is_interior(p, INTERIOR_MARGIN)))
}

fn integration_suite() -> Result<Vec<CheckLine>> {
    let mut worst = 0.0f64;
    for seed in 0..INTEGRATION_FIELDS {
        worst = worst.max(integration_error(&integration_field(seed)?)?);
    }
    Ok(vec![CheckLine::below("max |exp_svf - euler| (voxels)", worst, 1e-3)])
}

fn inverse_suite() -> Result<Vec<CheckLine>> {
    let mut worst = 0.0f64;
    for seed in 0..INTEGRATION_FIELDS {
        worst = worst.max(inverse_consistency_error(&integration_field(seed)?)?);
    }
    Ok(vec![CheckLine::below("max |exp(v) o exp(-v) - id| (voxels)", worst, 0.05)])
}

/// Registers a seeded pair with freshly initialized parameters and returns
/// the finest deformation and the warped image next to the moving image.
pub fn untrained_registration(dims: &[usize], config: &ModelConfig) -> Result<(Deformation, ScalarField, ScalarField)> {
    let grid = GridSpec::isotropic(dims)?;
    let phantom = synth::make_phantom(PhantomKind::Blobs, &grid, 8)?;
    let warp = synth::random_diffeo(&grid, 2.0, 3.0, 9)?;
    let (moving, fixed) = synth::make_pair(&phantom, &warp)?;
    let params = ModelParams::init(config, 10)?;
    let result = net::register(&moving.image, &fixed.image, &params)?;
    Ok((result.phi().clone(), result.warped, moving.image))
}

fn zero_init_suite() -> Result<Vec<CheckLine>> {
    let cases = [
        (
            vec![32, 32],
            ModelConfig {
                start_channels: 8,
                levels: 4,
                ndim: 2,
                ..ModelConfig::default()
            },
        ),
        (
            vec![16, 16, 16],
            ModelConfig {
                start_channels: 4,
                levels: 3,
                ndim: 3,
                ..ModelConfig::default()
            },
        ),
    ];
    let mut lines = Vec::new();
    for (dims, config) in cases {
        let tag = format!("{}D", dims.len());
        let (phi, warped, moving) = untrained_registration(&dims, &config)?;
        let max_u = phi.displacement().max_norm();
        lines.push(CheckLine::holds(format!("{tag} max |u|"), max_u, "= 0", max_u == 0.0));
        let diff = warped
            .values()
            .iter()
            .zip(moving.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        lines.push(CheckLine::holds(format!("{tag} max |warped - moving|"), diff, "= 0", diff == 0.0));
        let s = sdlogj(&phi)?;
        lines.push(CheckLine::holds(format!("{tag} SDlogJ"), s, "= 0", s == 0.0));
        let ndv = ndv_percent(&phi)?;
        lines.push(CheckLine::holds(format!("{tag} NDV"), ndv, "= 0", ndv == 0.0));
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_numbers() {
        for s in Suite::ALL {
            assert_eq!(Suite::from_number(s.number()).unwrap(), s);
        }
        assert!(Suite::from_number(5).is_err());
    }

    #[test]
    fn euler_on_constant_field_is_a_translation() {
        let g = GridSpec::isotropic(&[6, 6, 6]).unwrap();
        let v = VectorField::constant(g, &[0.25, -0.5, 0.125]).unwrap();
        let end = euler_endpoint(&v, [2.0, 3.0, 2.5], 64);
        for (e, want) in end.iter().zip([2.25, 2.5, 2.625]) {
            assert!((e - want).abs() < 1e-12);
        }
    }

    #[test]
    fn trilinear_reproduces_affine_fields() {
        let g = GridSpec::isotropic(&[5, 6, 4]).unwrap();
        let v = VectorField::from_fn(g.clone(), |p| {
            [p[0] as f64 - 2.0 * p[1] as f64, 0.5 * p[2] as f64, 1.0]
        })
        .unwrap();
        let s = trilinear(&v, &g.vol(), [1.3, 2.7, 0.4]);
        assert!((s[0] - (1.3 - 5.4)).abs() < 1e-12);
        assert!((s[1] - 0.2).abs() < 1e-12);
        assert!((s[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_init_suite_passes() {
        let r = run_suite(Suite::ZeroInit).unwrap();
        assert!(r.passed(), "{:?}", r.lines);
    }
}
