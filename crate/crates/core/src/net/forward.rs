use super::{ModelConfig, ModelParams};
use crate::autodiff::{channel_moments, Gradients, Tape, Tensor, Var, NORM_EPS};
use crate::deform::Deformation;
use crate::error::{Error, Result};
use crate::grid::{resize_linear, FeatureMap, Field, GridSpec, ScalarField, VectorField};

/// Parameters recorded as leaves of one tape, in layout order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn bind(tape: &mut Tape, params: &ModelParams, requires_grad: bool) -> Self {
        let vars = params.tensors().iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
        Self { vars }
    }

    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of every parameter, zero where nothing flowed.
    pub fn gradients(&self, grads: &Gradients, params: &ModelParams) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
            .collect()
    }
}

fn conv_norm_relu(tape: &mut Tape, x: Var, p: &[Var]) -> Result<Var> {
    let y = tape.conv(x, p[0], p[1])?;
    let y = tape.instance_norm(y, p[2], p[3], NORM_EPS)?;
    Ok(tape.relu(y))
}

fn encode_tape(tape: &mut Tape, image: Var, vars: &ParamVars, config: &ModelConfig) -> Result<Var> {
    if config.encoder_convs == 0 {
        let copies = vec![image; config.start_channels];
        return tape.concat(&copies);
    }
    let mut x = image;
    for (i, p) in vars.vars[..4 * config.encoder_convs].chunks(4).enumerate() {
        let y = tape.conv(x, p[0], p[1])?;
        let moments = channel_moments(tape.value(y));
        if moments.iter().all(|&(m, v)| v <= 1e-12 * (1.0 + m * m)) {
            return Err(Error::DegenerateVariance(format!(
                "encoder block {i} produced constant channels only"
            )));
        }
        let y = tape.instance_norm(y, p[2], p[3], NORM_EPS)?;
        x = tape.relu(y);
    }
    Ok(x)
}

fn flow_tape(tape: &mut Tape, fm: Var, ff: Var, vars: &ParamVars, config: &ModelConfig, level: usize) -> Result<Var> {
    let p = &vars.vars[config.estimator_offset(level)..config.estimator_offset(level) + 14];
    let (s, d) = tape.hadamard_pair(fm, ff)?;
    let mut x = tape.concat(&[s, d])?;
    for j in 0..3 {
        x = conv_norm_relu(tape, x, &p[4 * j..4 * j + 4])?;
    }
    tape.conv(x, p[12], p[13])
}

/// Tape handles of one registration pass, finest level first.
#[derive(Debug, Clone)]
pub struct TapeRegistration {
    pub residuals: Vec<Var>,
    pub phis: Vec<Var>,
    pub warped: Var,
}

/// Differentiable coarse-to-fine registration of `moving` onto `fixed`.
pub fn register_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    config: &ModelConfig,
    moving: Var,
    fixed: Var,
) -> Result<TapeRegistration> {
    let (mv, fv) = (tape.value(moving), tape.value(fixed));
    if mv.shape() != fv.shape() || mv.channels() != 1 {
        return Err(Error::Shape(format!(
            "register: moving {:?} vs fixed {:?}",
            mv.shape(),
            fv.shape()
        )));
    }
    config.check_dims(&mv.vol()?.dims())?;
    let n = config.levels;
    let fm1 = encode_tape(tape, moving, vars, config)?;
    let ff1 = encode_tape(tape, fixed, vars, config)?;
    let (mut fm, mut ff) = (vec![fm1], vec![ff1]);
    for l in 1..n {
        let a = tape.resize(fm[l - 1], 0.5)?;
        let b = tape.resize(ff[l - 1], 0.5)?;
        fm.push(a);
        ff.push(b);
    }
    let k = config.squaring_steps;
    let mut residuals = vec![None; n];
    let mut phis = vec![None; n];
    let u = flow_tape(tape, fm[n - 1], ff[n - 1], vars, config, n)?;
    residuals[n - 1] = Some(u);
    phis[n - 1] = Some(tape.exp_svf(u, k)?);
    for l in (0..n - 1).rev() {
        let coarse = phis[l + 1].expect("filled by the previous level");
        let up = tape.upsample_displacement(coarse)?;
        let want = tape.value(fm[l]).vol()?;
        if tape.value(up).vol()? != want {
            return Err(Error::Shape(format!(
                "upsampled level {} deformation does not match level {} grid {:?}",
                l + 2,
                l + 1,
                want.dims()
            )));
        }
        let warped = tape.warp(fm[l], up)?;
        let u = flow_tape(tape, warped, ff[l], vars, config, l + 1)?;
        let delta = tape.exp_svf(u, k)?;
        residuals[l] = Some(u);
        phis[l] = Some(tape.compose(up, delta)?);
    }
    let phis: Vec<Var> = phis.into_iter().map(|p| p.expect("all levels filled")).collect();
    let warped = tape.warp(moving, phis[0])?;
    Ok(TapeRegistration {
        residuals: residuals.into_iter().map(|u| u.expect("all levels filled")).collect(),
        phis,
        warped,
    })
}

fn check_params_grid(params: &ModelParams, grid: &GridSpec) -> Result<()> {
    params.config().check_dims(grid.dims())
}

/// `N_s`-channel full-resolution features of `image`.
pub fn encode(image: &ScalarField, params: &ModelParams) -> Result<FeatureMap> {
    check_params_grid(params, image.grid())?;
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, params, false);
    let x = tape.constant(Tensor::from_field(image));
    let f = encode_tape(&mut tape, x, &vars, params.config())?;
    tape.value(f).to_field(image.grid())
}

/// Level 1 is `features`; each further level halves the previous one.
pub fn build_feature_pyramid(features: &FeatureMap, levels: usize) -> Result<Vec<FeatureMap>> {
    if levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    let f = 1usize << (levels - 1);
    if let Some(d) = features.grid().dims().iter().find(|&&d| d % f != 0 || d / f < 2) {
        return Err(Error::Config(format!(
            "dimension {d} is not divisible into {levels} pyramid levels"
        )));
    }
    let mut out = vec![features.clone()];
    for l in 1..levels {
        let next = resize_linear(&out[l - 1], 0.5)?;
        out.push(next);
    }
    Ok(out)
}

/// Residual velocity predicted by the level-`level` estimator.
pub fn estimate_flow(fm: &FeatureMap, ff: &FeatureMap, params: &ModelParams, level: usize) -> Result<VectorField> {
    fm.grid().check_same(ff.grid(), "estimate_flow")?;
    let config = params.config();
    if level == 0 || level > config.levels {
        return Err(Error::InvalidArgument(format!(
            "level {level} outside 1..={}",
            config.levels
        )));
    }
    if fm.channels() != config.start_channels || ff.channels() != config.start_channels {
        return Err(Error::Shape(format!(
            "estimator expects {} channels, got {} and {}",
            config.start_channels,
            fm.channels(),
            ff.channels()
        )));
    }
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, params, false);
    let a = tape.constant(Tensor::from_field(fm));
    let b = tape.constant(Tensor::from_field(ff));
    let u = flow_tape(&mut tape, a, b, &vars, config, level)?;
    tape.value(u).to_field(fm.grid())
}

/// Per-level outputs of a registration, finest level first.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub residuals: Vec<VectorField>,
    pub phis: Vec<Deformation>,
    pub warped: ScalarField,
}

impl RegistrationResult {
    /// Final full-resolution deformation.
    pub fn phi(&self) -> &Deformation {
        &self.phis[0]
    }

    pub fn levels(&self) -> usize {
        self.phis.len()
    }
}

/// Registers `moving` onto `fixed` without recording gradients.
pub fn register(moving: &ScalarField, fixed: &ScalarField, params: &ModelParams) -> Result<RegistrationResult> {
    moving.grid().check_same(fixed.grid(), "register")?;
    check_params_grid(params, fixed.grid())?;
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, params, false);
    let m = tape.constant(Tensor::from_field(moving));
    let f = tape.constant(Tensor::from_field(fixed));
    let out = register_tape(&mut tape, &vars, params.config(), m, f)?;
    collect_result(&tape, &out, fixed.grid())
}

pub(crate) fn collect_result(tape: &Tape, out: &TapeRegistration, grid: &GridSpec) -> Result<RegistrationResult> {
    let mut g = grid.clone();
    let mut residuals = Vec::with_capacity(out.phis.len());
    let mut phis = Vec::with_capacity(out.phis.len());
    for (l, (&u, &phi)) in out.residuals.iter().zip(&out.phis).enumerate() {
        if l > 0 {
            g = g.resized(0.5)?;
        }
        residuals.push(tape.value(u).to_field(&g)?);
        phis.push(Deformation::from_displacement(tape.value(phi).to_field(&g)?));
    }
    Ok(RegistrationResult {
        residuals,
        phis,
        warped: tape.value(out.warped).to_field(grid)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config2d(levels: usize) -> ModelConfig {
        ModelConfig {
            start_channels: 4,
            levels,
            ndim: 2,
            ..ModelConfig::default()
        }
    }

    fn image(dims: &[usize], seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarField::from_fn(GridSpec::isotropic(dims).unwrap(), |_| rng.random_range(0.0..1.0)).unwrap()
    }

    fn randomize_flows(params: &mut ModelParams, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = params.names().to_vec();
        for name in names {
            if name.contains(".flow.") {
                for v in params.get_mut(&name).unwrap().data_mut() {
                    *v = rng.random_range(-scale..scale);
                }
            }
        }
    }

    /// Straight-line reimplementation of one Conv-Norm-Act block on planar
    /// 2D data.
    fn block_oracle(x: &[f64], cin: usize, ny: usize, nx: usize, w: &[f64], b: &[f64], gain: &[f64], shift: &[f64], relu: bool) -> Vec<f64> {
        let cout = b.len();
        let m = ny * nx;
        let mut y = vec![0.0; cout * m];
        for co in 0..cout {
            for yy in 0..ny {
                for xx in 0..nx {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (sy, sx) = (yy as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                                if sy >= 0 && sx >= 0 && (sy as usize) < ny && (sx as usize) < nx {
                                    acc += w[((co * cin + ci) * 3 + dy) * 3 + dx] * x[ci * m + sy as usize * nx + sx as usize];
                                }
                            }
                        }
                    }
                    y[co * m + yy * nx + xx] = acc;
                }
            }
        }
        if !relu {
            return y;
        }
        for co in 0..cout {
            let c = &mut y[co * m..(co + 1) * m];
            let mean = c.iter().sum::<f64>() / m as f64;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            for v in c.iter_mut() {
                *v = (gain[co] * (*v - mean) / (var + 1e-5).sqrt() + shift[co]).max(0.0);
            }
        }
        y
    }

    #[test]
    fn fresh_params_give_identity() {
        let c = config2d(3);
        let p = ModelParams::init(&c, 1).unwrap();
        let (m, f) = (image(&[16, 12], 1), image(&[16, 12], 2));
        let r = register(&m, &f, &p).unwrap();
        assert_eq!(r.levels(), 3);
        for (l, phi) in r.phis.iter().enumerate() {
            assert!(phi.is_identity());
            assert_eq!(phi.grid().dims(), &[16 >> l, 12 >> l]);
        }
        assert_eq!(r.warped, m);
    }

    #[test]
    fn encoder_shapes_and_replication() {
        let mut c = config2d(2);
        let p = ModelParams::init(&c, 2).unwrap();
        let img = image(&[8, 8], 3);
        let f = encode(&img, &p).unwrap();
        assert_eq!(f.channels(), 4);
        c.encoder_convs = 0;
        let p0 = ModelParams::init(&c, 2).unwrap();
        let f0 = encode(&img, &p0).unwrap();
        for ch in 0..4 {
            assert_eq!(f0.channel(ch), img.values());
        }
        assert!(matches!(encode(&image(&[8, 7], 1), &p), Err(Error::Config(_))));
    }

    #[test]
    fn zero_encoder_is_degenerate() {
        let c = config2d(2);
        let mut p = ModelParams::init(&c, 2).unwrap();
        for v in p.get_mut("encoder.0.weight").unwrap().data_mut() {
            *v = 0.0;
        }
        for v in p.get_mut("encoder.0.bias").unwrap().data_mut() {
            *v = 0.0;
        }
        assert!(matches!(encode(&image(&[8, 8], 3), &p), Err(Error::DegenerateVariance(_))));
    }

    #[test]
    fn estimator_matches_oracle() {
        let c = config2d(2);
        let mut p = ModelParams::init(&c, 4).unwrap();
        randomize_flows(&mut p, 5, 0.3);
        let g = GridSpec::isotropic(&[6, 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fm = FeatureMap::new(g.clone(), 4, (0..120).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let ff = FeatureMap::new(g.clone(), 4, (0..120).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let u = estimate_flow(&fm, &ff, &p, 2).unwrap();
        let mut x: Vec<f64> = fm.values().iter().zip(ff.values()).map(|(a, b)| a + b).collect();
        x.extend(fm.values().iter().zip(ff.values()).map(|(a, b)| a - b));
        let t = |n: &str| p.get(&format!("estimator.2.{n}")).unwrap().data().to_vec();
        let mut cin = 8;
        for j in 0..3 {
            x = block_oracle(&x, cin, 5, 6, &t(&format!("{j}.weight")), &t(&format!("{j}.bias")), &t(&format!("{j}.gain")), &t(&format!("{j}.shift")), true);
            cin = 8;
        }
        let want = block_oracle(&x, 8, 5, 6, &t("flow.weight"), &t("flow.bias"), &[], &[], false);
        for (a, b) in u.values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let fresh = ModelParams::init(&c, 4).unwrap();
        assert!(estimate_flow(&fm, &ff, &fresh, 1).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pyramid_levels() {
        let g = GridSpec::isotropic(&[16, 8]).unwrap();
        let f = FeatureMap::new(g.clone(), 1, g.vol().iter_coords().map(|p| p[0] as f64).collect()).unwrap();
        let pyr = build_feature_pyramid(&f, 3).unwrap();
        assert_eq!(pyr[2].grid().dims(), &[4, 2]);
        assert_eq!(pyr[2].values()[0], 0.0);
        assert!((pyr[2].values()[3] - 15.0).abs() < 1e-12);
        assert_eq!(build_feature_pyramid(&f, 1).unwrap(), vec![f.clone()]);
        assert!(matches!(build_feature_pyramid(&f, 4), Err(Error::Config(_))));
    }

    #[test]
    fn coarse_levels_ignore_finer_estimators() {
        let c = config2d(3);
        let mut p = ModelParams::init(&c, 9).unwrap();
        randomize_flows(&mut p, 10, 0.05);
        let (m, f) = (image(&[16, 16], 11), image(&[16, 16], 12));
        let a = register(&m, &f, &p).unwrap();
        for v in p.get_mut("estimator.1.0.weight").unwrap().data_mut() {
            *v *= 1.5;
        }
        let b = register(&m, &f, &p).unwrap();
        assert_eq!(a.residuals[1], b.residuals[1]);
        assert_eq!(a.residuals[2], b.residuals[2]);
        assert_ne!(a.residuals[0], b.residuals[0]);
    }
}
