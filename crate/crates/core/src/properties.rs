//! Numeric checks of the generator's per-layer scale invariance and of the
//! many-to-one correspondence between W/Z codes and style codes.

use serde::Serialize;

use crate::adam::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::linalg::{least_squares, LeastSquares};
use crate::rng::{derive_seed, sample_standard_normal, RngState};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const SCALE_TOLERANCE: f64 = 1e-9;
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;
pub const STYLE_TOLERANCE: f64 = 1e-8;
pub const PIXEL_TOLERANCE: f64 = 1e-6;
pub const Z_PRIME_TOLERANCE: f64 = 1e-3;
/// Beyond this the z′ search counts as not converged.
pub const Z_PRIME_FAILURE: f64 = 1e-2;

pub const SUITE_SCALES: [f64; 4] = [0.1, 1.0, 2.5, 10.0];
pub const CHAIN_SCALES: [f64; 2] = [0.5, 3.0];

const W_PURPOSE: u64 = 0x5052_4F57;
const NOISE_PURPOSE: u64 = 0x5052_4F4E;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyReport {
    pub check: String,
    pub seed: u64,
    pub layer: usize,
    pub a: f64,
    /// Primary measured deviation (≥ 0).
    pub deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub style_deviation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel_deviation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl PropertyReport {
    fn new(check: &str, seed: u64, layer: usize, a: f64, deviation: f64, tolerance: f64) -> Self {
        Self {
            check: check.to_string(),
            seed,
            layer,
            a,
            deviation,
            tolerance,
            passed: deviation < tolerance,
            residual: None,
            style_deviation: None,
            pixel_deviation: None,
            note: None,
        }
    }
}

/// The `w` used by checks seeded with `seed`.
pub fn probe_w(g: &Generator, seed: u64) -> Result<Tensor> {
    g.mapping(&g.sample_z(derive_seed(seed, W_PURPOSE), 0)?)
}

/// Pixel deviation after scaling style layer `l` by `a`, with ε = 0.
pub fn check_scale_invariance(g: &Generator, seed: u64, l: usize, a: f64) -> Result<PropertyReport> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::invalid(format!("scale must be positive, got {}", a)));
    }
    if l >= g.k() {
        return Err(Error::invalid(format!("layer {} out of range 0..{}", l, g.k())));
    }
    let g0 = g.with_epsilon(0.0)?;
    let styles = g0.styles_from_w(&probe_w(g, seed)?)?;
    let mut scaled = styles.clone();
    scaled[l] = scaled[l].scale(a);
    let x = g0.synthesize(&styles)?;
    let y = g0.synthesize(&scaled)?;
    Ok(PropertyReport::new(
        "scale_invariance",
        seed,
        l,
        a,
        x.max_abs_diff(&y),
        SCALE_TOLERANCE,
    ))
}

/// Minimal-norm `y` with `A y ≈ (a − 1) b`.
pub fn solve_alignment_shift(a_mat: &Tensor, b: &Tensor, a: f64) -> Result<LeastSquares> {
    let rhs: Vec<f64> = b.data().iter().map(|v| (a - 1.0) * v).collect();
    least_squares(a_mat, &rhs)
}

#[derive(Clone, Debug)]
pub struct WPrime {
    pub w_prime: Tensor,
    pub y: Tensor,
    pub residual: f64,
    pub rank: usize,
    /// `‖F_l(w′) − a F_l(w)‖ / ‖a F_l(w)‖`.
    pub deviation: f64,
}

/// `w′ = a w + y` whose style at layer `l` is `a` times that of `w`.
pub fn construct_w_prime(g: &Generator, w: &Tensor, l: usize, a: f64) -> Result<WPrime> {
    let s = g.affine(w, l)?;
    if s.norm() == 0.0 {
        return Err(Error::ZeroNorm(format!("style layer {} is zero", l)));
    }
    let aff = &g.affines[l];
    let ls = solve_alignment_shift(&aff.weight, &aff.bias, a)?;
    let y = Tensor::vector(ls.solution.clone());
    let w_prime = w.scale(a).add(&y)?;
    let target = s.scale(a);
    let deviation = g.affine(&w_prime, l)?.sub(&target)?.norm() / target.norm();
    Ok(WPrime {
        w_prime,
        y,
        residual: ls.residual,
        rank: ls.rank,
        deviation,
    })
}

#[derive(Clone, Debug)]
pub struct ZPrime {
    pub z_prime: Tensor,
    pub deviation: f64,
    pub distance: f64,
    pub converged: bool,
    pub steps_run: usize,
}

fn z_deviation(g: &Generator, z: &Tensor, l: usize, target: &Tensor) -> Result<f64> {
    let s = g.affine(&g.mapping(z)?, l)?;
    Ok(s.sub(target)?.norm() / target.norm())
}

/// Searches `z′` with `F_l(z′) ≈ a F_l(z)` by Adam from a perturbed start.
///
/// `z` itself is accepted when it already satisfies the target to 1e-10.
pub fn find_z_prime(g: &Generator, z: &Tensor, l: usize, a: f64, steps: usize, seed: u64) -> Result<ZPrime> {
    let s = g.affine(&g.mapping(z)?, l)?;
    if s.norm() == 0.0 {
        return Err(Error::ZeroNorm(format!("style layer {} is zero", l)));
    }
    let target = s.scale(a);
    let d0 = z_deviation(g, z, l, &target)?;
    if d0 < 1e-10 {
        return Ok(ZPrime {
            z_prime: z.clone(),
            deviation: d0,
            distance: 0.0,
            converged: true,
            steps_run: 0,
        });
    }
    let mut rng = RngState::new(derive_seed(seed, NOISE_PURPOSE));
    let noise = sample_standard_normal(&mut rng, z.shape())?.scale(1e-2);
    let mut x = z.add(&noise)?;
    let lr0 = 0.2;
    let mut adam = Adam::new(AdamConfig {
        lr: lr0,
        ..AdamConfig::default()
    });
    let scale = 1.0 / target.dot(&target);
    let mut steps_run = 0;
    for step in 0..steps {
        let mut t = Tape::new();
        let zv = t.leaf(x.clone());
        let w = g.mapping_tape(&mut t, zv)?;
        let sv = g.affine_tape(&mut t, w, l)?;
        let tv = t.constant(target.clone());
        let diff = t.sub(sv, tv)?;
        let sq = t.sum_squares(diff)?;
        let loss = t.scale(sq, scale)?;
        if t.value(loss).item().sqrt() < 1e-12 {
            break;
        }
        let grad = t.backward(loss)?.wrt(zv);
        // cosine decay to 1% of the initial rate
        let frac = step as f64 / steps as f64;
        let lr = lr0 * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
        let mut p = [x];
        adam.step_with_lr(&mut p, &[grad], lr)?;
        let [next] = p;
        x = next;
        steps_run = step + 1;
    }
    let deviation = z_deviation(g, &x, l, &target)?;
    Ok(ZPrime {
        distance: x.sub(z)?.norm(),
        z_prime: x,
        deviation,
        converged: deviation <= Z_PRIME_FAILURE,
        steps_run,
    })
}

/// Builds `w′`, swaps its layer-`l` style into the style set of `w`, and
/// compares the two images at ε = 0.
pub fn check_many_to_one(g: &Generator, w: &Tensor, l: usize, a: f64, seed: u64) -> Result<PropertyReport> {
    let wp = construct_w_prime(g, w, l, a)?;
    let g0 = g.with_epsilon(0.0)?;
    let styles = g0.styles_from_w(w)?;
    let mut swapped = styles.clone();
    swapped[l] = g0.affine(&wp.w_prime, l)?;
    let pixel = g0.synthesize(&styles)?.max_abs_diff(&g0.synthesize(&swapped)?);
    let chain_ok = wp.residual < RESIDUAL_TOLERANCE && wp.deviation < STYLE_TOLERANCE;
    let mut r = PropertyReport::new("many_to_one", seed, l, a, pixel, PIXEL_TOLERANCE);
    r.passed = chain_ok && pixel < PIXEL_TOLERANCE;
    r.residual = Some(wp.residual);
    r.style_deviation = Some(wp.deviation);
    r.pixel_deviation = Some(pixel);
    if !chain_ok {
        r.note = Some(format!(
            "least-squares residual {:e} (rank {}); property not exactly attained for this layer",
            wp.residual, wp.rank
        ));
    }
    Ok(r)
}

/// Copy of `g` whose affine at layer `l` has two identical rows with
/// different biases, so the shift equation has no exact solution.
pub fn rank_deficient_fixture(g: &Generator, l: usize) -> Result<Generator> {
    if l >= g.k() {
        return Err(Error::invalid(format!("layer {} out of range", l)));
    }
    let mut f = g.clone();
    let aff = &mut f.affines[l];
    let cols = aff.weight.shape()[1];
    let row0 = aff.weight.data()[..cols].to_vec();
    aff.weight.data_mut()[cols..2 * cols].copy_from_slice(&row0);
    let b0 = aff.bias.data()[0];
    aff.bias.data_mut()[1] = b0 + 1.0;
    Ok(f)
}

/// Every check, in a fixed order.
pub fn run_property_suite(g: &Generator, seed: u64, z_seeds: usize, z_steps: usize) -> Result<Vec<PropertyReport>> {
    let mut out = Vec::new();
    for l in 0..g.k() {
        for &a in &SUITE_SCALES {
            out.push(check_scale_invariance(g, seed, l, a)?);
        }
    }
    let w = probe_w(g, seed)?;
    for l in 0..g.k() {
        for &a in &CHAIN_SCALES {
            let aff = &g.affines[l];
            let ls = solve_alignment_shift(&aff.weight, &aff.bias, a)?;
            let mut r = PropertyReport::new("alignment_shift", seed, l, a, ls.residual, RESIDUAL_TOLERANCE);
            r.residual = Some(ls.residual);
            if ls.rank < aff.weight.shape()[0] {
                r.note = Some(format!("rank {} below row count", ls.rank));
            }
            out.push(r);
            let wp = construct_w_prime(g, &w, l, a)?;
            let mut r = PropertyReport::new("w_prime", seed, l, a, wp.deviation, STYLE_TOLERANCE);
            r.residual = Some(wp.residual);
            r.style_deviation = Some(wp.deviation);
            out.push(r);
            out.push(check_many_to_one(g, &w, l, a, seed)?);
        }
    }
    // the fixture is expected to show a strictly positive residual
    let fixture = rank_deficient_fixture(g, 0)?;
    let a = CHAIN_SCALES[1];
    let fx = check_many_to_one(&fixture, &w, 0, a, seed)?;
    let residual = fx.residual.unwrap_or(0.0);
    let mut r = PropertyReport::new("rank_deficient_fixture", seed, 0, a, residual, RESIDUAL_TOLERANCE);
    r.passed = residual > RESIDUAL_TOLERANCE && !fx.passed;
    r.residual = Some(residual);
    r.style_deviation = fx.style_deviation;
    r.pixel_deviation = fx.pixel_deviation;
    r.note = Some("passes when a positive residual is reported".into());
    out.push(r);

    if z_seeds > 0 {
        let mut successes = 0;
        for i in 0..z_seeds as u64 {
            let zs = derive_seed(seed, i);
            let z = g.sample_z(zs, 0)?;
            let zp = find_z_prime(g, &z, 0, 2.0, z_steps, zs)?;
            let ok = zp.deviation < Z_PRIME_TOLERANCE && zp.distance > 1e-6;
            successes += ok as usize;
            let mut r = PropertyReport::new("z_prime", zs, 0, 2.0, zp.deviation, Z_PRIME_TOLERANCE);
            r.passed = ok;
            r.note = Some(format!("distance {:e}", zp.distance));
            out.push(r);
        }
        let need = (z_seeds * 8).div_ceil(10);
        let rate = successes as f64 / z_seeds as f64;
        let mut r = PropertyReport::new("z_prime_success_rate", seed, 0, 2.0, 1.0 - rate, 0.2);
        r.passed = successes >= need;
        r.note = Some(format!("{}/{} seeds converged", successes, z_seeds));
        out.push(r);
    }
    Ok(out)
}
