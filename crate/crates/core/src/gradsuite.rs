//! Finite-difference battery over every differentiable building block: tape
//! primitives, the generator pathways, the alignment loss and the full
//! inversion objective.

use serde::Serialize;

use crate::alignment::nscd_loss;
use crate::error::Result;
use crate::generator::{Generator, GeneratorConfig};
use crate::gradcheck::grad_check;
use crate::inversion::{AlignmentTerm, Inverter};
use crate::latent::{estimate_mean_code, Space};
use crate::rng::{derive_seed, sample_standard_normal, RngState};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step used by the battery.
pub const STEP: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub points: usize,
    /// Worst relative error over all points.
    pub max_rel_error: f64,
}

fn normal(seed: u64, shape: &[usize]) -> Result<Tensor> {
    sample_standard_normal(&mut RngState::new(seed), shape)
}

/// `⟨y, r⟩` for a fixed random `r`, turning any output into a scalar.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let r = normal(derive_seed(seed, 0x5052_4A), t.value(y).shape())?;
    let rv = t.constant(r);
    t.dot(y, rv)
}

fn run<F>(name: &str, points: usize, shape: &[usize], seed: u64, f: F) -> Result<SuiteEntry>
where
    F: Fn(&mut Tape, Var, u64) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for p in 0..points as u64 {
        let ps = derive_seed(seed, p);
        let x = normal(ps, shape)?;
        let r = grad_check(|t, xv| f(t, xv, ps), &x, STEP)?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(SuiteEntry {
        name: name.to_string(),
        points,
        max_rel_error: worst,
    })
}

/// Constant operand drawn from the point seed.
fn other(t: &mut Tape, seed: u64, shape: &[usize]) -> Result<Var> {
    Ok(t.constant(normal(derive_seed(seed, 0x4F54), shape)?))
}

/// Every tape primitive, checked with respect to each differentiable operand.
pub fn primitive_checks(points: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let s = seed;
    let mut out = Vec::new();
    out.push(run("matmul.lhs", points, &[3, 4], s, |t, x, p| {
        let b = other(t, p, &[4, 2])?;
        let y = t.matmul(x, b)?;
        project(t, y, p)
    })?);
    out.push(run("matmul.rhs", points, &[4, 2], s, |t, x, p| {
        let a = other(t, p, &[3, 4])?;
        let y = t.matmul(a, x)?;
        project(t, y, p)
    })?);
    out.push(run("matmul.vector", points, &[4], s, |t, x, p| {
        let a = other(t, p, &[3, 4])?;
        let y = t.matmul(a, x)?;
        project(t, y, p)
    })?);
    out.push(run("add", points, &[5], s, |t, x, p| {
        let b = other(t, p, &[5])?;
        let y = t.add(x, b)?;
        project(t, y, p)
    })?);
    out.push(run("sub", points, &[5], s, |t, x, p| {
        let b = other(t, p, &[5])?;
        let y = t.sub(b, x)?;
        project(t, y, p)
    })?);
    out.push(run("mul", points, &[5], s, |t, x, p| {
        let b = other(t, p, &[5])?;
        let y = t.mul(x, b)?;
        let y = t.mul(y, x)?;
        project(t, y, p)
    })?);
    out.push(run("scale", points, &[5], s, |t, x, p| {
        let y = t.scale(x, -2.5)?;
        project(t, y, p)
    })?);
    out.push(run("add_scalar", points, &[5], s, |t, x, p| {
        let y = t.add_scalar(x, 0.7)?;
        let y = t.mul(y, y)?;
        project(t, y, p)
    })?);
    out.push(run("bias_add.input", points, &[3, 2, 2], s, |t, x, p| {
        let b = other(t, p, &[3])?;
        let y = t.bias_add(x, b)?;
        let y = t.mul(y, y)?;
        project(t, y, p)
    })?);
    out.push(run("bias_add.bias", points, &[3], s, |t, x, p| {
        let a = other(t, p, &[3, 2, 2])?;
        let y = t.bias_add(a, x)?;
        let y = t.mul(y, y)?;
        project(t, y, p)
    })?);
    out.push(run("leaky_relu", points, &[8], s, |t, x, p| {
        let y = t.leaky_relu(x, 0.2)?;
        project(t, y, p)
    })?);
    out.push(run("conv3x3.input", points, &[2, 5, 4], s, |t, x, p| {
        let w = other(t, p, &[3, 2, 3, 3])?;
        let y = t.conv3x3(x, w)?;
        project(t, y, p)
    })?);
    out.push(run("conv3x3.weight", points, &[3, 2, 3, 3], s, |t, x, p| {
        let a = other(t, p, &[2, 5, 4])?;
        let y = t.conv3x3(a, x)?;
        project(t, y, p)
    })?);
    out.push(run("upsample2x", points, &[2, 3, 2], s, |t, x, p| {
        let y = t.upsample2x(x)?;
        project(t, y, p)
    })?);
    out.push(run("avgpool2x", points, &[2, 4, 6], s, |t, x, p| {
        let y = t.avgpool2x(x)?;
        project(t, y, p)
    })?);
    for (name, eps) in [("mod_demod", 0.0), ("mod_demod.eps", 1e-8), ("mod_demod.eps_large", 0.5)] {
        out.push(run(&format!("{}.weight", name), points, &[3, 4, 3, 3], s, |t, x, p| {
            let st = other(t, p, &[4])?;
            let y = t.mod_demod(x, st, eps)?;
            project(t, y, p)
        })?);
        out.push(run(&format!("{}.style", name), points, &[4], s, |t, x, p| {
            let w = other(t, p, &[3, 4, 3, 3])?;
            let y = t.mod_demod(w, x, eps)?;
            project(t, y, p)
        })?);
    }
    out.push(run("l2_norm", points, &[6], s, |t, x, _| t.l2_norm(x))?);
    out.push(run("normalize", points, &[6], s, |t, x, p| {
        let y = t.normalize(x)?;
        project(t, y, p)
    })?);
    out.push(run("dot", points, &[6], s, |t, x, p| {
        let b = other(t, p, &[6])?;
        let y = t.dot(x, b)?;
        let z = t.dot(x, x)?;
        t.add(y, z)
    })?);
    out.push(run("sum", points, &[2, 3], s, |t, x, _| {
        let y = t.mul(x, x)?;
        t.sum(y)
    })?);
    out.push(run("mean", points, &[2, 3], s, |t, x, _| {
        let y = t.mul(x, x)?;
        t.mean(y)
    })?);
    out.push(run("reshape", points, &[2, 3], s, |t, x, p| {
        let y = t.reshape(x, &[3, 2])?;
        let y = t.mul(y, y)?;
        project(t, y, p)
    })?);
    out.push(run("slice", points, &[7], s, |t, x, p| {
        let y = t.slice(x, 2, &[2, 2])?;
        let y = t.mul(y, y)?;
        project(t, y, p)
    })?);
    out.push(run("row", points, &[3, 4], s, |t, x, p| {
        let y = t.row(x, 1)?;
        let y = t.mul(y, y)?;
        project(t, y, p)
    })?);
    out.push(run("concat", points, &[4], s, |t, x, p| {
        let b = other(t, p, &[2])?;
        let y = t.mul(x, x)?;
        let y = t.concat(&[x, b, y], &[5, 2])?;
        project(t, y, p)
    })?);
    out.push(run("mse", points, &[2, 3], s, |t, x, p| {
        let b = other(t, p, &[2, 3])?;
        t.mse(x, b)
    })?);
    out.push(run("sum_squares", points, &[5], s, |t, x, _| t.sum_squares(x))?);
    Ok(out)
}

/// Generator, alignment-loss and inversion-objective checks on a default
/// generator initialized from `seed`.
pub fn model_checks(points: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let g = Generator::init(GeneratorConfig::default(), seed)?;
    model_checks_for(&g, points, seed)
}

pub fn model_checks_for(g: &Generator, points: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let c = &g.config;
    let k = g.k();
    let dims = c.style_dims();
    let total: usize = dims.iter().sum();
    let mu = estimate_mean_code(g, 256, derive_seed(seed, 0x4D55))?;
    let inv = Inverter::with_w_avg(g, &mu, g.mean_w(64, derive_seed(seed, 0x5741))?)?;
    let target = g.generate_from_z(&g.sample_z(derive_seed(seed, 0x5447), 0)?)?;
    let mut out = Vec::new();

    let pixel_sum = |t: &mut Tape, img: Var| t.sum(img);
    out.push(run("generator.z", points, &[c.z_dim], seed, |t, z, _| {
        let img = g.generate_from_z_tape(t, z)?;
        pixel_sum(t, img)
    })?);
    out.push(run("generator.mapping", points, &[c.z_dim], seed, |t, z, p| {
        let w = g.mapping_tape(t, z)?;
        project(t, w, p)
    })?);
    out.push(run("generator.w", points, &[c.w_dim], seed, |t, w, _| {
        let styles = g.styles_from_w_tape(t, w)?;
        let img = g.synthesize_tape(t, &styles)?;
        pixel_sum(t, img)
    })?);
    let split = |t: &mut Tape, flat: Var| -> Result<Vec<Var>> {
        let mut start = 0;
        let mut styles = Vec::with_capacity(k);
        for &d in &dims {
            styles.push(t.slice(flat, start, &[d])?);
            start += d;
        }
        Ok(styles)
    };
    out.push(run("generator.styles", points, &[total], seed, |t, s, _| {
        let styles = split(t, s)?;
        let img = g.synthesize_tape(t, &styles)?;
        pixel_sum(t, img)
    })?);
    let g0 = g.with_epsilon(0.0)?;
    out.push(run("generator.styles.eps0", points, &[total], seed, |t, s, _| {
        let styles = split(t, s)?;
        let img = g0.synthesize_tape(t, &styles)?;
        pixel_sum(t, img)
    })?);
    out.push(run("nscd_loss.wplus", points, &[k, c.w_dim], seed, |t, wp, _| {
        let styles = g.styles_from_wplus_tape(t, wp)?;
        nscd_loss(t, &styles, &mu)
    })?);
    out.push(run("nscd_loss.w", points, &[c.w_dim], seed, |t, w, _| {
        let styles = g.styles_from_w_tape(t, w)?;
        nscd_loss(t, &styles, &mu)
    })?);
    for (space, shape) in [(Space::WPlus, vec![k, c.w_dim]), (Space::W, vec![c.w_dim])] {
        out.push(run(
            &format!("inversion_loss.{}", space),
            points,
            &shape,
            seed,
            |t, x, _| {
                let (_, total, _) = inv.objective(t, space, x, &target, AlignmentTerm::On(0.7))?;
                Ok(total)
            },
        )?);
    }
    Ok(out)
}
