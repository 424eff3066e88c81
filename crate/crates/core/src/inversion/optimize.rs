use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{lambda_preset, lambda_retuned, ImageLoss, W_AVG_SAMPLES};
use crate::adam::{Adam, AdamConfig};
use crate::alignment::{nscd_loss, nscd_single};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::latent::{LatentCode, MeanCode, Space};
use crate::rng::derive_seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const W_AVG_PURPOSE: u64 = 0x5741_5647;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub space: Space,
    pub lambda: f64,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub image_loss: ImageLoss,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self::preset(Space::WPlus)
    }
}

impl InversionConfig {
    pub fn preset(space: Space) -> Self {
        Self {
            space,
            lambda: lambda_preset(space),
            steps: 200,
            lr: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            image_loss: ImageLoss::Mse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.space, Space::W | Space::WPlus) {
            return Err(Error::invalid(format!(
                "inversion space must be w or wplus, got {}",
                self.space
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("Adam epsilon must be > 0"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Whether the latent-level loss is recorded on the tape at all.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlignmentTerm {
    Off,
    On(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub image_loss: f64,
    pub nscd: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InversionReport {
    pub space: Space,
    pub lambda: f64,
    pub lambda_preset: f64,
    pub lambda_retuned: f64,
    pub steps: usize,
    /// One record per step, taken before that step's update.
    pub trajectory: Vec<StepRecord>,
    pub final_mse: f64,
    pub final_nscd: f64,
    pub final_per_layer_nscd: Vec<f64>,
    #[serde(skip)]
    pub final_code: LatentCode,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Latent optimizer bound to a generator and a mean code.
///
/// `w_avg` is computed once and reused by every run.
pub struct Inverter<'a> {
    pub gen: &'a Generator,
    pub mu: &'a MeanCode,
    pub w_avg: Tensor,
}

impl<'a> Inverter<'a> {
    pub fn new(gen: &'a Generator, mu: &'a MeanCode, seed: u64) -> Result<Self> {
        mu.check_generator(gen)?;
        let w_avg = gen.mean_w(W_AVG_SAMPLES, derive_seed(seed, W_AVG_PURPOSE))?;
        Ok(Self { gen, mu, w_avg })
    }

    pub fn with_w_avg(gen: &'a Generator, mu: &'a MeanCode, w_avg: Tensor) -> Result<Self> {
        mu.check_generator(gen)?;
        if w_avg.shape() != [gen.config.w_dim] {
            return Err(Error::shape("inversion", format!("w_avg {:?}", w_avg.shape())));
        }
        Ok(Self { gen, mu, w_avg })
    }

    fn initial(&self, space: Space) -> Result<Tensor> {
        match space {
            Space::W => Ok(self.w_avg.clone()),
            _ => Tensor::stack(&vec![self.w_avg.clone(); self.gen.k()]),
        }
    }

    fn styles(&self, t: &mut Tape, space: Space, x: Var) -> Result<Vec<Var>> {
        match space {
            Space::W => self.gen.styles_from_w_tape(t, x),
            _ => self.gen.styles_from_wplus_tape(t, x),
        }
    }

    fn check_target(&self, target: &Tensor) -> Result<()> {
        if target.shape() != self.gen.config.image_shape() {
            return Err(Error::shape(
                "invert",
                format!(
                    "target must be {:?}, got {:?}",
                    self.gen.config.image_shape(),
                    target.shape()
                ),
            ));
        }
        if !target.is_finite() {
            return Err(Error::NonFinite("target image".into()));
        }
        Ok(())
    }

    /// Image loss plus the optional alignment term, evaluated at `x`.
    /// Returns `(image_loss, total)` vars and the style vars.
    pub fn objective(
        &self,
        t: &mut Tape,
        space: Space,
        x: Var,
        target: &Tensor,
        term: AlignmentTerm,
    ) -> Result<(Var, Var, Vec<Var>)> {
        let styles = self.styles(t, space, x)?;
        let img = self.gen.synthesize_tape(t, &styles)?;
        let tv = t.constant(target.clone());
        let image_loss = t.mse(img, tv)?;
        let total = match term {
            AlignmentTerm::Off => image_loss,
            AlignmentTerm::On(lambda) => {
                let align = nscd_loss(t, &styles, self.mu)?;
                let weighted = t.scale(align, lambda)?;
                t.add(image_loss, weighted)?
            }
        };
        Ok((image_loss, total, styles))
    }

    pub fn run(&self, target: &Tensor, cfg: &InversionConfig) -> Result<InversionReport> {
        self.run_with(target, cfg, AlignmentTerm::On(cfg.lambda))
    }

    pub fn run_with(
        &self,
        target: &Tensor,
        cfg: &InversionConfig,
        term: AlignmentTerm,
    ) -> Result<InversionReport> {
        cfg.validate()?;
        self.check_target(target)?;
        let started = Instant::now();
        let mut x = self.initial(cfg.space)?;
        let mut adam = Adam::new(cfg.adam());
        let mut trajectory = Vec::with_capacity(cfg.steps);
        let abort = |step: usize, e: Error| Error::Aborted {
            step,
            reason: e.to_string(),
        };
        for step in 0..cfg.steps {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let (image_loss, total, styles) = self
                .objective(&mut t, cfg.space, xv, target, term)
                .map_err(|e| abort(step, e))?;
            let values: Vec<Tensor> = styles.iter().map(|&s| t.value(s).clone()).collect();
            let nscd = nscd_single(&values, self.mu).map_err(|e| abort(step, e))?;
            trajectory.push(StepRecord {
                step,
                image_loss: t.value(image_loss).item(),
                nscd: nscd.value,
                total: t.value(total).item(),
            });
            let grads = t.backward(total).map_err(|e| abort(step, e))?;
            let g = grads.wrt(xv);
            let mut params = [x];
            adam.step(&mut params, &[g]).map_err(|e| abort(step, e))?;
            let [next] = params;
            if !next.is_finite() {
                return Err(abort(step, Error::NonFinite("latent update".into())));
            }
            x = next;
        }
        let (final_mse, styles) = self
            .evaluate(cfg.space, &x, target)
            .map_err(|e| abort(cfg.steps, e))?;
        let fin = nscd_single(&styles, self.mu).map_err(|e| abort(cfg.steps, e))?;
        let final_code = match cfg.space {
            Space::W => LatentCode::W(x),
            _ => LatentCode::WPlus(x),
        };
        Ok(InversionReport {
            space: cfg.space,
            lambda: cfg.lambda,
            lambda_preset: lambda_preset(cfg.space),
            lambda_retuned: lambda_retuned(cfg.space),
            steps: cfg.steps,
            trajectory,
            final_mse,
            final_nscd: fin.value,
            final_per_layer_nscd: fin.per_layer,
            final_code,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        })
    }

    /// Pixel MSE and style set of a W / W+ value.
    pub fn evaluate(&self, space: Space, x: &Tensor, target: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let styles = self.styles(&mut t, space, xv)?;
        let img = self.gen.synthesize_tape(&mut t, &styles)?;
        let tv = t.constant(target.clone());
        let mse = t.mse(img, tv)?;
        let values = styles.iter().map(|&s| t.value(s).clone()).collect();
        Ok((t.value(mse).item(), values))
    }
}

/// One optimizer run from `w̄` (estimated from `cfg.seed`).
pub fn invert_optimize(
    target: &Tensor,
    g: &Generator,
    mu: &MeanCode,
    cfg: &InversionConfig,
) -> Result<InversionReport> {
    Inverter::new(g, mu, cfg.seed)?.run(target, cfg)
}
