//! Image embedding with the alignment term: latent optimization and a
//! feed-forward encoder, plus the λ sweep used to study the
//! fidelity/alignment trade-off.

mod ablation;
mod encoder;
mod optimize;

pub use ablation::{ablate_lambda, ablation_csv, ablation_targets, check_trend, AblationRow, TrendCheck};
pub use encoder::{
    invert_encode, train_encoder, EncoderParams, EncoderTrainConfig, TrainRecord, TrainedEncoder,
};
pub use optimize::{
    invert_optimize, AlignmentTerm, InversionConfig, InversionReport, Inverter, StepRecord,
};

use serde::{Deserialize, Serialize};

use crate::latent::Space;

/// Samples averaged for the optimizer's starting point `w̄`.
pub const W_AVG_SAMPLES: usize = 10_000;

/// Alignment weight presets of the reference setup, per latent space.
pub fn lambda_preset(space: Space) -> f64 {
    match space {
        Space::W => 5.0,
        _ => 20.0,
    }
}

/// Weights that give a comparable fidelity/alignment balance with the pixel
/// MSE image loss used here.
pub fn lambda_retuned(space: Space) -> f64 {
    match space {
        Space::W => 0.05,
        _ => 0.1,
    }
}

pub const ENCODER_LAMBDA_PRESET: f64 = 0.5;
pub const ENCODER_LAMBDA_D_REG_PRESET: f64 = 2e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageLoss {
    /// Mean squared pixel error.
    #[default]
    Mse,
}
