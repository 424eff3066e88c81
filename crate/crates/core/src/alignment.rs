//! Normalized style-space cosine distance (NSCD) and its differentiable form.
//!
//! For a style set `s = (s_0, …, s_{k-1})` and mean code `μ`, the per-layer
//! distance is `1 − ⟨s_l/‖s_l‖, μ_l⟩`; layers are averaged uniformly and so
//! are codes.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::latent::{normalize_layers, LatentCode, MeanCode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NscdValue {
    /// Mean of `per_layer`.
    pub value: f64,
    pub per_layer: Vec<f64>,
}

fn check_layers(styles: &[Tensor], mu: &MeanCode) -> Result<()> {
    if styles.len() != mu.k()
        || styles
            .iter()
            .zip(&mu.layers)
            .any(|(s, m)| s.shape() != m.shape())
    {
        return Err(Error::shape(
            "nscd",
            format!(
                "{} style layers do not match a {}-layer mean code",
                styles.len(),
                mu.k()
            ),
        ));
    }
    Ok(())
}

/// Per-layer distances of one style set (`S` or `S^N`).
pub fn nscd_single(styles: &[Tensor], mu: &MeanCode) -> Result<NscdValue> {
    check_layers(styles, mu)?;
    let unit = normalize_layers(styles)?;
    let per_layer: Vec<f64> = unit
        .iter()
        .zip(&mu.layers)
        .map(|(u, m)| (1.0 - u.dot(m)).clamp(0.0, 2.0))
        .collect();
    let value = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
    Ok(NscdValue { value, per_layer })
}

/// NSCD over a batch of style sets: per-layer means over codes, then the layer mean.
pub fn nscd_of_styles(sets: &[Vec<Tensor>], mu: &MeanCode) -> Result<NscdValue> {
    if sets.is_empty() {
        return Err(Error::invalid("nscd of an empty code list"));
    }
    let mut per_layer = vec![0.0; mu.k()];
    for s in sets {
        let v = nscd_single(s, mu)?;
        for (a, b) in per_layer.iter_mut().zip(v.per_layer) {
            *a += b;
        }
    }
    let n = sets.len() as f64;
    for a in per_layer.iter_mut() {
        *a /= n;
    }
    let value = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
    Ok(NscdValue { value, per_layer })
}

/// NSCD of `S` / `S^N` codes.
pub fn nscd(codes: &[LatentCode], mu: &MeanCode) -> Result<NscdValue> {
    let sets = codes
        .iter()
        .map(|c| match c {
            LatentCode::S(s) | LatentCode::SN(s) => Ok(s.clone()),
            other => Err(Error::invalid(format!(
                "nscd expects s or sn codes, got {} (map through the generator first)",
                other.space()
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    nscd_of_styles(&sets, mu)
}

/// Alignment loss `1 − mean_l ⟨s_l/‖s_l‖, μ_l⟩` recorded on the tape.
///
/// `styles` must depend on a differentiable input.
pub fn nscd_loss(t: &mut Tape, styles: &[Var], mu: &MeanCode) -> Result<Var> {
    if !styles.iter().any(|&s| t.requires_grad(s)) {
        return Err(Error::Detached(
            "alignment loss needs styles computed from a leaf".into(),
        ));
    }
    let values: Vec<Tensor> = styles.iter().map(|&s| t.value(s).clone()).collect();
    check_layers(&values, mu)?;
    let mut cosines = Vec::with_capacity(styles.len());
    for (&s, m) in styles.iter().zip(&mu.layers) {
        let unit = t.normalize(s)?;
        let mv = t.constant(m.clone());
        cosines.push(t.dot(unit, mv)?);
    }
    let k = cosines.len();
    let all = t.concat(&cosines, &[k])?;
    let mean_cos = t.mean(all)?;
    let neg = t.scale(mean_cos, -1.0)?;
    t.add_scalar(neg, 1.0)
}
