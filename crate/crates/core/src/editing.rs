//! Linear edit directions for image-level toy attributes, edit application,
//! and latent editing consistency (LEC).

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::latent::{styles_of, LatentCode};
use crate::rng::derive_seed;
use crate::tensor::{read_blocks, write_blocks, Tensor};

pub const MIN_DIRECTION_SAMPLES: usize = 200;
const DIRECTION_PURPOSE: u64 = 0x4449_5245;

/// Scalar image functional used as a stand-in attribute label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ToyAttribute {
    /// Mean over all pixels.
    Brightness,
    /// Mean `|left half − mirrored right half|`.
    Asymmetry,
    Negated(Box<ToyAttribute>),
}

impl ToyAttribute {
    pub fn eval(&self, image: &Tensor) -> Result<f64> {
        if image.rank() != 3 {
            return Err(Error::shape("attribute", format!("image shape {:?}", image.shape())));
        }
        Ok(match self {
            ToyAttribute::Brightness => image.sum() / image.len() as f64,
            ToyAttribute::Asymmetry => {
                let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
                let d = image.data();
                let mut acc = 0.0;
                for ch in 0..c {
                    for y in 0..h {
                        let row = &d[(ch * h + y) * w..(ch * h + y + 1) * w];
                        for x in 0..w / 2 {
                            acc += (row[x] - row[w - 1 - x]).abs();
                        }
                    }
                }
                acc / (c * h * (w / 2)).max(1) as f64
            }
            ToyAttribute::Negated(a) => -a.eval(image)?,
        })
    }

    pub fn negated(self) -> Self {
        match self {
            ToyAttribute::Negated(a) => *a,
            a => ToyAttribute::Negated(Box::new(a)),
        }
    }
}

impl fmt::Display for ToyAttribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToyAttribute::Brightness => f.write_str("brightness"),
            ToyAttribute::Asymmetry => f.write_str("asymmetry"),
            ToyAttribute::Negated(a) => write!(f, "-{}", a),
        }
    }
}

impl FromStr for ToyAttribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix('-') {
            return Ok(rest.parse::<ToyAttribute>()?.negated());
        }
        match s {
            "brightness" => Ok(ToyAttribute::Brightness),
            "asymmetry" => Ok(ToyAttribute::Asymmetry),
            _ => Err(Error::invalid(format!("unknown attribute {:?}", s))),
        }
    }
}

impl Serialize for ToyAttribute {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ToyAttribute {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Unit direction in W.
#[derive(Clone, Debug, PartialEq)]
pub struct EditDirection {
    pub vector: Tensor,
    pub attribute: ToyAttribute,
    /// Held-out accuracy of the induced linear classifier.
    pub fit_quality: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionMeta {
    pub attribute: ToyAttribute,
    pub fit_quality: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl EditDirection {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_blocks(w, &[("direction".to_string(), &self.vector)])
    }

    pub fn read_from<R: Read>(r: &mut R, meta: &DirectionMeta) -> Result<Self> {
        let mut blocks = read_blocks(r)?;
        if blocks.len() != 1 || blocks[0].0 != "direction" {
            return Err(Error::Format("expected a single 'direction' block".into()));
        }
        let vector = blocks.remove(0).1;
        if vector.rank() != 1 || (vector.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Format("direction is not a unit vector".into()));
        }
        Ok(Self {
            vector,
            attribute: meta.attribute.clone(),
            fit_quality: meta.fit_quality,
        })
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn mean_rows(ws: &[Tensor], idx: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0; ws[0].len()];
    for &i in idx {
        for (a, v) in acc.iter_mut().zip(ws[i].data()) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / idx.len() as f64).collect()
}

/// Mean difference between the top and bottom attribute quartiles of the
/// first 75% of samples; the remaining 25% score the direction.
pub fn find_direction(
    g: &Generator,
    attr: &ToyAttribute,
    n_samples: usize,
    seed: u64,
) -> Result<EditDirection> {
    if n_samples < MIN_DIRECTION_SAMPLES {
        return Err(Error::invalid(format!(
            "find_direction needs at least {} samples, got {}",
            MIN_DIRECTION_SAMPLES, n_samples
        )));
    }
    let s = derive_seed(seed, DIRECTION_PURPOSE);
    let samples: Vec<(Tensor, f64)> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let w = g.mapping(&g.sample_z(s, i)?)?;
            let a = attr.eval(&g.generate_from_w(&w)?)?;
            Ok((w, a))
        })
        .collect::<Result<_>>()?;
    let (ws, attrs): (Vec<Tensor>, Vec<f64>) = samples.into_iter().unzip();
    let (lo, hi) = attrs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    if hi - lo <= 1e-12 * (1.0 + hi.abs().max(lo.abs())) {
        return Err(Error::invalid(format!(
            "attribute {} is constant across samples",
            attr
        )));
    }

    let n_train = n_samples * 3 / 4;
    let mut order: Vec<usize> = (0..n_train).collect();
    order.sort_by(|&i, &j| attrs[i].total_cmp(&attrs[j]).then(i.cmp(&j)));
    let q = n_train / 4;
    let mut bottom = order[..q].to_vec();
    let mut top = order[n_train - q..].to_vec();
    bottom.sort_unstable();
    top.sort_unstable();
    let (mt, mb) = (mean_rows(&ws, &top), mean_rows(&ws, &bottom));
    let diff = Tensor::vector(mt.iter().zip(&mb).map(|(a, b)| a - b).collect());
    let n = diff.norm();
    if n == 0.0 {
        return Err(Error::ZeroNorm("quartile means coincide".into()));
    }
    let vector = diff.map(|v| v / n);

    let proj: Vec<f64> = ws.iter().map(|w| w.dot(&vector)).collect();
    let p_cut = median(&proj[..n_train]);
    let a_cut = median(&attrs[..n_train]);
    let held = n_samples - n_train;
    let correct = (n_train..n_samples)
        .filter(|&i| (proj[i] > p_cut) == (attrs[i] > a_cut))
        .count();
    Ok(EditDirection {
        vector,
        attribute: attr.clone(),
        fit_quality: correct as f64 / held as f64,
    })
}

/// `w + αd`; for W+ the shift is applied to every row.
pub fn edit(code: &LatentCode, d: &EditDirection, alpha: f64) -> Result<LatentCode> {
    let dv = d.vector.data();
    let shift = |row: &[f64]| -> Vec<f64> { row.iter().zip(dv).map(|(w, v)| w + alpha * v).collect() };
    match code {
        LatentCode::W(w) if w.len() == dv.len() => Ok(LatentCode::W(Tensor::vector(shift(w.data())))),
        LatentCode::WPlus(w) if w.rank() == 2 && w.shape()[1] == dv.len() => {
            let data = w.data().chunks(dv.len()).flat_map(|r| shift(r)).collect();
            Ok(LatentCode::WPlus(Tensor::new(w.shape().to_vec(), data)?))
        }
        LatentCode::W(_) | LatentCode::WPlus(_) => {
            Err(Error::shape("edit", "code width differs from the direction"))
        }
        other => Err(Error::invalid(format!(
            "edits apply to w or wplus codes, got {}",
            other.space()
        ))),
    }
}

/// Image of a latent code in any space the generator accepts.
pub fn render(g: &Generator, code: &LatentCode) -> Result<Tensor> {
    g.synthesize(&styles_of(g, code)?)
}

fn code_tensor(code: &LatentCode) -> Result<&Tensor> {
    match code {
        LatentCode::W(t) | LatentCode::WPlus(t) => Ok(t),
        other => Err(Error::invalid(format!(
            "embedder returned a {} code",
            other.space()
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LecRow {
    pub target: usize,
    /// `‖embed(G(e)) − e‖²` with `e = edit(embed(x), d, α)`.
    pub lec: f64,
    /// Pixel MSE between `x` and the reverted re-embedding's image; not
    /// comparable to identity-similarity scores.
    pub revert_mse: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LecReport {
    pub alpha: f64,
    pub attribute: ToyAttribute,
    pub rows: Vec<LecRow>,
    /// Mean over unflagged rows.
    pub mean_lec: f64,
    pub mean_revert_mse: f64,
    pub n_failed: usize,
}

impl LecReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target_id,lec,revert_mse,flagged\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{}\n",
                r.target, r.lec, r.revert_mse, r.flagged
            ));
        }
        out
    }
}

fn lec_one<E>(embed: &E, g: &Generator, d: &EditDirection, alpha: f64, x: &Tensor) -> Result<(f64, f64)>
where
    E: Fn(&Tensor) -> Result<LatentCode>,
{
    let c = embed(x)?;
    let e = edit(&c, d, alpha)?;
    let c2 = embed(&render(g, &e)?)?;
    let (a, b) = (code_tensor(&c2)?, code_tensor(&e)?);
    if a.shape() != b.shape() {
        return Err(Error::shape("lec", "re-embedded code changed shape"));
    }
    let lec = a.sub(b)?.data().iter().map(|v| v * v).sum::<f64>();
    let reverted = render(g, &edit(&c2, d, -alpha)?)?;
    let diff = reverted.sub(x)?;
    let revert_mse = diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64;
    if !lec.is_finite() || !revert_mse.is_finite() {
        return Err(Error::NonFinite("lec".into()));
    }
    Ok((lec, revert_mse))
}

/// Edit, regenerate, re-embed, compare; failures are flagged per target.
pub fn lec<E>(
    embed: &E,
    g: &Generator,
    d: &EditDirection,
    alpha: f64,
    targets: &[Tensor],
) -> Result<LecReport>
where
    E: Fn(&Tensor) -> Result<LatentCode> + Sync,
{
    if targets.is_empty() {
        return Err(Error::invalid("lec needs at least one target"));
    }
    let results: Vec<Result<(f64, f64)>> = targets
        .par_iter()
        .map(|x| lec_one(embed, g, d, alpha, x))
        .collect();
    let rows: Vec<LecRow> = results
        .into_iter()
        .enumerate()
        .map(|(i, r)| match r {
            Ok((lec, revert_mse)) => LecRow {
                target: i,
                lec,
                revert_mse,
                flagged: false,
            },
            Err(_) => LecRow {
                target: i,
                lec: f64::NAN,
                revert_mse: f64::NAN,
                flagged: true,
            },
        })
        .collect();
    let ok: Vec<&LecRow> = rows.iter().filter(|r| !r.flagged).collect();
    let mean = |f: fn(&LecRow) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
        }
    };
    Ok(LecReport {
        alpha,
        attribute: d.attribute.clone(),
        mean_lec: mean(|r| r.lec),
        mean_revert_mse: mean(|r| r.revert_mse),
        n_failed: rows.len() - ok.len(),
        rows,
    })
}
