//! Latent spaces `Z`, `W`, `W+`, `S` and the normalized style space `S^N`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::tape::Tape;
use crate::tensor::{read_blocks, read_u32, write_blocks, Tensor};

pub const CODE_MAGIC: &[u8; 4] = b"LSAC";
pub const CODE_VERSION: u32 = 1;
/// Tolerance on the unit-norm invariant of normalized codes.
pub const UNIT_NORM_TOL: f64 = 1e-12;
/// Samples per reduction chunk when estimating the mean code.
const MEAN_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Z,
    W,
    #[serde(rename = "wplus")]
    WPlus,
    S,
    #[serde(rename = "sn")]
    SN,
}

impl Space {
    fn tag(self) -> u8 {
        match self {
            Space::Z => 0,
            Space::W => 1,
            Space::WPlus => 2,
            Space::S => 3,
            Space::SN => 4,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Space::Z,
            1 => Space::W,
            2 => Space::WPlus,
            3 => Space::S,
            4 => Space::SN,
            t => return Err(Error::Format(format!("unknown space tag {}", t))),
        })
    }
}

impl std::fmt::Display for Space {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Space::Z => "z",
            Space::W => "w",
            Space::WPlus => "wplus",
            Space::S => "s",
            Space::SN => "sn",
        })
    }
}

impl std::str::FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "z" => Ok(Space::Z),
            "w" => Ok(Space::W),
            "wplus" | "w+" => Ok(Space::WPlus),
            "s" => Ok(Space::S),
            "sn" => Ok(Space::SN),
            other => Err(Error::invalid(format!("unknown latent space '{}'", other))),
        }
    }
}

/// A latent code tagged with its space.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentCode {
    Z(Tensor),
    W(Tensor),
    /// `[k, w_dim]`, row `l` feeds style layer `l`.
    WPlus(Tensor),
    S(Vec<Tensor>),
    /// Per-layer unit vectors.
    SN(Vec<Tensor>),
}

impl LatentCode {
    pub fn space(&self) -> Space {
        match self {
            LatentCode::Z(_) => Space::Z,
            LatentCode::W(_) => Space::W,
            LatentCode::WPlus(_) => Space::WPlus,
            LatentCode::S(_) => Space::S,
            LatentCode::SN(_) => Space::SN,
        }
    }

    /// Checked `S^N` constructor.
    pub fn sn(layers: Vec<Tensor>) -> Result<Self> {
        for (l, v) in layers.iter().enumerate() {
            if v.rank() != 1 || (v.norm() - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!(
                    "S^N layer {} is not a unit vector (norm {})",
                    l,
                    v.norm()
                )));
            }
        }
        Ok(LatentCode::SN(layers))
    }

    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            LatentCode::Z(t) | LatentCode::W(t) | LatentCode::WPlus(t) => vec![t],
            LatentCode::S(v) | LatentCode::SN(v) => v.iter().collect(),
        }
    }

    /// Shape sanity against a generator.
    pub fn validate_for(&self, g: &Generator) -> Result<()> {
        let c = &g.config;
        let ok = match self {
            LatentCode::Z(t) => t.shape() == [c.z_dim],
            LatentCode::W(t) => t.shape() == [c.w_dim],
            LatentCode::WPlus(t) => t.shape() == [c.k, c.w_dim],
            LatentCode::S(v) | LatentCode::SN(v) => {
                v.len() == c.k
                    && v
                        .iter()
                        .zip(c.style_dims())
                        .all(|(t, d)| t.shape() == [d])
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "latent code",
                format!("{} code does not match generator dimensions", self.space()),
            ))
        }
    }
}

/// Per-layer affine of a `W` or `W+` code.
pub fn to_style(g: &Generator, code: &LatentCode) -> Result<LatentCode> {
    code.validate_for(g)?;
    let styles = match code {
        LatentCode::W(w) => g.styles_from_w(w)?,
        LatentCode::WPlus(wp) => {
            let mut t = Tape::new();
            let v = t.constant(wp.clone());
            let s = g.styles_from_wplus_tape(&mut t, v)?;
            s.iter().map(|&v| t.value(v).clone()).collect()
        }
        other => {
            return Err(Error::invalid(format!(
                "to_style expects a w or wplus code, got {}",
                other.space()
            )))
        }
    };
    Ok(LatentCode::S(styles))
}

/// Style vectors of any code, mapping `Z` through the mapping network first.
pub fn styles_of(g: &Generator, code: &LatentCode) -> Result<Vec<Tensor>> {
    code.validate_for(g)?;
    match code {
        LatentCode::Z(z) => g.styles_from_w(&g.mapping(z)?),
        LatentCode::W(_) | LatentCode::WPlus(_) => match to_style(g, code)? {
            LatentCode::S(s) => Ok(s),
            _ => unreachable!(),
        },
        LatentCode::S(s) | LatentCode::SN(s) => Ok(s.clone()),
    }
}

/// Divides every layer by its Euclidean norm.
pub fn normalize_layers(styles: &[Tensor]) -> Result<Vec<Tensor>> {
    styles
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let n = s.norm();
            if n == 0.0 {
                Err(Error::ZeroNorm(format!("style layer {} is zero", l)))
            } else {
                Ok(s.map(|v| v / n))
            }
        })
        .collect()
}

/// `S → S^N`; an `S^N` input is renormalized (idempotent up to rounding).
pub fn normalize_style(code: &LatentCode) -> Result<LatentCode> {
    match code {
        LatentCode::S(s) | LatentCode::SN(s) => Ok(LatentCode::SN(normalize_layers(s)?)),
        other => Err(Error::invalid(format!(
            "normalize_style expects an s code, got {}",
            other.space()
        ))),
    }
}

/// Per-layer unit-norm mean of sampled `S^N` codes.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanCode {
    pub layers: Vec<Tensor>,
    pub k_samples: usize,
    pub seed: u64,
    pub generator_checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanCodeMeta {
    pub k_samples: usize,
    pub seed: u64,
    pub generator_checksum: String,
}

fn sn_of_sample(g: &Generator, seed: u64, index: u64) -> Result<Vec<Tensor>> {
    let w = g.mapping(&g.sample_z(seed, index)?)?;
    normalize_layers(&g.styles_from_w(&w)?)
}

fn unit_mean(sums: Vec<Vec<f64>>) -> Result<Vec<Tensor>> {
    sums.into_iter()
        .enumerate()
        .map(|(l, v)| {
            let t = Tensor::vector(v);
            let n = t.norm();
            if n == 0.0 {
                Err(Error::ZeroNorm(format!("mean code layer {}", l)))
            } else {
                Ok(t.map(|v| v / n))
            }
        })
        .collect()
}

/// Mean of `S^N` codes, renormalized per layer.
pub fn mean_of_codes(codes: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let first = codes
        .first()
        .ok_or_else(|| Error::invalid("mean of zero codes"))?;
    let mut sums: Vec<Vec<f64>> = first.iter().map(|t| vec![0.0; t.len()]).collect();
    for code in codes {
        for (acc, t) in sums.iter_mut().zip(code) {
            for (a, v) in acc.iter_mut().zip(t.data()) {
                *a += v;
            }
        }
    }
    unit_mean(sums)
}

/// Samples `k_samples` codes `z ~ N(0, I)` from stream `seed` and averages their `S^N` images.
///
/// Work is split into fixed chunks of consecutive sample indices; chunk sums
/// are combined in chunk order so the result does not depend on thread count.
pub fn estimate_mean_code(g: &Generator, k_samples: usize, seed: u64) -> Result<MeanCode> {
    if k_samples == 0 {
        return Err(Error::invalid("k_samples must be at least 1"));
    }
    let dims = g.config.style_dims();
    let n_chunks = k_samples.div_ceil(MEAN_CHUNK);
    let partial: Vec<Result<Vec<Vec<f64>>>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut sums: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; d]).collect();
            let end = ((c + 1) * MEAN_CHUNK).min(k_samples);
            for i in c * MEAN_CHUNK..end {
                let sn = sn_of_sample(g, seed, i as u64)?;
                for (acc, t) in sums.iter_mut().zip(&sn) {
                    for (a, v) in acc.iter_mut().zip(t.data()) {
                        *a += v;
                    }
                }
            }
            Ok(sums)
        })
        .collect();
    let mut total: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; d]).collect();
    for p in partial {
        for (acc, part) in total.iter_mut().zip(p?) {
            for (a, v) in acc.iter_mut().zip(part) {
                *a += v;
            }
        }
    }
    Ok(MeanCode {
        layers: unit_mean(total)?,
        k_samples,
        seed,
        generator_checksum: g.checksum(),
    })
}

impl MeanCode {
    pub fn k(&self) -> usize {
        self.layers.len()
    }

    pub fn meta(&self) -> MeanCodeMeta {
        MeanCodeMeta {
            k_samples: self.k_samples,
            seed: self.seed,
            generator_checksum: self.generator_checksum.clone(),
        }
    }

    /// Per-layer cosine similarity with another estimate.
    pub fn cosine_with(&self, other: &MeanCode) -> Vec<f64> {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.dot(b) / (a.norm() * b.norm()))
            .collect()
    }

    /// Layer tensors as named blocks (`layer.<l>`).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let blocks: Vec<(String, &Tensor)> = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, t)| (format!("layer.{}", l), t))
            .collect();
        write_blocks(w, &blocks)
    }

    pub fn read_from<R: Read>(r: &mut R, meta: MeanCodeMeta) -> Result<Self> {
        let blocks = read_blocks(r)?;
        let mut layers = Vec::with_capacity(blocks.len());
        for (l, (name, t)) in blocks.into_iter().enumerate() {
            if name != format!("layer.{}", l) {
                return Err(Error::Format(format!("unexpected mean-code block {}", name)));
            }
            if t.rank() != 1 || (t.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Format(format!("mean-code layer {} is not unit norm", l)));
            }
            layers.push(t);
        }
        Ok(Self {
            layers,
            k_samples: meta.k_samples,
            seed: meta.seed,
            generator_checksum: meta.generator_checksum,
        })
    }

    pub fn check_generator(&self, g: &Generator) -> Result<()> {
        if self.layers.len() != g.k()
            || self
                .layers
                .iter()
                .zip(g.config.style_dims())
                .any(|(t, d)| t.len() != d)
        {
            return Err(Error::shape("mean code", "layer sizes differ from the generator"));
        }
        Ok(())
    }
}

// ---- code files ----

/// `"LSAC" | u32 version | u8 space | u32 count`, then for each code
/// `u32 n_tensors` followed by that many tensors.
pub fn write_codes<W: Write>(w: &mut W, codes: &[LatentCode]) -> Result<()> {
    let space = codes
        .first()
        .map(|c| c.space())
        .ok_or_else(|| Error::invalid("no codes to write"))?;
    if codes.iter().any(|c| c.space() != space) {
        return Err(Error::invalid("a code file holds codes of one space only"));
    }
    w.write_all(CODE_MAGIC)?;
    w.write_all(&CODE_VERSION.to_le_bytes())?;
    w.write_all(&[space.tag()])?;
    w.write_all(&(codes.len() as u32).to_le_bytes())?;
    for c in codes {
        let ts = c.tensors();
        w.write_all(&(ts.len() as u32).to_le_bytes())?;
        for t in ts {
            t.write_to(w)?;
        }
    }
    Ok(())
}

pub fn read_codes<R: Read>(r: &mut R) -> Result<Vec<LatentCode>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CODE_MAGIC {
        return Err(Error::Format("not a latent code file".into()));
    }
    let version = read_u32(r)?;
    if version != CODE_VERSION {
        return Err(Error::Format(format!("unsupported code file version {}", version)));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let space = Space::from_tag(tag[0])?;
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = read_u32(r)? as usize;
        if n > 4096 {
            return Err(Error::Format(format!("{} tensors in one code", n)));
        }
        let ts = (0..n)
            .map(|_| Tensor::read_from(r))
            .collect::<Result<Vec<_>>>()?;
        let single = |mut ts: Vec<Tensor>| {
            if ts.len() == 1 {
                Ok(ts.remove(0))
            } else {
                Err(Error::Format(format!("{} code with {} tensors", space, ts.len())))
            }
        };
        out.push(match space {
            Space::Z => LatentCode::Z(single(ts)?),
            Space::W => LatentCode::W(single(ts)?),
            Space::WPlus => LatentCode::WPlus(single(ts)?),
            Space::S => LatentCode::S(ts),
            Space::SN => LatentCode::sn(ts).map_err(|e| Error::Format(e.to_string()))?,
        });
    }
    Ok(out)
}

// ---- 2-D projection ----

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    /// Covariance had fewer than two informative directions; points are raw dimensions 0 and 1.
    pub degenerate: bool,
    /// Variance along the two returned axes.
    pub variances: [f64; 2],
}

impl Projection {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,x,y\n");
        for (i, p) in self.points.iter().enumerate() {
            s.push_str(&format!("{},{:.12e},{:.12e}\n", i, p[0], p[1]));
        }
        s
    }
}

/// Variance below which a principal axis is treated as absent.
const PCA_DEGENERATE: f64 = 1e-14;

/// Projects `S^N` codes (concatenated layers) onto their top two principal components.
pub fn project_2d(codes: &[LatentCode]) -> Result<Projection> {
    if codes.len() < 3 {
        return Err(Error::invalid(format!(
            "projection needs at least 3 codes, got {}",
            codes.len()
        )));
    }
    let rows: Vec<Vec<f64>> = codes
        .iter()
        .map(|c| match c {
            LatentCode::SN(v) => Ok(v.iter().flat_map(|t| t.data().iter().copied()).collect()),
            other => Err(Error::invalid(format!(
                "projection expects sn codes, got {}",
                other.space()
            ))),
        })
        .collect::<Result<_>>()?;
    let dim = rows[0].len();
    if dim < 2 || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::shape("project_2d", "codes have inconsistent sizes"));
    }
    let n = rows.len();
    let mean: Vec<f64> = (0..dim)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);

    if l2 <= PCA_DEGENERATE {
        return Ok(Projection {
            points: rows.iter().map(|r| [r[0], r[1]]).collect(),
            degenerate: true,
            variances: [l1.max(0.0), l2.max(0.0)],
        });
    }

    let axis = |k: usize| -> Vec<f64> {
        let col = eig.eigenvectors.column(order[k]);
        // sign convention: largest-magnitude entry positive
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let s = if pivot < 0.0 { -1.0 } else { 1.0 };
        col.iter().map(|v| v * s).collect()
    };
    let (a1, a2) = (axis(0), axis(1));
    let points = (0..n)
        .map(|i| {
            let r = centered.row(i);
            let x = r.iter().zip(&a1).map(|(u, v)| u * v).sum();
            let y = r.iter().zip(&a2).map(|(u, v)| u * v).sum();
            [x, y]
        })
        .collect();
    Ok(Projection {
        points,
        degenerate: false,
        variances: [l1, l2],
    })
}
