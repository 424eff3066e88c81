//! Miniature style-based generator: mapping MLP `Z → W`, per-layer affine
//! `W → S`, and a synthesis network of weight-demodulated 3x3 convolutions
//! driven by the style vectors.
//!
//! Synthesis starts from a learned constant. Layer `l` (0-based) upsamples
//! its input first when `l` is odd, then applies `leaky_relu(conv(x, W''_l) + bias_l)`
//! where `W''_l` is `W_l` modulated by `s_l` and demodulated per output map.
//! A plain 1x1 toRGB projection follows the last layer of every resolution
//! and the RGB branches are summed through nearest-neighbour upsampling.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{sample_standard_normal, RngState};
use crate::tape::{Tape, Var};
use crate::tensor::{read_blocks, read_f64, read_u32, write_blocks, Tensor};

pub const GENERATOR_MAGIC: &[u8; 4] = b"LSAG";
pub const GENERATOR_VERSION: u32 = 1;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const RGB_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Number of style layers.
    pub k: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    /// Feature channels entering layer 0..k-1, plus the output channels of the last layer.
    pub channels: Vec<usize>,
    /// Spatial size of the learned constant.
    pub const_size: usize,
    /// Demodulation epsilon added under the square root.
    pub epsilon: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            k: 6,
            z_dim: 32,
            w_dim: 32,
            mapping_layers: 3,
            channels: vec![16, 16, 16, 8, 8, 8, 8],
            const_size: 4,
            epsilon: 1e-8,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.z_dim == 0 || self.w_dim == 0 || self.mapping_layers == 0 {
            return Err(Error::invalid("generator dimensions must be positive"));
        }
        if self.channels.len() != self.k + 1 || self.channels.contains(&0) {
            return Err(Error::invalid(format!(
                "channels must list k + 1 = {} positive entries, got {:?}",
                self.k + 1,
                self.channels
            )));
        }
        if self.const_size < 2 {
            return Err(Error::invalid("const_size must be at least 2"));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut res = self.const_size;
        (0..self.k)
            .map(|l| {
                let upsample = l % 2 == 1;
                if upsample {
                    res *= 2;
                }
                let next_upsamples = l + 1 < self.k && (l + 1) % 2 == 1;
                LayerSpec {
                    in_channels: self.channels[l],
                    out_channels: self.channels[l + 1],
                    upsample,
                    resolution: res,
                    to_rgb: l + 1 == self.k || next_upsamples,
                }
            })
            .collect()
    }

    /// Output image side length.
    pub fn resolution(&self) -> usize {
        self.const_size << (self.k / 2)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let r = self.resolution();
        [RGB_CHANNELS, r, r]
    }

    /// Style vector length of every layer (the layer's input channel count).
    pub fn style_dims(&self) -> Vec<usize> {
        self.channels[..self.k].to_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub upsample: bool,
    pub resolution: usize,
    pub to_rgb: bool,
}

/// Weight `[out, in]` and bias `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = self.apply_tape(&mut t, xv)?;
        Ok(t.value(y).clone())
    }

    pub fn apply_tape(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let w = t.constant(self.weight.clone());
        let b = t.constant(self.bias.clone());
        let y = t.matmul(w, x)?;
        t.add(y, b)
    }
}

/// Conv kernel `[out, in, 3, 3]` and bias `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub mapping: Vec<Dense>,
    pub affines: Vec<Dense>,
    pub convs: Vec<ConvLayer>,
    pub constant: Tensor,
    /// One projection per layer with `to_rgb` set, in layer order.
    pub to_rgb: Vec<Dense>,
}

fn gaussian(rng: &mut RngState, shape: &[usize], std: f64, mean: f64) -> Result<Tensor> {
    Ok(sample_standard_normal(rng, shape)?.map(|v| mean + std * v))
}

impl Generator {
    /// Random He-style initialization from `seed`.
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = RngState::new(seed);
        let mut stream = 0u64;
        let mut next = || {
            stream += 1;
            root.split(stream)
        };

        let mut mapping = Vec::new();
        for l in 0..config.mapping_layers {
            let fan_in = if l == 0 { config.z_dim } else { config.w_dim };
            mapping.push(Dense {
                weight: gaussian(
                    &mut next(),
                    &[config.w_dim, fan_in],
                    (2.0 / fan_in as f64).sqrt(),
                    0.0,
                )?,
                bias: gaussian(&mut next(), &[config.w_dim], 0.1, 0.0)?,
            });
        }

        let layers = config.layers();
        let mut affines = Vec::new();
        let mut convs = Vec::new();
        let mut to_rgb = Vec::new();
        for spec in &layers {
            affines.push(Dense {
                weight: gaussian(
                    &mut next(),
                    &[spec.in_channels, config.w_dim],
                    (1.0 / config.w_dim as f64).sqrt(),
                    0.0,
                )?,
                // styles centred on one, as in the usual modulated-conv setup
                bias: Tensor::filled(&[spec.in_channels], 1.0),
            });
            convs.push(ConvLayer {
                weight: gaussian(
                    &mut next(),
                    &[spec.out_channels, spec.in_channels, 3, 3],
                    (2.0 / (9 * spec.in_channels) as f64).sqrt(),
                    0.0,
                )?,
                bias: gaussian(&mut next(), &[spec.out_channels], 0.1, 0.0)?,
            });
            if spec.to_rgb {
                to_rgb.push(Dense {
                    weight: gaussian(
                        &mut next(),
                        &[RGB_CHANNELS, spec.out_channels],
                        0.5 / (spec.out_channels as f64).sqrt(),
                        0.0,
                    )?,
                    bias: Tensor::zeros(&[RGB_CHANNELS]),
                });
            }
        }
        let constant = gaussian(
            &mut next(),
            &[config.channels[0], config.const_size, config.const_size],
            1.0,
            0.0,
        )?;

        let g = Self {
            config,
            mapping,
            affines,
            convs,
            constant,
            to_rgb,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon
    }

    /// Copy with a different demodulation epsilon.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(Error::invalid(format!("epsilon {} must be >= 0", epsilon)));
        }
        let mut g = self.clone();
        g.config.epsilon = epsilon;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let bad = |what: String| Err(Error::Format(format!("inconsistent generator: {}", what)));
        if self.mapping.len() != c.mapping_layers {
            return bad(format!("{} mapping layers", self.mapping.len()));
        }
        for (l, d) in self.mapping.iter().enumerate() {
            let fan_in = if l == 0 { c.z_dim } else { c.w_dim };
            if d.weight.shape() != [c.w_dim, fan_in] || d.bias.shape() != [c.w_dim] {
                return bad(format!("mapping layer {}", l));
            }
        }
        let layers = c.layers();
        if self.affines.len() != c.k || self.convs.len() != c.k {
            return bad("layer count".into());
        }
        let mut rgb = 0;
        for (l, spec) in layers.iter().enumerate() {
            let a = &self.affines[l];
            if a.weight.shape() != [spec.in_channels, c.w_dim] || a.bias.shape() != [spec.in_channels]
            {
                return bad(format!("affine {}", l));
            }
            let conv = &self.convs[l];
            if conv.weight.shape() != [spec.out_channels, spec.in_channels, 3, 3]
                || conv.bias.shape() != [spec.out_channels]
            {
                return bad(format!("conv {}", l));
            }
            if spec.to_rgb {
                let d = self
                    .to_rgb
                    .get(rgb)
                    .ok_or_else(|| Error::Format("missing toRGB layer".into()))?;
                if d.weight.shape() != [RGB_CHANNELS, spec.out_channels]
                    || d.bias.shape() != [RGB_CHANNELS]
                {
                    return bad(format!("toRGB after layer {}", l));
                }
                rgb += 1;
            }
        }
        if rgb != self.to_rgb.len() {
            return bad("toRGB count".into());
        }
        if self.constant.shape() != [c.channels[0], c.const_size, c.const_size] {
            return bad("constant input".into());
        }
        Ok(())
    }

    fn check_layer(&self, l: usize) -> Result<()> {
        if l >= self.k() {
            return Err(Error::invalid(format!(
                "layer {} out of range 0..{}",
                l,
                self.k()
            )));
        }
        Ok(())
    }

    // ---- mapping ----

    pub fn mapping_tape(&self, t: &mut Tape, z: Var) -> Result<Var> {
        if t.value(z).shape() != [self.config.z_dim] {
            return Err(Error::shape(
                "mapping",
                format!("z must be [{}], got {:?}", self.config.z_dim, t.value(z).shape()),
            ));
        }
        let mut x = z;
        for d in &self.mapping {
            let y = d.apply_tape(t, x)?;
            x = t.leaky_relu(y, LEAKY_SLOPE)?;
        }
        Ok(x)
    }

    pub fn mapping(&self, z: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let zv = t.constant(z.clone());
        let w = self.mapping_tape(&mut t, zv)?;
        Ok(t.value(w).clone())
    }

    // ---- affine W → S ----

    pub fn affine_tape(&self, t: &mut Tape, w: Var, l: usize) -> Result<Var> {
        self.check_layer(l)?;
        if t.value(w).shape() != [self.config.w_dim] {
            return Err(Error::shape(
                "affine",
                format!("w must be [{}], got {:?}", self.config.w_dim, t.value(w).shape()),
            ));
        }
        self.affines[l].apply_tape(t, w)
    }

    /// `s_l = A_l w + b_l`.
    pub fn affine(&self, w: &Tensor, l: usize) -> Result<Tensor> {
        let mut t = Tape::new();
        let wv = t.constant(w.clone());
        let s = self.affine_tape(&mut t, wv, l)?;
        Ok(t.value(s).clone())
    }

    // ---- synthesis S → image ----

    fn check_styles(&self, dims: impl Iterator<Item = Vec<usize>>, count: usize) -> Result<()> {
        if count != self.k() {
            return Err(Error::shape(
                "synthesize",
                format!("expected {} style vectors, got {}", self.k(), count),
            ));
        }
        for (l, (shape, want)) in dims.zip(self.config.style_dims()).enumerate() {
            if shape != [want] {
                return Err(Error::shape(
                    "synthesize",
                    format!("style {} has shape {:?}, expected [{}]", l, shape, want),
                ));
            }
        }
        Ok(())
    }

    /// Synthesis from per-layer style vectors already on the tape.
    pub fn synthesize_tape(&self, t: &mut Tape, styles: &[Var]) -> Result<Var> {
        self.check_styles(
            styles.iter().map(|&s| t.value(s).shape().to_vec()),
            styles.len(),
        )?;
        let eps = self.config.epsilon;
        let mut x = t.constant(self.constant.clone());
        let mut rgb: Option<Var> = None;
        let mut rgb_idx = 0;
        for (l, spec) in self.config.layers().iter().enumerate() {
            if spec.upsample {
                x = t.upsample2x(x)?;
                if let Some(r) = rgb {
                    rgb = Some(t.upsample2x(r)?);
                }
            }
            let w = t.constant(self.convs[l].weight.clone());
            let wmod = t.mod_demod(w, styles[l], eps)?;
            let y = t.conv3x3(x, wmod)?;
            let b = t.constant(self.convs[l].bias.clone());
            let y = t.bias_add(y, b)?;
            x = t.leaky_relu(y, LEAKY_SLOPE)?;

            if spec.to_rgb {
                let res = spec.resolution;
                let flat = t.reshape(x, &[spec.out_channels, res * res])?;
                let proj = &self.to_rgb[rgb_idx];
                rgb_idx += 1;
                let pw = t.constant(proj.weight.clone());
                let y = t.matmul(pw, flat)?;
                let y = t.reshape(y, &[RGB_CHANNELS, res, res])?;
                let pb = t.constant(proj.bias.clone());
                let y = t.bias_add(y, pb)?;
                rgb = Some(match rgb {
                    Some(r) => t.add(r, y)?,
                    None => y,
                });
            }
        }
        rgb.ok_or_else(|| Error::invalid("generator has no toRGB layer"))
    }

    /// `G_S`: image from a full style set.
    pub fn synthesize(&self, styles: &[Tensor]) -> Result<Tensor> {
        self.check_styles(styles.iter().map(|s| s.shape().to_vec()), styles.len())?;
        let mut t = Tape::new();
        let vars: Vec<Var> = styles.iter().map(|s| t.constant(s.clone())).collect();
        let img = self.synthesize_tape(&mut t, &vars)?;
        Ok(t.value(img).clone())
    }

    /// Style set from a single `w`, every layer fed the same code.
    pub fn styles_from_w_tape(&self, t: &mut Tape, w: Var) -> Result<Vec<Var>> {
        (0..self.k()).map(|l| self.affine_tape(t, w, l)).collect()
    }

    /// Style set from a `[k, w_dim]` W+ code; row `l` feeds affine `l`.
    pub fn styles_from_wplus_tape(&self, t: &mut Tape, wplus: Var) -> Result<Vec<Var>> {
        if t.value(wplus).shape() != [self.k(), self.config.w_dim] {
            return Err(Error::shape(
                "to_style",
                format!(
                    "W+ code must be [{}, {}], got {:?}",
                    self.k(),
                    self.config.w_dim,
                    t.value(wplus).shape()
                ),
            ));
        }
        (0..self.k())
            .map(|l| {
                let row = t.row(wplus, l)?;
                self.affine_tape(t, row, l)
            })
            .collect()
    }

    pub fn styles_from_w(&self, w: &Tensor) -> Result<Vec<Tensor>> {
        (0..self.k()).map(|l| self.affine(w, l)).collect()
    }

    pub fn generate_from_w(&self, w: &Tensor) -> Result<Tensor> {
        self.synthesize(&self.styles_from_w(w)?)
    }

    /// Full pipeline `z → w → s → image`.
    pub fn generate_from_z(&self, z: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let zv = t.constant(z.clone());
        let img = self.generate_from_z_tape(&mut t, zv)?;
        Ok(t.value(img).clone())
    }

    pub fn generate_from_z_tape(&self, t: &mut Tape, z: Var) -> Result<Var> {
        let w = self.mapping_tape(t, z)?;
        let styles = self.styles_from_w_tape(t, w)?;
        self.synthesize_tape(t, &styles)
    }

    /// Latent `z` for sample `index` of the stream rooted at `seed`.
    pub fn sample_z(&self, seed: u64, index: u64) -> Result<Tensor> {
        sample_standard_normal(&mut RngState::new(seed).split(index), &[self.config.z_dim])
    }

    /// Empirical mean of `n` mapped codes, summed in sample order.
    pub fn mean_w(&self, n: usize, seed: u64) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::invalid("mean_w needs at least one sample"));
        }
        let mut acc = vec![0.0; self.config.w_dim];
        for i in 0..n {
            let w = self.mapping(&self.sample_z(seed, i as u64)?)?;
            for (a, v) in acc.iter_mut().zip(w.data()) {
                *a += v;
            }
        }
        Ok(Tensor::vector(acc.into_iter().map(|v| v / n as f64).collect()))
    }

    // ---- checkpoint ----

    fn named_blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, d) in self.mapping.iter().enumerate() {
            out.push((format!("mapping.{}.weight", l), &d.weight));
            out.push((format!("mapping.{}.bias", l), &d.bias));
        }
        for (l, d) in self.affines.iter().enumerate() {
            out.push((format!("affine.{}.weight", l), &d.weight));
            out.push((format!("affine.{}.bias", l), &d.bias));
        }
        for (l, c) in self.convs.iter().enumerate() {
            out.push((format!("conv.{}.weight", l), &c.weight));
            out.push((format!("conv.{}.bias", l), &c.bias));
        }
        for (l, d) in self.to_rgb.iter().enumerate() {
            out.push((format!("to_rgb.{}.weight", l), &d.weight));
            out.push((format!("to_rgb.{}.bias", l), &d.bias));
        }
        out.push(("constant".to_string(), &self.constant));
        out
    }

    /// Header (`"LSAG"`, version, k, z_dim, w_dim, mapping_layers,
    /// const_size, channel list, epsilon) followed by named tensor blocks.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let c = &self.config;
        w.write_all(GENERATOR_MAGIC)?;
        for v in [
            GENERATOR_VERSION,
            c.k as u32,
            c.z_dim as u32,
            c.w_dim as u32,
            c.mapping_layers as u32,
            c.const_size as u32,
            c.channels.len() as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &ch in &c.channels {
            w.write_all(&(ch as u32).to_le_bytes())?;
        }
        w.write_all(&c.epsilon.to_le_bytes())?;
        write_blocks(w, &self.named_blocks())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != GENERATOR_MAGIC {
            return Err(Error::Format("not a generator checkpoint".into()));
        }
        let version = read_u32(r)?;
        if version != GENERATOR_VERSION {
            return Err(Error::Format(format!("unsupported generator version {}", version)));
        }
        let k = read_u32(r)? as usize;
        let z_dim = read_u32(r)? as usize;
        let w_dim = read_u32(r)? as usize;
        let mapping_layers = read_u32(r)? as usize;
        let const_size = read_u32(r)? as usize;
        let nch = read_u32(r)? as usize;
        if nch > 1024 {
            return Err(Error::Format(format!("{} channel entries", nch)));
        }
        let channels = (0..nch)
            .map(|_| read_u32(r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let epsilon = read_f64(r)?;
        let config = GeneratorConfig {
            k,
            z_dim,
            w_dim,
            mapping_layers,
            channels,
            const_size,
            epsilon,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;

        let mut blocks: std::collections::BTreeMap<String, Tensor> =
            read_blocks(r)?.into_iter().collect();
        let mut take = |name: String| {
            blocks
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing block {}", name)))
        };
        let mut dense = |prefix: &str, n: usize| -> Result<Vec<Dense>> {
            (0..n)
                .map(|l| {
                    Ok(Dense {
                        weight: take(format!("{}.{}.weight", prefix, l))?,
                        bias: take(format!("{}.{}.bias", prefix, l))?,
                    })
                })
                .collect()
        };
        let n_rgb = config.layers().iter().filter(|s| s.to_rgb).count();
        let mapping = dense("mapping", mapping_layers)?;
        let affines = dense("affine", k)?;
        let convs = dense("conv", k)?
            .into_iter()
            .map(|d| ConvLayer {
                weight: d.weight,
                bias: d.bias,
            })
            .collect();
        let to_rgb = dense("to_rgb", n_rgb)?;
        let constant = take("constant".into())?;
        let g = Self {
            config,
            mapping,
            affines,
            convs,
            constant,
            to_rgb,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let g = Self::read_from(&mut cur)?;
        if !cur.is_empty() {
            return Err(Error::Format("trailing bytes after generator".into()));
        }
        Ok(g)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{:02x}", b)).collect()
    }
}
