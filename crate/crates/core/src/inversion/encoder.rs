use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ENCODER_LAMBDA_D_REG_PRESET, ENCODER_LAMBDA_PRESET, W_AVG_SAMPLES};
use crate::adam::{Adam, AdamConfig};
use crate::alignment::nscd_loss;
use crate::error::{Error, Result};
use crate::generator::{ConvLayer, Dense, Generator, LEAKY_SLOPE, RGB_CHANNELS};
use crate::latent::{LatentCode, MeanCode};
use crate::rng::{derive_seed, sample_standard_normal, RngState};
use crate::tape::{Tape, Var};
use crate::tensor::{read_blocks, read_u32, write_blocks, Tensor};

pub const ENCODER_MAGIC: &[u8; 4] = b"LSAE";
pub const ENCODER_VERSION: u32 = 1;
const BLOCK_CHANNELS: [usize; 5] = [RGB_CHANNELS, 8, 16, 16, 16];

const INIT_PURPOSE: u64 = 0x454E_4349;
const DATA_PURPOSE: u64 = 0x454E_4344;
const W_AVG_PURPOSE: u64 = 0x454E_4357;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderTrainConfig {
    /// Alignment weight.
    pub lambda: f64,
    /// Delta-regularization weight.
    pub lambda_d_reg: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Size of the pool of training latents; 0 draws fresh latents every batch.
    pub train_set_size: usize,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            lambda: ENCODER_LAMBDA_PRESET,
            lambda_d_reg: ENCODER_LAMBDA_D_REG_PRESET,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            iterations: 1200,
            seed: 0,
            train_set_size: 0,
        }
    }
}

impl EncoderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("lambda_d_reg", self.lambda_d_reg)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{} must be >= 0, got {}", name, v)));
            }
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
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::invalid("batch_size and iterations must be >= 1"));
        }
        Ok(())
    }
}

/// Four conv blocks (conv 3x3, bias, leaky-relu, 2x average pool) and a
/// dense head predicting a base `w` offset plus one delta per style layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub k: usize,
    pub w_dim: usize,
    pub blocks: Vec<ConvLayer>,
    pub head: Dense,
    /// Added to the predicted base code.
    pub w_avg: Tensor,
}

impl EncoderParams {
    pub fn init(g: &Generator, seed: u64) -> Result<Self> {
        let res = g.config.resolution();
        if res % 16 != 0 {
            return Err(Error::invalid(format!(
                "encoder needs a resolution divisible by 16, got {}",
                res
            )));
        }
        let mut rng = RngState::new(derive_seed(seed, INIT_PURPOSE));
        let mut blocks = Vec::new();
        for pair in BLOCK_CHANNELS.windows(2) {
            let (cin, cout) = (pair[0], pair[1]);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let weight = sample_standard_normal(&mut rng, &[cout, cin, 3, 3])?.scale(std);
            blocks.push(ConvLayer {
                weight,
                bias: Tensor::zeros(&[cout]),
            });
        }
        let side = res / 16;
        let feat = BLOCK_CHANNELS[4] * side * side;
        let (k, w_dim) = (g.k(), g.config.w_dim);
        let out = w_dim * (k + 1);
        let std = 0.01 / (feat as f64).sqrt();
        let head = Dense {
            weight: sample_standard_normal(&mut rng, &[out, feat])?.scale(std),
            bias: Tensor::zeros(&[out]),
        };
        let w_avg = g.mean_w(W_AVG_SAMPLES, derive_seed(seed, W_AVG_PURPOSE))?;
        Ok(Self {
            k,
            w_dim,
            blocks,
            head,
            w_avg,
        })
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(b.weight.clone());
            out.push(b.bias.clone());
        }
        out.push(self.head.weight.clone());
        out.push(self.head.bias.clone());
        out
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) {
        let mut it = params.into_iter();
        for b in self.blocks.iter_mut() {
            b.weight = it.next().expect("block weight");
            b.bias = it.next().expect("block bias");
        }
        self.head.weight = it.next().expect("head weight");
        self.head.bias = it.next().expect("head bias");
    }

    /// Forward pass with parameters already on the tape (in `params()` order).
    /// Returns the `[k, w_dim]` code and the `[k * w_dim]` delta vector.
    pub fn forward_tape(&self, t: &mut Tape, p: &[Var], image: Var) -> Result<(Var, Var)> {
        let mut x = image;
        for i in 0..self.blocks.len() {
            let y = t.conv3x3(x, p[2 * i])?;
            let y = t.bias_add(y, p[2 * i + 1])?;
            let y = t.leaky_relu(y, LEAKY_SLOPE)?;
            x = t.avgpool2x(y)?;
        }
        let n = t.value(x).len();
        let flat = t.reshape(x, &[n])?;
        let hw = p[2 * self.blocks.len()];
        let hb = p[2 * self.blocks.len() + 1];
        let h = t.matmul(hw, flat)?;
        let h = t.add(h, hb)?;
        let wa = t.constant(self.w_avg.clone());
        let offset = t.slice(h, 0, &[self.w_dim])?;
        let base = t.add(wa, offset)?;
        let deltas = t.slice(h, self.w_dim, &[self.k * self.w_dim])?;
        let mut rows = Vec::with_capacity(self.k);
        for l in 0..self.k {
            let d = t.slice(deltas, l * self.w_dim, &[self.w_dim])?;
            rows.push(t.add(base, d)?);
        }
        let wplus = t.concat(&rows, &[self.k, self.w_dim])?;
        Ok((wplus, deltas))
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = image.shape();
        if s.len() != 3 || s[0] != RGB_CHANNELS || s[1] != s[2] || s[1] % 16 != 0 {
            return Err(Error::shape("encode", format!("image shape {:?}", s)));
        }
        let expect = self.head.weight.shape()[1];
        if BLOCK_CHANNELS[4] * (s[1] / 16) * (s[1] / 16) != expect {
            return Err(Error::shape(
                "encode",
                format!("image shape {:?} does not fit the encoder", s),
            ));
        }
        Ok(())
    }

    /// Deterministic single forward pass.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        let mut t = Tape::new();
        let p: Vec<Var> = self.params().into_iter().map(|x| t.constant(x)).collect();
        let img = t.constant(image.clone());
        let (wplus, _) = self.forward_tape(&mut t, &p, img)?;
        Ok(t.value(wplus).clone())
    }

    /// Mean per-layer delta norm for an image.
    pub fn delta_norm(&self, image: &Tensor) -> Result<f64> {
        self.check_image(image)?;
        let mut t = Tape::new();
        let p: Vec<Var> = self.params().into_iter().map(|x| t.constant(x)).collect();
        let img = t.constant(image.clone());
        let (_, deltas) = self.forward_tape(&mut t, &p, img)?;
        let d = t.value(deltas);
        let mut total = 0.0;
        for l in 0..self.k {
            let row = &d.data()[l * self.w_dim..(l + 1) * self.w_dim];
            total += row.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        Ok(total / self.k as f64)
    }

    fn named_blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block.{}.weight", i), &b.weight));
            out.push((format!("block.{}.bias", i), &b.bias));
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out.push(("w_avg".to_string(), &self.w_avg));
        out
    }

    /// `"LSAE" | u32 version | u32 k | u32 w_dim` then named tensor blocks.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(ENCODER_MAGIC)?;
        w.write_all(&ENCODER_VERSION.to_le_bytes())?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        w.write_all(&(self.w_dim as u32).to_le_bytes())?;
        write_blocks(w, &self.named_blocks())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ENCODER_MAGIC {
            return Err(Error::Format("not an encoder file".into()));
        }
        let version = read_u32(r)?;
        if version != ENCODER_VERSION {
            return Err(Error::Format(format!("unsupported encoder version {}", version)));
        }
        let k = read_u32(r)? as usize;
        let w_dim = read_u32(r)? as usize;
        let mut blocks = read_blocks(r)?.into_iter();
        let mut take = |name: &str| -> Result<Tensor> {
            match blocks.next() {
                Some((n, t)) if n == name => Ok(t),
                Some((n, _)) => Err(Error::Format(format!("expected block {}, found {}", name, n))),
                None => Err(Error::Format(format!("missing block {}", name))),
            }
        };
        let mut convs = Vec::new();
        for (i, pair) in BLOCK_CHANNELS.windows(2).enumerate() {
            let weight = take(&format!("block.{}.weight", i))?;
            let bias = take(&format!("block.{}.bias", i))?;
            if weight.shape() != [pair[1], pair[0], 3, 3] || bias.shape() != [pair[1]] {
                return Err(Error::Format(format!("encoder block {} has wrong shape", i)));
            }
            convs.push(ConvLayer { weight, bias });
        }
        let hw = take("head.weight")?;
        let hb = take("head.bias")?;
        let w_avg = take("w_avg")?;
        if hw.rank() != 2 || hw.shape()[0] != w_dim * (k + 1) || hb.shape() != [w_dim * (k + 1)] {
            return Err(Error::Format("encoder head has wrong shape".into()));
        }
        if w_avg.shape() != [w_dim] {
            return Err(Error::Format("encoder w_avg has wrong shape".into()));
        }
        Ok(Self {
            k,
            w_dim,
            blocks: convs,
            head: Dense {
                weight: hw,
                bias: hb,
            },
            w_avg,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub image_loss: f64,
    pub d_reg: f64,
    pub nscd: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedEncoder {
    pub encoder: EncoderParams,
    pub curve: Vec<TrainRecord>,
}

struct SampleOut {
    grads: Vec<Tensor>,
    loss: f64,
    image_loss: f64,
    d_reg: f64,
    nscd: f64,
}

fn sample_loss(
    g: &Generator,
    mu: &MeanCode,
    enc: &EncoderParams,
    params: &[Tensor],
    target: &Tensor,
    cfg: &EncoderTrainConfig,
) -> Result<SampleOut> {
    let mut t = Tape::new();
    let p: Vec<Var> = params.iter().map(|x| t.leaf(x.clone())).collect();
    let img = t.constant(target.clone());
    let (wplus, deltas) = enc.forward_tape(&mut t, &p, img)?;
    let styles = g.styles_from_wplus_tape(&mut t, wplus)?;
    let out = g.synthesize_tape(&mut t, &styles)?;
    let image_loss = t.mse(out, img)?;
    let d_reg = t.sum_squares(deltas)?;
    let align = nscd_loss(&mut t, &styles, mu)?;
    let a = t.scale(d_reg, cfg.lambda_d_reg)?;
    let b = t.scale(align, cfg.lambda)?;
    let total = t.add(image_loss, a)?;
    let total = t.add(total, b)?;
    let grads = t.backward(total)?;
    Ok(SampleOut {
        grads: p.iter().map(|&v| grads.wrt(v)).collect(),
        loss: t.value(total).item(),
        image_loss: t.value(image_loss).item(),
        d_reg: t.value(d_reg).item(),
        nscd: t.value(align).item(),
    })
}

/// Trains an encoder on images `G(z)` generated on the fly.
///
/// Per-sample gradients are evaluated in parallel and summed in batch order.
pub fn train_encoder(g: &Generator, mu: &MeanCode, cfg: &EncoderTrainConfig) -> Result<TrainedEncoder> {
    cfg.validate()?;
    mu.check_generator(g)?;
    let mut enc = EncoderParams::init(g, cfg.seed)?;
    let data_seed = derive_seed(cfg.seed, DATA_PURPOSE);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
    };
    let mut adam = Adam::new(adam_cfg);
    let mut params = enc.params();
    let mut curve = Vec::with_capacity(cfg.iterations);
    let mut initial: Option<f64> = None;
    let mut above = 0usize;
    let bs = cfg.batch_size;
    for it in 0..cfg.iterations {
        let abort = |e: Error| Error::Aborted {
            step: it,
            reason: e.to_string(),
        };
        let outs: Vec<Result<SampleOut>> = (0..bs)
            .into_par_iter()
            .map(|b| {
                let mut idx = (it * bs + b) as u64;
                if cfg.train_set_size > 0 {
                    idx %= cfg.train_set_size as u64;
                }
                let target = g.generate_from_z(&g.sample_z(data_seed, idx)?)?;
                sample_loss(g, mu, &enc, &params, &target, cfg)
            })
            .collect();
        let mut sum: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let (mut loss, mut image_loss, mut d_reg, mut nscd) = (0.0, 0.0, 0.0, 0.0);
        for o in outs {
            let o = o.map_err(abort)?;
            for (s, gr) in sum.iter_mut().zip(&o.grads) {
                for (a, v) in s.data_mut().iter_mut().zip(gr.data()) {
                    *a += v;
                }
            }
            loss += o.loss;
            image_loss += o.image_loss;
            d_reg += o.d_reg;
            nscd += o.nscd;
        }
        let n = bs as f64;
        let grads: Vec<Tensor> = sum.into_iter().map(|s| s.scale(1.0 / n)).collect();
        let rec = TrainRecord {
            iteration: it,
            loss: loss / n,
            image_loss: image_loss / n,
            d_reg: d_reg / n,
            nscd: nscd / n,
        };
        let init = *initial.get_or_insert(rec.loss);
        if rec.loss > 10.0 * init {
            above += 1;
            if above >= 100 {
                return Err(Error::Aborted {
                    step: it,
                    reason: format!(
                        "training diverged: loss {} above 10x the initial {} for 100 iterations",
                        rec.loss, init
                    ),
                });
            }
        } else {
            above = 0;
        }
        curve.push(rec);
        adam.step(&mut params, &grads).map_err(abort)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(abort(Error::NonFinite("encoder parameters".into())));
        }
        enc.set_params(params.clone());
    }
    Ok(TrainedEncoder {
        encoder: enc,
        curve,
    })
}

/// Embeds an image into W+ with a trained encoder.
pub fn invert_encode(target: &Tensor, enc: &EncoderParams) -> Result<LatentCode> {
    Ok(LatentCode::WPlus(enc.encode(target)?))
}
