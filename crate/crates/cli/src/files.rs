use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lsap_core::editing::{DirectionMeta, EditDirection};
use lsap_core::latent::{read_codes, write_codes, LatentCode, MeanCode, MeanCodeMeta};
use lsap_core::tensor::TENSOR_MAGIC;
use lsap_core::{Generator, Tensor};
use serde::Serialize;

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

/// Files produced by a command, written only once the command has succeeded.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn text(&mut self, name: impl Into<String>, s: String) {
        self.add(name, s.into_bytes());
    }

    pub fn json<T: Serialize>(&mut self, name: impl Into<String>, v: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.text(name, s);
        Ok(())
    }

    pub fn commit(self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut written = Vec::new();
        for (name, bytes) in self.files {
            let p = dir.join(&name);
            fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
            written.push(p);
        }
        Ok(written)
    }
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

pub fn load_generator(path: &Path) -> Result<Generator> {
    Generator::from_bytes(&read(path)?).with_context(|| format!("loading generator {}", path.display()))
}

pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn load_mean_code(path: &Path, g: Option<&Generator>) -> Result<MeanCode> {
    let meta: MeanCodeMeta = serde_json::from_slice(&read(&sidecar(path))?)
        .with_context(|| format!("parsing sidecar of {}", path.display()))?;
    let mu = MeanCode::read_from(&mut Cursor::new(read(path)?), meta)?;
    if let Some(g) = g {
        mu.check_generator(g)?;
        if mu.generator_checksum != g.checksum() {
            bail!(lsap_core::Error::invalid(format!(
                "mean code {} was estimated from a different generator",
                path.display()
            )));
        }
    }
    Ok(mu)
}

pub fn mean_code_bytes(mu: &MeanCode) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    mu.write_to(&mut buf)?;
    Ok(buf)
}

pub fn load_codes(path: &Path) -> Result<Vec<LatentCode>> {
    Ok(read_codes(&mut Cursor::new(read(path)?))
        .with_context(|| format!("loading codes {}", path.display()))?)
}

pub fn codes_bytes(codes: &[LatentCode]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_codes(&mut buf, codes)?;
    Ok(buf)
}

pub fn load_direction(path: &Path) -> Result<EditDirection> {
    let meta: DirectionMeta = serde_json::from_slice(&read(&sidecar(path))?)
        .with_context(|| format!("parsing sidecar of {}", path.display()))?;
    Ok(EditDirection::read_from(&mut Cursor::new(read(path)?), &meta)?)
}

/// Image from a tensor file or an 8-bit RGB PNG (mapped to [-1, 1]).
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    if bytes.starts_with(TENSOR_MAGIC) {
        let t = Tensor::from_bytes(&bytes)?;
        return match t.shape() {
            [3, _, _] => Ok(t),
            [1, 3, h, w] => Ok(t.reshaped(&[3, *h, *w])?),
            s => bail!(lsap_core::Error::invalid(format!("image tensor has shape {:?}", s))),
        };
    }
    if bytes.starts_with(&PNG_SIGNATURE) {
        return decode_png(&bytes);
    }
    bail!(lsap_core::Error::invalid(format!(
        "{} is neither a tensor file nor a PNG",
        path.display()
    )))
}

fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size().context("png too large")?];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        bail!(lsap_core::Error::invalid("only 8-bit RGB PNG targets are supported"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = buf[y * info.line_size + 3 * x + c] as f64;
                data[(c * h + y) * w + x] = v / 127.5 - 1.0;
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct ClampCounts {
    pub below: usize,
    pub above: usize,
}

/// `[3, H, W]` image to an 8-bit RGB PNG: `[-1, 1]` maps linearly onto
/// `[0, 255]`, values outside are clamped and counted.
pub fn encode_png(img: &Tensor) -> Result<(Vec<u8>, ClampCounts)> {
    let (h, w) = match img.shape() {
        [3, h, w] => (*h, *w),
        s => bail!(lsap_core::Error::invalid(format!("image tensor has shape {:?}", s))),
    };
    let d = img.data();
    let mut counts = ClampCounts::default();
    let mut pixels = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[(c * h + y) * w + x];
                if v < -1.0 {
                    counts.below += 1;
                } else if v > 1.0 {
                    counts.above += 1;
                }
                let p = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round();
                pixels[(y * w + x) * 3 + c] = p as u8;
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::NoFilter);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&pixels)?;
        writer.finish()?;
    }
    Ok((out, counts))
}
