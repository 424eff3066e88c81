use std::path::Path;

use anyhow::{bail, Context, Result};
use lsap_core::alignment::{nscd_of_styles, nscd_single};
use lsap_core::config::RunConfig;
use lsap_core::editing::{edit, find_direction, lec, render, DirectionMeta, ToyAttribute};
use lsap_core::inversion::{
    ablate_lambda, ablation_csv, ablation_targets, check_trend, invert_encode, lambda_preset,
    lambda_retuned, train_encoder, EncoderParams, InversionConfig, Inverter,
};
use lsap_core::latent::{estimate_mean_code, normalize_layers, project_2d, styles_of, LatentCode};
use lsap_core::properties::run_property_suite;
use lsap_core::rng::derive_seed;
use lsap_core::{Generator, Tensor};
use serde::Serialize;

use crate::files::{self, encode_png, ClampCounts, Outputs};
use crate::Command;

const LEC_TARGET_PURPOSE: u64 = 0x4C45_4354;

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_json(&text).with_context(|| format!("config {}", p.display()))
        }
    }
}

fn csv_floats(vals: &[f64]) -> String {
    vals.iter().map(|v| format!("{:.12e}", v)).collect::<Vec<_>>().join(",")
}

/// Style set of any code; the generator is required for z, w and wplus codes.
fn code_styles(g: Option<&Generator>, code: &LatentCode) -> Result<Vec<Tensor>> {
    match (code, g) {
        (LatentCode::S(s) | LatentCode::SN(s), _) => Ok(s.clone()),
        (_, Some(g)) => Ok(styles_of(g, code)?),
        (c, None) => bail!(lsap_core::Error::invalid(format!(
            "{} codes need --gen to reach style space",
            c.space()
        ))),
    }
}

#[derive(Serialize)]
struct ImageRecord {
    file: String,
    clamped: ClampCounts,
}

fn add_png(out: &mut Outputs, name: &str, img: &Tensor) -> Result<ImageRecord> {
    let (bytes, clamped) = encode_png(img)?;
    out.add(name, bytes);
    Ok(ImageRecord {
        file: name.to_string(),
        clamped,
    })
}

pub fn run(cmd: &Command) -> Result<()> {
    let mut out = Outputs::default();
    let dir = match cmd {
        Command::PrintConfig { config } => {
            print!("{}", load_config(config.as_deref())?.to_json());
            return Ok(());
        }
        Command::InitGen { common } => {
            let cfg = load_config(common.config.as_deref())?;
            let g = Generator::init(cfg.generator.clone(), cfg.seed)?;
            #[derive(Serialize)]
            struct Info<'a> {
                seed: u64,
                checksum: String,
                config: &'a lsap_core::GeneratorConfig,
            }
            out.add("generator.lsag", g.to_bytes());
            out.json(
                "generator.json",
                &Info {
                    seed: cfg.seed,
                    checksum: g.checksum(),
                    config: &g.config,
                },
            )?;
            &common.out
        }
        Command::MeanCode {
            common,
            gen,
            k_samples,
            seed,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let g = files::load_generator(gen)?;
            let k = k_samples.unwrap_or(cfg.mean_code.k_samples);
            let mu = estimate_mean_code(&g, k, seed.unwrap_or(cfg.seed))?;
            out.add("mean_code.bin", files::mean_code_bytes(&mu)?);
            out.json("mean_code.json", &mu.meta())?;
            &common.out
        }
        Command::Sample { common, gen, n, seed } => {
            let cfg = load_config(common.config.as_deref())?;
            let g = files::load_generator(gen)?;
            if *n == 0 {
                bail!(lsap_core::Error::invalid("--n must be >= 1"));
            }
            let seed = seed.unwrap_or(cfg.seed);
            let mut ws = Vec::new();
            let mut sns = Vec::new();
            let mut images = Vec::new();
            let mut records = Vec::new();
            for i in 0..*n {
                let z = g.sample_z(seed, i as u64)?;
                let w = g.mapping(&z)?;
                let styles = g.styles_from_w(&w)?;
                let img = g.synthesize(&styles)?;
                records.push(add_png(&mut out, &format!("sample_{:04}.png", i), &img)?);
                sns.push(LatentCode::SN(normalize_layers(&styles)?));
                ws.push(LatentCode::W(w));
                images.push(img);
            }
            out.add("codes_w.bin", files::codes_bytes(&ws)?);
            out.add("codes_sn.bin", files::codes_bytes(&sns)?);
            out.add("images.lsat", Tensor::stack(&images)?.to_bytes());
            #[derive(Serialize)]
            struct Report {
                n: usize,
                seed: u64,
                images: Vec<ImageRecord>,
            }
            out.json("sample_report.json", &Report { n: *n, seed, images: records })?;
            &common.out
        }
        Command::Invert {
            common,
            gen,
            mean_code,
            target,
            space,
            lambda,
            steps,
            lr,
            seed,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let g = files::load_generator(gen)?;
            let mu = files::load_mean_code(mean_code, Some(&g))?;
            let x = files::load_image(target)?;
            let mut inv = cfg.inversion.clone();
            if let Some(s) = space {
                if *s != inv.space {
                    let keep = InversionConfig { space: *s, lambda: lambda_preset(*s), ..inv.clone() };
                    inv = keep;
                }
            }
            inv.lambda = lambda.unwrap_or(inv.lambda);
            inv.steps = steps.unwrap_or(inv.steps);
            inv.lr = lr.unwrap_or(inv.lr);
            inv.seed = seed.unwrap_or(inv.seed);
            inv.validate()?;
            let report = Inverter::new(&g, &mu, inv.seed)?.run(&x, &inv)?;
            eprintln!("invert: {:.3}s", report.wall_clock_secs);
            let mut traj = String::from("step,image_loss,nscd,total\n");
            for r in &report.trajectory {
                traj.push_str(&format!(
                    "{},{:.12e},{:.12e},{:.12e}\n",
                    r.step, r.image_loss, r.nscd, r.total
                ));
            }
            out.text("trajectory.csv", traj);
            #[derive(Serialize)]
            struct Report<'a> {
                config: &'a InversionConfig,
                #[serde(flatten)]
                report: &'a lsap_core::inversion::InversionReport,
                reconstruction: ImageRecord,
            }
            let recon = render(&g, &report.final_code)?;
            let rec = add_png(&mut out, "reconstruction.png", &recon)?;
            out.add("code.bin", files::codes_bytes(std::slice::from_ref(&report.final_code))?);
            out.json(
                "report.json",
                &Report {
                    config: &inv,
                    report: &report,
                    reconstruction: rec,
                },
            )?;
            &common.out
        }
        Command::TrainEncoder {
            common,
            gen,
            mean_code,
            lambda,
            iterations,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let g = files::load_generator(gen)?;
            let mu = files::load_mean_code(mean_code, Some(&g))?;
            let mut ec = cfg.encoder.clone();
            ec.lambda = lambda.unwrap_or(ec.lambda);
            ec.iterations = iterations.unwrap_or(ec.iterations);
            ec.validate()?;
            let trained = train_encoder(&g, &mu, &ec)?;
            let mut buf = Vec::new();
            trained.encoder.write_to(&mut buf)?;
            out.add("encoder.lsae", buf);
            let mut curve = String::from("iteration,loss,image_loss,d_reg,nscd\n");
            for r in &trained.curve {
                curve.push_str(&format!(
                    "{},{:.12e},{:.12e},{:.12e},{:.12e}\n",
                    r.iteration, r.loss, r.image_loss, r.d_reg, r.nscd
                ));
            }
            out.text("train_curve.csv", curve);
            #[derive(Serialize)]
            struct Report<'a> {
                config: &'a lsap_core::inversion::EncoderTrainConfig,
                first: &'a lsap_core::inversion::TrainRecord,
                last: &'a lsap_core::inversion::TrainRecord,
            }
            out.json(
                "train_report.json",
                &Report {
                    config: &ec,
                    first: &trained.curve[0],
                    last: trained.curve.last().expect("at least one iteration"),
                },
            )?;
            &common.out
        }
        Command::Encode {
            common,
            encoder,
            target,
            gen,
        } => {
            let enc = EncoderParams::read_from(&mut std::io::Cursor::new(files::read(encoder)?))?;
            let x = files::load_image(target)?;
            let code = invert_encode(&x, &enc)?;
            if let Some(gp) = gen {
                let g = files::load_generator(gp)?;
                let recon = render(&g, &code)?;
                let rec = add_png(&mut out, "reconstruction.png", &recon)?;
                let d = recon.sub(&x)?;
                #[derive(Serialize)]
                struct Report {
                    mse: f64,
                    reconstruction: ImageRecord,
                }
                out.json(
                    "encode_report.json",
                    &Report {
                        mse: d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64,
                        reconstruction: rec,
                    },
                )?;
            }
            out.add("code.bin", files::codes_bytes(&[code])?);
            &common.out
        }
        Command::Nscd {
            common,
            codes,
            mean_code,
            gen,
        } => {
            let g = gen.as_deref().map(files::load_generator).transpose()?;
            let mu = files::load_mean_code(mean_code, g.as_ref())?;
            let codes = files::load_codes(codes)?;
            let mut csv = String::from("code_id,nscd");
            for l in 0..mu.k() {
                csv.push_str(&format!(",layer_{}", l));
            }
            csv.push('\n');
            let mut sets = Vec::with_capacity(codes.len());
            for (i, c) in codes.iter().enumerate() {
                let styles = code_styles(g.as_ref(), c)?;
                let v = nscd_single(&styles, &mu)?;
                csv.push_str(&format!("{},{:.12e},{}\n", i, v.value, csv_floats(&v.per_layer)));
                sets.push(styles);
            }
            out.text("nscd.csv", csv);
            out.json("nscd.json", &nscd_of_styles(&sets, &mu)?)?;
            &common.out
        }
        Command::FindDirection {
            common,
            gen,
            attribute,
            n_samples,
            seed,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let g = files::load_generator(gen)?;
            let attr: ToyAttribute = match attribute {
                Some(a) => a.parse()?,
                None => cfg.editing.attribute.clone(),
            };
            let n = n_samples.unwrap_or(cfg.editing.n_samples);
            let seed = seed.unwrap_or(cfg.seed);
            let d = find_direction(&g, &attr, n, seed)?;
            let mut buf = Vec::new();
            d.write_to(&mut buf)?;
            out.add("direction.bin", buf);
            out.json(
                "direction.json",
                &DirectionMeta {
                    attribute: attr,
                    fit_quality: d.fit_quality,
                    n_samples: n,
                    seed,
                },
            )?;
            &common.out
        }
        Command::Edit {
            common,
            code,
            direction,
            alpha,
            gen,
        } => {
            let codes = files::load_codes(code)?;
            let d = files::load_direction(direction)?;
            let edited = codes
                .iter()
                .map(|c| edit(c, &d, *alpha))
                .collect::<lsap_core::Result<Vec<_>>>()?;
            if let Some(gp) = gen {
                let g = files::load_generator(gp)?;
                let mut records = Vec::new();
                for (i, c) in edited.iter().enumerate() {
                    records.push(add_png(&mut out, &format!("edited_{:04}.png", i), &render(&g, c)?)?);
                }
                out.json("edit_report.json", &records)?;
            }
            out.add("code.bin", files::codes_bytes(&edited)?);
            &common.out
        }
        Command::Lec {
            common,
            gen,
            direction,
            alpha,
            n_targets,
            encoder,
            mean_code,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let g = files::load_generator(gen)?;
            let d = files::load_direction(direction)?;
            let alpha = alpha.unwrap_or(cfg.editing.alpha);
            let n = n_targets.unwrap_or(cfg.editing.lec_targets);
            if n == 0 {
                bail!(lsap_core::Error::invalid("--n-targets must be >= 1"));
            }
            let targets = ablation_targets(&g, n, derive_seed(cfg.seed, LEC_TARGET_PURPOSE))?;
            let report = match (encoder, mean_code) {
                (Some(e), _) => {
                    let enc = EncoderParams::read_from(&mut std::io::Cursor::new(files::read(e)?))?;
                    lec(&|x: &Tensor| invert_encode(x, &enc), &g, &d, alpha, &targets)?
                }
                (None, Some(m)) => {
                    let mu = files::load_mean_code(m, Some(&g))?;
                    let inv = Inverter::new(&g, &mu, cfg.inversion.seed)?;
                    let ic = cfg.inversion.clone();
                    lec(&|x: &Tensor| Ok(inv.run(x, &ic)?.final_code), &g, &d, alpha, &targets)?
                }
                (None, None) => bail!(lsap_core::Error::invalid(
                    "lec needs --encoder or --mean-code for latent optimization"
                )),
            };
            out.text("lec.csv", report.to_csv());
            out.json("lec_report.json", &report)?;
            &common.out
        }
        Command::Ablate {
            common,
            gen,
            mean_code,
            n_targets,
            steps,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let g = files::load_generator(gen)?;
            let mu = files::load_mean_code(mean_code, Some(&g))?;
            let mut base = cfg.inversion.clone();
            base.steps = steps.unwrap_or(base.steps);
            let n = n_targets.unwrap_or(cfg.ablation.n_targets);
            let rows = ablate_lambda(&g, &mu, &cfg.ablation.lambdas, n, &base)?;
            let trend = check_trend(&rows, 0.05);
            out.text("table5_trend.csv", ablation_csv(&rows));
            #[derive(Serialize)]
            struct Report<'a> {
                n_targets: usize,
                base: &'a InversionConfig,
                lambda_preset: f64,
                lambda_retuned: f64,
                rows: &'a [lsap_core::inversion::AblationRow],
                trend: &'a lsap_core::inversion::TrendCheck,
            }
            out.json(
                "ablation_report.json",
                &Report {
                    n_targets: n,
                    base: &base,
                    lambda_preset: lambda_preset(base.space),
                    lambda_retuned: lambda_retuned(base.space),
                    rows: &rows,
                    trend: &trend,
                },
            )?;
            &common.out
        }
        Command::Props {
            common,
            gen,
            z_seeds,
            z_steps,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let g = files::load_generator(gen)?;
            let checks = run_property_suite(
                &g,
                cfg.seed,
                z_seeds.unwrap_or(cfg.properties.z_seeds),
                z_steps.unwrap_or(cfg.properties.z_steps),
            )?;
            #[derive(Serialize)]
            struct Report<'a> {
                all_passed: bool,
                checks: &'a [lsap_core::properties::PropertyReport],
            }
            out.json(
                "properties_report.json",
                &Report {
                    all_passed: checks.iter().all(|c| c.passed),
                    checks: &checks,
                },
            )?;
            &common.out
        }
        Command::Project { common, codes, gen } => {
            let g = gen.as_deref().map(files::load_generator).transpose()?;
            let codes = files::load_codes(codes)?;
            let sn = codes
                .iter()
                .map(|c| Ok(LatentCode::SN(normalize_layers(&code_styles(g.as_ref(), c)?)?)))
                .collect::<Result<Vec<_>>>()?;
            let p = project_2d(&sn)?;
            out.text("projection.csv", p.to_csv());
            #[derive(Serialize)]
            struct Report<'a> {
                n: usize,
                degenerate: bool,
                variances: &'a [f64],
            }
            out.json(
                "projection.json",
                &Report {
                    n: p.points.len(),
                    degenerate: p.degenerate,
                    variances: &p.variances,
                },
            )?;
            &common.out
        }
    };
    out.commit(dir)?;
    Ok(())
}

