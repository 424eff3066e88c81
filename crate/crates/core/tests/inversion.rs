use lsap_core::inversion::{
    ablate_lambda, ablation_csv, check_trend, invert_encode, lambda_preset, train_encoder,
    AlignmentTerm, EncoderParams, EncoderTrainConfig, InversionConfig, Inverter,
};
use lsap_core::latent::{estimate_mean_code, LatentCode, MeanCode, Space};
use lsap_core::rng::{sample_standard_normal, RngState};
use lsap_core::{Error, Generator, GeneratorConfig, Tensor};
use std::io::Cursor;
use std::sync::OnceLock;

fn gen() -> &'static Generator {
    static G: OnceLock<Generator> = OnceLock::new();
    G.get_or_init(|| Generator::init(GeneratorConfig::default(), 1).unwrap())
}

fn mu() -> &'static MeanCode {
    static M: OnceLock<MeanCode> = OnceLock::new();
    M.get_or_init(|| estimate_mean_code(gen(), 10_000, 1).unwrap())
}

fn inverter() -> &'static Inverter<'static> {
    static I: OnceLock<Inverter<'static>> = OnceLock::new();
    I.get_or_init(|| Inverter::new(gen(), mu(), 0).unwrap())
}

fn cfg(space: Space, lambda: f64, steps: usize) -> InversionConfig {
    InversionConfig {
        lambda,
        steps,
        ..InversionConfig::preset(space)
    }
}

fn target(seed: u64) -> Tensor {
    let g = gen();
    g.generate_from_z(&g.sample_z(seed, 0).unwrap()).unwrap()
}

#[test]
fn target_at_the_start_point_is_reproduced() {
    let inv = inverter();
    let t = gen().generate_from_w(&inv.w_avg).unwrap();
    let r = inv.run(&t, &cfg(Space::W, 0.0, 20)).unwrap();
    assert!(r.final_mse < 1e-6);
    assert_eq!(r.final_code, LatentCode::W(inv.w_avg.clone()));
}

#[test]
fn reconstruction_improves_on_a_nearby_target() {
    let inv = inverter();
    let r = sample_standard_normal(&mut RngState::new(3), &[32]).unwrap();
    let w = inv.w_avg.add(&r.scale(0.3)).unwrap();
    let t = gen().generate_from_w(&w).unwrap();
    let rep = inv.run(&t, &cfg(Space::W, 0.0, 300)).unwrap();
    let start = rep.trajectory[0].image_loss;
    assert!(rep.final_mse < 0.05 * start, "{} -> {}", start, rep.final_mse);
}

#[test]
fn zero_weight_equals_no_term() {
    let inv = inverter();
    let t = target(4);
    let c = cfg(Space::WPlus, 0.0, 40);
    let on = inv.run_with(&t, &c, AlignmentTerm::On(0.0)).unwrap();
    let off = inv.run_with(&t, &c, AlignmentTerm::Off).unwrap();
    assert_eq!(on.final_code, off.final_code);
    assert_eq!(on.trajectory, off.trajectory);
}

#[test]
fn alignment_lowers_nscd() {
    let inv = inverter();
    let (mut plain, mut aligned) = (0.0, 0.0);
    for i in 0..20 {
        let t = target(100 + i);
        plain += inv.run(&t, &cfg(Space::WPlus, 0.0, 60)).unwrap().final_nscd;
        aligned += inv.run(&t, &cfg(Space::WPlus, 1.0, 60)).unwrap().final_nscd;
    }
    assert!(aligned < plain, "{} vs {}", aligned / 20.0, plain / 20.0);
}

#[test]
fn runs_are_deterministic_and_fully_recorded() {
    let inv = inverter();
    let t = target(5);
    let c = cfg(Space::W, 0.5, 25);
    let a = inv.run(&t, &c).unwrap();
    let b = inv.run(&t, &c).unwrap();
    assert_eq!(a.trajectory.len(), 25);
    assert!(a.trajectory.iter().enumerate().all(|(i, s)| s.step == i));
    assert_eq!(a.final_code, b.final_code);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    for s in &a.trajectory {
        assert!((s.total - (s.image_loss + 0.5 * s.nscd)).abs() < 1e-12);
    }
}

#[test]
fn presets_and_validation() {
    assert_eq!(InversionConfig::preset(Space::WPlus).lambda, lambda_preset(Space::WPlus));
    assert_eq!(InversionConfig::preset(Space::W).lambda, 5.0);
    assert_eq!(InversionConfig::default().space, Space::WPlus);
    let ok = InversionConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        InversionConfig { lambda: -1.0, ..ok.clone() },
        InversionConfig { steps: 0, ..ok.clone() },
        InversionConfig { lr: 0.0, ..ok.clone() },
        InversionConfig { beta1: 1.0, ..ok.clone() },
        InversionConfig { space: Space::S, ..ok.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn bad_targets_are_rejected() {
    let inv = inverter();
    let c = cfg(Space::W, 0.0, 2);
    assert!(matches!(inv.run(&Tensor::zeros(&[3, 16, 16]), &c), Err(Error::Shape { .. })));
    let mut t = target(6);
    t.data_mut()[0] = f64::NAN;
    assert!(inv.run(&t, &c).is_err());
}

#[test]
fn overflow_aborts_with_the_step() {
    let inv = inverter();
    let t = target(7).map(|v| v * 1e200);
    match inv.run(&t, &cfg(Space::W, 0.0, 10)) {
        Err(e @ Error::Aborted { step: 0, .. }) => assert!(e.is_numeric()),
        other => panic!("expected abort, got {:?}", other.map(|r| r.final_mse)),
    }
}

#[test]
fn ablation_rows_follow_the_lambdas() {
    let base = cfg(Space::WPlus, 0.0, 30);
    let rows = ablate_lambda(gen(), mu(), &[0.0, 0.5, 2.0], 3, &base).unwrap();
    assert_eq!(rows.iter().map(|r| r.lambda).collect::<Vec<_>>(), [0.0, 0.5, 2.0]);
    assert!(rows.iter().all(|r| r.n_ok == 3 && !r.flagged));
    assert!(check_trend(&rows, 0.05).passed());
    assert_eq!(ablation_csv(&rows).lines().count(), 4);
    assert!(ablate_lambda(gen(), mu(), &[1.0, 0.5], 3, &base).is_err());
    assert!(ablate_lambda(gen(), mu(), &[], 3, &base).is_err());
}

fn short_training(lambda_d_reg: f64) -> EncoderTrainConfig {
    EncoderTrainConfig {
        lambda_d_reg,
        iterations: 30,
        batch_size: 2,
        lr: 3e-3,
        seed: 2,
        ..EncoderTrainConfig::default()
    }
}

#[test]
fn untrained_encoder_starts_near_the_average() {
    let enc = EncoderParams::init(gen(), 1).unwrap();
    let w = enc.encode(&target(8)).unwrap();
    assert_eq!(w.shape(), &[6, 32]);
    for l in 0..6 {
        assert!(w.row(l).unwrap().max_abs_diff(&enc.w_avg) < 0.1);
    }
}

#[test]
fn delta_regularization_shrinks_deltas() {
    let free = train_encoder(gen(), mu(), &short_training(0.0)).unwrap();
    let tied = train_encoder(gen(), mu(), &short_training(10.0)).unwrap();
    assert_eq!(free.curve.len(), 30);
    let mean_delta = |e: &EncoderParams| -> f64 {
        (0..5).map(|i| e.delta_norm(&target(200 + i)).unwrap()).sum::<f64>() / 5.0
    };
    let (a, b) = (mean_delta(&free.encoder), mean_delta(&tied.encoder));
    assert!(b < a, "{} vs {}", b, a);
}

#[test]
fn encoder_is_deterministic_and_round_trips() {
    let a = train_encoder(gen(), mu(), &short_training(1e-3)).unwrap();
    let b = train_encoder(gen(), mu(), &short_training(1e-3)).unwrap();
    assert_eq!(a.encoder, b.encoder);
    assert_eq!(a.curve, b.curve);
    let x = target(9);
    assert_eq!(invert_encode(&x, &a.encoder).unwrap(), invert_encode(&x, &a.encoder).unwrap());
    let mut buf = Vec::new();
    a.encoder.write_to(&mut buf).unwrap();
    let back = EncoderParams::read_from(&mut Cursor::new(&buf)).unwrap();
    assert_eq!(back, a.encoder);
    buf[0] = b'X';
    assert!(EncoderParams::read_from(&mut Cursor::new(&buf)).is_err());
}

#[test]
fn encoder_config_validation() {
    let ok = EncoderTrainConfig::default();
    assert!(ok.validate().is_ok());
    assert!(EncoderTrainConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
    assert!(EncoderTrainConfig { lambda: f64::NAN, ..ok.clone() }.validate().is_err());
    assert!(train_encoder(gen(), mu(), &EncoderTrainConfig { iterations: 0, ..ok }).is_err());
}
