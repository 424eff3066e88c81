use lsap_core::editing::{
    edit, find_direction, lec, render, DirectionMeta, EditDirection, ToyAttribute,
};
use lsap_core::inversion::{invert_encode, EncoderParams};
use lsap_core::latent::LatentCode;
use lsap_core::rng::{sample_standard_normal, RngState};
use lsap_core::{Error, Generator, GeneratorConfig, Tensor};
use proptest::prelude::*;
use std::io::Cursor;
use std::sync::OnceLock;

fn gen() -> &'static Generator {
    static G: OnceLock<Generator> = OnceLock::new();
    G.get_or_init(|| Generator::init(GeneratorConfig::default(), 1).unwrap())
}

fn brightness() -> &'static EditDirection {
    static D: OnceLock<EditDirection> = OnceLock::new();
    D.get_or_init(|| find_direction(gen(), &ToyAttribute::Brightness, 2000, 3).unwrap())
}

fn sample_w(seed: u64, i: u64) -> Tensor {
    let g = gen();
    g.mapping(&g.sample_z(seed, i).unwrap()).unwrap()
}

fn normal(seed: u64, shape: &[usize]) -> Tensor {
    sample_standard_normal(&mut RngState::new(seed), shape).unwrap()
}

#[test]
fn brightness_direction_fits_and_brightens() {
    let d = brightness();
    assert!(d.fit_quality > 0.7, "fit {}", d.fit_quality);
    assert!((d.vector.norm() - 1.0).abs() < 1e-12);
    let g = gen();
    let (mut before, mut after) = (0.0, 0.0);
    for i in 0..100 {
        let w = LatentCode::W(sample_w(40, i));
        before += ToyAttribute::Brightness.eval(&render(g, &w).unwrap()).unwrap();
        after += ToyAttribute::Brightness.eval(&render(g, &edit(&w, d, 2.0).unwrap()).unwrap()).unwrap();
    }
    assert!(after > before, "{} vs {}", after / 100.0, before / 100.0);
}

#[test]
fn negated_attribute_gives_the_opposite_direction() {
    let g = gen();
    let a = find_direction(g, &ToyAttribute::Asymmetry, 400, 8).unwrap();
    let b = find_direction(g, &ToyAttribute::Asymmetry.negated(), 400, 8).unwrap();
    assert_eq!(a.vector, b.vector.scale(-1.0));
    assert_eq!(find_direction(g, &ToyAttribute::Asymmetry, 400, 8).unwrap(), a);
}

#[test]
fn too_few_samples_and_constant_attributes_are_rejected() {
    let g = gen();
    assert!(find_direction(g, &ToyAttribute::Brightness, 199, 1).is_err());
    let mut flat = g.clone();
    for rgb in &mut flat.to_rgb {
        rgb.weight = Tensor::zeros(rgb.weight.shape());
        rgb.bias = Tensor::zeros(rgb.bias.shape());
    }
    assert!(matches!(
        find_direction(&flat, &ToyAttribute::Brightness, 200, 1),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn direction_files_round_trip() {
    let d = brightness();
    let meta = DirectionMeta {
        attribute: d.attribute.clone(),
        fit_quality: d.fit_quality,
        n_samples: 2000,
        seed: 3,
    };
    let mut buf = Vec::new();
    d.write_to(&mut buf).unwrap();
    assert_eq!(&EditDirection::read_from(&mut Cursor::new(&buf), &meta).unwrap(), d);
    let json = serde_json::to_string(&meta).unwrap();
    assert!(json.contains("\"brightness\""));
    assert_eq!(serde_json::from_str::<DirectionMeta>(&json).unwrap(), meta);

    let stretched = EditDirection { vector: d.vector.scale(2.0), ..d.clone() };
    let mut buf = Vec::new();
    stretched.write_to(&mut buf).unwrap();
    assert!(EditDirection::read_from(&mut Cursor::new(&buf), &meta).is_err());
}

#[test]
fn w_plus_edits_match_w_edits() {
    let g = gen();
    let w = sample_w(41, 0);
    let wp = LatentCode::WPlus(Tensor::stack(&vec![w.clone(); g.k()]).unwrap());
    let a = render(g, &edit(&LatentCode::W(w), brightness(), 1.5).unwrap()).unwrap();
    let b = render(g, &edit(&wp, brightness(), 1.5).unwrap()).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-14);
}

/// Returns whichever known code renders exactly to the image.
fn lookup_embedder(codes: Vec<LatentCode>) -> impl Fn(&Tensor) -> lsap_core::Result<LatentCode> + Sync {
    let table: Vec<(Tensor, LatentCode)> =
        codes.into_iter().map(|c| (render(gen(), &c).unwrap(), c)).collect();
    move |img: &Tensor| {
        table
            .iter()
            .find(|(t, _)| t == img)
            .map(|(_, c)| c.clone())
            .ok_or_else(|| Error::invalid("unknown image"))
    }
}

#[test]
fn perfect_embedder_has_zero_lec() {
    let g = gen();
    let d = brightness();
    let ws: Vec<LatentCode> = (0..6).map(|i| LatentCode::W(sample_w(42, i))).collect();
    let mut known = ws.clone();
    known.extend(ws.iter().map(|c| edit(c, d, 2.0).unwrap()));
    let embed = lookup_embedder(known);
    let targets: Vec<Tensor> = ws.iter().map(|c| render(g, c).unwrap()).collect();
    let r = lec(&embed, g, d, 2.0, &targets).unwrap();
    assert_eq!(r.n_failed, 0);
    assert!(r.mean_lec < 1e-20 && r.mean_revert_mse < 1e-20);
    assert_eq!(r.to_csv().lines().count(), 7);
}

#[test]
fn failures_are_flagged_per_target() {
    let g = gen();
    let d = brightness();
    let good = LatentCode::W(sample_w(43, 0));
    let embed = lookup_embedder(vec![good.clone(), edit(&good, d, 1.0).unwrap()]);
    let targets = vec![render(g, &good).unwrap(), render(g, &LatentCode::W(sample_w(43, 1))).unwrap()];
    let r = lec(&embed, g, d, 1.0, &targets).unwrap();
    assert_eq!(r.n_failed, 1);
    assert!(!r.rows[0].flagged && r.rows[1].flagged);
    assert!(r.rows[1].lec.is_nan());
    assert!(r.mean_lec.abs() < 1e-20);
    assert!(lec(&embed, g, d, 1.0, &[]).is_err());
}

#[test]
fn lec_with_an_encoder_grows_with_the_edit() {
    let g = gen();
    let enc = EncoderParams::init(g, 5).unwrap();
    let embed = |x: &Tensor| invert_encode(x, &enc);
    let targets: Vec<Tensor> = (0..8).map(|i| g.generate_from_z(&g.sample_z(44, i).unwrap()).unwrap()).collect();
    let at = |alpha: f64| lec(&embed, g, brightness(), alpha, &targets).unwrap();
    let (zero, two) = (at(0.0), at(2.0));
    assert!(zero.rows.iter().all(|r| r.lec >= 0.0 && r.revert_mse >= 0.0));
    assert!(zero.mean_lec < two.mean_lec, "{} vs {}", zero.mean_lec, two.mean_lec);
    assert_eq!(at(2.0), two);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn edits_are_antisymmetric_and_invertible(seed in 0u64..10_000, alpha in -5.0f64..5.0, plus in any::<bool>()) {
        let d = brightness();
        let c = if plus { LatentCode::WPlus(normal(seed, &[6, 32])) } else { LatentCode::W(normal(seed, &[32])) };
        let tensor = |c: &LatentCode| match c {
            LatentCode::W(t) | LatentCode::WPlus(t) => t.clone(),
            _ => unreachable!(),
        };
        let base = tensor(&c);
        let fwd = tensor(&edit(&c, d, alpha).unwrap()).sub(&base).unwrap();
        let bwd = tensor(&edit(&c, d, -alpha).unwrap()).sub(&base).unwrap();
        prop_assert!(fwd.add(&bwd).unwrap().norm() < 1e-12);
        let back = tensor(&edit(&edit(&c, d, alpha).unwrap(), d, -alpha).unwrap());
        prop_assert!(back.max_abs_diff(&base) <= 1e-12);
        prop_assert_eq!(edit(&c, d, 0.0).unwrap(), c);
    }
}
