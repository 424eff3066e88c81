use lsap_core::latent::{
    estimate_mean_code, mean_of_codes, normalize_layers, normalize_style, project_2d, read_codes,
    styles_of, to_style, write_codes, LatentCode, MeanCode,
};
use lsap_core::rng::{sample_standard_normal, RngState};
use lsap_core::{Generator, GeneratorConfig, Tensor};
use proptest::prelude::*;
use std::io::Cursor;
use std::sync::OnceLock;

fn gen() -> &'static Generator {
    static G: OnceLock<Generator> = OnceLock::new();
    G.get_or_init(|| Generator::init(GeneratorConfig::default(), 1).unwrap())
}

fn normal(seed: u64, shape: &[usize]) -> Tensor {
    sample_standard_normal(&mut RngState::new(seed), shape).unwrap()
}

fn sn_sample(seed: u64, i: u64) -> Vec<Tensor> {
    let g = gen();
    normalize_layers(&g.styles_from_w(&g.mapping(&g.sample_z(seed, i).unwrap()).unwrap()).unwrap()).unwrap()
}

fn s_layers(c: LatentCode) -> Vec<Tensor> {
    match c {
        LatentCode::S(s) | LatentCode::SN(s) => s,
        other => panic!("unexpected {:?}", other.space()),
    }
}

#[test]
fn replicated_w_plus_equals_w() {
    let g = gen();
    let w = normal(1, &[32]);
    let wp = Tensor::stack(&vec![w.clone(); g.k()]).unwrap();
    assert_eq!(
        to_style(g, &LatentCode::W(w)).unwrap(),
        to_style(g, &LatentCode::WPlus(wp)).unwrap()
    );
}

#[test]
fn zero_w_gives_the_biases() {
    let g = gen();
    let s = s_layers(to_style(g, &LatentCode::W(Tensor::zeros(&[32]))).unwrap());
    for (l, v) in s.iter().enumerate() {
        assert_eq!(v, &g.affines[l].bias);
    }
}

#[test]
fn w_plus_rows_feed_their_own_layer() {
    let g = gen();
    let wp = normal(2, &[g.k(), 32]);
    let s = s_layers(to_style(g, &LatentCode::WPlus(wp.clone())).unwrap());
    for l in 0..g.k() {
        let a = &g.affines[l];
        let row = wp.row(l).unwrap();
        let cols = a.weight.shape()[1];
        for (r, got) in s[l].data().iter().enumerate() {
            let want: f64 = a.bias.data()[r]
                + (0..cols).map(|c| a.weight.data()[r * cols + c] * row.data()[c]).sum::<f64>();
            assert!((got - want).abs() < 1e-13);
        }
    }
}

#[test]
fn to_style_rejects_style_codes() {
    let g = gen();
    let s = s_layers(to_style(g, &LatentCode::W(normal(3, &[32]))).unwrap());
    assert!(to_style(g, &LatentCode::S(s)).is_err());
    assert!(to_style(g, &LatentCode::W(normal(3, &[31]))).is_err());
}

#[test]
fn normalize_examples() {
    let s = LatentCode::S(vec![Tensor::vector(vec![3.0, 4.0, 0.0]), Tensor::vector(vec![0.0, 2.0])]);
    let n = s_layers(normalize_style(&s).unwrap());
    assert_eq!(n[0].data(), &[0.6, 0.8, 0.0]);
    assert_eq!(n[1].data(), &[0.0, 1.0]);
    let scaled = LatentCode::S(vec![Tensor::vector(vec![21.9, 29.2, 0.0]), Tensor::vector(vec![0.0, 14.6])]);
    let m = s_layers(normalize_style(&scaled).unwrap());
    for (a, b) in n.iter().zip(&m) {
        assert!(a.max_abs_diff(b) < 1e-15);
    }
    let zero = LatentCode::S(vec![Tensor::zeros(&[3])]);
    assert!(normalize_style(&zero).is_err());
}

#[test]
fn single_sample_mean_is_that_sample() {
    let mu = estimate_mean_code(gen(), 1, 4).unwrap();
    let sn = sn_sample(4, 0);
    for (a, b) in mu.layers.iter().zip(&sn) {
        assert!(a.max_abs_diff(b) < 1e-15);
    }
    assert_eq!(mu.k_samples, 1);
    assert_eq!(mu.generator_checksum, gen().checksum());
}

#[test]
fn estimate_equals_mean_of_explicit_samples_in_any_order() {
    let samples: Vec<Vec<Tensor>> = (0..300).map(|i| sn_sample(6, i)).collect();
    let mu = estimate_mean_code(gen(), 300, 6).unwrap();
    let direct = mean_of_codes(&samples).unwrap();
    let mut shuffled = samples.clone();
    shuffled.reverse();
    shuffled.swap(3, 200);
    let permuted = mean_of_codes(&shuffled).unwrap();
    for l in 0..gen().k() {
        assert!(mu.layers[l].max_abs_diff(&direct[l]) < 1e-14);
        assert!(direct[l].max_abs_diff(&permuted[l]) < 1e-14);
        assert!((mu.layers[l].norm() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn mean_code_is_reproducible() {
    let a = estimate_mean_code(gen(), 2000, 7).unwrap();
    let b = estimate_mean_code(gen(), 2000, 7).unwrap();
    assert_eq!(a, b);
    let mut buf = Vec::new();
    a.write_to(&mut buf).unwrap();
    let back = MeanCode::read_from(&mut Cursor::new(buf), a.meta()).unwrap();
    assert_eq!(back, a);
}

fn mean_distance(mu: &MeanCode, seed: u64, n: u64) -> f64 {
    let total: f64 = (0..n)
        .map(|i| {
            let sn = sn_sample(seed, i);
            sn.iter().zip(&mu.layers).map(|(s, m)| 1.0 - s.dot(m)).sum::<f64>() / sn.len() as f64
        })
        .sum();
    total / n as f64
}

#[test]
fn mean_distance_converges_in_k() {
    let small = estimate_mean_code(gen(), 10_000, 21).unwrap();
    let large = estimate_mean_code(gen(), 50_000, 22).unwrap();
    let (a, b) = (mean_distance(&small, 23, 5000), mean_distance(&large, 23, 5000));
    assert!((a - b).abs() < 1e-3, "{} vs {}", a, b);
}

#[test]
fn code_files_round_trip_every_space() {
    let g = gen();
    let w = normal(8, &[32]);
    let s = s_layers(to_style(g, &LatentCode::W(w.clone())).unwrap());
    let codes = vec![
        LatentCode::Z(normal(9, &[32])),
        LatentCode::W(w),
        LatentCode::WPlus(normal(10, &[6, 32])),
        LatentCode::S(s.clone()),
        LatentCode::SN(normalize_layers(&s).unwrap()),
    ];
    for c in &codes {
        let batch = vec![c.clone(), c.clone()];
        let mut buf = Vec::new();
        write_codes(&mut buf, &batch).unwrap();
        assert_eq!(read_codes(&mut Cursor::new(buf)).unwrap(), batch);
    }
    assert!(write_codes(&mut Vec::new(), &codes).is_err());
}

#[test]
fn styles_of_z_goes_through_the_mapping() {
    let g = gen();
    let z = g.sample_z(12, 0).unwrap();
    let via_w = g.styles_from_w(&g.mapping(&z).unwrap()).unwrap();
    assert_eq!(styles_of(g, &LatentCode::Z(z)).unwrap(), via_w);
}

#[test]
fn projection_of_identical_codes_is_degenerate() {
    let code = LatentCode::SN(sn_sample(1, 0));
    let p = project_2d(&vec![code; 5]).unwrap();
    assert!(p.degenerate);
    assert_eq!(p.points.len(), 5);
    assert!(p.points.windows(2).all(|w| w[0] == w[1]));
}

fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let d = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = [0.0; 2];
        let mut counts = [0usize; 2];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += d(p, q);
                counts[labels[j]] += 1;
            }
        }
        let own = sums[labels[i]] / counts[labels[i]] as f64;
        let other = sums[1 - labels[i]] / counts[1 - labels[i]] as f64;
        total += (other - own) / own.max(other);
    }
    total / points.len() as f64
}

#[test]
fn scaled_cluster_separates_along_the_first_axis() {
    let g = gen();
    let mut codes = Vec::new();
    let mut labels = Vec::new();
    for i in 0..40 {
        let s = g.styles_from_w(&g.mapping(&g.sample_z(13, i).unwrap()).unwrap()).unwrap();
        let scaled: Vec<Tensor> = if i % 2 == 0 {
            s.clone()
        } else {
            // stretch the first half of every layer's channels
            s.iter()
                .map(|v| {
                    let h = v.len() / 2;
                    Tensor::vector(v.data().iter().enumerate().map(|(c, x)| if c < h { 4.0 * x } else { *x }).collect())
                })
                .collect()
        };
        codes.push(LatentCode::SN(normalize_layers(&scaled).unwrap()));
        labels.push(i as usize % 2);
    }
    let p = project_2d(&codes).unwrap();
    assert!(!p.degenerate);
    assert_eq!(p.points.len(), codes.len());
    assert!(silhouette(&p.points, &labels) > 0.0);
    let mean_x = |lab: usize| {
        let xs: Vec<f64> = p.points.iter().zip(&labels).filter(|(_, l)| **l == lab).map(|(q, _)| q[0]).collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    let gap = (mean_x(0) - mean_x(1)).abs();
    let spread = p.variances[0].sqrt();
    assert!(gap > spread, "gap {} spread {}", gap, spread);
}

#[test]
fn projection_rejects_non_sn_codes() {
    let codes = vec![LatentCode::W(normal(1, &[32])); 4];
    assert!(project_2d(&codes).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn normalized_styles_have_unit_layers(seed in 0u64..10_000, a in 0.01f64..100.0) {
        let g = gen();
        let s = s_layers(to_style(g, &LatentCode::W(normal(seed, &[32]))).unwrap());
        let n = s_layers(normalize_style(&LatentCode::S(s.clone())).unwrap());
        let again = s_layers(normalize_style(&LatentCode::SN(n.clone())).unwrap());
        let scaled: Vec<Tensor> = s.iter().map(|v| v.scale(a)).collect();
        let n_scaled = normalize_layers(&scaled).unwrap();
        for l in 0..n.len() {
            prop_assert!((n[l].norm() - 1.0).abs() < 1e-12);
            prop_assert!(n[l].max_abs_diff(&again[l]) < 1e-15);
            prop_assert!(n[l].max_abs_diff(&n_scaled[l]) < 1e-14);
        }
    }
}
