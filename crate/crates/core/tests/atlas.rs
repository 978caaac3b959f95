use atlasflow_core::atlas::{
    self, bootstrap_batch, bootstrap_probabilities, disintegration_weights, log_density, Epochs,
};
use atlasflow_core::cover::{mapper_cover, refine_partition, ChartCover};
use atlasflow_core::flow::{embedding_gram_logdet, FlowConfig, FlowStack, Normalization};
use atlasflow_core::synth::{generate_manifold, ManifoldSpec};
use atlasflow_core::{AtlasModel, ChartModel, Error, PointCloud, TrainConfig};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::torus();
    cfg.flow = FlowConfig {
        layers: 2,
        hidden: vec![8],
        ..cfg.flow
    };
    cfg.epochs = Epochs {
        e1: 2,
        e2: 2,
        e3: 2,
        e4: 4,
        e5: 2,
    };
    cfg.mapper.n_cubes = 2;
    cfg
}

fn tiny_fixture() -> (PointCloud, ChartCover, TrainConfig) {
    let data = generate_manifold(&ManifoldSpec::torus(400, 5)).unwrap();
    let cfg = tiny_config();
    let cover = mapper_cover(data.points.view(), &cfg.mapper, 2).unwrap();
    (data, cover, cfg)
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Chart masses by counting: every point spreads `1/N` evenly over the
/// charts containing it.
fn counting_oracle(cover: &ChartCover) -> Vec<f64> {
    let lcm = (1..=cover.len() as u128).fold(1, |a, b| a / gcd(a, b) * b);
    cover
        .charts
        .iter()
        .map(|m| {
            let num: u128 = m.iter().map(|&i| lcm / cover.multiplicity[i] as u128).sum();
            num as f64 / (lcm * cover.n_points as u128) as f64
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chart_masses_match_counting(seed in 0u64..100_000, n in 6usize..80, k in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut charts: Vec<Vec<usize>> = (0..k).map(|_| (0..n).filter(|_| rng.gen_bool(0.5)).collect()).collect();
        for i in 0..n {
            let c = if i < k { i } else { rng.gen_range(0..k) };
            if !charts[c].contains(&i) {
                charts[c].push(i);
            }
        }
        let cover = ChartCover::from_charts(n, charts).unwrap();
        let (c, _) = disintegration_weights(&refine_partition(&cover), k).unwrap();
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(c, counting_oracle(&cover));
    }
}

#[test]
fn torus_chart_masses_match_counting() {
    let data = generate_manifold(&ManifoldSpec::torus(10_000, 7)).unwrap();
    let cover = mapper_cover(data.points.view(), &TrainConfig::torus().mapper, 2).unwrap();
    let (c, _) = disintegration_weights(&refine_partition(&cover), cover.len()).unwrap();
    assert!((c.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    assert_eq!(c, counting_oracle(&cover));
}

#[test]
fn bootstrap_frequencies_follow_inverse_multiplicity() {
    let members: Vec<usize> = (0..6).collect();
    let multiplicity = vec![1, 2, 3, 1, 2, 1];
    let p = bootstrap_probabilities(&members, &multiplicity);
    let draws = 60_000;
    let idx = bootstrap_batch(&members, &multiplicity, draws, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for (j, pj) in p.iter().enumerate() {
        let count = idx.iter().filter(|&&i| i == j).count() as f64;
        let sd = (draws as f64 * pj * (1.0 - pj)).sqrt();
        assert!((count - draws as f64 * pj).abs() < 3.0 * sd, "member {j}: {count} vs {}", draws as f64 * pj);
    }
}

fn perturbed(d: usize, seed: u64) -> FlowStack {
    let cfg = FlowConfig {
        layers: 3,
        hidden: vec![8],
        ..FlowConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = FlowStack::new(d, &cfg, &mut rng).unwrap();
    f.params.iter_mut().for_each(|p| *p += rng.gen_range(-0.4..0.4));
    f
}

#[test]
fn chart_density_integrates_to_one() {
    let cover = ChartCover::from_charts(3, vec![vec![0, 1], vec![1, 2]]).unwrap();
    let charts = (0..2)
        .map(|k| {
            let mut phi = perturbed(3, 10 + k as u64);
            phi.set_normalization(Normalization {
                center: vec![0.5, -1.0, 2.0],
                rotation: None,
                scale: vec![1.5, 0.8, 1.0],
                post_scale: vec![1.0, 1.0, 1.0],
            })
            .unwrap();
            let mut gamma = perturbed(2, 20 + k as u64);
            gamma
                .set_normalization(Normalization {
                    center: vec![0.2, -0.1],
                    rotation: None,
                    scale: vec![0.9, 1.1],
                    post_scale: vec![1.0, 1.0],
                })
                .unwrap();
            ChartModel {
                id: k,
                members: cover.charts[k].clone(),
                phi,
                gamma,
                weight: 0.0,
            }
        })
        .collect();
    let model = AtlasModel::new(cover, charts, TrainConfig::torus()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s = 2.5;
    for k in 0..2 {
        let m = 20_000;
        let mut acc = 0.0;
        for _ in 0..m {
            let v: Vec<f64> = (0..2).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect();
            let log_q = -v.iter().map(|a| a * a).sum::<f64>() / (2.0 * s * s) - (std::f64::consts::TAU * s * s).ln();
            let (x, _) = model.charts[k].phi.inverse(&[v[0], v[1], 0.0]).unwrap();
            let vol = embedding_gram_logdet(&model.charts[k].phi, 2, &v).unwrap();
            acc += (log_density(&model, &x, k).unwrap() + vol - log_q).exp();
        }
        let mass = acc / m as f64;
        assert!((mass - 1.0).abs() < 0.05, "chart {k}: mass {mass}");
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let (data, cover, cfg) = tiny_fixture();
    let a = atlas::train(&data, &cover, &cfg).unwrap();
    let b = atlas::train(&data, &cover, &cfg).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    a.save(&path).unwrap();
    assert_eq!(AtlasModel::load(&path).unwrap(), a);
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(atlas::train(&data, &cover, &other).unwrap().to_json(), a.to_json());
}

#[test]
fn checkpoint_errors() {
    let (data, cover, cfg) = tiny_fixture();
    let json = atlas::train(&data, &cover, &cfg).unwrap().to_json();
    let bumped = json.replacen("\"format_version\":1", "\"format_version\":2", 1);
    assert!(matches!(AtlasModel::from_json(&bumped), Err(Error::Version { found: 2, expected: 1 })));
    let cut = &json[..json.len() / 2];
    match AtlasModel::from_json(cut) {
        // The reported position is the last byte read before the input ran out.
        Err(Error::Parse { offset, .. }) => assert!(offset + 1 >= cut.len() && offset <= cut.len(), "{offset}"),
        other => panic!("expected a parse error, got {other:?}"),
    }
    let bad = "{\"format_version\":1,\n \"ambient_dim\": x}";
    match AtlasModel::from_json(bad) {
        Err(Error::Parse { offset, .. }) => assert_eq!(&bad[offset..offset + 1], "x"),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn samples_lie_on_their_chart_and_masses_sum_to_one() {
    let (data, cover, cfg) = tiny_fixture();
    let (model, report) = atlas::train_with_report(&data, &cover, &cfg).unwrap();
    assert!((model.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let (samples, labels) = model.sample(300, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    for (i, &k) in labels.iter().enumerate() {
        let x = samples.points.row(i).to_vec();
        let y = model.reconstruct(k, &x).unwrap();
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-6));
    }
    assert!(report.recon_curve().iter().all(|v| v.is_finite()));
    let csv = report.to_csv();
    assert!(csv.starts_with("phase,epoch,chart,samples,pretrain,recon,dist,compat,manifold,density,lr\n"));
}

#[test]
fn flat_plane_is_reconstructed_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 500;
    let pts = Array2::from_shape_fn((n, 3), |(_, j)| match j {
        0 => rng.gen_range(-2.0..2.0),
        1 => rng.gen_range(-1.0..1.0),
        _ => -0.7,
    });
    let data = PointCloud::new(pts).unwrap();
    let mut cfg = tiny_config();
    cfg.flow.layers = 4;
    cfg.flow.hidden = vec![16, 16];
    cfg.epochs = Epochs {
        e1: 4,
        e2: 4,
        e3: 4,
        e4: 0,
        e5: 1,
    };
    let cover = ChartCover::from_charts(n, vec![(0..n).collect()]).unwrap();
    let model = atlas::train(&data, &cover, &cfg).unwrap();
    let err = (0..n)
        .map(|i| {
            let x = data.points.row(i).to_vec();
            let y = model.reconstruct(0, &x).unwrap();
            x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    assert!(err < 1e-3, "mean squared reconstruction error {err}");
}
