use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use atlasflow_core::cover::cover_from_json;
use atlasflow_core::AtlasModel;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_atlasflow"));
    c.env_remove("ATLASFLOW_SEED").env("ATLASFLOW_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--layers", "2", "--hidden", "8", "--epochs-e1", "1", "--epochs-e2", "1", "--epochs-e3", "2", "--epochs-e4", "2",
    "--epochs-e5", "1",
];

fn small_torus(dir: &TempDir) -> (PathBuf, PathBuf) {
    let data = p(dir, "t.csv");
    let cover = p(dir, "t.json");
    ok(&["synth", "--manifold", "torus", "--n", "500", "--seed", "3", "-o", s(&data)]);
    ok(&["cover", "--input", s(&data), "-o", s(&cover)]);
    (data, cover)
}

fn train(dir: &TempDir, data: &Path, cover: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let model = p(dir, name);
    let mut args = vec!["train", "--data", s(data), "--cover", s(cover), "-o", s(&model)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args);
    model
}

#[test]
fn synth_writes_rows_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (p(&dir, "a.csv"), p(&dir, "b.csv"));
    let out = ok(&["synth", "--manifold", "torus", "--n", "10000", "--noise", "0.1", "--seed", "7", "-o", s(&a)]);
    assert_eq!(out.trim(), "10000");
    ok(&["synth", "--manifold", "torus", "--n", "10000", "--noise", "0.1", "--seed", "7", "-o", s(&b)]);
    let text = std::fs::read(&a).unwrap();
    assert_eq!(text, std::fs::read(&b).unwrap());
    assert_eq!(String::from_utf8(text).unwrap().lines().count(), 10_001);
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (p(&dir, "a.csv"), p(&dir, "b.csv"));
    ok(&["synth", "--n", "50", "--seed", "5", "-o", s(&a)]);
    let out = bin().args(["synth", "--n", "50", "-o", s(&b)]).env("ATLASFLOW_SEED", "5").output().unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn unknown_manifold_exits_2() {
    let dir = TempDir::new().unwrap();
    let out = run(&["synth", "--manifold", "klein", "-o", s(&p(&dir, "x.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("torus") && err.contains("trefoil"), "{err}");
}

#[test]
fn cover_reports_charts_and_edges() {
    let dir = TempDir::new().unwrap();
    let data = p(&dir, "k.csv");
    ok(&["synth", "--manifold", "trefoil", "--n", "10000", "--seed", "7", "-o", s(&data)]);
    let out = ok(&["cover", "--input", s(&data), "--preset", "trefoil", "-o", s(&p(&dir, "k.json"))]);
    assert!(out.contains("charts: 4"), "{out}");
    let cover = cover_from_json(&std::fs::read_to_string(p(&dir, "k.json")).unwrap()).unwrap();
    assert_eq!(cover.len(), 4);
    assert_eq!(cover.n_points, 10_000);
}

#[test]
fn zero_overlap_gives_a_partition_like_cover() {
    let dir = TempDir::new().unwrap();
    let data = p(&dir, "t.csv");
    ok(&["synth", "--n", "2000", "--seed", "1", "-o", s(&data)]);
    let json = p(&dir, "c.json");
    ok(&["cover", "--input", s(&data), "--perc-overlap", "0", "-o", s(&json)]);
    let cover = cover_from_json(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert!(cover.multiplicity.iter().all(|&m| m == 1));
    assert!(cover.nerve_edges.is_empty());
}

#[test]
fn collinear_points_are_a_degenerate_lens() {
    let dir = TempDir::new().unwrap();
    let data = p(&dir, "same.csv");
    std::fs::write(&data, "x0,x1,x2\n1,2,3\n1,2,3\n1,2,3\n").unwrap();
    let out = run(&["cover", "--input", s(&data), "-o", s(&p(&dir, "c.json"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_sample_density_and_boundary() {
    let dir = TempDir::new().unwrap();
    let (data, cover) = small_torus(&dir);
    let model = train(&dir, &data, &cover, "m.json", &["--seed", "4"]);
    let again = train(&dir, &data, &cover, "m2.json", &["--seed", "4"]);
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&again).unwrap());
    let log = std::fs::read_to_string(p(&dir, "m.json.log.csv")).unwrap();
    assert!(log.starts_with("phase,epoch,chart,"));
    let loaded = AtlasModel::load(&model).unwrap();

    let samples = p(&dir, "s.csv");
    ok(&["sample", "--model", s(&model), "--count", "5000", "--seed", "1", "-o", s(&samples)]);
    let text = std::fs::read_to_string(&samples).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x0,x1,x2,chart"));
    let mut counts = vec![0usize; loaded.charts.len()];
    for line in lines.clone() {
        let k: usize = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((1..=loaded.charts.len()).contains(&k));
        counts[k - 1] += 1;
    }
    assert_eq!(lines.count(), 5000);
    for (c, chart) in counts.iter().zip(&loaded.charts) {
        let mean = 5000.0 * chart.weight;
        let sd = (5000.0 * chart.weight * (1.0 - chart.weight)).sqrt();
        assert!((*c as f64 - mean).abs() <= 3.0 * sd + 1.0, "count {c} vs {mean} +- {sd}");
    }

    let dens = p(&dir, "d.csv");
    ok(&["density", "--input", s(&data), "--model", s(&model), "-o", s(&dens)]);
    let text = std::fs::read_to_string(&dens).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x0,x1,x2,log_density,kde"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 500);
    for r in rows {
        let kde: f64 = r.rsplit(',').next().unwrap().parse().unwrap();
        assert!(kde >= 0.0);
    }

    let table = p(&dir, "b.csv");
    let out = ok(&[
        "eval-boundary", "--data", s(&data), "--cover-model", s(&model), "--partition-model", s(&model), "-o",
        s(&table),
    ]);
    assert_eq!(out, std::fs::read_to_string(&table).unwrap());
    for line in out.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[3], f[4], "{line}");
    }
    let partition = train(&dir, &data, &cover, "p.json", &["--partition"]);
    let out = ok(&[
        "eval-boundary", "--data", s(&data), "--cover-model", s(&model), "--partition-model", s(&partition),
    ]);
    assert!(out.lines().last().unwrap().starts_with("all,all,"));
}

#[test]
fn boundary_rejects_mismatched_checkpoints() {
    let dir = TempDir::new().unwrap();
    let (data, cover) = small_torus(&dir);
    let model = train(&dir, &data, &cover, "m.json", &[]);
    let other_data = p(&dir, "o.csv");
    let other_cover = p(&dir, "o.json");
    ok(&["synth", "--n", "400", "--seed", "9", "-o", s(&other_data)]);
    ok(&["cover", "--input", s(&other_data), "-o", s(&other_cover)]);
    let other = train(&dir, &other_data, &other_cover, "o.model", &[]);
    let out = run(&["eval-boundary", "--data", s(&data), "--cover-model", s(&model), "--partition-model", s(&other)]);
    assert_eq!(out.status.code(), Some(6));
}

#[test]
fn corrupt_checkpoint_exits_5() {
    let dir = TempDir::new().unwrap();
    let bad = p(&dir, "bad.json");
    std::fs::write(&bad, "{\"format_version\": 1, \"charts\": [").unwrap();
    let out = run(&["sample", "--model", s(&bad), "--count", "3", "-o", s(&p(&dir, "x.csv"))]);
    assert_eq!(out.status.code(), Some(5));
    std::fs::write(&bad, "{\"format_version\": 99}").unwrap();
    let out = run(&["sample", "--model", s(&bad), "--count", "3", "-o", s(&p(&dir, "x.csv"))]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn divergence_exits_4() {
    let dir = TempDir::new().unwrap();
    let (data, cover) = small_torus(&dir);
    let out = run(&[
        "train", "--data", s(&data), "--cover", s(&cover), "-o", s(&p(&dir, "m.json")), "--layers", "2", "--hidden",
        "8", "--lr", "1e300", "--clip-norm", "1e300", "--epochs-e1", "2",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("phase") && err.contains("epoch") && err.contains("chart"), "{err}");
}

#[test]
fn pretraining_can_be_skipped() {
    let dir = TempDir::new().unwrap();
    let (data, cover) = small_torus(&dir);
    let model = train(&dir, &data, &cover, "m.json", &["--epochs-e1", "0", "--epochs-e2", "0"]);
    let log = std::fs::read_to_string(model.with_extension("json.log.csv")).unwrap();
    assert!(log.lines().skip(1).all(|l| !l.starts_with("1,") && !l.starts_with("2,")));
}

#[test]
fn compare_single_writes_finite_curves() {
    let dir = TempDir::new().unwrap();
    let (data, _) = small_torus(&dir);
    let out_csv = p(&dir, "c.csv");
    let mut args = vec!["compare-single", "--data", s(&data), "--max-points", "300", "-o", s(&out_csv)];
    args.extend_from_slice(TINY);
    ok(&args);
    let text = std::fs::read_to_string(&out_csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,single,multi"));
    let rows: Vec<&str> = lines.collect();
    // e2 + e3 joint epochs followed by e4 compatibility epochs.
    assert_eq!(rows.len(), 5);
    for r in rows {
        for v in r.split(',').skip(1) {
            assert!(v.parse::<f64>().unwrap().is_finite());
        }
    }
}

#[test]
fn config_file_is_validated_and_layered() {
    let dir = TempDir::new().unwrap();
    let (data, cover) = small_torus(&dir);
    let cfg = p(&dir, "run.json");
    std::fs::write(&cfg, r#"{"train": {"flow": {"layers": 2, "hiden": [8]}}}"#).unwrap();
    let out = run(&["train", "--data", s(&data), "--cover", s(&cover), "--config", s(&cfg), "-o", s(&p(&dir, "m"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hiden"));

    let model = p(&dir, "m.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"train": {{"flow": {{"layers": 2, "hidden": [8]}}, "epochs": {{"e1": 1, "e2": 1, "e3": 1, "e4": 1, "e5": 1}}, "lr": 0.002}},
                "outputs": {{"model": "{}"}}}}"#,
            s(&model)
        ),
    )
    .unwrap();
    ok(&["train", "--data", s(&data), "--cover", s(&cover), "--config", s(&cfg), "--lr", "0.001"]);
    let m = AtlasModel::load(&model).unwrap();
    assert_eq!(m.config.lr, 0.001);
    assert_eq!(m.config.flow.layers, 2);
    assert_eq!(m.config.lambda_o, 25.0);
}

#[test]
fn help_lists_defaults() {
    let out = ok(&["train", "--help"]);
    for flag in [
        "--layers", "--hidden", "--lr", "--batch-size", "--epochs-e1", "--epochs-e2", "--epochs-e3", "--epochs-e4",
        "--epochs-e5", "--lambda-m", "--lambda-p", "--lambda-o", "--lambda-d", "--refresh-every", "--clip-norm",
        "--n-cubes", "--perc-overlap", "--seed", "--partition",
    ] {
        assert!(out.contains(flag), "missing {flag}");
    }
    for default in ["0.0015", "256", "torus 60", "trefoil 15", "0.45", "lambda_o", "torus 13"] {
        assert!(out.contains(default), "missing default {default}");
    }
    for sub in ["synth", "cover", "sample", "density", "eval-boundary", "compare-single"] {
        ok(&[sub, "--help"]);
    }
}
