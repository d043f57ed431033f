use std::fs;
use std::path::{Path, PathBuf};

use linpath::experiment::{
    export, run_experiment, Experiment, ExperimentConfig, ExportFormat, Stage, BARRIERS_CSV,
    CURVES_CSV, DEVIATION_CSV, METADATA_JSON, RESULTS_JSON,
};
use linpath::trainer::checkpoint_schedule;
use linpath::Error;

const CONFIG: &str = r#"
version = 1
name = "blobs"
output_dir = "OUT"
seeds = [1, 2, 3]
n_points = 7

[model]
kind = "mlp"
hidden = [12]

[data]
kind = "synthetic"
classes = 3
dims = 5
per_class = 60
separation = 4.0
seed = 7

[train]
lr = 0.05
momentum = 0.9
batch_size = 16
iterations = 20
"#;

fn config(out: &Path) -> ExperimentConfig {
    ExperimentConfig::from_toml(&CONFIG.replace("OUT", out.to_str().unwrap())).unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

fn data_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_run_layout_and_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let digest = cfg.digest();
    let dir = run_experiment(cfg, true).unwrap();
    assert_eq!(dir, tmp.path().join("blobs"));

    let schedule = checkpoint_schedule(20).unwrap();
    for seed in [1, 2, 3] {
        for t in &schedule {
            assert!(dir.join(format!("{seed}/ckpt_{t}.lpck")).exists());
        }
        assert!(dir.join(format!("{seed}/run_manifest.json")).exists());
    }

    let curves = read(&dir, CURVES_CSV);
    assert_eq!(
        curves.lines().nth(1).unwrap(),
        "model,dataset,seed,t_from,alpha,loss_nats,error"
    );
    assert_eq!(data_rows(&curves).len(), schedule.len() * 3 * 7);

    let barriers = read(&dir, BARRIERS_CSV);
    assert_eq!(
        barriers.lines().nth(1).unwrap(),
        "model,dataset,t_from,loss_barrier_mean,loss_barrier_std,error_barrier_mean,error_barrier_std,definition_tag"
    );
    let rows = data_rows(&barriers);
    assert_eq!(rows.len(), schedule.len());
    let last = rows.last().unwrap();
    assert_eq!(last[2], "20");
    assert_eq!((last[3].as_str(), last[5].as_str()), ("0", "0"));
    assert!(rows
        .iter()
        .all(|r| r[7] == "max-endpoint" && r[0] == "mlp-12"));

    let deviation = read(&dir, DEVIATION_CSV);
    assert_eq!(data_rows(&deviation).len(), schedule.len() * 3);

    for name in [
        CURVES_CSV,
        BARRIERS_CSV,
        DEVIATION_CSV,
        "seed_barriers.csv",
        "aggregate.csv",
    ] {
        assert_eq!(
            read(&dir, name).lines().next().unwrap(),
            format!("# config_digest: {digest}"),
            "{name}"
        );
    }
    let meta: serde_json::Value = serde_json::from_str(&read(&dir, METADATA_JSON)).unwrap();
    assert_eq!(meta["config_digest"], digest.as_str());
    assert_eq!(meta["loss_unit"], "nats");
    assert_eq!(meta["bn_mode"], "interpolate");
    assert_eq!(meta["barrier_definition"], "max-endpoint");
    assert_eq!(meta["std"], "population");
}

#[test]
fn rerun_is_a_no_op_and_export_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run_experiment(config(tmp.path()), true).unwrap();
    let before = snapshot(&dir);

    let exp = Experiment::open(config(tmp.path())).unwrap();
    for seed in [1, 2, 3] {
        assert_eq!(exp.train_seed(seed).unwrap(), Stage::Skipped);
        assert_eq!(exp.paths_seed(seed).unwrap(), Stage::Skipped);
    }
    run_experiment(config(tmp.path()), true).unwrap();
    export(&dir, ExportFormat::Csv).unwrap();
    assert_eq!(snapshot(&dir), before);
}

#[test]
fn fresh_rerun_elsewhere_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = run_experiment(config(a.path()), true).unwrap();
    let db = run_experiment(config(b.path()), true).unwrap();
    // config.toml records its own output_dir; everything else must match.
    let strip = |v: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> {
        v.into_iter()
            .filter(|(p, _)| p != Path::new("config.toml"))
            .collect()
    };
    let (sa, sb) = (strip(snapshot(&da)), strip(snapshot(&db)));
    assert_eq!(sa.len(), sb.len());
    for ((pa, ba), (pb, bb)) in sa.iter().zip(&sb) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{} differs", pa.display());
    }
}

#[test]
fn interrupted_run_resumes_to_same_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run_experiment(config(tmp.path()), true).unwrap();
    let before = snapshot(&dir);
    fs::remove_file(dir.join("2/ckpt_16.lpck")).unwrap();
    fs::remove_file(dir.join("2/ckpt_20.lpck")).unwrap();
    fs::remove_file(dir.join("3/paths.tsv")).unwrap();
    fs::remove_file(dir.join(CURVES_CSV)).unwrap();
    let err = export(&dir, ExportFormat::Csv).unwrap_err().to_string();
    assert!(err.contains("seed 3: interpolate"), "{err}");

    let mut manifest: serde_json::Value =
        serde_json::from_str(&read(&dir, "2/run_manifest.json")).unwrap();
    manifest["completed"] = serde_json::json!([0, 1, 2, 4, 8]);
    fs::write(
        dir.join("2/run_manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap() + "\n",
    )
    .unwrap();

    run_experiment(config(tmp.path()), true).unwrap();
    assert_eq!(snapshot(&dir), before);
}

#[test]
fn tampered_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run_experiment(config(tmp.path()), true).unwrap();
    let mut manifest: serde_json::Value =
        serde_json::from_str(&read(&dir, "1/run_manifest.json")).unwrap();
    manifest["completed"] = serde_json::json!([0, 1, 2]);
    fs::write(
        dir.join("1/run_manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap() + "\n",
    )
    .unwrap();
    fs::copy(dir.join("2/ckpt_2.lpck"), dir.join("1/ckpt_2.lpck")).unwrap();
    let exp = Experiment::open(config(tmp.path())).unwrap();
    let err = exp.train_seed(1).unwrap_err().to_string();
    assert!(err.contains("differs from its recomputation"), "{err}");
}

#[test]
fn json_export_counts_replicates() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.seeds = vec![4, 5];
    let dir = run_experiment(cfg, true).unwrap();
    let files = export(&dir, ExportFormat::Json).unwrap();
    assert_eq!(files, [dir.join(RESULTS_JSON)]);
    let v: serde_json::Value = serde_json::from_str(&read(&dir, RESULTS_JSON)).unwrap();
    assert_eq!(v["replicates"], 2);
    assert_eq!(v["metadata"]["replicates"], 2);
    let n_t = checkpoint_schedule(20).unwrap().len();
    assert_eq!(v["curves"].as_array().unwrap().len(), 2 * n_t);
    let first = fs::read(dir.join(RESULTS_JSON)).unwrap();
    export(&dir, ExportFormat::Json).unwrap();
    assert_eq!(fs::read(dir.join(RESULTS_JSON)).unwrap(), first);
}

#[test]
fn zero_seeds_rejected_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.seeds.clear();
    assert!(matches!(run_experiment(cfg, true), Err(Error::Config(_))));
    assert!(!tmp.path().join("blobs").exists());
    let text = CONFIG
        .replace("OUT", "x")
        .replace("seeds = [1, 2, 3]", "seeds = []");
    assert!(ExperimentConfig::from_toml(&text)
        .and_then(|c| c.validate())
        .is_err());
}

#[test]
fn missing_dataset_fails_fast() {
    let tmp = tempfile::tempdir().unwrap();
    let text = CONFIG.replace("OUT", tmp.path().to_str().unwrap()).replace(
        "kind = \"synthetic\"\nclasses = 3\ndims = 5\nper_class = 60\nseparation = 4.0\nseed = 7",
        &format!(
            "kind = \"mnist\"\ndir = \"{}\"",
            tmp.path().join("nothing").display()
        ),
    );
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    assert!(matches!(run_experiment(cfg, true), Err(Error::Io { .. })));
    assert!(!tmp.path().join("blobs").exists());
}

#[test]
fn changed_config_never_overwrites() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run_experiment(config(tmp.path()), true).unwrap();
    let before = snapshot(&dir);
    let mut cfg = config(tmp.path());
    cfg.train.lr = 0.04;
    let err = run_experiment(cfg, true).unwrap_err();
    assert!(matches!(err, Error::Experiment(_)), "{err}");
    assert_eq!(snapshot(&dir), before);

    let stray = tmp.path().join("stray");
    fs::create_dir_all(stray.join("blobs")).unwrap();
    fs::write(stray.join("blobs/notes.txt"), "keep").unwrap();
    assert!(run_experiment(config(&stray), true).is_err());
    assert_eq!(read(&stray.join("blobs"), "notes.txt"), "keep");
}

#[test]
fn config_round_trip_and_strictness() {
    let cfg = config(Path::new("/tmp/x"));
    let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.digest(), cfg.digest());
    let typo = CONFIG.replace("n_points = 7", "n_point = 7");
    assert!(matches!(
        ExperimentConfig::from_toml(&typo),
        Err(Error::Config(_))
    ));
    let bad_version = CONFIG.replace("version = 1", "version = 2");
    assert!(ExperimentConfig::from_toml(&bad_version)
        .and_then(|c| c.validate())
        .is_err());
}

/// Small directory in the CIFAR-10 binary layout with random pixels.
fn write_cifar_fixture(dir: &Path) {
    let mut state = 12345u64;
    let mut byte = move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 56) as u8
    };
    let mut batch = |n: usize| -> Vec<u8> {
        let mut b = Vec::with_capacity(n * 3073);
        for k in 0..n {
            b.push((k % 10) as u8);
            b.extend((0..3072).map(|_| byte()));
        }
        b
    };
    fs::create_dir_all(dir).unwrap();
    for i in 1..=5 {
        fs::write(dir.join(format!("data_batch_{i}.bin")), batch(20)).unwrap();
    }
    fs::write(dir.join("test_batch.bin"), batch(30)).unwrap();
}

#[test]
fn batch_norm_resnet_on_cifar_layout_with_recalibration() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("cifar");
    write_cifar_fixture(&data_dir);
    let text = format!(
        r#"
version = 1
name = "cifar-fixture"
output_dir = "{}"
seeds = [0, 1]
n_points = 5
bn_mode = "recalibrate"
barrier_definition = "linear-baseline"

[model]
kind = "resnet-mini"
widths = [2, 3]
blocks_per_stage = 1
batch_norm = true

[data]
kind = "cifar10"
dir = "{}"
train_per_class = 5
test_per_class = 2

[train]
lr = 0.05
momentum = 0.9
batch_size = 10
iterations = 6
"#,
        tmp.path().join("runs").display(),
        data_dir.display()
    );
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    let dir = run_experiment(cfg, true).unwrap();
    let rows = data_rows(&read(&dir, BARRIERS_CSV));
    assert_eq!(rows.len(), checkpoint_schedule(6).unwrap().len());
    assert!(rows
        .iter()
        .all(|r| r[7] == "linear-baseline" && r[1] == "cifar10"));
    for r in &rows {
        for col in [3, 4, 5, 6] {
            let v: f64 = r[col].parse().unwrap();
            assert!(v.is_finite() && v >= 0.0, "{r:?}");
        }
    }
    let meta: serde_json::Value = serde_json::from_str(&read(&dir, METADATA_JSON)).unwrap();
    assert_eq!(meta["bn_mode"], "recalibrate");
    assert_eq!(meta["model"], "resnet-mini-2-3-bn");
}

#[test]
fn shipped_presets_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut names = Vec::new();
    for e in fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            let cfg = ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            cfg.validate().unwrap();
            names.push(cfg.name);
        }
    }
    names.sort();
    assert_eq!(names, ["cifar-resnet-mini", "mnist-mlp"]);
}
