use std::io::Write;
use std::path::Path;
use std::process::{Command, Output};

use clap::Parser;
use flate2::write::GzEncoder;
use flate2::Compression;
use qfed::data::{CLASS_NAMES, IMAGE_MAGIC, LABEL_MAGIC, PIXELS};
use qfed::experiment::{self, CliArgs, Mode};

fn gz_file(path: &Path, bytes: &[u8]) {
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(bytes).unwrap();
    std::fs::write(path, enc.finish().unwrap()).unwrap();
}

/// `n` images per split; class `k` brightens row band `k`.
fn write_fixture(dir: &Path, n: usize) {
    for split in ["train", "t10k"] {
        let mut images = Vec::new();
        for v in [IMAGE_MAGIC, n as u32, 28, 28] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        let mut labels = Vec::new();
        labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        labels.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            let k = i % 10;
            let mut img = vec![0u8; PIXELS];
            img[k * 56..k * 56 + 56]
                .iter_mut()
                .enumerate()
                .for_each(|(j, p)| *p = 150 + (j * i % 100) as u8);
            images.extend_from_slice(&img);
            labels.push(k as u8);
        }
        gz_file(&dir.join(format!("{split}-images-idx3-ubyte.gz")), &images);
        gz_file(&dir.join(format!("{split}-labels-idx1-ubyte.gz")), &labels);
    }
}

fn qfed(args: &[&str], data: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfed"))
        .args(args)
        .arg("--data-dir")
        .arg(data)
        .arg("--out-dir")
        .arg(out)
        .env_remove("QFED_DATA_DIR")
        .output()
        .unwrap()
}

#[test]
fn too_few_qubits_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qfed(
        &["--mode", "centralized-qt", "--qubits", "12"],
        tmp.path(),
        &tmp.path().join("o"),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("13 qubits"), "{err}");
}

#[test]
fn unknown_flag_and_help_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(qfed(&["--frobnicate"], tmp.path(), tmp.path()).status.code(), Some(2));
    let help = Command::new(env!("CARGO_BIN_EXE_qfed")).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("--mapping-lr"));
}

#[test]
fn missing_data_fails_without_leaving_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("o");
    let out = qfed(&["--epochs", "1"], &tmp.path().join("nowhere"), &out_dir);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.join(experiment::METRICS_FILE).exists());
}

#[test]
fn classical_run_writes_the_three_files() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(tmp.path(), 40);
    let out_dir = tmp.path().join("o");
    let out = qfed(&["--epochs", "2", "--batch", "8"], tmp.path(), &out_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let metrics = std::fs::read_to_string(out_dir.join(experiment::METRICS_FILE)).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "run,round,global_acc,global_loss,params,update_bytes");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("r1-e2-c1,1,"));
    assert!(lines[2].ends_with(",6690,0"));

    let confusion = std::fs::read_to_string(out_dir.join(experiment::CONFUSION_FILE)).unwrap();
    let rows: Vec<&str> = confusion.lines().collect();
    assert_eq!(rows[0], CLASS_NAMES.join(","));
    assert_eq!(rows.len(), 11);
    for row in &rows[1..] {
        let sum: u64 = row.split(',').map(|v| v.parse::<u64>().unwrap()).sum();
        assert_eq!(sum, 4);
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join(experiment::MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["params"]["trainable"], 6690);
    assert_eq!(manifest["train_samples"], 40);
}

#[test]
fn federated_qt_run_reports_compression_and_traffic() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(tmp.path(), 20);
    let out_dir = tmp.path().join("o");
    let args = [
        "--mode",
        "federated-qt",
        "--rounds",
        "1",
        "--local-epochs",
        "1",
        "--clients",
        "2",
        "--batch",
        "5",
    ];
    let out = qfed(&args, tmp.path(), &out_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("77.7% reduction"));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join(experiment::MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["label"], "r1-e1-c2");
    assert_eq!(manifest["params"]["trainable"], 1489);
    assert_eq!(manifest["params"]["circuit"], 1248);
    assert_eq!(manifest["params"]["qubits_required"], 13);
    let bytes = manifest["update_bytes_per_client_round"].as_u64().unwrap();
    assert_eq!(bytes, 1489 * 8);
    assert!((bytes as f64 / (6690.0 * 8.0) - 1489.0 / 6690.0).abs() < 1e-12);

    let metrics = std::fs::read_to_string(out_dir.join(experiment::METRICS_FILE)).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(
        lines[0],
        "run,round,global_acc,global_loss,params,update_bytes,client_acc_0,client_acc_1"
    );
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("r1-e1-c2,1,"));
    assert_eq!(lines[1].split(',').nth(5), Some("11912"));
}

#[test]
fn flags_override_the_config_file_which_overrides_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("run.toml");
    std::fs::write(
        &file,
        "mode = \"federated-qt\"\nrounds = 7\nepochs = 3\nclients = 4\ndata_dir = \"from-file\"\n",
    )
    .unwrap();
    let file = file.to_str().unwrap();

    let args = CliArgs::try_parse_from(["qfed", "--config", file, "--epochs", "5"]).unwrap();
    let cfg = experiment::parse_config(&args, Some("from-env")).unwrap();
    assert_eq!(cfg.mode, Mode::FederatedQt);
    assert_eq!(cfg.label(), "r7-e5-c4");
    assert_eq!(cfg.data_dir, Path::new("from-env"));

    let args = CliArgs::try_parse_from(["qfed", "--config", file, "--data-dir", "from-flag"]).unwrap();
    assert_eq!(
        experiment::parse_config(&args, Some("from-env")).unwrap().data_dir,
        Path::new("from-flag")
    );

    std::fs::write(tmp.path().join("bad.toml"), "roundz = 1\n").unwrap();
    let bad = tmp.path().join("bad.toml");
    let args = CliArgs::try_parse_from(["qfed", "--config", bad.to_str().unwrap()]).unwrap();
    assert!(matches!(
        experiment::parse_config(&args, None),
        Err(qfed::QfedError::Usage(_))
    ));
}

#[test]
fn learning_rates_must_be_positive() {
    let args = CliArgs::try_parse_from(["qfed", "--mode", "centralized-qt", "--circuit-lr", "0"]).unwrap();
    assert!(experiment::parse_config(&args, None).is_err());
    let args = CliArgs::try_parse_from(["qfed", "--mode", "centralized-qt", "--mapping-lr", "2e-4"]).unwrap();
    let cfg = experiment::parse_config(&args, None).unwrap();
    assert_eq!(cfg.adam().lr, 2e-4);
}
