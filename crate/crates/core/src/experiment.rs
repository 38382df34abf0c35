//! Experiment harness behind the `qfed` binary: configuration layering,
//! pipeline selection, and the CSV / JSON outputs.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::cnn::{Architecture, Confusion};
use crate::data::{self, DataPaths, Dataset, CLASS_NAMES, DATA_DIR_ENV};
use crate::error::{QfedError, Result};
use crate::fed::{self, run_label, FedConfig, RoundMetrics, RunHistory};
use crate::qstate::{AnsatzSpec, MAX_QUBITS};
use crate::qtmap;
use crate::train::{AdamConfig, ClassicalObjective, Objective, QtObjective, QT_CIRCUIT_LR, QT_MAPPING_LR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    CentralizedClassical,
    CentralizedQt,
    FederatedQt,
    FederatedClassical,
}

impl Mode {
    pub fn is_qt(self) -> bool {
        matches!(self, Mode::CentralizedQt | Mode::FederatedQt)
    }

    pub fn is_federated(self) -> bool {
        matches!(self, Mode::FederatedQt | Mode::FederatedClassical)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::CentralizedClassical => "centralized-classical",
            Mode::CentralizedQt => "centralized-qt",
            Mode::FederatedQt => "federated-qt",
            Mode::FederatedClassical => "federated-classical",
        }
    }
}

/// Fully resolved experiment settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    /// Communication rounds (federated modes only).
    pub rounds: usize,
    /// Local epochs per round in federated modes, total epochs otherwise.
    pub epochs: usize,
    pub clients: usize,
    pub n_qubits: usize,
    pub qnn_blocks: usize,
    pub mapping_hidden: usize,
    pub batch: usize,
    /// Adam learning rate of the classical modes.
    pub lr: f64,
    /// Adam learning rate of the circuit angles in QT modes.
    pub circuit_lr: f64,
    /// Adam learning rate of the mapping model in QT modes.
    pub mapping_lr: f64,
    pub seed: u64,
    /// Stratified training subset size; 0 uses the full training set.
    pub subset: usize,
    /// Stratified test subset size; 0 uses the full test set.
    pub test_subset: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub parallel: bool,
    /// Print the mean gradient norm of every epoch to stderr.
    pub log_grad_norm: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::CentralizedClassical,
            rounds: 10,
            epochs: 10,
            clients: 5,
            n_qubits: 13,
            qnn_blocks: 16,
            mapping_hidden: qtmap::DEFAULT_HIDDEN,
            batch: 64,
            lr: AdamConfig::default().lr,
            circuit_lr: QT_CIRCUIT_LR,
            mapping_lr: QT_MAPPING_LR,
            seed: 0,
            subset: 0,
            test_subset: 0,
            data_dir: PathBuf::from("data/fashion-mnist"),
            out_dir: PathBuf::from("runs/latest"),
            parallel: false,
            log_grad_norm: false,
        }
    }
}

impl RunConfig {
    /// `r{r}-e{e}-c{c}`; centralised runs are reported as one client and one round.
    pub fn label(&self) -> String {
        if self.mode.is_federated() {
            run_label(self.rounds, self.epochs, self.clients)
        } else {
            run_label(1, self.epochs, 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(QfedError::Usage(m));
        let m = Architecture::reference().n_params();
        if self.mode.is_qt() {
            if self.n_qubits == 0 || self.n_qubits > MAX_QUBITS {
                return usage(format!("--qubits must be in 1..={MAX_QUBITS}, got {}", self.n_qubits));
            }
            if (1usize << self.n_qubits) < m {
                return usage(format!(
                    "--qubits {}: 2^{} = {} < {m} classical parameters; N = ceil(log2 {m}) = {} qubits are required",
                    self.n_qubits,
                    self.n_qubits,
                    1usize << self.n_qubits,
                    qtmap::required_qubits(m)
                ));
            }
            if self.qnn_blocks == 0 || self.mapping_hidden == 0 {
                return usage("--blocks and --hidden must be positive".into());
            }
        }
        if self.batch == 0 {
            return usage("--batch must be positive".into());
        }
        if self.mode.is_federated() && self.clients == 0 {
            return usage("--clients must be positive".into());
        }
        for (flag, v) in [
            ("--lr", self.lr),
            ("--circuit-lr", self.circuit_lr),
            ("--mapping-lr", self.mapping_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return usage(format!("{flag} must be a positive number, got {v}"));
            }
        }
        Ok(())
    }

    /// Optimiser settings; in QT modes the base rate is the mapping rate and
    /// the circuit rate is applied by the objective.
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: if self.mode.is_qt() { self.mapping_lr } else { self.lr },
            ..AdamConfig::default()
        }
    }
}

/// Command-line flags; every value is optional so it can override a config file.
#[derive(Debug, Default, Parser)]
#[command(name = "qfed", version, about = "Quantum-Train federated learning simulator")]
pub struct CliArgs {
    /// TOML file with RunConfig fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Local epochs per round (federated) or total epochs (centralised)
    #[arg(long, visible_alias = "local-epochs")]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub qubits: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Learning rate of the classical modes
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning rate of the circuit angles (QT modes)
    #[arg(long)]
    pub circuit_lr: Option<f64>,
    /// Learning rate of the mapping model (QT modes)
    #[arg(long)]
    pub mapping_lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training subset size (0 = full set)
    #[arg(long)]
    pub subset: Option<usize>,
    /// Test subset size (0 = full set)
    #[arg(long)]
    pub test_subset: Option<usize>,
    /// Directory holding the FashionMNIST IDX files (overrides $QFED_DATA_DIR)
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Train federated clients on a thread pool
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub log_grad_norm: bool,
}

/// Defaults, then the config file, then `$QFED_DATA_DIR`, then flags.
pub fn parse_config(args: &CliArgs, data_dir_env: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| QfedError::io(path, e))?;
            toml::from_str::<RunConfig>(&text)
                .map_err(|e| QfedError::Usage(format!("invalid config file {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(dir) = data_dir_env.filter(|d| !d.is_empty()) {
        cfg.data_dir = PathBuf::from(dir);
    }
    macro_rules! take {
        ($($flag:ident => $field:ident),*) => { $( if let Some(v) = args.$flag.clone() { cfg.$field = v; } )* };
    }
    take!(mode => mode, rounds => rounds, epochs => epochs, clients => clients, qubits => n_qubits,
          blocks => qnn_blocks, hidden => mapping_hidden, batch => batch, lr => lr,
          circuit_lr => circuit_lr, mapping_lr => mapping_lr, seed => seed,
          subset => subset, test_subset => test_subset, data_dir => data_dir, out_dir => out_dir);
    cfg.parallel |= args.parallel;
    cfg.log_grad_norm |= args.log_grad_norm;
    cfg.validate()?;
    Ok(cfg)
}

/// Convenience for callers that have a raw argument list.
pub fn parse_args<I, S>(argv: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args = CliArgs::try_parse_from(argv).map_err(|e| QfedError::Usage(e.to_string()))?;
    parse_config(&args, std::env::var(DATA_DIR_ENV).ok().as_deref())
}

/// Parameter accounting written to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCounts {
    pub classical: usize,
    pub trainable: usize,
    pub circuit: usize,
    pub mapping: usize,
    pub qubits_required: usize,
    /// `100 * (1 - trainable / classical)`.
    pub reduction_percent: f64,
}

impl ParamCounts {
    pub fn for_config(cfg: &RunConfig) -> Self {
        let classical = Architecture::reference().n_params();
        let (circuit, mapping) = if cfg.mode.is_qt() {
            (
                cfg.qnn_blocks * cfg.n_qubits * 6,
                qtmap::mapping_param_count(cfg.n_qubits, cfg.mapping_hidden),
            )
        } else {
            (0, 0)
        };
        let trainable = if cfg.mode.is_qt() { circuit + mapping } else { classical };
        Self {
            classical,
            trainable,
            circuit,
            mapping,
            qubits_required: qtmap::required_qubits(classical),
            reduction_percent: 100.0 * (1.0 - trainable as f64 / classical as f64),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub label: String,
    pub config: RunConfig,
    pub params: ParamCounts,
    pub update_bytes_per_client_round: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub final_accuracy: f64,
    pub final_loss: f64,
    /// Class names of the most confused pair and its off-diagonal count.
    pub most_confused: Option<(String, String, u64)>,
    pub wall_time_seconds: f64,
    pub seed: u64,
}

/// Everything a run produced.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub rows: Vec<RoundMetrics>,
    pub confusion: Confusion,
    pub final_params: Vec<f64>,
    pub manifest: Manifest,
}

/// Loads train/test data for `cfg`, applying the stratified subsets.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset<f64>, Dataset<f64>)> {
    let paths = DataPaths::in_dir(&cfg.data_dir);
    let mut train = paths.load_train::<f64>()?;
    let mut test = paths.load_test::<f64>()?;
    if cfg.subset > 0 {
        train = data::subset(&train, cfg.subset, cfg.seed)?;
    }
    if cfg.test_subset > 0 {
        test = data::subset(&test, cfg.test_subset, cfg.seed)?;
    }
    Ok((train, test))
}

/// Runs the configured pipeline on already-loaded data.
pub fn run_on(cfg: &RunConfig, train: &Dataset<f64>, test: &Dataset<f64>) -> Result<Outcome> {
    cfg.validate()?;
    let start = Instant::now();
    let arch = Arc::new(Architecture::reference());
    let objective: Box<dyn Objective<f64>> = if cfg.mode.is_qt() {
        let spec = AnsatzSpec::new(cfg.n_qubits, cfg.qnn_blocks)?;
        Box::new(QtObjective::new(arch.clone(), spec, cfg.mapping_hidden)?.with_circuit_lr(cfg.circuit_lr))
    } else {
        Box::new(ClassicalObjective::new(arch.clone()))
    };
    let counts = ParamCounts::for_config(cfg);
    debug_assert_eq!(counts.trainable, objective.n_params());
    if counts.trainable != objective.n_params() {
        return Err(QfedError::Invariant(format!(
            "accounting says {} trainable parameters, model has {}",
            counts.trainable,
            objective.n_params()
        )));
    }

    let history: RunHistory<f64> = if cfg.mode.is_federated() {
        let fc = FedConfig {
            n_clients: cfg.clients,
            rounds: cfg.rounds,
            local_epochs: cfg.epochs,
            batch_size: cfg.batch,
            seed: cfg.seed,
            adam: cfg.adam(),
            parallel: cfg.parallel,
        };
        fed::run_federated(objective.as_ref(), &fc, train, test)?
    } else {
        fed::run_centralized(
            objective.as_ref(),
            cfg.epochs,
            cfg.batch,
            cfg.seed,
            cfg.adam(),
            train,
            test,
        )?
    };
    if cfg.log_grad_norm {
        for r in &history.rounds {
            eprintln!(
                "round {}: mean training loss {:.6}, mean gradient norm {:.6e}",
                r.round,
                r.training.mean_loss(),
                r.training.mean_grad_norm()
            );
        }
    }

    let rows: Vec<RoundMetrics> = history.rows().into_iter().cloned().collect();
    let last = rows.last().expect("at least one metrics row");
    let most_confused = history
        .final_confusion
        .most_confused_pair()
        .map(|(a, b, n)| (CLASS_NAMES[a].to_string(), CLASS_NAMES[b].to_string(), n));
    let manifest = Manifest {
        label: cfg.label(),
        config: cfg.clone(),
        update_bytes_per_client_round: if cfg.mode.is_federated() {
            counts.trainable * std::mem::size_of::<f64>()
        } else {
            0
        },
        params: counts,
        train_samples: train.len(),
        test_samples: test.len(),
        final_accuracy: last.global_accuracy,
        final_loss: last.global_loss,
        most_confused,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
    };
    Ok(Outcome {
        rows,
        confusion: history.final_confusion,
        final_params: history.final_params,
        manifest,
    })
}

/// `run,round,global_acc,global_loss,params,update_bytes,client_acc_0..`
pub fn write_metrics_csv(rows: &[RoundMetrics], label: &str, params: usize, path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(QfedError::Invariant("no metrics rows to write".into()));
    }
    let n_clients = rows.iter().map(|r| r.client_accuracies.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header: Vec<String> = ["run", "round", "global_acc", "global_loss", "params", "update_bytes"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..n_clients).map(|k| format!("client_acc_{k}")));
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for r in rows {
        let mut rec = vec![
            label.to_string(),
            r.round.to_string(),
            r.global_accuracy.to_string(),
            r.global_loss.to_string(),
            params.to_string(),
            r.update_bytes.to_string(),
        ];
        rec.extend(r.client_accuracies.iter().map(f64::to_string));
        rec.resize(header.len(), String::new());
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| QfedError::io(path, e))
}

/// Header of class names, then one row of counts per true class.
pub fn write_confusion_csv(confusion: &Confusion, path: &Path) -> Result<()> {
    if confusion.n_classes != CLASS_NAMES.len() {
        return Err(QfedError::Invariant(format!(
            "confusion matrix is {0}x{0}, expected 10x10",
            confusion.n_classes
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(CLASS_NAMES).map_err(|e| csv_io(path, e))?;
    for row in confusion.rows() {
        w.write_record(row.iter().map(u64::to_string))
            .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| QfedError::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> QfedError {
    QfedError::io(path, std::io::Error::other(e.to_string()))
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the three output files; on failure removes whatever was written.
pub fn write_outputs(outcome: &Outcome, out_dir: &Path) -> Result<()> {
    let written = |name: &str| out_dir.join(name);
    let result = (|| {
        std::fs::create_dir_all(out_dir).map_err(|e| QfedError::io(out_dir, e))?;
        let m = &outcome.manifest;
        write_metrics_csv(&outcome.rows, &m.label, m.params.trainable, &written(METRICS_FILE))?;
        write_confusion_csv(&outcome.confusion, &written(CONFUSION_FILE))?;
        let json = serde_json::to_string_pretty(m).map_err(|e| QfedError::Invariant(e.to_string()))?;
        std::fs::write(written(MANIFEST_FILE), json + "\n").map_err(|e| QfedError::io(written(MANIFEST_FILE), e))
    })();
    if result.is_err() {
        remove_outputs(out_dir);
    }
    result
}

fn remove_outputs(out_dir: &Path) {
    for name in [METRICS_FILE, CONFUSION_FILE, MANIFEST_FILE] {
        let _ = std::fs::remove_file(out_dir.join(name));
    }
}

/// Loads data, runs, writes outputs. Partial files are removed on error.
pub fn run_experiment(cfg: &RunConfig) -> Result<Outcome> {
    let result = load_data(cfg).and_then(|(train, test)| run_on(cfg, &train, &test));
    match result {
        Ok(outcome) => {
            write_outputs(&outcome, &cfg.out_dir)?;
            Ok(outcome)
        }
        Err(e) => {
            remove_outputs(&cfg.out_dir);
            Err(e)
        }
    }
}
