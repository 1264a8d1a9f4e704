//! Orchestration: datasets in, trained models and metrics out.
//!
//! The harness itself stays single-threaded; passive roles run either as
//! threads (inproc transport) or as external processes reached over TCP.
//! The feature-concatenation baseline always runs its clients as threads.

use std::net::TcpListener;
use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use apfed_core::checkpoint::{add_model, load_model, Checkpoint, CheckpointError};
use apfed_core::data::idx::load_idx;
use apfed_core::data::split::split_views;
use apfed_core::data::synth::synth_dataset;
use apfed_core::data::{DataError, RawDataset, ViewMatrix};
use apfed_core::error::TensorError;
use apfed_core::nn::MlpSpec;
use apfed_core::optim::SgdConfig;
use apfed_core::protocol::transport::DEFAULT_TIMEOUT;
use apfed_core::protocol::{
    AblateMode, ActiveClient, ActiveConfig, ClientHandle, InProcTransport, PassiveClient,
    PassiveConfig, PassiveHandle, PassiveObjective, ProtocolError, TcpTransport, TransportError,
    TvflBundle, TvflClient, TvflClientConfig, TvflModel, TvflServer, TvflServerConfig,
};
use apfed_core::tensor::Tensor;

use crate::config::{ConfigError, Dataset, ExperimentConfig, Method, TransportKind};
use crate::metrics::{MetricsError, RunRecord};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("{0}")]
    Runner(String),
}

fn runner_err(msg: impl Into<String>) -> CliError {
    CliError::Runner(msg.into())
}

// ── Data preparation ────────────────────────────────────────────────────

pub struct PreparedData {
    pub train_views: Vec<ViewMatrix<f32>>,
    pub train_labels: Vec<u32>,
    pub train_ids: Vec<u64>,
    pub test_views: Vec<ViewMatrix<f32>>,
    pub test_labels: Vec<u32>,
    pub classes: usize,
}

/// Finds the IDX directory for a dataset: the configured path, or the
/// conventional `data/<name>` probed upward from the working directory
/// (tests run nested inside the workspace).
pub fn resolve_data_dir(cfg: &ExperimentConfig) -> PathBuf {
    if !cfg.data_dir.is_empty() {
        return PathBuf::from(&cfg.data_dir);
    }
    let name = cfg.dataset.as_str();
    for prefix in ["", "../", "../../"] {
        let candidate = PathBuf::from(format!("{prefix}data/{name}"));
        if candidate.is_dir() {
            return candidate;
        }
    }
    PathBuf::from(format!("data/{name}"))
}

fn slice_raw(raw: &RawDataset<f32>, start: usize, end: usize) -> RawDataset<f32> {
    RawDataset {
        ids: raw.ids[start..end].to_vec(),
        data: raw.data[start * raw.dim..end * raw.dim].to_vec(),
        dim: raw.dim,
        image_rows: raw.image_rows,
        image_cols: raw.image_cols,
        labels: raw.labels[start..end].to_vec(),
        classes: raw.classes,
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData, CliError> {
    let (train, test) = match cfg.dataset {
        Dataset::Mnist | Dataset::Fmnist => {
            let dir = resolve_data_dir(cfg);
            let mut train = load_idx::<f32>(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let mut test = load_idx::<f32>(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            if cfg.train_limit > 0 {
                train.truncate(cfg.train_limit);
            }
            if cfg.test_limit > 0 {
                test.truncate(cfg.test_limit);
            }
            (train, test)
        }
        Dataset::Synthetic => {
            let total = cfg.synth_train + cfg.synth_test;
            let raw = synth_dataset::<f32>(
                cfg.synth_seed,
                total,
                cfg.synth_dim,
                cfg.synth_classes,
            )?;
            (
                slice_raw(&raw, 0, cfg.synth_train),
                slice_raw(&raw, cfg.synth_train, total),
            )
        }
    };
    if train.dim != test.dim {
        return Err(runner_err(format!(
            "train features ({}) and test features ({}) disagree",
            train.dim, test.dim
        )));
    }
    let classes = train.classes.max(test.classes);
    let train_views = split_views(&train, &cfg.split)?;
    let test_views = split_views(&test, &cfg.split)?;
    Ok(PreparedData {
        train_views,
        train_labels: train.labels,
        train_ids: train.ids,
        test_views,
        test_labels: test.labels,
        classes,
    })
}

// ── Training ────────────────────────────────────────────────────────────

pub enum TrainedModel {
    /// Active-side model; also the single-party baseline.
    Apfed(Box<ActiveClient>),
    Tvfl(TvflBundle),
}

pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub checkpoint: Checkpoint,
    pub model: TrainedModel,
}

impl RunOutput {
    pub fn final_accuracy(&self) -> f32 {
        self.records.last().map(|r| r.test_accuracy).unwrap_or(0.0)
    }
}

fn sgd(cfg: &ExperimentConfig) -> SgdConfig<f32> {
    SgdConfig {
        lr: cfg.lr as f32,
        momentum: cfg.momentum as f32,
        weight_decay: cfg.weight_decay as f32,
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    match cfg.method {
        Method::Tvfl => run_tvfl(cfg, &data),
        _ => run_apfed(cfg, &data),
    }
}

/// Connects with retries so a freshly spawned passive process has time to
/// reach its accept loop.
pub fn connect_with_retry(addr: &str, budget: Duration) -> Result<TcpTransport, CliError> {
    let deadline = Instant::now() + budget;
    loop {
        match TcpTransport::connect(addr, DEFAULT_TIMEOUT) {
            Ok(t) => return Ok(t),
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(runner_err(format!("connecting to {addr}: {e}")));
                }
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn run_apfed(cfg: &ExperimentConfig, data: &PreparedData) -> Result<RunOutput, CliError> {
    let a = cfg.split.active_index();
    let passive_views: Vec<usize> = (0..cfg.split.views).filter(|&v| v != a).collect();
    let objective = match cfg.method {
        Method::ApfedR => Some(PassiveObjective::Reconstruction),
        Method::ApfedC => Some(PassiveObjective::Contrastive { tau: cfg.tau }),
        Method::SingleVl => None,
        Method::Tvfl => unreachable!("tvfl has its own runner"),
    };

    let mut handles: Vec<PassiveHandle> = Vec::new();
    let mut workers: Vec<thread::JoinHandle<Result<(), ProtocolError>>> = Vec::new();
    if let Some(objective) = objective {
        match cfg.transport {
            TransportKind::InProc => {
                for (p, &v) in passive_views.iter().enumerate() {
                    let (active_side, mut passive_side) = InProcTransport::pair();
                    let pcfg = PassiveConfig {
                        session: cfg.session,
                        objective,
                        hidden: cfg.hidden,
                        opt: sgd(cfg),
                        init_seed: cfg.passive_seed(p),
                    };
                    let ids = data.train_ids.clone();
                    let view = data.train_views[v].clone();
                    workers.push(thread::spawn(move || {
                        PassiveClient::new(pcfg, ids, view).serve(&mut passive_side)
                    }));
                    handles.push(PassiveHandle {
                        name: format!("passive {} (view {})", p + 1, v + 1),
                        lambda: cfg.lambda_for(p) as f32,
                        transport: Box::new(active_side),
                    });
                }
            }
            TransportKind::Tcp if !cfg.listen.is_empty() => {
                let listener = TcpListener::bind(&cfg.listen)
                    .map_err(|e| runner_err(format!("bind {}: {e}", cfg.listen)))?;
                for p in 0..passive_views.len() {
                    let (stream, peer) = listener
                        .accept()
                        .map_err(|e| runner_err(format!("accept: {e}")))?;
                    let t = TcpTransport::from_stream(stream, DEFAULT_TIMEOUT)?;
                    handles.push(PassiveHandle {
                        name: format!("passive {} ({peer})", p + 1),
                        lambda: cfg.lambda_for(p) as f32,
                        transport: Box::new(t),
                    });
                }
            }
            TransportKind::Tcp => {
                if cfg.connect.len() != passive_views.len() {
                    return Err(runner_err(format!(
                        "{} connect addresses for {} passives",
                        cfg.connect.len(),
                        passive_views.len()
                    )));
                }
                for (p, addr) in cfg.connect.iter().enumerate() {
                    let t = connect_with_retry(addr, Duration::from_secs(10))?;
                    handles.push(PassiveHandle {
                        name: format!("passive {} ({addr})", p + 1),
                        lambda: cfg.lambda_for(p) as f32,
                        transport: Box::new(t),
                    });
                }
            }
        }
    }

    let acfg = ActiveConfig {
        session: cfg.session,
        salt: cfg.salt,
        plan_seed: cfg.seed,
        batch_size: cfg.batch,
        epochs: cfg.epochs,
        encoder: MlpSpec::relu_all(vec![data.train_views[a].dim, cfg.hidden, cfg.latent])?,
        head: MlpSpec::linear_out(vec![cfg.latent, data.classes])?,
        opt_encoder: sgd(cfg),
        opt_head: sgd(cfg),
        init_seed: cfg.seed,
    };
    let mut active = ActiveClient::new(
        acfg,
        data.train_ids.clone(),
        data.train_views[a].clone(),
        data.train_labels.clone(),
        handles,
    )?;

    let stats = match active.train(Some((&data.test_views[a], &data.test_labels))) {
        Ok(s) => s,
        Err(e) => {
            // Closing our ends of the links unblocks the workers.
            drop(active);
            for w in workers {
                let _ = w.join();
            }
            return Err(e.into());
        }
    };
    for w in workers {
        w.join().map_err(|_| runner_err("passive thread panicked"))??;
    }

    let records = stats
        .iter()
        .map(|s| RunRecord {
            method: cfg.method.as_str().to_string(),
            seed: cfg.seed,
            epoch: s.epoch,
            loss_active: s.task_loss,
            passive_losses: s.passive_losses.clone(),
            test_accuracy: s.test_accuracy.expect("test split always given"),
            wall_ms: s.wall_ms,
            bytes_sent: s.bytes_sent,
            bytes_received: s.bytes_received,
        })
        .collect();

    let mut checkpoint = checkpoint_base(cfg, "apfed");
    add_model(&mut checkpoint, "encoder", active.encoder(), active.store());
    add_model(&mut checkpoint, "head", active.head(), active.store());
    checkpoint.set_meta("classes", data.classes.to_string());

    Ok(RunOutput {
        records,
        checkpoint,
        model: TrainedModel::Apfed(Box::new(active)),
    })
}

fn run_tvfl(cfg: &ExperimentConfig, data: &PreparedData) -> Result<RunOutput, CliError> {
    if cfg.transport == TransportKind::Tcp {
        return Err(runner_err(
            "the feature-concatenation baseline runs in-process only",
        ));
    }
    let views = cfg.split.views;
    let mut handles: Vec<ClientHandle> = Vec::with_capacity(views);
    let mut workers = Vec::with_capacity(views);
    for v in 0..views {
        let (server_side, mut client_side) = InProcTransport::pair();
        handles.push(ClientHandle {
            name: format!("client {} (view {})", v + 1, v + 1),
            transport: Box::new(server_side),
        });
        let ccfg = TvflClientConfig {
            session: cfg.session,
            latent: cfg.latent,
            hidden: cfg.hidden,
            opt: sgd(cfg),
            init_seed: cfg.passive_seed(v),
        };
        let ids = data.train_ids.clone();
        let train_view = data.train_views[v].clone();
        let test_view = data.test_views[v].clone();
        workers.push(thread::spawn(move || {
            let mut client = TvflClient::new(ccfg, ids, train_view, test_view);
            client.serve(&mut client_side).map(|()| client.into_encoder())
        }));
    }

    let server = TvflServer::new(
        TvflServerConfig {
            session: cfg.session,
            salt: cfg.salt,
            plan_seed: cfg.seed,
            batch_size: cfg.batch,
            epochs: cfg.epochs,
            classes: data.classes,
            opt_head: sgd(cfg),
            init_seed: cfg.seed,
        },
        data.train_ids.clone(),
        data.train_labels.clone(),
        data.test_labels.clone(),
        handles,
    );
    let trained = server.train();
    let mut encoders = Vec::with_capacity(views);
    let mut worker_err = None;
    for w in workers {
        match w.join().map_err(|_| runner_err("client thread panicked"))? {
            Ok(enc) => encoders.push(enc),
            Err(e) => worker_err = Some(e),
        }
    }
    let (model, stats) = trained?;
    if let Some(e) = worker_err {
        return Err(e.into());
    }

    let records = stats
        .iter()
        .map(|s| RunRecord {
            method: cfg.method.as_str().to_string(),
            seed: cfg.seed,
            epoch: s.epoch,
            loss_active: s.train_loss,
            passive_losses: Vec::new(),
            test_accuracy: s.test_accuracy,
            wall_ms: s.wall_ms,
            bytes_sent: s.bytes_sent,
            bytes_received: s.bytes_received,
        })
        .collect();

    let bundle = TvflBundle { model, encoders };
    let checkpoint = tvfl_checkpoint(cfg, &bundle)?;
    Ok(RunOutput {
        records,
        checkpoint,
        model: TrainedModel::Tvfl(bundle),
    })
}

// ── Checkpoint plumbing ─────────────────────────────────────────────────

fn checkpoint_base(cfg: &ExperimentConfig, kind: &str) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    ckpt.set_meta("kind", kind);
    for (k, v) in cfg.to_pairs() {
        ckpt.set_meta(format!("cfg.{k}"), v);
    }
    ckpt
}

/// Reconstructs the run's config from checkpoint metadata.
pub fn config_from_checkpoint(ckpt: &Checkpoint) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::default();
    for (key, value) in &ckpt.meta {
        if let Some(k) = key.strip_prefix("cfg.") {
            cfg.apply(k, value)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn tvfl_checkpoint(cfg: &ExperimentConfig, bundle: &TvflBundle) -> Result<Checkpoint, CliError> {
    let mut ckpt = checkpoint_base(cfg, "tvfl");
    ckpt.set_meta("classes", bundle.model.classes.to_string());
    ckpt.set_meta(
        "latents",
        bundle
            .model
            .latents
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    add_model(&mut ckpt, "head", &bundle.model.head, &bundle.model.store);
    for (i, cache) in bundle.model.avg_cache.iter().enumerate() {
        ckpt.insert_tensor(format!("avg_cache.{i}"), Tensor::vector(cache.clone()));
    }
    for (i, (spec, store)) in bundle.encoders.iter().enumerate() {
        let mlp = apfed_core::nn::Mlp::bind(store, spec.clone(), "encoder")
            .map_err(CliError::Tensor)?;
        add_model(&mut ckpt, &format!("client{i}"), &mlp, store);
    }
    Ok(ckpt)
}

pub fn bundle_from_checkpoint(ckpt: &Checkpoint) -> Result<TvflBundle, CliError> {
    if ckpt.meta("kind")? != "tvfl" {
        return Err(runner_err(
            "checkpoint does not hold a feature-concatenation model",
        ));
    }
    let classes: usize = ckpt.meta_parse("classes")?;
    let latents = ckpt
        .meta("latents")?
        .split(',')
        .map(|s| s.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| runner_err("bad latents metadata"))?;
    let (head, head_store) = load_model(ckpt, "head", "head")?;
    let mut avg_cache = Vec::with_capacity(latents.len());
    let mut encoders = Vec::with_capacity(latents.len());
    for i in 0..latents.len() {
        avg_cache.push(ckpt.tensor(&format!("avg_cache.{i}"))?.data().to_vec());
        let (mlp, store) = load_model(ckpt, &format!("client{i}"), "encoder")?;
        encoders.push((mlp.spec.clone(), store));
    }
    Ok(TvflBundle {
        model: TvflModel {
            head_spec: head.spec.clone(),
            store: head_store,
            head,
            latents,
            avg_cache,
            classes,
        },
        encoders,
    })
}

// ── Ablation ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub mode: AblateMode,
    /// 1-based view whose client stays online.
    pub present_view: usize,
    pub full_accuracy: f32,
    pub ablated_accuracy: f32,
}

impl AblationReport {
    /// The conventional name of the ablated baseline.
    pub fn method_name(&self) -> &'static str {
        match self.mode {
            AblateMode::Zero => "tvfl-0",
            AblateMode::Average => "tvfl-a",
            AblateMode::Random => "tvfl-r",
        }
    }
}

/// Scores a trained feature-concatenation model with every client except
/// the label holder's missing.
pub fn run_ablation(
    ckpt: &Checkpoint,
    mode: AblateMode,
    noise_seed: u64,
    data_dir: Option<&str>,
) -> Result<AblationReport, CliError> {
    let mut cfg = config_from_checkpoint(ckpt)?;
    if let Some(dir) = data_dir {
        cfg.data_dir = dir.to_string();
    }
    let bundle = bundle_from_checkpoint(ckpt)?;
    let data = prepare_data(&cfg)?;
    if data.test_views.len() != bundle.encoders.len() {
        return Err(runner_err(format!(
            "checkpoint has {} clients, dataset splits into {}",
            bundle.encoders.len(),
            data.test_views.len()
        )));
    }
    let present = cfg.split.active_index();
    let full_accuracy = bundle.full_accuracy(&data.test_views, &data.test_labels)?;
    let ablated_accuracy = bundle.ablated_accuracy(
        &data.test_views,
        &data.test_labels,
        present,
        mode,
        noise_seed,
    )?;
    Ok(AblationReport {
        mode,
        present_view: present + 1,
        full_accuracy,
        ablated_accuracy,
    })
}

// ── Lambda sweep ────────────────────────────────────────────────────────

pub struct SweepRun {
    pub lambda: f64,
    pub output: RunOutput,
}

/// One full run per weight value, same seed throughout.
pub fn sweep_lambda(base: &ExperimentConfig, values: &[f64]) -> Result<Vec<SweepRun>, CliError> {
    if !base.method.is_apfed() {
        return Err(CliError::Config(ConfigError(format!(
            "lambda sweeps need apfed-r or apfed-c, got {}",
            base.method
        ))));
    }
    if values.is_empty() {
        return Err(CliError::Config(ConfigError(
            "need at least one lambda value".to_string(),
        )));
    }
    let mut runs = Vec::with_capacity(values.len());
    for &lambda in values {
        let mut cfg = base.clone();
        cfg.lambda = vec![lambda];
        let output = run_experiment(&cfg)?;
        runs.push(SweepRun { lambda, output });
    }
    Ok(runs)
}

pub fn sweep_csv(runs: &[SweepRun]) -> String {
    let mut out = String::from("method,seed,lambda,test_accuracy\n");
    for run in runs {
        let rec = run.output.records.last().expect("at least one epoch");
        out.push_str(&format!(
            "{},{},{},{}\n",
            rec.method, rec.seed, run.lambda, rec.test_accuracy
        ));
    }
    out
}

// ── Passive service ─────────────────────────────────────────────────────

/// How a passive process reaches its active peer.
pub enum PassiveEndpoint {
    /// Bind a local port and accept the active's connection.
    Listen(u16),
    /// Dial an active that is listening.
    Connect(String),
}

/// Serves one passive session over TCP and returns once it ends. `view`
/// is the 1-based view this process holds.
pub fn serve_passive(
    cfg: &ExperimentConfig,
    view: usize,
    endpoint: PassiveEndpoint,
    objective: PassiveObjective,
    init_seed: u64,
) -> Result<(), CliError> {
    if view == 0 || view > cfg.split.views {
        return Err(runner_err(format!(
            "view {view} out of range 1..={}",
            cfg.split.views
        )));
    }
    let data = prepare_data(cfg)?;
    let pcfg = PassiveConfig {
        session: cfg.session,
        objective,
        hidden: cfg.hidden,
        opt: sgd(cfg),
        init_seed,
    };
    let mut passive = PassiveClient::new(
        pcfg,
        data.train_ids.clone(),
        data.train_views[view - 1].clone(),
    );
    let (mut transport, peer) = match endpoint {
        PassiveEndpoint::Listen(port) => {
            let listener = TcpListener::bind(("127.0.0.1", port))
                .map_err(|e| runner_err(format!("bind 127.0.0.1:{port}: {e}")))?;
            let (stream, peer) = listener
                .accept()
                .map_err(|e| runner_err(format!("accept: {e}")))?;
            (TcpTransport::from_stream(stream, DEFAULT_TIMEOUT)?, peer.to_string())
        }
        PassiveEndpoint::Connect(addr) => {
            (connect_with_retry(&addr, Duration::from_secs(10))?, addr)
        }
    };
    passive
        .serve(&mut transport)
        .map_err(|e| runner_err(format!("session with {peer}: {e}")))?;
    Ok(())
}
