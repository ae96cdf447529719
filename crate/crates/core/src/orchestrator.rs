//! Round state machine: initial local training, then repeated knowledge
//! aggregation, generator tuning and local distillation, with evaluation of
//! every client after each round. Also drives the baselines, the temperature
//! grid and the generator ablation.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{self, ClassKnowledge, DistillTarget, SgdSchedule};
use crate::error::{Error, Result};
use crate::frozen_fm::{self, prompt_template, DatasetKind, EmbeddingMatrix, FrozenImageEncoder};
use crate::model::{LocalModelParams, DEPTHS};
use crate::numerics::{ProbVec, Temperature};
use crate::partition::{self, Dataset};
use crate::prompt_gen::{self, GenProblem, GeneratorKind, LossWeights, PromptGenParams};
use crate::seed::{self, stream};
use crate::server::{self, AggregatedKnowledge};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Fedd2p,
    /// Local training only, no communication.
    B1,
    /// Clients distill directly from the aggregated client knowledge.
    B2,
    /// Generator tuned on ground truth only.
    B3,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Fedd2p, Protocol::B1, Protocol::B2, Protocol::B3];

    pub fn label(self) -> &'static str {
        match self {
            Protocol::Fedd2p => "fedd2p",
            Protocol::B1 => "b1",
            Protocol::B2 => "b2",
            Protocol::B3 => "b3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Synthetic,
    File(PathBuf),
}

/// How synthetic class means relate to the class text embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassGeometry {
    /// Means are a fixed random linear image of the text embeddings, so the
    /// encoder's notion of class similarity matches the data.
    TextAligned,
    /// Means drawn independently of the embeddings.
    Independent,
}

/// Declarative description of one run. Field names are the JSON config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub clients: usize,
    pub classes: usize,
    /// Text/prompt embedding dimension.
    pub d: usize,
    /// Client feature dimension.
    pub d_in: usize,
    pub alpha: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch: usize,
    pub lr_local: f64,
    pub lr_gen: f64,
    pub gen_steps: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub lambda_kd: f64,
    pub loss_weights: LossWeights,
    pub heads: usize,
    pub generator_kind: GeneratorKind,
    /// Hidden width of the MLP generator.
    pub gen_hidden: usize,
    /// Re-initialize the generator every round instead of warm-starting.
    pub gen_reinit: bool,
    /// Hidden width of client models.
    pub hidden: usize,
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Feature noise standard deviation.
    pub spread: f64,
    pub class_geometry: ClassGeometry,
    /// Weight of the direction shared by all synthetic text embeddings, in [0, 1).
    pub text_concentration: f64,
    pub shard_cap: usize,
    pub dataset_kind: DatasetKind,
    pub embedding_source: EmbeddingSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            protocol: Protocol::Fedd2p,
            clients: 10,
            classes: 10,
            d: 16,
            d_in: 128,
            alpha: 0.1,
            rounds: 20,
            local_epochs: 10,
            batch: 128,
            lr_local: 0.1,
            lr_gen: 0.5,
            gen_steps: 100,
            tau1: 10.0,
            tau2: 0.1,
            lambda_kd: 1.0,
            loss_weights: LossWeights::default(),
            heads: 2,
            generator_kind: GeneratorKind::Attention,
            gen_hidden: 32,
            gen_reinit: false,
            hidden: 64,
            seed: 0,
            train_per_class: 500,
            test_per_class: 100,
            spread: 0.3,
            class_geometry: ClassGeometry::TextAligned,
            text_concentration: 0.85,
            shard_cap: 400,
            dataset_kind: DatasetKind::Synthetic,
            embedding_source: EmbeddingSource::Synthetic,
        }
    }
}

fn field(name: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: name.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            // serde names the offending key in its message; surface it as the field
            let name = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .unwrap_or("config")
                .to_string();
            Error::Config { field: name, message: msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("clients", self.clients),
            ("classes", self.classes),
            ("d", self.d),
            ("d_in", self.d_in),
            ("local_epochs", self.local_epochs),
            ("batch", self.batch),
            ("gen_steps", self.gen_steps),
            ("heads", self.heads),
            ("gen_hidden", self.gen_hidden),
            ("hidden", self.hidden),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
            ("shard_cap", self.shard_cap),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(field(name, "must be >= 1"));
            }
        }
        let positive = [
            ("alpha", self.alpha),
            ("lr_local", self.lr_local),
            ("lr_gen", self.lr_gen),
            ("tau1", self.tau1),
            ("tau2", self.tau2),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(field(name, format!("must be positive and finite, got {v}")));
            }
        }
        let non_negative = [
            ("lambda_kd", self.lambda_kd),
            ("spread", self.spread),
            ("loss_weights.ce", self.loss_weights.ce),
            ("loss_weights.kd", self.loss_weights.kd),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(field(name, format!("must be non-negative and finite, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.text_concentration) {
            return Err(field("text_concentration", format!("must lie in [0, 1), got {}", self.text_concentration)));
        }
        if self.classes < 2 {
            return Err(field("classes", "need at least 2 classes"));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(field("heads", format!("{} heads do not divide d = {}", self.heads, self.d)));
        }
        if self.clients > self.classes * self.train_per_class {
            return Err(field("clients", "more clients than training samples"));
        }
        Ok(())
    }

    pub fn tau1(&self) -> Temperature {
        Temperature::new(self.tau1).expect("validated")
    }

    pub fn tau2(&self) -> Temperature {
        Temperature::new(self.tau2).expect("validated")
    }

    /// Loss weights the generator is actually trained with under this protocol.
    pub fn effective_loss_weights(&self) -> LossWeights {
        match self.protocol {
            Protocol::B3 => LossWeights {
                ce: self.loss_weights.ce,
                kd: 0.0,
            },
            _ => self.loss_weights,
        }
    }
}

/// Per-round results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// Final generator loss; `None` when no generator ran this round.
    pub gen_loss: Option<f64>,
    pub gen_loss_curve: Vec<f64>,
    pub train_losses: Vec<f64>,
    /// Numbers each client uploaded this round.
    pub upload: Vec<usize>,
    /// Numbers sent to each client this round.
    pub download: usize,
    pub wall_seconds: f64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub metrics: Vec<RoundMetrics>,
    /// Aggregated client knowledge of each communication round (round 1 first).
    pub aggregates: Vec<AggregatedKnowledge>,
    /// Largest `|sum - 1|` over every probability vector produced during the run.
    pub simplex_error: f64,
    /// Client model depths.
    pub depths: Vec<usize>,
    pub encoder_fingerprint: [u8; 32],
    pub embedding_fingerprint: [u8; 32],
}

impl ExperimentReport {
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.mean_accuracy)
    }
}

/// The frozen server-side encoder state of a run.
#[derive(Debug, Clone)]
pub struct FrozenFm {
    pub embeddings: EmbeddingMatrix,
    pub encoder: FrozenImageEncoder,
}

impl FrozenFm {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let embeddings = match &cfg.embedding_source {
            EmbeddingSource::Synthetic => {
                let names: Vec<String> = (0..cfg.classes).map(|c| c.to_string()).collect();
                let desc: Vec<String> = names.iter().map(|n| prompt_template(cfg.dataset_kind, n)).collect();
                let e = frozen_fm::synth_text_embed(&desc, cfg.d, seed::derive(cfg.seed, &[stream::EMBED]))?
                    .with_class_names(names)?;
                frozen_fm::concentrate(&e, cfg.text_concentration, seed::derive(cfg.seed, &[stream::EMBED, 1]))?
            }
            EmbeddingSource::File(path) => {
                let e = frozen_fm::load_embeddings(path)
                    .map_err(|e| field("embedding_source", format!("{}: {e}", path.display())))?;
                if e.classes() != cfg.classes || e.dim() != cfg.d {
                    return Err(field(
                        "embedding_source",
                        format!(
                            "file has {} classes of dimension {}, config expects {} and {}",
                            e.classes(),
                            e.dim(),
                            cfg.classes,
                            cfg.d
                        ),
                    ));
                }
                e
            }
        };
        let encoder = FrozenImageEncoder::synthetic(cfg.d, seed::derive(cfg.seed, &[stream::ENCODER]))?;
        Ok(FrozenFm { embeddings, encoder })
    }
}

/// Synthetic train and test sets of a run.
pub fn build_data(cfg: &ExperimentConfig, fm: &FrozenFm) -> Result<(Dataset, Dataset)> {
    let means = match cfg.class_geometry {
        ClassGeometry::Independent => partition::class_means(cfg.classes, cfg.d_in, cfg.seed),
        ClassGeometry::TextAligned => {
            let mut rng = seed::rng(seed::derive(cfg.seed, &[stream::MEANS]));
            let scale = 1.0 / (cfg.d_in as f64).sqrt();
            let lift = Array2::from_shape_simple_fn((cfg.d, cfg.d_in), || {
                rng.sample::<f64, _>(rand_distr::StandardNormal) * scale
            });
            // Centering removes any direction shared by all embeddings, which
            // carries no class information.
            let rows = fm.embeddings.rows();
            let centred = rows - &rows.mean_axis(Axis(0)).expect("at least two classes");
            let mut means = centred.dot(&lift);
            for (c, mut row) in means.outer_iter_mut().enumerate() {
                let n = row.dot(&row).sqrt();
                if n < 1e-12 {
                    return Err(Error::Domain(format!("class {c} mean vanishes after centering")));
                }
                row /= n;
            }
            means
        }
    };
    partition::split_from_means(
        &means,
        cfg.train_per_class,
        cfg.test_per_class,
        cfg.spread,
        seed::derive(cfg.seed, &[stream::DATA]),
    )
}

/// One client's shard and current model.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub shard: Dataset,
    pub model: LocalModelParams,
}

/// Executes runs on a fixed number of worker threads. Results never depend on
/// the worker count.
#[derive(Debug)]
pub struct Runner {
    pool: rayon::ThreadPool,
}

impl Default for Runner {
    fn default() -> Self {
        Runner::new(1).expect("single-thread pool")
    }
}

/// SGD settings of `client` in `round` (round 0 is the initial local training).
pub fn client_schedule(cfg: &ExperimentConfig, client: usize, round: usize) -> SgdSchedule {
    SgdSchedule {
        epochs: cfg.local_epochs,
        batch: cfg.batch,
        lr: cfg.lr_local,
        seed: seed::derive(cfg.seed, &[stream::CLIENT, client as u64, round as u64, stream::TRAIN]),
    }
}

/// Initial client states and the shared test split of a run.
pub fn setup_clients(cfg: &ExperimentConfig, fm: &FrozenFm) -> Result<(Vec<ClientState>, Dataset)> {
    let (train, test) = build_data(cfg, fm)?;
    let plan = partition::dirichlet_partition(train.labels(), cfg.clients, cfg.alpha, seed::derive(cfg.seed, &[stream::PARTITION]))?;
    let mut depth_rng = seed::rng(seed::derive(cfg.seed, &[stream::DEPTH]));
    let clients = plan
        .assignments
        .iter()
        .enumerate()
        .map(|(n, idx)| {
            let capped = partition::cap_shard(idx, cfg.shard_cap, seed::derive(cfg.seed, &[stream::SHARD_CAP, n as u64]));
            let depth = DEPTHS[depth_rng.random_range(0..DEPTHS.len())];
            let model = LocalModelParams::init(cfg.d_in, cfg.hidden, depth, cfg.classes, seed::derive(cfg.seed, &[stream::INIT, n as u64]))?;
            Ok(ClientState {
                shard: train.subset(&capped),
                model,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((clients, test))
}

struct Audit(f64);

impl Audit {
    fn see(&mut self, err: f64) -> Result<()> {
        self.0 = self.0.max(err);
        if err > crate::numerics::SIMPLEX_TOL {
            return Err(Error::Validation(format!("probability vector off the simplex by {err:e}")));
        }
        Ok(())
    }
}

impl Runner {
    pub fn new(workers: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::InvalidInput(format!("cannot start {workers} workers: {e}")))?;
        Ok(Runner { pool })
    }

    fn evaluate(&self, clients: &[ClientState], test: &Dataset) -> Result<Vec<f64>> {
        self.pool.install(|| clients.par_iter().map(|c| client::evaluate(&c.model, test)).collect())
    }

    /// Runs one experiment under `cfg.protocol`.
    pub fn run(&self, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
        cfg.validate()?;
        let fm = FrozenFm::build(cfg)?;
        let (encoder_fp, embedding_fp) = (fm.encoder.fingerprint(), fm.embeddings.fingerprint());
        let (mut clients, test) = setup_clients(cfg, &fm)?;
        let depths = clients.iter().map(|c| c.model.depth()).collect();
        let classes = cfg.classes;
        let schedule = |n: usize, round: usize| client_schedule(cfg, n, round);
        let mut audit = Audit(0.0);
        let mut metrics = Vec::with_capacity(cfg.rounds + 1);
        let mut aggregates = Vec::with_capacity(cfg.rounds);

        // S0
        let started = Instant::now();
        let trained = self.pool.install(|| {
            clients
                .par_iter()
                .enumerate()
                .map(|(n, c)| client::local_train(&c.model, &c.shard, schedule(n, 0)))
                .collect::<Result<Vec<_>>>()
        });
        let trained = trained.map_err(|e| e.at(0, "local_train"))?;
        let mut train_losses = Vec::with_capacity(clients.len());
        for (c, t) in clients.iter_mut().zip(trained) {
            audit.see(t.simplex_error).map_err(|e| e.at(0, "local_train"))?;
            train_losses.push(t.final_loss);
            c.model = t.model;
        }
        let accuracies = self.evaluate(&clients, &test).map_err(|e| e.at(0, "evaluate"))?;
        metrics.push(round_metrics(0, accuracies, None, Vec::new(), train_losses, Vec::new(), 0, started));

        let mut generator = self.fresh_generator(cfg)?;
        for round in 1..=cfg.rounds {
            let started = Instant::now();
            let mut gen_loss = None;
            let mut gen_curve = Vec::new();
            let mut upload = vec![0; clients.len()];
            let mut download = 0;

            let global: Option<Vec<ProbVec>> = if cfg.protocol == Protocol::B1 {
                None
            } else {
                // S1
                let knowledge = self
                    .pool
                    .install(|| {
                        clients
                            .par_iter()
                            .map(|c| client::class_knowledge(&c.model, &c.shard, cfg.tau1()))
                            .collect::<Result<Vec<ClassKnowledge>>>()
                    })
                    .map_err(|e| e.at(round, "class_knowledge"))?;
                let knowledge: Vec<ClassKnowledge> = knowledge
                    .into_iter()
                    .map(|k| ClassKnowledge { round, ..k })
                    .collect();
                for (n, k) in knowledge.iter().enumerate() {
                    audit.see(k.max_simplex_error()).map_err(|e| e.at(round, "class_knowledge"))?;
                    upload[n] = k.transmitted_numbers();
                    if upload[n] > classes * (classes + 1) {
                        return Err(Error::Validation(format!("client {n} uploads {} numbers", upload[n])).at(round, "upload"));
                    }
                }
                let aggregated = server::aggregate(&knowledge).map_err(|e| {
                    match e {
                        Error::MissingClass { class } => Error::Validation(format!(
                            "class {class} absent from every shard; shard class counts: {:?}",
                            clients.iter().map(|c| c.shard.counts().to_vec()).collect::<Vec<_>>()
                        )),
                        other => other,
                    }
                    .at(round, "aggregate")
                })?;
                audit.see(aggregated.max_simplex_error()).map_err(|e| e.at(round, "aggregate"))?;

                // S2
                let g = match cfg.protocol {
                    Protocol::B2 => aggregated.per_class.clone(),
                    _ => {
                        if cfg.gen_reinit {
                            generator = self.fresh_generator(cfg)?;
                        }
                        let problem = GenProblem {
                            embeddings: &fm.embeddings,
                            encoder: &fm.encoder,
                            aggregated: &aggregated,
                            tau2: cfg.tau2(),
                            weights: cfg.effective_loss_weights(),
                        };
                        let out = prompt_gen::train_generator(&generator, &problem, cfg.gen_steps, cfg.lr_gen)
                            .map_err(|e| e.at(round, "train_generator"))?;
                        audit.see(out.simplex_error).map_err(|e| e.at(round, "train_generator"))?;
                        audit.see(out.knowledge.max_simplex_error()).map_err(|e| e.at(round, "global_knowledge"))?;
                        if out.knowledge.round != round || aggregated.round != round {
                            return Err(Error::Validation(format!(
                                "round barrier violated: aggregate from round {}, global knowledge from round {}",
                                aggregated.round, out.knowledge.round
                            ))
                            .at(round, "barrier"));
                        }
                        gen_loss = Some(out.final_loss);
                        gen_curve = out.loss_curve;
                        generator = out.params;
                        out.knowledge.per_class
                    }
                };
                download = g.iter().map(ProbVec::len).sum();
                if download != classes * classes {
                    return Err(Error::Validation(format!("download of {download} numbers")).at(round, "download"));
                }
                aggregates.push(aggregated);
                Some(g)
            };

            // S3
            let trained = self
                .pool
                .install(|| {
                    clients
                        .par_iter()
                        .enumerate()
                        .map(|(n, c)| match &global {
                            None => client::local_train(&c.model, &c.shard, schedule(n, round)),
                            Some(g) => {
                                let target = DistillTarget {
                                    knowledge: g,
                                    tau1: cfg.tau1(),
                                    lambda_kd: cfg.lambda_kd,
                                };
                                client::local_distill(&c.model, &c.shard, &target, schedule(n, round))
                            }
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .map_err(|e| e.at(round, "local_distill"))?;
            let mut train_losses = Vec::with_capacity(clients.len());
            for (c, t) in clients.iter_mut().zip(trained) {
                audit.see(t.simplex_error).map_err(|e| e.at(round, "local_distill"))?;
                train_losses.push(t.final_loss);
                c.model = t.model;
            }
            let accuracies = self.evaluate(&clients, &test).map_err(|e| e.at(round, "evaluate"))?;
            metrics.push(round_metrics(round, accuracies, gen_loss, gen_curve, train_losses, upload, download, started));
        }

        if fm.encoder.fingerprint() != encoder_fp || fm.embeddings.fingerprint() != embedding_fp {
            return Err(Error::Validation("frozen encoder state changed during the run".into()));
        }
        Ok(ExperimentReport {
            config: cfg.clone(),
            metrics,
            aggregates,
            simplex_error: audit.0,
            depths,
            encoder_fingerprint: encoder_fp,
            embedding_fingerprint: embedding_fp,
        })
    }

    fn fresh_generator(&self, cfg: &ExperimentConfig) -> Result<PromptGenParams> {
        let s = seed::derive(cfg.seed, &[stream::GENERATOR]);
        match cfg.generator_kind {
            GeneratorKind::Attention => PromptGenParams::attention(cfg.d, cfg.heads, s),
            GeneratorKind::Mlp => PromptGenParams::mlp(cfg.d, cfg.gen_hidden, s),
        }
    }

    /// Final mean accuracy for every `(tau1, tau2)` cell; rows follow `taus1`.
    /// A cell whose training diverges is recorded as `None` instead of
    /// aborting the grid, since extreme temperatures are part of the sweep.
    pub fn temperature_grid(&self, cfg: &ExperimentConfig, taus1: &[f64], taus2: &[f64]) -> Result<TemperatureGrid> {
        for (name, taus) in [("tau1", taus1), ("tau2", taus2)] {
            if taus.is_empty() {
                return Err(field(name, "empty temperature list"));
            }
            if let Some(t) = taus.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
                return Err(field(name, format!("temperatures must be positive, got {t}")));
            }
        }
        let mut accuracy = Vec::with_capacity(taus1.len());
        for t1 in taus1 {
            let mut row = Vec::with_capacity(taus2.len());
            for t2 in taus2 {
                let cell = ExperimentConfig {
                    tau1: *t1,
                    tau2: *t2,
                    ..cfg.clone()
                };
                match self.run(&cell) {
                    Ok(report) => row.push(Some(report.final_accuracy())),
                    Err(e) if e.is_divergence() => row.push(None),
                    Err(e) => return Err(e),
                }
            }
            accuracy.push(row);
        }
        Ok(TemperatureGrid {
            taus1: taus1.to_vec(),
            taus2: taus2.to_vec(),
            accuracy,
        })
    }

    /// Two runs that differ only in the generator architecture.
    pub fn ablation_generator(&self, cfg: &ExperimentConfig) -> Result<Ablation> {
        let attention = self.run(&ExperimentConfig {
            generator_kind: GeneratorKind::Attention,
            ..cfg.clone()
        })?;
        let mlp = self.run(&ExperimentConfig {
            generator_kind: GeneratorKind::Mlp,
            ..cfg.clone()
        })?;
        Ok(Ablation { attention, mlp })
    }
}

#[allow(clippy::too_many_arguments)]
fn round_metrics(
    round: usize,
    accuracies: Vec<f64>,
    gen_loss: Option<f64>,
    gen_loss_curve: Vec<f64>,
    train_losses: Vec<f64>,
    upload: Vec<usize>,
    download: usize,
    started: Instant,
) -> RoundMetrics {
    let mean_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    RoundMetrics {
        round,
        accuracies,
        mean_accuracy,
        gen_loss,
        gen_loss_curve,
        train_losses,
        upload,
        download,
        wall_seconds: started.elapsed().as_secs_f64(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureGrid {
    pub taus1: Vec<f64>,
    pub taus2: Vec<f64>,
    /// `accuracy[i][j]` is the final mean accuracy at `(taus1[i], taus2[j])`,
    /// or `None` when that run diverged.
    pub accuracy: Vec<Vec<Option<f64>>>,
}

impl TemperatureGrid {
    /// `(i, j)` of the best cell that did not diverge; ties go to the first in
    /// row-major order.
    pub fn best(&self) -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for (i, row) in self.accuracy.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    if best.is_none_or(|(_, b)| *v > b) {
                        best = Some(((i, j), *v));
                    }
                }
            }
        }
        best.map(|(ij, _)| ij)
    }
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub attention: ExperimentReport,
    pub mlp: ExperimentReport,
}

/// Runs `cfg.protocol` serially.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    Runner::default().run(cfg)
}

/// Runs a baseline protocol; identical to [`run_experiment`] with the protocol set.
pub fn run_baseline(cfg: &ExperimentConfig, protocol: Protocol) -> Result<ExperimentReport> {
    Runner::default().run(&ExperimentConfig {
        protocol,
        ..cfg.clone()
    })
}

pub fn temperature_grid(cfg: &ExperimentConfig, taus1: &[f64], taus2: &[f64]) -> Result<TemperatureGrid> {
    Runner::default().temperature_grid(cfg, taus1, taus2)
}

pub fn ablation_generator(cfg: &ExperimentConfig) -> Result<Ablation> {
    Runner::default().ablation_generator(cfg)
}
