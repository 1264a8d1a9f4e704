//! Feature-concatenation baseline.
//!
//! A label-holding server trains one classification head over the
//! concatenated representations of every client; each client trains its own
//! encoder from the gradient slice the server returns. Inference needs all
//! clients present, which is the operational weakness the active-passive
//! protocol removes: when views go missing at test time the server can only
//! substitute zeros, cached averages, or noise for them.
//!
//! After each epoch every client streams its test-view representations so
//! the server can score held-out accuracy; those sweeps ride ForwardReps
//! frames with batch = u64::MAX - epoch, which cannot collide with step
//! counters. During the final epoch the server also accumulates per-client
//! mean training representations, the substitution table used by the
//! average-ablation mode.

use std::collections::HashMap;
use std::time::Instant;

use super::active::check_session;
use super::message::Message;
use super::transport::Transport;
use super::ProtocolError;
use crate::data::batch::BatchPlan;
use crate::data::psi::{digest_ids, intersect_digests, salted_digest, IdDigest};
use crate::data::ViewMatrix;
use crate::losses::tvfl_server_loss;
use crate::nn::{Mlp, MlpSpec};
use crate::optim::{sgd_step, SgdConfig};
use crate::rng;
use crate::tape::{ParamStore, Tape};
use crate::tensor::{argmax_rows, Tensor};

/// Marks a ForwardReps frame as a test sweep for the given epoch.
pub fn eval_sweep_batch(epoch: usize) -> u64 {
    u64::MAX - epoch as u64
}

pub struct ClientHandle {
    pub name: String,
    pub transport: Box<dyn Transport>,
}

#[derive(Debug, Clone)]
pub struct TvflServerConfig {
    pub session: u64,
    pub salt: u64,
    pub plan_seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub classes: usize,
    pub opt_head: SgdConfig<f32>,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvflEpochStats {
    pub epoch: usize,
    /// Sample-weighted mean joint loss over the epoch.
    pub train_loss: f32,
    pub test_accuracy: f32,
    pub wall_ms: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

/// Everything the server side learned: the head plus the ablation cache.
pub struct TvflModel {
    pub head_spec: MlpSpec,
    pub store: ParamStore<f32>,
    pub head: Mlp,
    /// Representation width per client, in client order.
    pub latents: Vec<usize>,
    /// Final-epoch mean training representation per client.
    pub avg_cache: Vec<Vec<f32>>,
    pub classes: usize,
}

/// A server model bundled with every client encoder, which is what a saved
/// training run consists of.
pub struct TvflBundle {
    pub model: TvflModel,
    /// (spec, parameters) per client, in client order.
    pub encoders: Vec<(MlpSpec, ParamStore<f32>)>,
}

pub struct TvflServer {
    cfg: TvflServerConfig,
    ids: Vec<u64>,
    labels: Vec<u32>,
    test_labels: Vec<u32>,
    clients: Vec<ClientHandle>,
}

impl TvflServer {
    pub fn new(
        cfg: TvflServerConfig,
        ids: Vec<u64>,
        labels: Vec<u32>,
        test_labels: Vec<u32>,
        clients: Vec<ClientHandle>,
    ) -> Self {
        assert_eq!(ids.len(), labels.len(), "one label per id");
        assert!(!clients.is_empty(), "need at least one client");
        TvflServer {
            cfg,
            ids,
            labels,
            test_labels,
            clients,
        }
    }

    fn bytes_sent(&self) -> u64 {
        self.clients.iter().map(|c| c.transport.bytes_sent()).sum()
    }

    fn bytes_received(&self) -> u64 {
        self.clients
            .iter()
            .map(|c| c.transport.bytes_received())
            .sum()
    }

    /// Runs the full session and returns the trained head model with
    /// per-epoch statistics.
    pub fn train(mut self) -> Result<(TvflModel, Vec<TvflEpochStats>), ProtocolError> {
        let hello = Message::Hello {
            session: self.cfg.session,
            salt: self.cfg.salt,
            plan_seed: self.cfg.plan_seed,
            batch_size: self.cfg.batch_size as u32,
            epochs: self.cfg.epochs as u32,
        };
        for c in &mut self.clients {
            c.transport
                .send(&hello)
                .map_err(|e| ProtocolError::peer(&c.name, e))?;
        }
        let mut offers = Vec::with_capacity(self.clients.len());
        for c in &mut self.clients {
            match c
                .transport
                .recv()
                .map_err(|e| ProtocolError::peer(&c.name, e))?
            {
                Message::AlignOffer { session, digests } => {
                    check_session(self.cfg.session, session)?;
                    offers.push(digests);
                }
                Message::Error { text, .. } => return Err(ProtocolError::Remote(text)),
                other => {
                    return Err(ProtocolError::UnexpectedMessage {
                        expected: "AlignOffer",
                        got: other.kind_name(),
                    })
                }
            }
        }
        let aligned = intersect_digests(&self.ids, self.cfg.salt, &offers);
        if aligned.is_empty() {
            return Err(ProtocolError::EmptyIntersection);
        }
        let result = Message::AlignResult {
            session: self.cfg.session,
            digests: digest_ids(self.cfg.salt, &aligned),
        };
        for c in &mut self.clients {
            c.transport
                .send(&result)
                .map_err(|e| ProtocolError::peer(&c.name, e))?;
        }
        let position: HashMap<u64, usize> =
            self.ids.iter().copied().enumerate().map(|(i, id)| (id, i)).collect();
        self.labels = aligned.iter().map(|id| self.labels[position[id]]).collect();
        self.ids = aligned;

        let n = self.ids.len();
        let plan = BatchPlan::new(self.cfg.plan_seed, self.cfg.batch_size);
        let bpe = plan.batches_per_epoch(n);

        let mut store = ParamStore::new();
        let mut head: Option<(Mlp, MlpSpec)> = None;
        let mut latents: Vec<usize> = Vec::new();
        let mut avg_sum: Vec<Vec<f64>> = Vec::new();
        let mut avg_count: usize = 0;
        let mut stats = Vec::with_capacity(self.cfg.epochs);

        for epoch in 0..self.cfg.epochs {
            let start = Instant::now();
            let mut loss_sum = 0.0f64;
            let final_epoch = epoch + 1 == self.cfg.epochs;

            for (k, rows) in plan.batches(n, epoch).into_iter().enumerate() {
                let step = (epoch * bpe + k) as u64;
                let labels: Vec<u32> = rows.iter().map(|&r| self.labels[r]).collect();

                let mut reps: Vec<Tensor<f32>> = Vec::with_capacity(self.clients.len());
                for c in &mut self.clients {
                    match c
                        .transport
                        .recv()
                        .map_err(|e| ProtocolError::peer(&c.name, e))?
                    {
                        Message::ForwardReps {
                            session,
                            batch,
                            reps: r,
                        } => {
                            check_session(self.cfg.session, session)?;
                            if batch != step {
                                return Err(ProtocolError::StaleBatch {
                                    expected: step,
                                    got: batch,
                                });
                            }
                            let (rrows, _) = r.dims2("reps")?;
                            if rrows != rows.len() {
                                return Err(ProtocolError::ShapeMismatch {
                                    context: "client representation batch",
                                    expected: vec![rows.len()],
                                    got: r.shape().to_vec(),
                                });
                            }
                            reps.push(r);
                        }
                        Message::Error { text, .. } => return Err(ProtocolError::Remote(text)),
                        other => {
                            return Err(ProtocolError::UnexpectedMessage {
                                expected: "ForwardReps",
                                got: other.kind_name(),
                            })
                        }
                    }
                }

                if head.is_none() {
                    latents = reps.iter().map(|r| r.shape()[1]).collect();
                    let total: usize = latents.iter().sum();
                    let spec = MlpSpec::linear_out(vec![total, self.cfg.classes])?;
                    let mut r = rng::seeded(self.cfg.init_seed);
                    let m = Mlp::init(&mut store, spec.clone(), "head", &mut r);
                    avg_sum = latents.iter().map(|&l| vec![0.0f64; l]).collect();
                    head = Some((m, spec));
                }
                let head_mlp = head.as_ref().expect("initialized above").0.clone();

                if final_epoch {
                    for (sum, r) in avg_sum.iter_mut().zip(reps.iter()) {
                        let (rows_n, cols) = r.dims2("reps")?;
                        for row in 0..rows_n {
                            for j in 0..cols {
                                sum[j] += r.data()[row * cols + j] as f64;
                            }
                        }
                    }
                    avg_count += rows.len();
                }

                let mut tape = Tape::new();
                let inputs: Vec<_> = reps.iter().map(|r| tape.input(r.clone())).collect();
                let loss_id = tvfl_server_loss(&mut tape, &store, &inputs, &labels, &head_mlp)?;
                let loss = tape.value(loss_id).data()[0];
                tape.backward(loss_id, &mut store)?;
                loss_sum += loss as f64 * rows.len() as f64;

                for (c, &input) in self.clients.iter_mut().zip(inputs.iter()) {
                    c.transport
                        .send(&Message::Grads {
                            session: self.cfg.session,
                            batch: step,
                            grads: tape.grad(input),
                            loss,
                        })
                        .map_err(|e| ProtocolError::peer(&c.name, e))?;
                }
                for c in &mut self.clients {
                    match c
                        .transport
                        .recv()
                        .map_err(|e| ProtocolError::peer(&c.name, e))?
                    {
                        Message::StepAck { session, batch } => {
                            check_session(self.cfg.session, session)?;
                            if batch != step {
                                return Err(ProtocolError::StaleBatch {
                                    expected: step,
                                    got: batch,
                                });
                            }
                        }
                        Message::Error { text, .. } => return Err(ProtocolError::Remote(text)),
                        other => {
                            return Err(ProtocolError::UnexpectedMessage {
                                expected: "StepAck",
                                got: other.kind_name(),
                            })
                        }
                    }
                }
                sgd_step(&mut store, &head_mlp.param_ids(), &self.cfg.opt_head);
            }

            // Test sweep: every client streams test-view representations.
            let end = Message::EndEpoch {
                session: self.cfg.session,
                epoch: epoch as u64,
            };
            for c in &mut self.clients {
                c.transport
                    .send(&end)
                    .map_err(|e| ProtocolError::peer(&c.name, e))?;
            }
            let sweep = eval_sweep_batch(epoch);
            let mut test_reps: Vec<Tensor<f32>> = Vec::with_capacity(self.clients.len());
            for c in &mut self.clients {
                match c
                    .transport
                    .recv()
                    .map_err(|e| ProtocolError::peer(&c.name, e))?
                {
                    Message::ForwardReps {
                        session,
                        batch,
                        reps,
                    } => {
                        check_session(self.cfg.session, session)?;
                        if batch != sweep {
                            return Err(ProtocolError::StaleBatch {
                                expected: sweep,
                                got: batch,
                            });
                        }
                        test_reps.push(reps);
                    }
                    Message::Error { text, .. } => return Err(ProtocolError::Remote(text)),
                    other => {
                        return Err(ProtocolError::UnexpectedMessage {
                            expected: "ForwardReps (test sweep)",
                            got: other.kind_name(),
                        })
                    }
                }
            }
            let head_mlp = &head.as_ref().expect("initialized in epoch 0").0;
            let joint = concat_reps(&test_reps)?;
            let logits = head_mlp.eval(&store, &joint)?;
            let preds = argmax_rows(&logits)?;
            let correct = preds
                .iter()
                .zip(self.test_labels.iter())
                .filter(|(p, l)| **p == **l as usize)
                .count();
            let test_accuracy = correct as f32 / self.test_labels.len().max(1) as f32;

            stats.push(TvflEpochStats {
                epoch,
                train_loss: (loss_sum / n as f64) as f32,
                test_accuracy,
                wall_ms: start.elapsed().as_millis() as u64,
                bytes_sent: self.bytes_sent(),
                bytes_received: self.bytes_received(),
            });
        }

        let shutdown = Message::Shutdown {
            session: self.cfg.session,
        };
        for c in &mut self.clients {
            c.transport
                .send(&shutdown)
                .map_err(|e| ProtocolError::peer(&c.name, e))?;
        }

        let (head_mlp, head_spec) = head.expect("at least one epoch trains the head");
        let avg_cache = avg_sum
            .into_iter()
            .map(|sum| {
                sum.into_iter()
                    .map(|v| (v / avg_count.max(1) as f64) as f32)
                    .collect()
            })
            .collect();
        Ok((
            TvflModel {
                head_spec,
                store,
                head: head_mlp,
                latents,
                avg_cache,
                classes: self.cfg.classes,
            },
            stats,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct TvflClientConfig {
    pub session: u64,
    /// Output width of this client's encoder.
    pub latent: usize,
    pub hidden: usize,
    pub opt: SgdConfig<f32>,
    pub init_seed: u64,
}

pub struct TvflClient {
    cfg: TvflClientConfig,
    ids: Vec<u64>,
    view: ViewMatrix<f32>,
    test_view: ViewMatrix<f32>,
    store: ParamStore<f32>,
    encoder: Mlp,
}

impl TvflClient {
    pub fn new(
        cfg: TvflClientConfig,
        ids: Vec<u64>,
        view: ViewMatrix<f32>,
        test_view: ViewMatrix<f32>,
    ) -> Self {
        assert_eq!(ids.len(), view.rows, "one id per view row");
        assert_eq!(view.dim, test_view.dim, "train and test views must agree");
        let spec = MlpSpec::relu_all(vec![view.dim, cfg.hidden, cfg.latent])
            .expect("widths are positive");
        let mut store = ParamStore::new();
        let mut r = rng::seeded(cfg.init_seed);
        let encoder = Mlp::init(&mut store, spec, "encoder", &mut r);
        TvflClient {
            cfg,
            ids,
            view,
            test_view,
            store,
            encoder,
        }
    }

    /// The trained encoder, for bundling into a saved model.
    pub fn into_encoder(self) -> (MlpSpec, ParamStore<f32>) {
        (self.encoder.spec.clone(), self.store)
    }

    pub fn serve(&mut self, transport: &mut dyn Transport) -> Result<(), ProtocolError> {
        match self.run(transport) {
            Ok(()) => Ok(()),
            Err(e) => {
                let _ = transport.send(&Message::Error {
                    session: self.cfg.session,
                    text: e.to_string(),
                });
                Err(e)
            }
        }
    }

    fn run(&mut self, transport: &mut dyn Transport) -> Result<(), ProtocolError> {
        let recv = |t: &mut dyn Transport| {
            t.recv().map_err(|e| ProtocolError::peer("server", e))
        };

        let (salt, plan_seed, batch_size, epochs) = match recv(transport)? {
            Message::Hello {
                session,
                salt,
                plan_seed,
                batch_size,
                epochs,
            } => {
                check_session(self.cfg.session, session)?;
                (salt, plan_seed, batch_size as usize, epochs as usize)
            }
            other => {
                return Err(ProtocolError::UnexpectedMessage {
                    expected: "Hello",
                    got: other.kind_name(),
                })
            }
        };
        transport
            .send(&Message::AlignOffer {
                session: self.cfg.session,
                digests: digest_ids(salt, &self.ids),
            })
            .map_err(|e| ProtocolError::peer("server", e))?;
        let order = match recv(transport)? {
            Message::AlignResult { session, digests } => {
                check_session(self.cfg.session, session)?;
                let own: HashMap<IdDigest, usize> = self
                    .ids
                    .iter()
                    .enumerate()
                    .map(|(row, &id)| (salted_digest(salt, id), row))
                    .collect();
                digests
                    .iter()
                    .map(|d| own.get(d).copied().ok_or(ProtocolError::UnknownDigest))
                    .collect::<Result<Vec<usize>, _>>()?
            }
            other => {
                return Err(ProtocolError::UnexpectedMessage {
                    expected: "AlignResult",
                    got: other.kind_name(),
                })
            }
        };
        self.view = self.view.reorder(&order);
        let n = order.len();
        let plan = BatchPlan::new(plan_seed, batch_size);
        let bpe = plan.batches_per_epoch(n);

        for epoch in 0..epochs {
            for (k, rows) in plan.batches(n, epoch).into_iter().enumerate() {
                let step = (epoch * bpe + k) as u64;
                let x = self.view.gather(&rows);
                let mut tape = Tape::new();
                let xv = tape.constant(x);
                let reps_id = self.encoder.forward(&mut tape, &self.store, xv)?;
                transport
                    .send(&Message::ForwardReps {
                        session: self.cfg.session,
                        batch: step,
                        reps: tape.value(reps_id).clone(),
                    })
                    .map_err(|e| ProtocolError::peer("server", e))?;

                match recv(transport)? {
                    Message::Grads {
                        session,
                        batch,
                        grads,
                        ..
                    } => {
                        check_session(self.cfg.session, session)?;
                        if batch != step {
                            return Err(ProtocolError::StaleBatch {
                                expected: step,
                                got: batch,
                            });
                        }
                        if grads.shape() != tape.value(reps_id).shape() {
                            return Err(ProtocolError::ShapeMismatch {
                                context: "returned gradient",
                                expected: tape.value(reps_id).shape().to_vec(),
                                got: grads.shape().to_vec(),
                            });
                        }
                        tape.backward_seeded(reps_id, grads, &mut self.store)?;
                    }
                    Message::Error { text, .. } => return Err(ProtocolError::Remote(text)),
                    other => {
                        return Err(ProtocolError::UnexpectedMessage {
                            expected: "Grads",
                            got: other.kind_name(),
                        })
                    }
                }
                sgd_step(&mut self.store, &self.encoder.param_ids(), &self.cfg.opt);
                transport
                    .send(&Message::StepAck {
                        session: self.cfg.session,
                        batch: step,
                    })
                    .map_err(|e| ProtocolError::peer("server", e))?;
            }

            match recv(transport)? {
                Message::EndEpoch { session, epoch: e } => {
                    check_session(self.cfg.session, session)?;
                    if e != epoch as u64 {
                        return Err(ProtocolError::StaleBatch {
                            expected: epoch as u64,
                            got: e,
                        });
                    }
                }
                Message::Error { text, .. } => return Err(ProtocolError::Remote(text)),
                other => {
                    return Err(ProtocolError::UnexpectedMessage {
                        expected: "EndEpoch",
                        got: other.kind_name(),
                    })
                }
            }
            let test_reps = self.encoder.eval(&self.store, &self.test_view.as_tensor())?;
            transport
                .send(&Message::ForwardReps {
                    session: self.cfg.session,
                    batch: eval_sweep_batch(epoch),
                    reps: test_reps,
                })
                .map_err(|e| ProtocolError::peer("server", e))?;
        }

        match recv(transport)? {
            Message::Shutdown { session } => {
                check_session(self.cfg.session, session)?;
                Ok(())
            }
            Message::Error { text, .. } => Err(ProtocolError::Remote(text)),
            other => Err(ProtocolError::UnexpectedMessage {
                expected: "Shutdown",
                got: other.kind_name(),
            }),
        }
    }
}

// ── Evaluation with missing views ──────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateMode {
    /// Missing views contribute zeros.
    Zero,
    /// Missing views contribute their cached mean training representation.
    Average,
    /// Missing views contribute seeded standard-normal noise.
    Random,
}

impl AblateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AblateMode::Zero => "zero",
            AblateMode::Average => "avg",
            AblateMode::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zero" => Some(AblateMode::Zero),
            "avg" | "average" => Some(AblateMode::Average),
            "random" => Some(AblateMode::Random),
            _ => None,
        }
    }
}

impl TvflBundle {
    fn client_reps(&self, client: usize, view: &ViewMatrix<f32>) -> Result<Tensor<f32>, ProtocolError> {
        let (spec, store) = &self.encoders[client];
        let enc = Mlp::bind(store, spec.clone(), "encoder")?;
        Ok(enc.eval(store, &view.as_tensor())?)
    }

    /// Accuracy with every view present.
    pub fn full_accuracy(
        &self,
        views: &[ViewMatrix<f32>],
        labels: &[u32],
    ) -> Result<f32, ProtocolError> {
        let reps = views
            .iter()
            .enumerate()
            .map(|(i, v)| self.client_reps(i, v))
            .collect::<Result<Vec<_>, _>>()?;
        self.score(&reps, labels)
    }

    /// Accuracy when only `present` (0-based client index) shows up and
    /// every other view is substituted per `mode`.
    pub fn ablated_accuracy(
        &self,
        views: &[ViewMatrix<f32>],
        labels: &[u32],
        present: usize,
        mode: AblateMode,
        noise_seed: u64,
    ) -> Result<f32, ProtocolError> {
        let n = labels.len();
        let mut reps = Vec::with_capacity(self.encoders.len());
        for (i, latent) in self.model.latents.iter().enumerate() {
            if i == present {
                reps.push(self.client_reps(i, &views[i])?);
                continue;
            }
            let t = match mode {
                AblateMode::Zero => Tensor::zeros(vec![n, *latent]),
                AblateMode::Average => {
                    let cache = &self.model.avg_cache[i];
                    let mut data = Vec::with_capacity(n * latent);
                    for _ in 0..n {
                        data.extend_from_slice(cache);
                    }
                    Tensor::matrix(n, *latent, data)
                }
                AblateMode::Random => {
                    let mut r = rng::substream(noise_seed, i as u64);
                    let data = (0..n * latent)
                        .map(|_| rng::standard_normal(&mut r) as f32)
                        .collect();
                    Tensor::matrix(n, *latent, data)
                }
            };
            reps.push(t);
        }
        self.score(&reps, labels)
    }

    fn score(&self, reps: &[Tensor<f32>], labels: &[u32]) -> Result<f32, ProtocolError> {
        let joint = concat_reps(reps)?;
        let logits = self.model.head.eval(&self.model.store, &joint)?;
        let preds = argmax_rows(&logits)?;
        let correct = preds
            .iter()
            .zip(labels.iter())
            .filter(|(p, l)| **p == **l as usize)
            .count();
        Ok(correct as f32 / labels.len().max(1) as f32)
    }
}

fn concat_reps(reps: &[Tensor<f32>]) -> Result<Tensor<f32>, crate::error::TensorError> {
    let mut tape: Tape<f32> = Tape::new();
    let ids: Vec<_> = reps.iter().map(|r| tape.constant(r.clone())).collect();
    let joint = tape.concat_cols(&ids)?;
    Ok(tape.value(joint).clone())
}
