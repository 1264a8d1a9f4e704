//! The label-holding client.
//!
//! Owns the encoder and the task head. Each training step runs the encoder
//! once, detaches the representation batch, fans it out to the passives,
//! computes its own task gradient against the detached copy, folds every
//! returned representation gradient into one adjoint, and pushes that back
//! through the encoder tape:
//!
//!   d(total)/d(reps) = d(task)/d(reps) + sum_p lambda_p * d(aux_p)/d(reps)
//!
//! With zero passives the loop degenerates to plain local training, which
//! is exactly the single-party baseline; no separate code path exists.
//! Inference never touches a transport.

use std::collections::HashMap;
use std::time::Instant;

use super::message::Message;
use super::transport::Transport;
use super::ProtocolError;
use crate::data::batch::BatchPlan;
use crate::data::psi::{digest_ids, intersect_digests};
use crate::data::ViewMatrix;
use crate::error::TensorError;
use crate::nn::{Mlp, MlpSpec};
use crate::optim::{sgd_step, SgdConfig};
use crate::rng;
use crate::tape::{ParamStore, Tape};
use crate::tensor::{argmax_rows, Tensor};

pub struct PassiveHandle {
    /// Label for error reporting, e.g. "passive 1".
    pub name: String,
    /// Weight of this passive's representation gradient in the aggregate.
    pub lambda: f32,
    pub transport: Box<dyn Transport>,
}

#[derive(Debug, Clone)]
pub struct ActiveConfig {
    pub session: u64,
    pub salt: u64,
    pub plan_seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub encoder: MlpSpec,
    pub head: MlpSpec,
    pub opt_encoder: SgdConfig<f32>,
    pub opt_head: SgdConfig<f32>,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Sample-weighted mean task loss over the epoch.
    pub task_loss: f32,
    /// Sample-weighted mean auxiliary loss per passive, in handle order.
    pub passive_losses: Vec<f32>,
    pub test_accuracy: Option<f32>,
    pub wall_ms: u64,
    /// Cumulative transport bytes over all passives, as of epoch end.
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

pub struct ActiveClient {
    cfg: ActiveConfig,
    store: ParamStore<f32>,
    encoder: Mlp,
    head: Mlp,
    passives: Vec<PassiveHandle>,
    ids: Vec<u64>,
    view: ViewMatrix<f32>,
    labels: Vec<u32>,
    aligned: bool,
}

impl ActiveClient {
    pub fn new(
        cfg: ActiveConfig,
        ids: Vec<u64>,
        view: ViewMatrix<f32>,
        labels: Vec<u32>,
        passives: Vec<PassiveHandle>,
    ) -> Result<Self, TensorError> {
        if ids.len() != view.rows || labels.len() != view.rows {
            return Err(TensorError::contract(
                "active",
                format!(
                    "ids ({}), view rows ({}), labels ({}) must agree",
                    ids.len(),
                    view.rows,
                    labels.len()
                ),
            ));
        }
        if cfg.encoder.in_dim() != view.dim {
            return Err(TensorError::contract(
                "active",
                format!(
                    "encoder expects {} features, view has {}",
                    cfg.encoder.in_dim(),
                    view.dim
                ),
            ));
        }
        if cfg.head.in_dim() != cfg.encoder.out_dim() {
            return Err(TensorError::contract(
                "active",
                format!(
                    "head expects {} features, encoder yields {}",
                    cfg.head.in_dim(),
                    cfg.encoder.out_dim()
                ),
            ));
        }
        let mut store = ParamStore::new();
        let mut r = rng::seeded(cfg.init_seed);
        let encoder = Mlp::init(&mut store, cfg.encoder.clone(), "encoder", &mut r);
        let head = Mlp::init(&mut store, cfg.head.clone(), "head", &mut r);
        Ok(ActiveClient {
            cfg,
            store,
            encoder,
            head,
            passives,
            ids,
            view,
            labels,
            aligned: false,
        })
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    pub fn aligned_ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn bytes_sent(&self) -> u64 {
        self.passives.iter().map(|p| p.transport.bytes_sent()).sum()
    }

    pub fn bytes_received(&self) -> u64 {
        self.passives
            .iter()
            .map(|p| p.transport.bytes_received())
            .sum()
    }

    /// Opens the session and intersects sample ids with every passive.
    /// Afterwards local rows sit in canonical (ascending id) order.
    pub fn align(&mut self) -> Result<(), ProtocolError> {
        let hello = Message::Hello {
            session: self.cfg.session,
            salt: self.cfg.salt,
            plan_seed: self.cfg.plan_seed,
            batch_size: self.cfg.batch_size as u32,
            epochs: self.cfg.epochs as u32,
        };
        for p in &mut self.passives {
            p.transport
                .send(&hello)
                .map_err(|e| ProtocolError::peer(&p.name, e))?;
        }

        let mut offers = Vec::with_capacity(self.passives.len());
        for p in &mut self.passives {
            let msg = p
                .transport
                .recv()
                .map_err(|e| ProtocolError::peer(&p.name, e))?;
            match msg {
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
        for p in &mut self.passives {
            p.transport
                .send(&result)
                .map_err(|e| ProtocolError::peer(&p.name, e))?;
        }

        let position: HashMap<u64, usize> =
            self.ids.iter().copied().enumerate().map(|(i, id)| (id, i)).collect();
        let order: Vec<usize> = aligned.iter().map(|id| position[id]).collect();
        self.view = self.view.reorder(&order);
        self.labels = order.iter().map(|&i| self.labels[i]).collect();
        self.ids = aligned;
        self.aligned = true;
        Ok(())
    }

    /// Runs the configured number of epochs. Evaluates on the given test
    /// split after each epoch; the transports are idle during evaluation.
    pub fn train(
        &mut self,
        test: Option<(&ViewMatrix<f32>, &[u32])>,
    ) -> Result<Vec<EpochStats>, ProtocolError> {
        if !self.aligned {
            if self.passives.is_empty() {
                // Nothing to intersect against; train on local order.
                self.aligned = true;
            } else {
                self.align()?;
            }
        }
        let n = self.view.rows;
        let plan = BatchPlan::new(self.cfg.plan_seed, self.cfg.batch_size);
        let bpe = plan.batches_per_epoch(n);
        let mut stats = Vec::with_capacity(self.cfg.epochs);

        for epoch in 0..self.cfg.epochs {
            let start = Instant::now();
            let mut task_sum = 0.0f64;
            let mut passive_sums = vec![0.0f64; self.passives.len()];
            for (k, rows) in plan.batches(n, epoch).into_iter().enumerate() {
                let step = (epoch * bpe + k) as u64;
                let (task, passive_losses) = self.train_step(step, &rows)?;
                let weight = rows.len() as f64;
                task_sum += task as f64 * weight;
                for (s, l) in passive_sums.iter_mut().zip(passive_losses.iter()) {
                    *s += *l as f64 * weight;
                }
            }

            let end_epoch = Message::EndEpoch {
                session: self.cfg.session,
                epoch: epoch as u64,
            };
            for p in &mut self.passives {
                p.transport
                    .send(&end_epoch)
                    .map_err(|e| ProtocolError::peer(&p.name, e))?;
            }

            let test_accuracy = match test {
                Some((view, labels)) => Some(self.evaluate(view, labels)?),
                None => None,
            };
            stats.push(EpochStats {
                epoch,
                task_loss: (task_sum / n as f64) as f32,
                passive_losses: passive_sums
                    .iter()
                    .map(|s| (*s / n as f64) as f32)
                    .collect(),
                test_accuracy,
                wall_ms: start.elapsed().as_millis() as u64,
                bytes_sent: self.bytes_sent(),
                bytes_received: self.bytes_received(),
            });
        }

        let shutdown = Message::Shutdown {
            session: self.cfg.session,
        };
        for p in &mut self.passives {
            p.transport
                .send(&shutdown)
                .map_err(|e| ProtocolError::peer(&p.name, e))?;
        }
        Ok(stats)
    }

    /// One synchronized step over the given sample rows. Returns the task
    /// loss and each passive's reported auxiliary loss.
    fn train_step(
        &mut self,
        step: u64,
        rows: &[usize],
    ) -> Result<(f32, Vec<f32>), ProtocolError> {
        let x = self.view.gather(rows);
        let labels: Vec<u32> = rows.iter().map(|&r| self.labels[r]).collect();

        // Encoder pass; the representation leaves this tape as plain data.
        let mut enc_tape = Tape::new();
        let xv = enc_tape.constant(x);
        let h_id = self.encoder.forward(&mut enc_tape, &self.store, xv)?;
        let h = enc_tape.value(h_id).clone();

        for p in &mut self.passives {
            p.transport
                .send(&Message::ForwardReps {
                    session: self.cfg.session,
                    batch: step,
                    reps: h.clone(),
                })
                .map_err(|e| ProtocolError::peer(&p.name, e))?;
        }

        // Local task gradient while the passives work.
        let mut head_tape = Tape::new();
        let h_in = head_tape.input(h.clone());
        let logits = self.head.forward(&mut head_tape, &self.store, h_in)?;
        let task_id = head_tape.cross_entropy(logits, &labels)?;
        let task_loss = head_tape.value(task_id).data()[0];
        head_tape.backward(task_id, &mut self.store)?;
        let mut aggregate = head_tape.grad(h_in);

        let mut passive_losses = Vec::with_capacity(self.passives.len());
        for p in &mut self.passives {
            let msg = p
                .transport
                .recv()
                .map_err(|e| ProtocolError::peer(&p.name, e))?;
            match msg {
                Message::Grads {
                    session,
                    batch,
                    grads,
                    loss,
                } => {
                    check_session(self.cfg.session, session)?;
                    if batch != step {
                        return Err(ProtocolError::StaleBatch {
                            expected: step,
                            got: batch,
                        });
                    }
                    if grads.shape() != h.shape() {
                        return Err(ProtocolError::ShapeMismatch {
                            context: "representation gradient",
                            expected: h.shape().to_vec(),
                            got: grads.shape().to_vec(),
                        });
                    }
                    // A zero-weight term contributes exactly nothing; skip
                    // it so lambda = 0 degrades to training alone down to
                    // the last bit (signed zeros included).
                    if p.lambda != 0.0 {
                        aggregate.axpy(p.lambda, &grads)?;
                    }
                    passive_losses.push(loss);
                }
                Message::Error { text, .. } => return Err(ProtocolError::Remote(text)),
                other => {
                    return Err(ProtocolError::UnexpectedMessage {
                        expected: "Grads",
                        got: other.kind_name(),
                    })
                }
            }
        }

        enc_tape.backward_seeded(h_id, aggregate, &mut self.store)?;
        sgd_step(&mut self.store, &self.encoder.param_ids(), &self.cfg.opt_encoder);
        sgd_step(&mut self.store, &self.head.param_ids(), &self.cfg.opt_head);
        Ok((task_loss, passive_losses))
    }

    /// Accuracy over a labeled view, computed entirely locally.
    pub fn evaluate(
        &self,
        view: &ViewMatrix<f32>,
        labels: &[u32],
    ) -> Result<f32, ProtocolError> {
        let preds = self.infer(&view.as_tensor())?;
        let correct = preds
            .iter()
            .zip(labels.iter())
            .filter(|(p, l)| **p == **l as usize)
            .count();
        Ok(correct as f32 / labels.len().max(1) as f32)
    }

    /// Class predictions from the active view alone.
    pub fn infer(&self, x: &Tensor<f32>) -> Result<Vec<usize>, TensorError> {
        let reps = self.encoder.eval(&self.store, x)?;
        let logits = self.head.eval(&self.store, &reps)?;
        argmax_rows(&logits)
    }
}

pub(crate) fn check_session(ours: u64, theirs: u64) -> Result<(), ProtocolError> {
    if ours != theirs {
        return Err(ProtocolError::SessionMismatch { ours, theirs });
    }
    Ok(())
}
