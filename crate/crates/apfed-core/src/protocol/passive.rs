//! Unlabeled clients.
//!
//! A passive client never sees labels, logits, or other clients. It scores
//! every received representation batch against its own feature view with
//! one of two self-supervised objectives, ships the gradient with respect
//! to the representations back, and only then updates its own parameters,
//! so the returned gradient matches the representations it was given.
//!
//! The objective model is built lazily on the first batch, because the
//! representation width is only known once data arrives.

use std::collections::HashMap;

use super::active::check_session;
use super::message::Message;
use super::transport::Transport;
use super::ProtocolError;
use crate::data::batch::BatchPlan;
use crate::data::psi::{digest_ids, salted_digest, IdDigest};
use crate::data::ViewMatrix;
use crate::losses::{contrastive_loss, reconstruction_loss};
use crate::nn::{Mlp, MlpSpec};
use crate::optim::{sgd_step, SgdConfig};
use crate::rng;
use crate::tape::{ParamStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PassiveObjective {
    /// Decode the representations back into this client's view (MSE).
    Reconstruction,
    /// Pull each representation toward this client's encoding of the same
    /// sample and away from the rest of the batch.
    Contrastive { tau: f64 },
}

#[derive(Debug, Clone)]
pub struct PassiveConfig {
    pub session: u64,
    pub objective: PassiveObjective,
    /// Hidden width of the local decoder/encoder.
    pub hidden: usize,
    pub opt: SgdConfig<f32>,
    pub init_seed: u64,
}

pub struct PassiveClient {
    cfg: PassiveConfig,
    ids: Vec<u64>,
    view: ViewMatrix<f32>,
    store: ParamStore<f32>,
    model: Option<Mlp>,
}

impl PassiveClient {
    pub fn new(cfg: PassiveConfig, ids: Vec<u64>, view: ViewMatrix<f32>) -> Self {
        assert_eq!(ids.len(), view.rows, "one id per view row");
        PassiveClient {
            cfg,
            ids,
            view,
            store: ParamStore::new(),
            model: None,
        }
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    /// Serves one full training session, returning when the peer shuts the
    /// session down.
    pub fn serve(&mut self, transport: &mut dyn Transport) -> Result<(), ProtocolError> {
        match self.run(transport) {
            Ok(()) => Ok(()),
            Err(e) => {
                // Best effort: tell the peer why we are gone.
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
            t.recv().map_err(|e| ProtocolError::peer("active", e))
        };

        let (salt, plan_seed, batch_size) = match recv(transport)? {
            Message::Hello {
                session,
                salt,
                plan_seed,
                batch_size,
                ..
            } => {
                check_session(self.cfg.session, session)?;
                (salt, plan_seed, batch_size as usize)
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
            .map_err(|e| ProtocolError::peer("active", e))?;

        let order = match recv(transport)? {
            Message::AlignResult { session, digests } => {
                check_session(self.cfg.session, session)?;
                self.alignment_order(salt, &digests)?
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
        let mut expected_step: u64 = 0;

        loop {
            match recv(transport)? {
                Message::ForwardReps {
                    session,
                    batch,
                    reps,
                } => {
                    check_session(self.cfg.session, session)?;
                    if batch != expected_step {
                        return Err(ProtocolError::StaleBatch {
                            expected: expected_step,
                            got: batch,
                        });
                    }
                    let epoch = (batch as usize) / bpe;
                    let k = (batch as usize) % bpe;
                    let rows = plan.batches(n, epoch).swap_remove(k);
                    self.step(transport, batch, &rows, reps)?;
                    expected_step += 1;
                }
                Message::EndEpoch { session, .. } => {
                    check_session(self.cfg.session, session)?;
                }
                Message::Shutdown { session } => {
                    check_session(self.cfg.session, session)?;
                    return Ok(());
                }
                Message::Error { text, .. } => return Err(ProtocolError::Remote(text)),
                other => {
                    return Err(ProtocolError::UnexpectedMessage {
                        expected: "ForwardReps, EndEpoch, or Shutdown",
                        got: other.kind_name(),
                    })
                }
            }
        }
    }

    /// Maps canonical digests back to local row indices.
    fn alignment_order(
        &self,
        salt: u64,
        digests: &[IdDigest],
    ) -> Result<Vec<usize>, ProtocolError> {
        let own: HashMap<IdDigest, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(row, &id)| (salted_digest(salt, id), row))
            .collect();
        digests
            .iter()
            .map(|d| own.get(d).copied().ok_or(ProtocolError::UnknownDigest))
            .collect()
    }

    fn step(
        &mut self,
        transport: &mut dyn Transport,
        batch: u64,
        rows: &[usize],
        reps: crate::tensor::Tensor<f32>,
    ) -> Result<(), ProtocolError> {
        let (rep_rows, latent) = reps.dims2("reps")?;
        if rep_rows != rows.len() {
            return Err(ProtocolError::ShapeMismatch {
                context: "representation batch",
                expected: vec![rows.len(), latent],
                got: reps.shape().to_vec(),
            });
        }
        let model = match &self.model {
            Some(m) => {
                if m.in_out_for(self.cfg.objective).0 != latent {
                    return Err(ProtocolError::ShapeMismatch {
                        context: "representation width changed mid-session",
                        expected: vec![rep_rows, m.in_out_for(self.cfg.objective).0],
                        got: reps.shape().to_vec(),
                    });
                }
                m.clone()
            }
            None => {
                let spec = match self.cfg.objective {
                    PassiveObjective::Reconstruction => MlpSpec::linear_out(vec![
                        latent,
                        self.cfg.hidden,
                        self.view.dim,
                    ])?,
                    PassiveObjective::Contrastive { .. } => MlpSpec::relu_all(vec![
                        self.view.dim,
                        self.cfg.hidden,
                        latent,
                    ])?,
                };
                let mut r = rng::seeded(self.cfg.init_seed);
                let m = Mlp::init(&mut self.store, spec, "aux", &mut r);
                self.model = Some(m.clone());
                m
            }
        };

        let x = self.view.gather(rows);
        let mut tape = Tape::new();
        let h_in = tape.input(reps);
        let loss_id = match self.cfg.objective {
            PassiveObjective::Reconstruction => {
                reconstruction_loss(&mut tape, &self.store, h_in, &model, &x)?
            }
            PassiveObjective::Contrastive { tau } => {
                let xv = tape.constant(x);
                let own = model.forward(&mut tape, &self.store, xv)?;
                contrastive_loss(&mut tape, h_in, own, tau)?
            }
        };
        let loss = tape.value(loss_id).data()[0];
        tape.backward(loss_id, &mut self.store)?;
        let grads = tape.grad(h_in);

        // Send before updating: the gradient must describe the parameters
        // that produced it.
        transport
            .send(&Message::Grads {
                session: self.cfg.session,
                batch,
                grads,
                loss,
            })
            .map_err(|e| ProtocolError::peer("active", e))?;
        sgd_step(&mut self.store, &model.param_ids(), &self.cfg.opt);
        Ok(())
    }
}

impl Mlp {
    /// (input dim, output dim) the objective expects for received
    /// representations. For reconstruction the model consumes latents; for
    /// contrastive it produces them.
    fn in_out_for(&self, objective: PassiveObjective) -> (usize, usize) {
        match objective {
            PassiveObjective::Reconstruction => (self.spec.in_dim(), self.spec.out_dim()),
            PassiveObjective::Contrastive { .. } => (self.spec.out_dim(), self.spec.in_dim()),
        }
    }
}
