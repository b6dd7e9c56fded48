//! The contrastive training loop.
//!
//! Every question and every distinct passage of a batch is encoded on its own
//! tape. The loss is assembled on a small head tape whose leaves are the CLS
//! vectors (and routing entropy sums); its leaf gradients then seed the
//! backward sweep of each sequence tape.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{collect_grads, Binder, ParamId, TaserEncoder};
use crate::error::{Error, Result};
use crate::gumbel::Mode;
use crate::rng::Rng;
use crate::routing::{entropy_sum, InputKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::loss::{contrastive_loss, joint_loss};
use super::negatives::{in_batch_negatives, TrainExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight of the routing-entropy term.
    pub beta: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Explicit negatives used per question and batch.
    pub max_negatives: Option<usize>,
    /// Dense candidates mined per question in round 2.
    pub top_n: usize,
    /// Round 2 trains on BM25 and mined negatives together.
    pub combine_negatives: bool,
    /// Cutoff of the model-selection metric.
    pub eval_k: usize,
    /// Stop after this many epochs without a dev improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 150,
            learning_rate: 2e-3,
            beta: 0.01,
            adam: AdamConfig::default(),
            seed: 0,
            max_negatives: Some(2),
            top_n: 10,
            combine_negatives: false,
            eval_k: 5,
            patience: Some(40),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !self.beta.is_finite() {
            return bad("beta must be finite");
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return bad("adam needs beta1, beta2 in [0, 1) and eps > 0");
        }
        if self.top_n == 0 || self.eval_k == 0 {
            return bad("top_n and eval_k must be positive");
        }
        if self.patience == Some(0) {
            return bad("patience must be positive");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_sim: f64,
    pub l_ent: f64,
    pub k: usize,
    pub dev_recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev: f64,
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = Vec::new();
    for rec in log {
        serde_json::to_writer(&mut out, rec)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Tracked forward pass of one sequence.
struct SeqPass {
    tape: Tape,
    bound: Vec<(ParamId, Var)>,
    cls: Var,
    entropy: Option<(Var, usize)>,
}

fn forward_seq(
    encoder: &TaserEncoder,
    ids: &[u32],
    kind: InputKind,
    mut rng: Rng,
) -> Result<SeqPass> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(encoder.params(), true);
    let out = encoder.forward(&mut tape, &mut binder, ids, kind, Mode::Train, &mut rng)?;
    let entropy = if out.routing.is_empty() {
        None
    } else {
        Some(entropy_sum(&mut tape, &out.routing.blocks)?)
    };
    Ok(SeqPass {
        tape,
        bound: binder.into_bound(),
        cls: out.cls,
        entropy,
    })
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut total = vars[0];
    for &v in &vars[1..] {
        total = tape.add(total, v)?;
    }
    Ok(total)
}

struct BatchLoss {
    l_sim: f64,
    l_ent: f64,
}

/// Forward, backward and gradient accumulation for one batch. Leaves the
/// summed gradients in the encoder's parameter buffers.
fn batch_gradients(
    encoder: &mut TaserEncoder,
    batch: &[TrainExample],
    passages: &[Vec<u32>],
    config: &TrainConfig,
    counter: &mut u64,
) -> Result<BatchLoss> {
    let negatives = in_batch_negatives(batch, config.max_negatives);
    let mut unique: Vec<usize> = batch
        .iter()
        .map(|e| e.positive)
        .chain(negatives.iter().flatten().copied())
        .collect();
    unique.sort_unstable();
    unique.dedup();
    let slot = |p: usize| batch.len() + unique.binary_search(&p).expect("passage collected above");

    let mut jobs: Vec<(&[u32], InputKind, Rng)> = Vec::with_capacity(batch.len() + unique.len());
    for ex in batch {
        jobs.push((
            &ex.question,
            InputKind::Question,
            Rng::new(config.seed, *counter),
        ));
        *counter += 1;
    }
    for &p in &unique {
        let ids = passages.get(p).ok_or_else(|| {
            Error::Input(format!(
                "passage {p} outside a corpus of {}",
                passages.len()
            ))
        })?;
        jobs.push((ids, InputKind::Passage, Rng::new(config.seed, *counter)));
        *counter += 1;
    }

    let enc: &TaserEncoder = encoder;
    let mut passes: Vec<SeqPass> = jobs
        .into_par_iter()
        .map(|(ids, kind, rng)| forward_seq(enc, ids, kind, rng))
        .collect::<Result<_>>()?;

    let mut head = Tape::new();
    let cls: Vec<Var> = passes
        .iter()
        .map(|s| head.leaf(s.tape.value(s.cls).clone()))
        .collect();
    let ent: Vec<Option<Var>> = passes
        .iter()
        .map(|s| s.entropy.map(|(v, _)| head.leaf(s.tape.value(v).clone())))
        .collect();
    let units: usize = passes
        .iter()
        .filter_map(|s| s.entropy.map(|(_, u)| u))
        .sum();

    let mut losses = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let negs: Vec<Var> = negatives[i].iter().map(|&p| cls[slot(p)]).collect();
        losses.push(contrastive_loss(
            &mut head,
            cls[i],
            cls[slot(ex.positive)],
            &negs,
        )?);
    }
    let total = sum_vars(&mut head, &losses)?;
    let l_sim = head.scale(total, 1.0 / batch.len() as f64);

    let ent_leaves: Vec<Var> = ent.iter().flatten().copied().collect();
    let l_ent = if ent_leaves.is_empty() || units == 0 {
        None
    } else {
        let total = sum_vars(&mut head, &ent_leaves)?;
        Some(head.scale(total, 1.0 / units as f64))
    };
    let joint = joint_loss(&mut head, l_sim, l_ent, config.beta)?;
    let loss = BatchLoss {
        l_sim: head.value(l_sim).item(),
        l_ent: l_ent.map_or(0.0, |v| head.value(v).item()),
    };
    if !head.value(joint).item().is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            batch: 0,
            loss: head.value(joint).item(),
        });
    }
    head.backward(joint)?;

    let seeds: Vec<Vec<(Var, Tensor)>> = passes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut seeds = Vec::with_capacity(2);
            if let Some(g) = head.grad(cls[i]) {
                seeds.push((s.cls, g.clone()));
            }
            if let (Some((v, _)), Some(leaf)) = (s.entropy, ent[i]) {
                if let Some(g) = head.grad(leaf) {
                    seeds.push((v, g.clone()));
                }
            }
            seeds
        })
        .collect();
    passes
        .par_iter_mut()
        .zip(seeds.par_iter())
        .try_for_each(|(s, seeds)| s.tape.backward_with(seeds))?;

    for s in &passes {
        collect_grads(encoder.params_mut(), &s.tape, &s.bound);
    }
    Ok(loss)
}

/// Trains `encoder` in place and restores the parameters with the best
/// `dev` score. `dev` is called once per epoch on the current parameters.
pub fn train(
    encoder: &mut TaserEncoder,
    examples: &[TrainExample],
    passages: &[Vec<u32>],
    config: &TrainConfig,
    dev: &mut dyn FnMut(&TaserEncoder) -> Result<f64>,
) -> Result<TrainReport> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    for ex in examples {
        ex.validate(passages.len())?;
    }

    let mut order_rng = Rng::new(config.seed, 0);
    let mut counter = 1u64;
    let mut adam = AdamState::new(encoder.params());
    encoder.params_mut().zero_grads();

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, _)> = None;
    let mut stale = 0;

    for epoch in 1..=config.epochs {
        order_rng.shuffle(&mut order);
        let (mut sum_sim, mut sum_ent, mut batches) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let loss =
                batch_gradients(encoder, &batch, passages, config, &mut counter).map_err(|e| {
                    match e {
                        Error::Diverged { loss, .. } => Error::Diverged {
                            epoch,
                            batch: b,
                            loss,
                        },
                        other => other,
                    }
                })?;
            adam_step(
                encoder.params_mut(),
                &mut adam,
                config.learning_rate,
                config.adam,
            )?;
            encoder.params_mut().zero_grads();
            sum_sim += loss.l_sim;
            sum_ent += loss.l_ent;
            batches += 1;
        }
        let dev_recall = dev(encoder)?;
        let rec = EpochLog {
            epoch,
            l_sim: sum_sim / batches as f64,
            l_ent: sum_ent / batches as f64,
            k: config.eval_k,
            dev_recall,
        };
        info!(
            "epoch {epoch}: l_sim {:.5} l_ent {:.5} dev R@{} {:.4}",
            rec.l_sim, rec.l_ent, rec.k, rec.dev_recall
        );
        log.push(rec);

        if best.as_ref().is_none_or(|(_, m, _)| dev_recall > *m) {
            best = Some((epoch, dev_recall, encoder.params().snapshot()));
            stale = 0;
        } else {
            stale += 1;
        }
        // a perfect score can never be displaced by a later epoch
        if dev_recall >= 1.0 || config.patience.is_some_and(|p| stale >= p) {
            break;
        }
    }

    let (best_epoch, best_dev, snapshot) = best.expect("at least one epoch ran");
    if best_epoch != log.len() {
        encoder.params_mut().restore(snapshot);
    }
    if best_dev == 0.0 {
        warn!("dev metric never rose above 0");
    }
    Ok(TrainReport {
        log,
        best_epoch,
        best_dev,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, RoutingKind};

    fn tiny(routing: RoutingKind) -> TaserEncoder {
        let mut c = EncoderConfig::toy(12, routing);
        c.num_blocks = 3;
        c.d_model = 8;
        c.ffn_inner = 16;
        c.num_heads = 2;
        TaserEncoder::new(c, &mut Rng::new(5, 0)).unwrap()
    }

    fn passages() -> Vec<Vec<u32>> {
        vec![
            vec![2, 4, 5, 3],
            vec![2, 6, 7, 3],
            vec![2, 8, 9, 3],
            vec![2, 10, 11, 3],
        ]
    }

    #[test]
    fn single_example_logs_zero_loss() {
        let mut enc = tiny(RoutingKind::Det);
        let ex = vec![TrainExample::new("q", vec![2, 4, 3], 0, vec![])];
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let rep = train(&mut enc, &ex, &passages(), &cfg, &mut |_| Ok(0.5)).unwrap();
        assert_eq!(rep.log.len(), 1);
        assert_eq!(rep.log[0].l_sim, 0.0);
        assert_eq!(rep.log[0].l_ent, 0.0);
    }

    #[test]
    fn empty_training_set() {
        let mut enc = tiny(RoutingKind::Det);
        let r = train(
            &mut enc,
            &[],
            &passages(),
            &TrainConfig::default(),
            &mut |_| Ok(0.0),
        );
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn reproducible_and_restores_best() {
        let ex: Vec<TrainExample> = (0..4)
            .map(|i| {
                TrainExample::new(
                    format!("q{i}"),
                    vec![2, 4 + 2 * i as u32, 3],
                    i,
                    vec![(i + 1) % 4],
                )
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 2,
            seed: 11,
            patience: None,
            ..Default::default()
        };
        let run = |routing| {
            let mut enc = tiny(routing);
            let mut scores = [0.1, 0.9, 0.2, 0.3].into_iter();
            let mut at_best = None;
            let rep = train(&mut enc, &ex, &passages(), &cfg, &mut |e| {
                let s = scores.next().unwrap();
                if s == 0.9 {
                    at_best = Some(e.params().snapshot());
                }
                Ok(s)
            })
            .unwrap();
            (enc, rep, at_best.unwrap())
        };
        for routing in [RoutingKind::Det, RoutingKind::Seq] {
            let (a, ra, best) = run(routing);
            let (b, rb, _) = run(routing);
            assert_eq!(ra, rb);
            assert_eq!(a.params().snapshot(), b.params().snapshot());
            assert_eq!(ra.best_epoch, 2);
            assert_eq!(a.params().snapshot(), best);
            assert!(ra.log.iter().all(|l| l.l_sim > 0.0));
            if routing == RoutingKind::Seq {
                assert!(ra.log.iter().all(|l| l.l_ent > 0.0));
            }
        }
    }
}
