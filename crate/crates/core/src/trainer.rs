//! Episodic training: loss, gradients, optimizers, and the epoch loop.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::crf::{nll_gradient, TransitionTable, N_TRANSITIONS};
use crate::data::Episode;
use crate::encoder::EncodedSentence;
use crate::metrics::Scores;
use crate::model::{EpisodeContext, ModelError, ModelState, OptimizerKind};
use crate::similarity::sim_grad;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Gradient of the summed query loss of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<f64>,
    pub transitions: TransitionTable,
}

#[derive(Debug, Clone)]
pub struct EpisodeLoss {
    pub loss: f64,
    /// Queries that contributed; the rest carried labels absent from support.
    pub n_queries: usize,
    pub grads: Gradients,
}

/// Summed negative log-likelihood of the query set under prototypes built
/// from the support set, with its exact gradient. Gradients flow through
/// the query encodings and, via the prototypes, through the support
/// encodings.
pub fn episode_loss(model: &ModelState, episode: &Episode) -> Result<EpisodeLoss, ModelError> {
    let enc = model.encoder()?;
    let kind = model.config.similarity;
    let ctx = EpisodeContext::new(episode, enc)?;
    let dim = enc.dim();
    let protos = &ctx.prototypes;

    let mut loss = 0.0;
    let mut n_queries = 0;
    let mut enc_grad = vec![0.0; enc.params().len()];
    let mut tt_grad = [0.0; N_TRANSITIONS];
    let mut d_intent_protos = vec![vec![0.0; dim]; protos.intent_protos.len()];
    let mut d_slot_protos = vec![vec![0.0; dim]; protos.slot_protos.len()];

    for q in &episode.query {
        let Some(gold_intent) = ctx.vocab.intent_index(&q.intent) else {
            continue;
        };
        let Some(gold_tags) = q
            .slots
            .iter()
            .map(|t| ctx.vocab.tag_index(t))
            .collect::<Option<Vec<_>>>()
        else {
            continue;
        };
        let encoded = enc.encode(q)?;
        let em = ctx.emissions(kind, &encoded)?;
        let g = nll_gradient(
            &em,
            &model.transitions,
            &ctx.categories,
            gold_intent,
            &gold_tags,
        );
        loss += g.nll;
        n_queries += 1;
        for (acc, v) in tt_grad.iter_mut().zip(g.transitions.to_flat()) {
            *acc += v;
        }

        let mut upstream = EncodedSentence::zeros(dim, q.len());
        for (z, &gz) in g.intent_scores.iter().enumerate() {
            if gz == 0.0 {
                continue;
            }
            let (gx, gc) = sim_grad(kind, &encoded.sentence_vec, &protos.intent_protos[z])?;
            axpy(&mut upstream.sentence_vec, gz, &gx);
            axpy(&mut d_intent_protos[z], gz, &gc);
        }
        let n_tags = protos.slot_protos.len();
        for (i, x) in encoded.token_vecs.iter().enumerate() {
            for (y, c) in protos.slot_protos.iter().enumerate() {
                let gy = g.slot_scores[i * n_tags + y];
                if gy == 0.0 {
                    continue;
                }
                let (gx, gc) = sim_grad(kind, x, c)?;
                axpy(&mut upstream.token_vecs[i], gy, &gx);
                axpy(&mut d_slot_protos[y], gy, &gc);
            }
        }
        enc.backward(q, &upstream, &mut enc_grad)?;
    }
    let skipped = episode.query.len() - n_queries;
    if skipped > 0 {
        warn!(
            "episode {}: skipped {skipped} query sample(s) with labels absent from support",
            episode.domain
        );
    }

    // Each prototype is a mean, so its gradient spreads evenly over members.
    if !enc.params().is_empty() {
        for (s, e) in episode.support.iter().zip(&ctx.support_encoded) {
            let mut upstream = EncodedSentence::zeros(dim, s.len());
            if let Some(z) = ctx.vocab.intent_index(&s.intent) {
                let k = 1.0 / protos.intent_counts[z] as f64;
                axpy(&mut upstream.sentence_vec, k, &d_intent_protos[z]);
            }
            for (i, tag) in s.slots.iter().enumerate() {
                if let Some(y) = ctx.vocab.tag_index(tag) {
                    let k = 1.0 / protos.slot_counts[y] as f64;
                    axpy(&mut upstream.token_vecs[i], k, &d_slot_protos[y]);
                }
            }
            debug_assert_eq!(e.len(), s.len());
            enc.backward(s, &upstream, &mut enc_grad)?;
        }
    }

    Ok(EpisodeLoss {
        loss,
        n_queries,
        grads: Gradients {
            encoder: enc_grad,
            transitions: TransitionTable::from_flat(&tt_grad),
        },
    })
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (r, v) in acc.iter_mut().zip(x) {
        *r += a * v;
    }
}

/// One optimizer update. Encoder parameters use `lr_encoder`, transitions
/// use `lr_crf`; transitions frozen by the ablation are left untouched.
pub fn apply_step(model: &mut ModelState, grads: &Gradients) {
    let cfg = model.config.clone();
    let n_enc = model.encoder_params().len();
    assert_eq!(grads.encoder.len(), n_enc, "encoder gradient size");
    let mask = cfg.ablation.trainable_transitions();

    let n = n_enc + N_TRANSITIONS;
    let opt = &mut model.optimizer;
    if opt.m.len() != n {
        opt.m = vec![0.0; n];
        opt.v = vec![0.0; n];
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);

    let mut update = |k: usize, g: f64, lr: f64| -> f64 {
        match cfg.optimizer {
            OptimizerKind::Sgd => lr * g,
            OptimizerKind::Adam => {
                let m = &mut opt.m[k];
                let v = &mut opt.v[k];
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS)
            }
        }
    };

    let mut deltas = Vec::with_capacity(n);
    for (k, &g) in grads.encoder.iter().enumerate() {
        deltas.push(update(k, g, cfg.lr_encoder));
    }
    let tg = grads.transitions.to_flat();
    for k in 0..N_TRANSITIONS {
        deltas.push(if mask[k] {
            update(n_enc + k, tg[k], cfg.lr_crf)
        } else {
            0.0
        });
    }

    for (p, d) in model.encoder_params_mut().iter_mut().zip(&deltas) {
        *p -= d;
    }
    let mut flat = model.transitions.to_flat();
    for k in 0..N_TRANSITIONS {
        flat[k] -= deltas[n_enc + k];
    }
    model.transitions = TransitionTable::from_flat(&flat);
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_queries: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev: Option<Scores>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-on-dev checkpoint, or the final one without a dev set.
    pub model: ModelState,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Runs `config.epochs` passes over `train`, one update per episode, in an
/// order reshuffled each epoch from `config.seed`. After every epoch the
/// dev set is scored and the model with the best mean of intent accuracy,
/// slot F1 and joint accuracy is kept.
pub fn train(
    mut model: ModelState,
    train: &[Episode],
    dev: &[Episode],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, ModelError> {
    if dev.is_empty() {
        warn!("no dev episodes; keeping the final model");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, ModelState)> = None;
    let mut best_epoch = 0;

    for _ in 0..model.config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut queries = 0;
        for &i in &order {
            let out = episode_loss(&model, &train[i])?;
            total += out.loss;
            queries += out.n_queries;
            if out.n_queries > 0 {
                apply_step(&mut model, &out.grads);
            }
        }
        model.epoch += 1;
        let dev_scores = if dev.is_empty() {
            None
        } else {
            Some(model.evaluate(dev)?.macro_avg)
        };
        let record = EpochRecord {
            epoch: model.epoch,
            train_loss: total / queries.max(1) as f64,
            train_queries: queries,
            dev: dev_scores,
        };
        match &record.dev {
            Some(s) => info!(
                "epoch {}: loss {:.4}, dev intent {:.4} slot {:.4} joint {:.4}",
                record.epoch, record.train_loss, s.intent_acc, s.slot_f1, s.joint_acc
            ),
            None => info!("epoch {}: loss {:.4}", record.epoch, record.train_loss),
        }
        if let Some(s) = &record.dev {
            let score = s.mean();
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, model.clone()));
                best_epoch = model.epoch;
            }
        }
        on_epoch(&record);
        history.push(record);
    }

    let (model, best_epoch) = match best {
        Some((_, m)) => (m, best_epoch),
        None => {
            let e = model.epoch;
            (model, e)
        }
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Ablation, TrainConfig};
    use crate::similarity::SimilarityKind;
    use crate::testutil::{central_diff, sample};

    fn episode() -> Episode {
        Episode {
            domain: "travel".into(),
            support: vec![
                sample("s1", "fly to rome", "O O B-city", "book"),
                sample("s2", "rain in new york", "O O B-city I-city", "weather"),
                sample("s3", "book paris now", "O B-city O", "book"),
            ],
            query: vec![
                sample("q1", "fly to new york", "O O B-city I-city", "book"),
                sample("q2", "rain in rome", "O O B-city", "weather"),
            ],
        }
    }

    fn model(config: TrainConfig) -> ModelState {
        let mut m = ModelState::new(config, &[episode()]).unwrap();
        for (k, v) in m.transitions.ss.iter_mut().enumerate() {
            *v = 0.1 * k as f64 - 0.4;
        }
        for (k, v) in m.transitions.is.iter_mut().enumerate() {
            *v = 0.3 - 0.15 * k as f64;
        }
        m
    }

    fn small(similarity: SimilarityKind) -> TrainConfig {
        TrainConfig {
            similarity,
            dim: 3,
            ..TrainConfig::default()
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for kind in SimilarityKind::ALL {
            let m = model(small(kind));
            let ep = episode();
            let out = episode_loss(&m, &ep).unwrap();
            assert_eq!(out.n_queries, 2);

            let f_tt = |p: &[f64]| {
                let mut m2 = m.clone();
                m2.transitions = TransitionTable::from_flat(p.try_into().unwrap());
                episode_loss(&m2, &ep).unwrap().loss
            };
            let fd = central_diff(f_tt, &m.transitions.to_flat(), 1e-5);
            for (a, n) in out.grads.transitions.to_flat().iter().zip(&fd) {
                assert!(rel_err(*a, *n) < 1e-5, "{kind}: {a} vs {n}");
            }

            let f_enc = |p: &[f64]| {
                let mut m2 = m.clone();
                m2.encoder_params_mut().copy_from_slice(p);
                episode_loss(&m2, &ep).unwrap().loss
            };
            let fd = central_diff(f_enc, m.encoder_params(), 1e-5);
            for (a, n) in out.grads.encoder.iter().zip(&fd) {
                assert!(rel_err(*a, *n) < 1e-4, "{kind}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn loss_ignores_query_order() {
        let m = model(small(SimilarityKind::Vpb));
        let mut ep = episode();
        let a = episode_loss(&m, &ep).unwrap();
        ep.query.reverse();
        let b = episode_loss(&m, &ep).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn memorized_support_gives_small_loss() {
        // Query equal to a 1-shot support sample; fitting the single episode
        // drives the emission margins up and the loss towards 0.
        let ep = Episode {
            domain: "d".into(),
            support: vec![
                sample("s1", "fly rome", "O B-city", "book"),
                sample("s2", "rain", "O", "weather"),
            ],
            query: vec![sample("q1", "fly rome", "O B-city", "book")],
        };
        let cfg = TrainConfig {
            lr_encoder: 0.05,
            lr_crf: 0.05,
            ..small(SimilarityKind::Vpb)
        };
        let mut m = ModelState::new(cfg, std::slice::from_ref(&ep)).unwrap();
        let first = episode_loss(&m, &ep).unwrap().loss;
        for _ in 0..300 {
            let out = episode_loss(&m, &ep).unwrap();
            apply_step(&mut m, &out.grads);
        }
        let last = episode_loss(&m, &ep).unwrap().loss;
        assert!(last < 1e-2 && last < first, "{first} -> {last}");
    }

    #[test]
    fn unseen_query_labels_are_skipped() {
        let m = model(small(SimilarityKind::Vpb));
        let mut ep = episode();
        ep.query[1].intent = "cancel".into();
        ep.query[0].slots[3] = "I-date".parse().unwrap();
        let out = episode_loss(&m, &ep).unwrap();
        assert_eq!(out.n_queries, 0);
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn small_step_does_not_increase_loss() {
        for opt in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut m = model(TrainConfig {
                optimizer: opt,
                lr_encoder: 1e-4,
                lr_crf: 1e-4,
                ..small(SimilarityKind::Vpb)
            });
            let before = episode_loss(&m, &episode()).unwrap();
            apply_step(&mut m, &before.grads);
            let after = episode_loss(&m, &episode()).unwrap();
            assert!(
                after.loss <= before.loss,
                "{opt:?}: {} > {}",
                after.loss,
                before.loss
            );
        }
    }

    #[test]
    fn frozen_transitions_stay_zero() {
        let cfg = TrainConfig {
            ablation: Ablation::NoCrf,
            epochs: 3,
            ..small(SimilarityKind::Vpb)
        };
        let m = ModelState::new(cfg, &[episode()]).unwrap();
        let out = train(m, &[episode(), episode()], &[], |_| {}).unwrap();
        assert_eq!(out.model.transitions, TransitionTable::zeros());

        let cfg = TrainConfig {
            ablation: Ablation::NoIntentSlot,
            epochs: 3,
            ..small(SimilarityKind::Vpb)
        };
        let m = ModelState::new(cfg, &[episode()]).unwrap();
        let out = train(m, &[episode()], &[], |_| {}).unwrap();
        assert_eq!(out.model.transitions.is, [0.0; 5]);
        assert!(out.model.transitions.ss.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let cfg = TrainConfig {
                epochs: 2,
                seed: 9,
                ..small(SimilarityKind::Vp)
            };
            let m = ModelState::new(cfg, &[episode()]).unwrap();
            let mut ep2 = episode();
            ep2.query.swap(0, 1);
            train(m, &[episode(), ep2], &[episode()], |_| {}).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.model.to_json(), b.model.to_json());
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 2);
        assert!(a.history[0].dev.is_some());
    }

    #[test]
    fn best_epoch_without_dev_is_last() {
        let cfg = TrainConfig {
            epochs: 2,
            ..small(SimilarityKind::Vpb)
        };
        let m = ModelState::new(cfg, &[episode()]).unwrap();
        let out = train(m, &[episode()], &[], |_| {}).unwrap();
        assert_eq!(out.best_epoch, 2);
        assert_eq!(out.model.epoch, 2);
        assert!(out.history.iter().all(|r| r.dev.is_none()));
    }
}
