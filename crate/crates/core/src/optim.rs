//! Adam and the epoch loop over pre-sampled triplets.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{assemble_batch, batch_order, derive_seed, Corpus, SamplingMode, Triplet, TripletBatch};
use crate::encoder::{forward_batch, EncoderParams, ParamVars};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Matrix};
use crate::objectives::{patn_loss, triplet_only_loss, LossConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::config("optimizer.learning_rate", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer.beta1", "betas must be in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("optimizer.epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// Moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub hyper: AdamConfig,
}

impl AdamState {
    pub fn new(params: &[&Matrix], hyper: AdamConfig) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        AdamState {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            hyper,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[Matrix], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::invalid(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    state.step += 1;
    let AdamConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        epsilon: eps,
    } = state.hyper;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[k].data_mut();
        let v = state.second_moment[k].data_mut();
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(k));
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Number of triplets sampled once before training.
    pub num_triplets: usize,
    pub sampling: SamplingMode,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 40,
            batch_size: 128,
            num_triplets: 100_000,
            sampling: SamplingMode::Token,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("schedule.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("schedule.batch_size", "must be at least 1"));
        }
        if self.num_triplets == 0 {
            return Err(Error::config("schedule.num_triplets", "must be at least 1"));
        }
        Ok(())
    }
}

/// Everything `train` needs besides data and initial weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub schedule: TrainSchedule,
    pub shuffle_seed: u64,
    pub clip_norm: Option<f64>,
    /// Builds the plain triplet graph with no cross-entropy branch.
    pub detach_ce: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub total: f64,
    pub triplet_term: f64,
    pub ce_term: f64,
    pub active_fraction: f64,
}

/// Loss averages over one epoch, weighted by triplets per batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub triplet_term: f64,
    pub ce_term: f64,
    pub active_fraction: f64,
}

/// Loss and gradients of one batch, without updating anything.
pub fn batch_gradients(
    params: &EncoderParams,
    batch: &TripletBatch,
    loss: &LossConfig,
    detach_ce: bool,
) -> Result<(StepStats, Vec<Matrix>)> {
    let mut g = Graph::new();
    let vars = ParamVars::register(&mut g, params);
    let fwd = forward_batch(&mut g, &vars, &batch.sequences)?;
    let l = if detach_ce {
        triplet_only_loss(&mut g, &fwd, batch, loss.margin)?
    } else {
        patn_loss(&mut g, &vars, &fwd, batch, loss)?
    };
    let stats = StepStats {
        total: g.value(l.total).scalar(),
        triplet_term: l.triplet_term,
        ce_term: l.ce_term,
        active_fraction: l.active_fraction,
    };
    if !stats.total.is_finite() {
        return Ok((stats, Vec::new()));
    }
    g.backward(l.total)?;
    Ok((stats, vars.take_gradients(&mut g)))
}

/// Forward, backward, and one Adam update on `batch`.
pub fn train_step(
    params: &mut EncoderParams,
    state: &mut AdamState,
    batch: &TripletBatch,
    opts: &TrainOptions,
) -> Result<StepStats> {
    let (stats, mut grads) = batch_gradients(params, batch, &opts.loss, opts.detach_ce)?;
    if !stats.total.is_finite() {
        return Ok(stats);
    }
    if let Some(max) = opts.clip_norm {
        clip_global_norm(&mut grads, max);
    }
    adam_step(&mut params.tensors_mut(), &grads, state)?;
    Ok(stats)
}

/// Trains for `opts.schedule.epochs` passes over `triplets`.
///
/// Each epoch reshuffles with a seed derived from `opts.shuffle_seed` and the
/// epoch number, trains every batch including a short final one, and calls
/// `on_epoch` with the epoch's loss averages.
pub fn train(
    corpus: &Corpus,
    triplets: &[Triplet],
    mut params: EncoderParams,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog, &EncoderParams),
) -> Result<(EncoderParams, Vec<EpochLog>)> {
    if triplets.is_empty() {
        return Err(Error::invalid("cannot train on zero triplets"));
    }
    opts.loss.validate()?;
    opts.adam.validate()?;
    opts.schedule.validate()?;
    let mut state = AdamState::new(&params.tensors(), opts.adam.clone());
    let mut logs = Vec::with_capacity(opts.schedule.epochs);
    for epoch in 1..=opts.schedule.epochs {
        let order = batch_order(
            triplets.len(),
            opts.schedule.batch_size,
            derive_seed(opts.shuffle_seed, &[epoch as u64]),
        )?;
        let mut acc = [0.0f64; 4];
        let mut weight = 0.0;
        for (b, chunk) in order.iter().enumerate() {
            let ts: Vec<Triplet> = chunk.iter().map(|&i| triplets[i]).collect();
            let batch = assemble_batch(corpus, &ts)?;
            let s = train_step(&mut params, &mut state, &batch, opts)?;
            if !s.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!(
                        "total {}, triplet {}, ce {}",
                        s.total, s.triplet_term, s.ce_term
                    ),
                });
            }
            let w = batch.num_triplets as f64;
            for (a, x) in acc.iter_mut().zip([s.total, s.triplet_term, s.ce_term, s.active_fraction]) {
                *a += w * x;
            }
            weight += w;
        }
        let log = EpochLog {
            epoch,
            total: acc[0] / weight,
            triplet_term: acc[1] / weight,
            ce_term: acc[2] / weight,
            active_fraction: acc[3] / weight,
        };
        log::info!(
            "epoch {epoch}: total {:.5} triplet {:.5} ce {:.5} active {:.3}",
            log.total,
            log.triplet_term,
            log.ce_term,
            log.active_fraction
        );
        on_epoch(&log, &params);
        logs.push(log);
    }
    Ok((params, logs))
}

pub fn write_loss_csv<W: Write>(logs: &[EpochLog], mut w: W) -> Result<()> {
    writeln!(w, "epoch,total,triplet_term,ce_term,active_fraction")?;
    for l in logs {
        writeln!(
            w,
            "{},{},{},{},{}",
            l.epoch, l.total, l.triplet_term, l.ce_term, l.active_fraction
        )?;
    }
    Ok(())
}

pub fn save_loss_csv(logs: &[EpochLog], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_loss_csv(logs, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(lr: f64) -> (Matrix, AdamState) {
        let p = Matrix::filled(1, 1, 1.0);
        let hyper = AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        };
        let s = AdamState::new(&[&p], hyper);
        (p, s)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut p, mut s) = scalar_state(0.0005);
        adam_step(&mut [&mut p], &[Matrix::zeros(1, 1)], &mut s).unwrap();
        assert_eq!(p.scalar(), 1.0);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_about_lr() {
        let (mut p, mut s) = scalar_state(0.0005);
        adam_step(&mut [&mut p], &[Matrix::filled(1, 1, 0.1)], &mut s).unwrap();
        // m_hat = 0.1, v_hat = 0.01.
        let expected = 0.0005 * 0.1 / (0.1 + 1e-8);
        assert!(((1.0 - p.scalar()) - expected).abs() < 1e-15);
        assert!(((1.0 - p.scalar()) - 0.0005).abs() < 1e-9);
    }

    #[test]
    fn two_steps_match_unrolled_recurrence() {
        let (mut p, mut s) = scalar_state(0.0005);
        let g = 0.1;
        for _ in 0..2 {
            adam_step(&mut [&mut p], &[Matrix::filled(1, 1, g)], &mut s).unwrap();
        }
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 0.0005, 1e-8);
        let m1 = (1.0 - b1) * g;
        let v1 = (1.0 - b2) * g * g;
        let p1 = 1.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g;
        let v2 = b2 * v1 + (1.0 - b2) * g * g;
        let p2 = p1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((p.scalar() - p2).abs() < 1e-12);
    }

    #[test]
    fn update_magnitude_never_grows_for_constant_gradient() {
        let (mut p, mut s) = scalar_state(0.0005);
        let mut prev_delta = f64::INFINITY;
        for _ in 0..200 {
            let before = p.scalar();
            adam_step(&mut [&mut p], &[Matrix::filled(1, 1, -0.3)], &mut s).unwrap();
            let delta = (p.scalar() - before).abs();
            assert!(delta <= prev_delta + 1e-18, "{delta} > {prev_delta}");
            prev_delta = delta;
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut p, mut s) = scalar_state(0.1);
        assert!(adam_step(&mut [&mut p], &[Matrix::zeros(1, 2)], &mut s).is_err());
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![Matrix::filled(1, 2, 3.0), Matrix::filled(1, 2, 4.0)];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 50f64.sqrt()).abs() < 1e-12);
        let after: f64 = g.iter().map(|m| m.frobenius_norm().powi(2)).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_bounds() {
        assert!(TrainSchedule { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainSchedule { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    use crate::corpus::tests::small_cfg;
    use crate::corpus::{build_corpus, sample_triplets, Split};
    use crate::encoder::{init_params, EncoderConfig};

    fn setup(count: usize) -> (Corpus, Vec<Triplet>, EncoderParams) {
        let (_, _, corpus) = build_corpus(&small_cfg(), 11).unwrap();
        let ts = sample_triplets(&corpus, Split::Train, count, 5, SamplingMode::Token).unwrap();
        let cfg = EncoderConfig {
            num_layers: 2,
            hidden: 4,
            input_dim: 40,
            num_classes: corpus.num_classes,
            tap_layer: 1,
        };
        (corpus, ts, init_params(cfg, 3).unwrap())
    }

    fn opts(lambda: f64, lr: f64, epochs: usize, batch_size: usize) -> TrainOptions {
        TrainOptions {
            loss: LossConfig {
                lambda,
                ..LossConfig::default()
            },
            adam: AdamConfig {
                learning_rate: lr,
                ..AdamConfig::default()
            },
            schedule: TrainSchedule {
                epochs,
                batch_size,
                num_triplets: 1,
                sampling: SamplingMode::Token,
            },
            shuffle_seed: 9,
            clip_norm: None,
            detach_ce: false,
        }
    }

    #[test]
    fn zero_lr_epoch_leaves_params() {
        let (corpus, ts, params) = setup(4);
        let (after, logs) = train(&corpus, &ts, params.clone(), &opts(0.0, 0.0, 1, 4), |_, _| {}).unwrap();
        assert_eq!(after, params);
        assert_eq!(logs.len(), 1);
    }

    #[test]
    fn same_seeds_same_run() {
        let (corpus, ts, params) = setup(10);
        let o = opts(0.1, 0.01, 2, 4);
        let a = train(&corpus, &ts, params.clone(), &o, |_, _| {}).unwrap();
        let b = train(&corpus, &ts, params.clone(), &o, |_, _| {}).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, params);
    }

    #[test]
    fn epoch_log_is_the_convex_combination() {
        let (corpus, ts, params) = setup(10);
        let o = opts(0.3, 0.01, 2, 4);
        let (_, logs) = train(&corpus, &ts, params, &o, |_, _| {}).unwrap();
        for l in logs {
            assert!((l.total - (0.7 * l.triplet_term + 0.3 * l.ce_term)).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&l.active_fraction));
        }
    }

    #[test]
    fn nan_input_aborts_at_its_batch() {
        let (mut corpus, ts, params) = setup(12);
        let bad = ts[7].different;
        corpus.segments[bad].frames.data_mut()[3] = f64::NAN;
        let order = batch_order(ts.len(), 4, derive_seed(9, &[1])).unwrap();
        let expected = order
            .iter()
            .position(|chunk| chunk.iter().any(|&i| [ts[i].anchor, ts[i].same, ts[i].different].contains(&bad)))
            .unwrap();
        let err = train(&corpus, &ts, params, &opts(0.1, 0.01, 1, 4), |_, _| {}).unwrap_err();
        match err {
            Error::NonFiniteLoss { epoch, batch, .. } => {
                assert_eq!(epoch, 1);
                assert_eq!(batch, expected);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn zero_lambda_equals_plain_triplet_training() {
        let (corpus, ts, params) = setup(6);
        let attached = opts(0.0, 0.01, 2, 3);
        let detached = TrainOptions {
            detach_ce: true,
            ..attached.clone()
        };
        let (a, _) = train(&corpus, &ts, params.clone(), &attached, |_, _| {}).unwrap();
        let (b, _) = train(&corpus, &ts, params.clone(), &detached, |_, _| {}).unwrap();
        // Every encoder tensor is bit-identical; only the unused head differs.
        let n = a.tensors().len();
        for (x, y) in a.tensors()[..n - 2].iter().zip(&b.tensors()[..n - 2]) {
            assert_eq!(x, y);
        }
        assert_eq!(b.head, params.head);
    }

    #[test]
    fn empty_triplets_rejected() {
        let (corpus, _, params) = setup(1);
        assert!(train(&corpus, &[], params, &opts(0.1, 0.01, 1, 4), |_, _| {}).is_err());
    }

    #[test]
    fn loss_csv_header() {
        let log = EpochLog {
            epoch: 1,
            total: 0.5,
            triplet_term: 0.25,
            ce_term: 2.5,
            active_fraction: 1.0,
        };
        let mut buf = Vec::new();
        write_loss_csv(&[log], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,total,triplet_term,ce_term,active_fraction\n1,0.5,0.25,2.5,1\n"
        );
    }
}
