use std::sync::Arc;

use super::*;
use crate::data::{Episode, Position, RoadMask, TrackPoint, Trajectory, PAST_LEN};
use crate::diffnet::{grad_check, GradCheckConfig, Mode, ParamId};
use crate::error::Error;
use crate::model::{DatasetStats, Model, ModelConfig, PreparedEpisode, LOG_2PI};

fn micro(agents: usize, horizon: usize, seed: u64) -> (Model, Episode) {
    let ep = micro_episode(seed, agents, horizon).unwrap();
    let stats = DatasetStats::from_episodes(std::slice::from_ref(&ep)).unwrap();
    (Model::new(ModelConfig::micro(horizon), stats, seed).unwrap(), ep)
}

fn eval_opts() -> LossOptions {
    LossOptions {
        beta: 0.0,
        n_samples: 0,
        mode: Mode::Eval,
        always_reverse: false,
    }
}

/// Gradient check over every trainable value of a micro model. `analytic`
/// returns the loss gradient; `value` recomputes the loss.
fn check_gradient(
    seed: u64,
    analytic: impl Fn(&mut Model, &PreparedEpisode),
    value: impl Fn(&Model, &PreparedEpisode) -> crate::error::Result<f64>,
) {
    let (mut model, ep) = micro(2, 2, seed);
    let p = model.prepare(&ep).unwrap();
    let ids: Vec<ParamId> = model.params.trainable_ids().collect();
    let x = model.params.flat_values(&ids);
    let mut probe = model.clone();
    model.params.zero_grad();
    analytic(&mut model, &p);
    let grads = model.params.flat_grads(&ids);
    let report = grad_check(
        |v| {
            probe.params.set_flat_values(&ids, v);
            value(&probe, &p)
        },
        &x,
        &grads,
        &GradCheckConfig::new(1e-6, 1e-3),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn symmetric_loss_gradient_matches_finite_differences() {
    let opts = LossOptions::train(0.5);
    check_gradient(
        3,
        |m, p| {
            let e = evaluate_loss(m, p, &opts, 3, true).unwrap();
            let ids: Vec<ParamId> = m.params.trainable_ids().collect();
            let flat = e.flat_grads(&m.params, &ids);
            let mut off = 0;
            for id in ids {
                let n = m.params.grad(id).len();
                m.params.grad_mut(id).copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        },
        |m, p| Ok(evaluate_loss(m, p, &opts, 3, false)?.terms.total),
    );
}

#[test]
fn forward_gradient_matches_finite_differences() {
    check_gradient(
        4,
        |m, p| {
            forward_ce(m, p).unwrap();
        },
        |m, p| Ok(evaluate_loss(m, p, &eval_opts(), 0, false)?.terms.forward_ce),
    );
}

#[test]
fn reverse_gradient_matches_finite_differences() {
    let opts = LossOptions {
        beta: 0.0,
        n_samples: 2,
        mode: Mode::Eval,
        always_reverse: true,
    };
    check_gradient(
        5,
        |m, p| {
            reverse_ce(m, p, 2, 5).unwrap();
        },
        |m, p| Ok(evaluate_loss(m, p, &opts, 5, false)?.terms.reverse_ce),
    );
}

#[test]
fn zero_beta_total_is_forward() {
    let (model, ep) = micro(2, 3, 1);
    let p = model.prepare(&ep).unwrap();
    let t = evaluate_loss(&model, &p, &LossOptions::train(0.0), 9, false).unwrap().terms;
    assert_eq!(t.total, t.forward_ce);
    assert!(t.reverse_ce.is_finite());
}

#[test]
fn unit_beta_total_is_sum() {
    let (model, ep) = micro(2, 3, 1);
    let p = model.prepare(&ep).unwrap();
    let t = evaluate_loss(&model, &p, &LossOptions::train(1.0), 9, false).unwrap().terms;
    assert_eq!(t.total, t.forward_ce + t.reverse_ce);
}

#[test]
fn negative_beta_is_rejected() {
    let (model, ep) = micro(1, 2, 1);
    let p = model.prepare(&ep).unwrap();
    assert!(matches!(
        evaluate_loss(&model, &p, &LossOptions::train(-0.1), 0, false),
        Err(Error::Precondition(_))
    ));
}

/// Agents moving with constant acceleration `accel` per step, so that each
/// ground-truth step differs from the velocity extrapolation by `accel`.
fn accelerating_episode(accel: Position, mask: RoadMask) -> Episode {
    let agents = (0..2)
        .map(|id| {
            let mut pos = vec![Position::new(-3.0, id as f64), Position::new(-2.0, id as f64)];
            for t in 2..PAST_LEN + 3 {
                let (p1, p2) = (pos[t - 1], pos[t - 2]);
                let step = if t >= PAST_LEN { accel } else { Position::ORIGIN };
                pos.push(p1 + (p1 - p2) + step);
            }
            Trajectory {
                agent_id: id,
                points: pos
                    .into_iter()
                    .enumerate()
                    .map(|(t, p)| TrackPoint {
                        t: t as i64,
                        pos: p,
                        observed: true,
                    })
                    .collect(),
            }
        })
        .collect();
    Episode {
        id: "accel".into(),
        agents,
        present_index: PAST_LEN as i64 - 1,
        past_len: PAST_LEN,
        pred_len: 3,
        road_mask: Arc::new(mask),
        ego_agent_id: 0,
        mask_file: None,
        origin: Position::ORIGIN,
    }
}

fn cv_model(ep: &Episode, mu_hat: [f64; 2]) -> Model {
    let stats = DatasetStats::from_episodes(std::slice::from_ref(ep)).unwrap();
    let mut cfg = ModelConfig::micro(3);
    cfg.alpha = 1.0;
    let mut m = Model::new(cfg, stats, 2).unwrap();
    let w = m.params.id("dec.head3.w").unwrap();
    m.params.value_mut(w).data.fill(0.0);
    let b = m.params.id("dec.head3.b").unwrap();
    let bias = &mut m.params.value_mut(b).data;
    bias.fill(0.0);
    bias[..2].copy_from_slice(&mu_hat);
    m
}

fn small_mask() -> RoadMask {
    RoadMask::from_fn(8, 8, 2.0, Position::ORIGIN, |r, _| (2..6).contains(&r)).unwrap()
}

#[test]
fn perfect_fit_scores_log_two_pi() {
    let ep = accelerating_episode(Position::ORIGIN, small_mask());
    let mut m = cv_model(&ep, [0.0, 0.0]);
    let p = m.prepare(&ep).unwrap();
    let v = forward_ce(&mut m, &p).unwrap();
    assert!((v - LOG_2PI).abs() < 1e-12, "{v}");
}

#[test]
fn forward_ce_falls_as_the_offset_approaches_truth() {
    let d = Position::new(0.4, -0.3);
    let ep = accelerating_episode(d, small_mask());
    let values: Vec<f64> = [0.0, 0.5, 1.0]
        .iter()
        .map(|&l| {
            let m = cv_model(&ep, [l * d.x, l * d.y]);
            let p = m.prepare(&ep).unwrap();
            evaluate_loss(&m, &p, &eval_opts(), 0, false).unwrap().terms.forward_ce
        })
        .collect();
    assert!(values[0] > values[1] && values[1] > values[2], "{values:?}");
    assert!((values[2] - LOG_2PI).abs() < 1e-12);
}

#[test]
fn uniform_prior_gives_log_grid_size() {
    let mask = RoadMask::from_fn(224, 224, 0.5, Position::ORIGIN, |_, _| true).unwrap();
    let ep = accelerating_episode(Position::new(0.1, 0.0), mask);
    let mut m = cv_model(&ep, [0.0, 0.0]);
    let p = m.prepare(&ep).unwrap();
    let v = reverse_ce(&mut m, &p, 2, 4).unwrap();
    assert!((v - (224.0f64 * 224.0).ln()).abs() < 1e-9, "{v}");
}

#[test]
fn forward_ce_ignores_agent_order() {
    let (model, ep) = micro(3, 3, 8);
    let mut shuffled = ep.clone();
    shuffled.agents.rotate_left(1);
    let a = evaluate_loss(&model, &model.prepare(&ep).unwrap(), &eval_opts(), 0, false).unwrap();
    let b = evaluate_loss(&model, &model.prepare(&shuffled).unwrap(), &eval_opts(), 0, false).unwrap();
    assert!((a.terms.forward_ce - b.terms.forward_ce).abs() < 1e-10);
}

#[test]
fn loss_calls_accumulate_gradients() {
    let (mut model, ep) = micro(2, 2, 6);
    let p = model.prepare(&ep).unwrap();
    let id = model.params.id("dec.head3.b").unwrap();
    forward_ce(&mut model, &p).unwrap();
    let once = model.params.grad(id).to_vec();
    assert!(once.iter().any(|g| *g != 0.0));
    forward_ce(&mut model, &p).unwrap();
    for (a, b) in model.params.grad(id).iter().zip(&once) {
        assert!((a - 2.0 * b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        k: 3,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn one_epoch_takes_one_step_per_episode() {
    let train_eps = synth_fork(10, 1).unwrap();
    let val = synth_fork(2, 2).unwrap();
    let out = train(&train_eps, &val, &small_config(1)).unwrap();
    assert_eq!(out.steps, 10);
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.log[0].steps, 10);
    assert_eq!(out.log[0].lr, 1e-4);
}

#[test]
fn training_is_deterministic() {
    let train_eps = synth_fork(6, 3).unwrap();
    let val = synth_fork(2, 4).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let bytes: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| {
            let cfg = TrainConfig {
                epochs: 2,
                out_dir: Some(d.path().to_path_buf()),
                ..small_config(5)
            };
            let out = train(&train_eps, &val, &cfg).unwrap();
            assert_eq!(out.steps, 12);
            std::fs::read(d.path().join(LAST_CHECKPOINT)).unwrap()
        })
        .collect();
    assert_eq!(bytes[0], bytes[1]);
    let log = std::fs::read_to_string(dirs[0].path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with(EpochLog::CSV_HEADER));
}

#[test]
fn divergence_aborts_and_keeps_the_checkpoint() {
    let train_eps = synth_fork(4, 6).unwrap();
    let val = synth_fork(2, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        out_dir: Some(dir.path().to_path_buf()),
        ..small_config(2)
    };
    let good = train(&train_eps, &val, &cfg).unwrap();
    let best = std::fs::read(dir.path().join(BEST_CHECKPOINT)).unwrap();
    let last = std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap();
    let wild = TrainConfig { lr: 1e300, ..cfg };
    let err = train_model(good.model, &train_eps, &val, &wild).unwrap_err();
    assert!(err.is_numerical(), "{err}");
    assert_eq!(std::fs::read(dir.path().join(BEST_CHECKPOINT)).unwrap(), best);
    assert_eq!(std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap(), last);
    assert!(Model::load(&dir.path().join(BEST_CHECKPOINT)).is_ok());
}

#[test]
fn config_keys_are_checked() {
    let mut cfg = TrainConfig::default();
    cfg.apply("beta", "0.25").unwrap();
    cfg.apply(" epochs ", " 7").unwrap();
    cfg.apply("out", "runs/a").unwrap();
    assert_eq!(cfg.beta, 0.25);
    assert_eq!(cfg.epochs, 7);
    assert_eq!(cfg.out_dir.as_deref(), Some(std::path::Path::new("runs/a")));
    assert!(matches!(cfg.apply("betta", "1"), Err(Error::Config(_))));
    assert!(matches!(cfg.apply("k", "many"), Err(Error::Config(_))));
    assert!(cfg.apply("preset", "huge").is_err());
    cfg.beta = -1.0;
    assert!(cfg.validate().is_err());
    for key in TrainConfig::KEYS {
        let value = match key {
            "preset" => "desk",
            "train" | "val" | "out" => "x",
            _ => "1",
        };
        TrainConfig::default().apply(key, value).unwrap();
    }
}
