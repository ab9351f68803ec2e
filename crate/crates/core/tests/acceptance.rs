//! Acceptance run: every headline criterion at its pinned tolerance, one
//! pass/fail line each. The criteria run sequentially inside one test so
//! their wall-clock budgets are not skewed by sibling tests.

use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use trajflow::data::{AgentPrediction, Position, PredictionSet, RoadMask};
use trajflow::diffnet::layers::{ConvBnRelu, GruCell, LayerNorm, Linear, LstmCell};
use trajflow::diffnet::{expm2x2, grad_check, GradCheckConfig, Graph, Mode, ParamId, ParamStore, Tensor, Var};
use trajflow::metrics::{self, dac, dao, dao_raw, displacement_errors, rf, DAO_SCALE};
use trajflow::model::{constant_velocity, flow_forward, flow_inverse, DatasetStats, Model, ModelConfig, LOG_2PI};
use trajflow::objective::{
    alpha_sweep, evaluate_loss, format_sweep_table, micro_episode, prepare_all, sample_all, synth_fork,
    synth_fork_with, train, ForkConfig, LossOptions, TrainConfig,
};
use trajflow::preprocess::{em_fit, smooth_impute, smooth_track, RawObservation, RawTrack};
use trajflow::scenemap::{build_p_tilde, distance_transform, NormStats};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(checks: &[(bool, String)]) -> Outcome {
    Outcome {
        passed: checks.iter().all(|(ok, _)| *ok),
        detail: checks
            .iter()
            .map(|(ok, s)| format!("{}{s}", if *ok { "" } else { "FAILED " }))
            .collect::<Vec<_>>()
            .join("; "),
    }
}

fn within(elapsed: Duration, limit: Duration) -> (bool, String) {
    (elapsed <= limit, format!("{:.1}s of {}s", elapsed.as_secs_f64(), limit.as_secs()))
}

// ---------------------------------------------------------------- gradients

/// Largest relative error of the analytic parameter gradient of `loss`
/// against central differences over every trainable value of `store`.
fn param_grad_error(store: &ParamStore, loss: &dyn Fn(&mut Graph) -> Var) -> f64 {
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    let mut s = store.clone();
    s.zero_grad();
    {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.backward(l).accumulate_into(&g, &mut s);
    }
    let analytic = s.flat_grads(&ids);
    let x = store.flat_values(&ids);
    let mut work = store.clone();
    let report = grad_check(
        |v| {
            work.set_flat_values(&ids, v);
            let mut g = Graph::new(&work);
            let l = loss(&mut g);
            Ok(g.scalar(l))
        },
        &x,
        &analytic,
        &GradCheckConfig::new(1e-6, f64::INFINITY),
    )
    .unwrap();
    report.max_rel_error()
}

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts `y` with fixed random weights so every output element matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape.clone();
    let w = g.input(random_input(&mut rng, &shape));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

fn affine_error() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut store = ParamStore::new(seed);
        let lin = Linear::new(&mut store, "lin", 4, 3).unwrap();
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(seed + 50), &[5, 4]);
        worst = worst.max(param_grad_error(&store, &|g| {
            let xv = g.input(x.clone());
            let y = lin.forward(g, xv).unwrap();
            project(g, y, seed)
        }));
    }
    worst
}

fn recurrent_error() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let mut store = ParamStore::new(seed);
        let lstm = LstmCell::new(&mut store, "lstm", 3, 4).unwrap();
        let gru = GruCell::new(&mut store, "gru", 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 60);
        let xs: Vec<Tensor> = (0..5).map(|_| random_input(&mut rng, &[2, 3])).collect();
        worst = worst.max(param_grad_error(&store, &|g| {
            let mut h = g.input(Tensor::zeros(&[2, 4]));
            let mut c = g.input(Tensor::zeros(&[2, 4]));
            let mut hg = g.input(Tensor::zeros(&[2, 4]));
            for x in &xs {
                let xv = g.input(x.clone());
                (h, c) = lstm.forward(g, xv, h, c).unwrap();
                hg = gru.forward(g, xv, hg).unwrap();
            }
            let all = g.concat_cols(&[h, c, hg]).unwrap();
            project(g, all, seed)
        }));
    }
    worst
}

fn attention_error() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let mut store = ParamStore::new(seed);
        let q = store.uniform("q", &[3, 4], 2).unwrap();
        let k = store.uniform("k", &[5, 4], 2).unwrap();
        let v = store.uniform("v", &[5, 3], 2).unwrap();
        let fg = store.uniform("fg", &[9, 4], 2).unwrap();
        let w = store.uniform("w", &[4], 2).unwrap();
        let norm = LayerNorm::new(&mut store, "ln", 3).unwrap();
        worst = worst.max(param_grad_error(&store, &|g| {
            let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
            let o = g.scaled_dot_attention(qv, kv, vv).unwrap();
            let o = norm.forward(g, o).unwrap();
            let (fgv, wv) = (g.param(fg), g.param(w));
            let a = g.additive_attention(qv, fgv, wv).unwrap();
            let a = project(g, a, seed + 1);
            let o = project(g, o, seed);
            g.add(o, a).unwrap()
        }));
    }
    worst
}

fn conv_error() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let mut store = ParamStore::new(seed);
        let c1 = ConvBnRelu::new(&mut store, "c1", 3, 2, 3).unwrap();
        let c2 = ConvBnRelu::new(&mut store, "c2", 3, 3, 2).unwrap();
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(seed + 70), &[6, 6, 2]);
        worst = worst.max(param_grad_error(&store, &|g| {
            let xv = g.input(x.clone());
            let y = c1.forward(g, xv, Mode::Train).unwrap();
            let y = g.max_pool2(y).unwrap();
            let y = c2.forward(g, y, Mode::Train).unwrap();
            let y = g.upsample_bilinear(y, 6, 6).unwrap();
            project(g, y, seed)
        }));
    }
    worst
}

fn end_to_end_error() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..2 {
        let ep = micro_episode(seed, 2, 2).unwrap();
        let stats = DatasetStats::from_episodes(std::slice::from_ref(&ep)).unwrap();
        let model = Model::new(ModelConfig::micro(2), stats, seed).unwrap();
        let p = model.prepare(&ep).unwrap();
        let opts = LossOptions::train(0.5);
        let ids: Vec<ParamId> = model.params.trainable_ids().collect();
        let analytic = evaluate_loss(&model, &p, &opts, seed, true).unwrap().flat_grads(&model.params, &ids);
        let mut probe = model.clone();
        let report = grad_check(
            |v| {
                probe.params.set_flat_values(&ids, v);
                Ok(evaluate_loss(&probe, &p, &opts, seed, false)?.terms.total)
            },
            &model.params.flat_values(&ids),
            &analytic,
            &GradCheckConfig::new(1e-6, f64::INFINITY),
        )
        .unwrap();
        worst = worst.max(report.max_rel_error());
    }
    worst
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut checks = Vec::new();
    for (name, err, tol) in [
        ("affine", affine_error(), 1e-6),
        ("recurrent", recurrent_error(), 1e-4),
        ("attention", attention_error(), 1e-4),
        ("conv", conv_error(), 1e-4),
        ("end-to-end", end_to_end_error(), 1e-3),
    ] {
        checks.push((err < tol, format!("{name} {err:.1e} < {tol:.0e}")));
    }
    checks.push(within(start.elapsed(), Duration::from_secs(120)));
    outcome(&checks)
}

// --------------------------------------------------------------------- flow

/// `expm` by scaling and squaring of a long Taylor series.
fn expm_taylor(m: [f64; 4]) -> [f64; 4] {
    let norm = m.iter().map(|v| v.abs()).sum::<f64>();
    let squarings = if norm > 0.25 { (norm / 0.25).log2().ceil() as i32 } else { 0 };
    let s = 0.5f64.powi(squarings);
    let a = m.map(|v| v * s);
    let mul = |x: [f64; 4], y: [f64; 4]| {
        [
            x[0] * y[0] + x[1] * y[2],
            x[0] * y[1] + x[1] * y[3],
            x[2] * y[0] + x[3] * y[2],
            x[2] * y[1] + x[3] * y[3],
        ]
    };
    let mut term = [1.0, 0.0, 0.0, 1.0];
    let mut sum = term;
    for k in 1..30 {
        term = mul(term, a).map(|v| v / k as f64);
        for i in 0..4 {
            sum[i] += term[i];
        }
    }
    for _ in 0..squarings {
        sum = mul(sum, sum);
    }
    sum
}

fn flow_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    let mut round_trip: f64 = 0.0;
    let mut jacobian: f64 = 0.0;
    let mut logdet: f64 = 0.0;
    for seed in 0..5 {
        let ep = micro_episode(seed, 3, 4).unwrap();
        let stats = DatasetStats::from_episodes(std::slice::from_ref(&ep)).unwrap();
        let model = Model::new(ModelConfig::micro(4), stats, seed).unwrap();
        let p = model.prepare(&ep).unwrap();
        let noise: Vec<Vec<[f64; 2]>> = (0..4)
            .map(|_| (0..3).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect())
            .collect();
        let r = model.rollout(&p, 1, &noise).unwrap();
        let back = model.teacher_forced(&p, &r.positions).unwrap();
        for (a, steps) in back.iter().enumerate() {
            for (t, s) in steps.iter().enumerate() {
                for d in 0..2 {
                    round_trip = round_trip.max((s.z[d] - noise[t][a][d]).abs());
                }
                let det = s.sigma[0] * s.sigma[3] - s.sigma[1] * s.sigma[2];
                logdet = logdet.max((det.ln() - (s.sigma_hat[0] + s.sigma_hat[3])).abs());
            }
        }
        for s in model.teacher_forced(&p, &p.future).unwrap().iter().flatten() {
            let h = 1e-6;
            let mut jac = [[0.0; 2]; 2];
            for j in 0..2 {
                let (mut zp, mut zm) = (s.z, s.z);
                zp[j] += h;
                zm[j] -= h;
                let (fp, fm) = (flow_forward(s.sigma_hat, s.mu, zp), flow_forward(s.sigma_hat, s.mu, zm));
                for i in 0..2 {
                    jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
                }
            }
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            let numeric = -LOG_2PI - 0.5 * (s.z[0].powi(2) + s.z[1].powi(2)) - det.abs().ln();
            jacobian = jacobian.max((numeric - s.log_q).abs());
        }
    }
    for _ in 0..1000 {
        let sh: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
        let mu = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let z = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let back = flow_inverse(sh, mu, flow_forward(sh, mu, z));
        round_trip = round_trip.max((back[0] - z[0]).abs().max((back[1] - z[1]).abs()));
    }

    let mut expm_err: f64 = 0.0;
    for i in 0..10_000 {
        let scale = [0.01, 0.5, 1.5, 3.0][i % 4];
        let m: [f64; 4] = std::array::from_fn(|_| rng.random_range(-scale..scale));
        let (a, b) = (expm2x2(m), expm_taylor(m));
        for j in 0..4 {
            expm_err = expm_err.max((a[j] - b[j]).abs() / b[j].abs().max(1.0));
        }
    }

    outcome(&[
        (round_trip < 1e-8, format!("round trip {round_trip:.1e} < 1e-8")),
        (jacobian < 1e-5, format!("FD-Jacobian log q {jacobian:.1e} < 1e-5")),
        (logdet < 1e-10, format!("logdet vs trace {logdet:.1e} < 1e-10")),
        (expm_err < 1e-10, format!("expm vs Taylor {expm_err:.1e} < 1e-10 over 10000")),
        within(start.elapsed(), Duration::from_secs(60)),
    ])
}

// ------------------------------------------------------------------- prior

fn brute_force_distance(mask: &RoadMask) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let sites: Vec<(f64, f64)> = (0..h * w)
        .filter(|i| mask.is_drivable(i / w, i % w))
        .map(|i| ((i / w) as f64, (i % w) as f64))
        .collect();
    (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            sites
                .iter()
                .map(|(sr, sc)| (r - sr).powi(2) + (c - sc).powi(2))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

fn prior_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut edt_ok = 0;
    let mut sum_err: f64 = 0.0;
    let mut argmax_ok = true;
    let mut grad_err: f64 = 0.0;
    for i in 0..200 {
        let h = rng.random_range(1..=32);
        let w = rng.random_range(1..=32);
        let density: f64 = rng.random_range(0.02..0.6);
        let mut cells: Vec<bool> = (0..h * w).map(|_| rng.random_bool(density)).collect();
        let forced = rng.random_range(0..h * w);
        cells[forced] = true;
        let mask = RoadMask::new(h, w, 0.5, Position::ORIGIN, cells).unwrap();
        let d = distance_transform(&mask).unwrap();
        if d.values == brute_force_distance(&mask) {
            edt_ok += 1;
        }
        let stats = NormStats::from_distance_maps([&d]).unwrap_or(NormStats::IDENTITY);
        let prior = build_p_tilde(&d, mask.geometry(), stats).unwrap();
        sum_err = sum_err.max((prior.prob.iter().sum::<f64>() - 1.0).abs());
        let max = prior.prob.iter().copied().fold(0.0, f64::max);
        for (k, &dr) in mask.drivable().iter().enumerate() {
            if dr && (prior.prob[k] - max).abs() > 1e-12 * max {
                argmax_ok = false;
            }
        }
        if i % 10 == 0 && h >= 3 && w >= 3 {
            let g = prior.geometry;
            let span = |n: usize| (n as f64 - 1.0) * g.resolution * 0.5 * 0.9;
            for _ in 0..5 {
                let pos = Position::new(
                    g.center.x + rng.random_range(-span(w)..span(w)),
                    g.center.y + rng.random_range(-span(h)..span(h)),
                );
                let (_, an) = prior.log_p_tilde_at(pos).unwrap();
                let e = 1e-6;
                let f = |p: Position| prior.log_p_tilde_at(p).unwrap().0;
                let fx = (f(Position::new(pos.x + e, pos.y)) - f(Position::new(pos.x - e, pos.y))) / (2.0 * e);
                let fy = (f(Position::new(pos.x, pos.y + e)) - f(Position::new(pos.x, pos.y - e))) / (2.0 * e);
                grad_err = grad_err
                    .max((an[0] - fx).abs() / fx.abs().max(1.0))
                    .max((an[1] - fy).abs() / fy.abs().max(1.0));
            }
        }
    }
    outcome(&[
        (edt_ok == 200, format!("EDT exact on {edt_ok}/200 masks")),
        (sum_err <= 1e-6, format!("sum-to-one {sum_err:.1e} <= 1e-6")),
        (argmax_ok, "drivable pixels share the maximum (rel 1e-12)".into()),
        (grad_err < 1e-5, format!("lookup gradient vs FD {grad_err:.1e} < 1e-5")),
    ])
}

// ------------------------------------------------------------------ Kalman

fn line_track(n: i64, missing: &[i64], noise: f64, seed: u64) -> (RawTrack, Vec<[f64; 2]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nd = Normal::new(0.0, noise.max(1e-300)).unwrap();
    let mut truth = Vec::new();
    let observations = (0..n)
        .map(|t| {
            let (x, y) = (1.0 + 1.5 * t as f64, -2.0 + 0.7 * t as f64);
            truth.push([x, y]);
            let mut e = || if noise > 0.0 { nd.sample(&mut rng) } else { 0.0 };
            RawObservation {
                t,
                x: x + e(),
                y: y + e(),
                z: 0.0,
                observed: !missing.contains(&t),
            }
        })
        .collect();
    (RawTrack { agent_id: 1, observations }, truth)
}

fn kalman_suite() -> Outcome {
    let mut monotone = true;
    for seed in 0..20 {
        let (track, _) = line_track(20, &[3, 4, 11], 0.3, seed);
        let fit = em_fit(&track, 10).unwrap();
        monotone &= fit.log_likelihoods.windows(2).all(|w| w[1] >= w[0] - 1e-9);
    }
    let (track, truth) = line_track(12, &[], 0.0, 0);
    let fit = em_fit(&track, 10).unwrap();
    let out = smooth_impute(&track, &fit.model).unwrap();
    let cv_err = out
        .points
        .iter()
        .zip(&truth)
        .map(|(p, t)| (p.pos.x - t[0]).abs().max((p.pos.y - t[1]).abs()))
        .fold(0.0, f64::max);
    let mut better = 0;
    for seed in 0..100 {
        let (track, truth) = line_track(20, &[], 0.3, seed);
        let out = smooth_track(&track, 10).unwrap();
        let rmse = |xy: &dyn Fn(usize) -> (f64, f64)| {
            let s: f64 = (0..20).map(|i| (xy(i).0 - truth[i][0]).powi(2) + (xy(i).1 - truth[i][1]).powi(2)).sum();
            (s / 20.0).sqrt()
        };
        let raw = rmse(&|i| (track.observations[i].x, track.observations[i].y));
        let smooth = rmse(&|i| (out.points[i].pos.x, out.points[i].pos.y));
        if smooth < raw {
            better += 1;
        }
    }
    outcome(&[
        (monotone, "EM log-likelihood monotone (tol 1e-9) over 20 tracks".into()),
        (cv_err < 1e-6, format!("noiseless CV recovery {cv_err:.1e} m < 1e-6")),
        (better >= 95, format!("smoothing lowers RMSE on {better}/100 seeds")),
    ])
}

// ----------------------------------------------------------------- metrics

fn single(hyps: Vec<Vec<Position>>) -> PredictionSet {
    PredictionSet {
        episode_id: "e".into(),
        k: hyps.len(),
        agents: vec![AgentPrediction { agent_id: 0, hypotheses: hyps }],
    }
}

fn metrics_suite() -> Outcome {
    let p = Position::new;
    let gt = vec![p(1.0, 0.0), p(2.0, 0.0), p(3.0, 0.0)];
    let shift = |dy: f64| gt.iter().map(|q| p(q.x, q.y + dy)).collect::<Vec<_>>();
    let e = displacement_errors(&[shift(0.1), shift(1.0)], &gt).unwrap();
    let r = rf(e.avg_fde, e.min_fde);
    let hand = (e.min_ade - 0.1).abs() < 1e-12
        && (e.avg_ade - 0.55).abs() < 1e-12
        && (e.min_fde - 0.1).abs() < 1e-12
        && (e.avg_fde - 0.55).abs() < 1e-12
        && (r - 5.5).abs() < 1e-6;

    let cells: Vec<(usize, usize)> = (0..60).map(|i| (i / 20, i % 20)).collect();
    let mask = RoadMask::from_fn(20, 20, 1.0, Position::ORIGIN, |r, c| cells.contains(&(r, c))).unwrap();
    let at = |r, c| mask.geometry().pixel_center(r, c);
    let set = single(vec![vec![at(0, 0), at(0, 1), at(10, 10)], vec![at(0, 1), at(2, 5), at(15, 3)]]);
    let raw = dao_raw(&set, &mask).unwrap();
    let scaled = dao(&set, &mask).unwrap();
    let dao_ok = (raw - 0.05).abs() < 1e-15 && (scaled - 500.0).abs() < 1e-9 && DAO_SCALE == 10_000.0;

    let good = vec![at(0, 0), at(1, 1)];
    let bad = vec![at(0, 0), at(5, 5)];
    let dac_v = dac(&[good.clone(), good.clone(), good, bad], &mask);

    let hyps = prop::collection::vec(prop::collection::vec((-12.0..12.0f64, -12.0..12.0f64), 3), 1..8)
        .prop_map(|hs| hs.into_iter().map(|h| h.into_iter().map(|(x, y)| p(x, y)).collect::<Vec<_>>()).collect::<Vec<_>>());
    let gts = prop::collection::vec((-12.0..12.0f64, -12.0..12.0f64), 3);
    let mut runner = TestRunner::new(PropConfig::with_cases(1000));
    let props = runner.run(&(hyps, gts, 0usize..8, 0usize..3), |(hyps, gt, which, step)| {
        let gt: Vec<Position> = gt.into_iter().map(|(x, y)| p(x, y)).collect();
        let e = displacement_errors(&hyps, &gt).unwrap();
        prop_assert!(e.min_ade <= e.avg_ade + 1e-12 && e.min_fde <= e.avg_fde + 1e-12);
        let road = RoadMask::from_fn(20, 20, 1.0, Position::ORIGIN, |r, c| (r * 31 + c * 17) % 3 != 0).unwrap();
        let d = dao(&single(hyps.clone()), &road).unwrap();
        let mut reordered = hyps.clone();
        reordered.reverse();
        reordered.push(hyps[which % hyps.len()].clone());
        prop_assert_eq!(d, dao(&single(reordered), &road).unwrap());
        let before = dac(&hyps, &road);
        let mut moved = hyps.clone();
        let i = which % moved.len();
        moved[i][step] = p(1000.0, 1000.0);
        prop_assert!(dac(&moved, &road) <= before);
        Ok(())
    });

    outcome(&[
        (hand, format!("fixture {:.2}/{:.2}/{:.2}/{:.2}, rF {r:.4}", e.min_ade, e.avg_ade, e.min_fde, e.avg_fde)),
        (dao_ok, format!("DAO {raw} -> {scaled} (x10000)")),
        (dac_v == 0.75, format!("DAC {dac_v}")),
        (props.is_ok(), format!("1000 property trials {}", if props.is_ok() { "held" } else { "broke" })),
    ])
}

// -------------------------------------------------------------- experiment

const TRAIN_SEED: u64 = 100;
const VAL_SEED: u64 = 200;
const RUN_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Epoch cap that keeps ten training runs inside the time budget.
const EXPERIMENT_EPOCHS: usize = 15;

fn experiment_config(seed: u64, beta: f64) -> TrainConfig {
    TrainConfig {
        seed,
        beta,
        alpha: 0.5,
        k: 12,
        epochs: EXPERIMENT_EPOCHS,
        ..TrainConfig::default()
    }
}

fn fork_experiment() -> Outcome {
    let start = Instant::now();
    let train_eps = synth_fork(500, TRAIN_SEED).unwrap();
    let val = synth_fork_with(100, VAL_SEED, &ForkConfig::default()).unwrap().episodes;
    let cv: Vec<PredictionSet> = val.iter().map(|e| constant_velocity(e).unwrap()).collect();
    let cv_report = metrics::evaluate(&val, &cv).unwrap();

    let mut checks = Vec::new();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in RUN_SEEDS {
        let mut off = [0usize; 2];
        for (slot, beta) in [0.1, 0.0].into_iter().enumerate() {
            let out = train(&train_eps, &val, &experiment_config(seed, beta)).unwrap();
            let prepared = prepare_all(&out.model, &val).unwrap();
            let preds = sample_all(&out.model, &prepared, 12, seed).unwrap();
            let report = metrics::evaluate(&val, &preds).unwrap();
            off[slot] = report.off_drivable_waypoints();
            if seed == RUN_SEEDS[0] && slot == 0 {
                println!("  CV baseline (k=1): {}", cv_report.to_string().replace('\n', " | "));
                println!("  model (k=12):      {}", report.to_string().replace('\n', " | "));
                checks.push((
                    report.min_fde < cv_report.min_fde,
                    format!("(a) minFDE {:.3} < CV {:.3}", report.min_fde, cv_report.min_fde),
                ));
                checks.push((report.rf >= 1.5, format!("(b) rF {:.3} >= 1.5", report.rf)));
                checks.push((report.dac >= 0.9, format!("(c) DAC {:.3} >= 0.9", report.dac)));
                let (first, last) = (&out.log[0], out.log.last().unwrap());
                checks.push((
                    last.val_forward_ce < first.val_forward_ce,
                    format!(
                        "val forward CE {:.3} -> {:.3} over {} epochs",
                        first.val_forward_ce,
                        last.val_forward_ce,
                        out.log.len()
                    ),
                ));
            }
        }
        if off[0] < off[1] {
            wins += 1;
        }
        pairs.push(format!("{}:{}v{}", seed, off[0], off[1]));
    }
    println!("  off-drivable waypoints beta=0.1 v beta=0 by seed: {}", pairs.join(" "));
    checks.push((wins >= 4, format!("(d) fewer off-drivable waypoints with beta>0 on {wins}/5 seeds")));
    checks.push(within(start.elapsed(), Duration::from_secs(20 * 60)));
    outcome(&checks)
}

fn alpha_sweep_suite() -> Outcome {
    let train_eps = synth_fork(60, TRAIN_SEED).unwrap();
    let val = synth_fork_with(20, VAL_SEED, &ForkConfig::default()).unwrap().episodes;
    let cfg = TrainConfig { epochs: 2, seed: 0, ..TrainConfig::default() };
    let alphas = [0.25, 0.5, 0.75, 1.0];
    let first = alpha_sweep(&train_eps, &val, &alphas, &cfg).unwrap();
    let second = alpha_sweep(&train_eps, &val, &alphas, &cfg).unwrap();
    let table = format_sweep_table(&first);
    for line in table.lines() {
        println!("  {line}");
    }
    outcome(&[
        (first.len() == 4, format!("{} rows", first.len())),
        (first == second, "identical on rerun".into()),
    ])
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("1 gradient checks", gradient_suite),
        ("2 flow invertibility and log-density", flow_suite),
        ("3 distance transform and prior", prior_suite),
        ("4 Kalman smoothing", kalman_suite),
        ("5 metrics fixture and properties", metrics_suite),
        ("6 fork-road experiment", fork_experiment),
        ("7 degradation-coefficient sweep", alpha_sweep_suite),
    ];
    let only = std::env::var("ACCEPTANCE_ONLY").ok();
    let mut failed = Vec::new();
    for (name, run) in criteria {
        if only.as_deref().is_some_and(|o| !name.starts_with(o)) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        println!(
            "{} {name}: {} [{:.1}s]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.passed {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
