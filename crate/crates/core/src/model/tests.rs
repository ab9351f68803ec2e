use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Episode;
use crate::objective::{micro_episode, synth_fork};

fn micro_model(horizon: usize, seed: u64) -> (Model, Episode) {
    let ep = micro_episode(seed, 3, horizon).unwrap();
    let stats = DatasetStats::from_episodes(std::slice::from_ref(&ep)).unwrap();
    (Model::new(ModelConfig::micro(horizon), stats, seed).unwrap(), ep)
}

fn random_noise(rows: usize, horizon: usize, seed: u64) -> Vec<Vec<[f64; 2]>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..horizon)
        .map(|_| (0..rows).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect())
        .collect()
}

fn zero_head(m: &mut Model) {
    for name in ["dec.head3.w", "dec.head3.b"] {
        let id = m.params.id(name).unwrap();
        m.params.value_mut(id).data.fill(0.0);
    }
}

#[test]
fn zero_noise_lands_on_the_mean() {
    let (m, ep) = micro_model(3, 1);
    let p = m.prepare(&ep).unwrap();
    let r = m.rollout(&p, 2, &vec![vec![[0.0; 2]; 6]; 3]).unwrap();
    for (row, steps) in r.positions.iter().zip(&r.steps) {
        for (pos, s) in row.iter().zip(steps) {
            assert_eq!([pos.x, pos.y], s.mu);
        }
    }
}

#[test]
fn constrained_mean_examples() {
    let m = constrained_mean(Position::new(2.0, 0.0), Position::new(1.0, 0.0), [0.1, 0.0], 0.5);
    assert!((m.x - 2.6).abs() < 1e-15 && m.y == 0.0);
    let prev = Position::new(3.0, -1.0);
    let prev2 = Position::new(1.5, 0.5);
    let cv = constrained_mean(prev, prev2, [0.0, 0.0], 1.0);
    assert_eq!(cv, Position::new(2.0 * prev.x - prev2.x, 2.0 * prev.y - prev2.y));
}

#[test]
fn decoder_mean_follows_the_constraint() {
    let (m, ep) = micro_model(3, 2);
    let p = m.prepare(&ep).unwrap();
    let r = m.rollout(&p, 1, &random_noise(3, 3, 5)).unwrap();
    for (a, (row, steps)) in r.positions.iter().zip(&r.steps).enumerate() {
        let mut prev2 = p.past[a][2];
        let mut prev = p.past[a][3];
        for (pos, s) in row.iter().zip(steps) {
            let mu = constrained_mean(prev, prev2, s.mu_hat, m.config.alpha);
            assert!((mu.x - s.mu[0]).abs() < 1e-12 && (mu.y - s.mu[1]).abs() < 1e-12);
            prev2 = prev;
            prev = *pos;
        }
    }
}

#[test]
fn flow_round_trip_recovers_noise() {
    for seed in 0..5 {
        let (m, ep) = micro_model(4, seed);
        let p = m.prepare(&ep).unwrap();
        let noise = random_noise(3, 4, seed + 100);
        let r = m.rollout(&p, 1, &noise).unwrap();
        let back = m.teacher_forced(&p, &r.positions).unwrap();
        for (a, steps) in back.iter().enumerate() {
            for (t, s) in steps.iter().enumerate() {
                for d in 0..2 {
                    assert!((s.z[d] - noise[t][a][d]).abs() < 1e-8, "seed {seed} agent {a} step {t}");
                }
            }
        }
    }
}

#[test]
fn pure_flow_maps_invert() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let sh: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
        let mu = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let z = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let back = flow_inverse(sh, mu, flow_forward(sh, mu, z));
        assert!((back[0] - z[0]).abs() < 1e-8 && (back[1] - z[1]).abs() < 1e-8);
    }
}

#[test]
fn log_det_equals_trace() {
    let (m, ep) = micro_model(3, 4);
    let p = m.prepare(&ep).unwrap();
    let r = m.rollout(&p, 2, &random_noise(6, 3, 1)).unwrap();
    for s in r.steps.iter().flatten() {
        let det = s.sigma[0] * s.sigma[3] - s.sigma[1] * s.sigma[2];
        assert!((det.ln() - (s.sigma_hat[0] + s.sigma_hat[3])).abs() < 1e-10);
    }
}

#[test]
fn log_density_matches_numerical_change_of_variable() {
    let (m, ep) = micro_model(3, 6);
    let p = m.prepare(&ep).unwrap();
    let steps = m.teacher_forced(&p, &p.future).unwrap();
    let h = 1e-6;
    for s in steps.iter().flatten() {
        let mut jac = [[0.0; 2]; 2];
        for j in 0..2 {
            let mut zp = s.z;
            let mut zm = s.z;
            zp[j] += h;
            zm[j] -= h;
            let (fp, fm) = (flow_forward(s.sigma_hat, s.mu, zp), flow_forward(s.sigma_hat, s.mu, zm));
            for i in 0..2 {
                jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        let numeric = -LOG_2PI - 0.5 * (s.z[0].powi(2) + s.z[1].powi(2)) - det.abs().ln();
        assert!((numeric - s.log_q).abs() < 1e-5, "{numeric} vs {}", s.log_q);
    }
}

#[test]
fn perfect_fit_gives_standard_normal_peak() {
    let (mut m, mut ep) = micro_model(3, 7);
    zero_head(&mut m);
    let alpha = m.config.alpha;
    for a in &mut ep.agents {
        for i in 4..a.points.len() {
            let (p2, p1) = (a.points[i - 2].pos, a.points[i - 1].pos);
            a.points[i].pos = constrained_mean(p1, p2, [0.0, 0.0], alpha);
        }
    }
    let p = m.prepare(&ep).unwrap();
    for row in m.log_density(&p).unwrap() {
        for lq in row {
            assert!((lq + LOG_2PI).abs() < 1e-12, "{lq}");
        }
    }
}

#[test]
fn agents_are_permutation_equivariant() {
    let (m, ep) = micro_model(3, 8);
    let mut rev = ep.clone();
    rev.agents.reverse();
    let a = m.log_density(&m.prepare(&ep).unwrap()).unwrap();
    let mut b = m.log_density(&m.prepare(&rev).unwrap()).unwrap();
    b.reverse();
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn single_agent_attention_adds_own_value() {
    let ep = micro_episode(9, 1, 2).unwrap();
    let stats = DatasetStats::from_episodes(std::slice::from_ref(&ep)).unwrap();
    let m = Model::new(ModelConfig::micro(2), stats, 9).unwrap();
    let p = m.prepare(&ep).unwrap();
    let mut g = Graph::new(&m.params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = m.encode(&mut g, &p, Mode::Eval, &mut rng).unwrap();
    let h0 = g.value(enc.h0).data.clone();
    let ht = g.value(enc.h_tilde).data.clone();
    // Recompute V from the layer-normalized h0 outside the graph.
    let e = h0.len();
    let mean = h0.iter().sum::<f64>() / e as f64;
    let var = h0.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / e as f64;
    let ln: Vec<f64> = h0.iter().map(|x| (x - mean) / (var + 1e-5).sqrt()).collect();
    let w = m.params.value(m.params.id("enc.value.w").unwrap());
    let b = m.params.value(m.params.id("enc.value.b").unwrap());
    for j in 0..e {
        let v = b.data[j] + (0..e).map(|i| ln[i] * w.data[i * e + j]).sum::<f64>();
        assert!((ht[j] - h0[j] - v).abs() < 1e-12);
    }
}

#[test]
fn stationary_agent_sees_zero_differences() {
    let (m, mut ep) = micro_model(2, 10);
    for a in &mut ep.agents {
        let p = a.points[3].pos;
        for q in &mut a.points[..4] {
            q.pos = p;
        }
    }
    let p = m.prepare(&ep).unwrap();
    // Every agent's past is constant, so the encoder states are identical.
    let mut g = Graph::new(&m.params);
    let enc = m.encode(&mut g, &p, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let h0 = g.value(enc.h0);
    let e = h0.dims2().1;
    for a in 1..p.num_agents() {
        assert_eq!(h0.data[..e], h0.data[a * e..(a + 1) * e]);
    }
}

#[test]
fn paper_backbone_shapes() {
    let ep = synth_fork(1, 0).unwrap().remove(0);
    let stats = DatasetStats::from_episodes(std::slice::from_ref(&ep)).unwrap();
    let m = Model::new(ModelConfig::paper(), stats, 0).unwrap();
    let p = m.prepare(&ep).unwrap();
    let mut g = Graph::new(&m.params);
    let enc = m.encode(&mut g, &p, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(g.value(enc.gamma_g).shape, vec![32 * 32, 32]);
    assert_eq!(g.value(enc.f_gamma).shape, vec![32 * 32, 150]);
    assert_eq!(g.value(enc.gamma_l).shape, vec![100, 100, 6]);
    assert_eq!(g.value(enc.h_tilde).shape, vec![ep.num_agents(), 128]);
    assert!((enc.local_geom.resolution - 1.12).abs() < 1e-12);
}

#[test]
fn sampling_is_seeded() {
    let (m, ep) = micro_model(3, 11);
    let p = m.prepare(&ep).unwrap();
    let a = m.sample_k(&p, 12, 7).unwrap();
    assert_eq!(a, m.sample_k(&p, 12, 7).unwrap());
    assert_ne!(a, m.sample_k(&p, 12, 8).unwrap());
    a.validate().unwrap();
    assert_eq!(a.k, 12);
    assert!(a.agents.iter().all(|x| x.hypotheses.len() == 12 && x.hypotheses[0].len() == 3));
    assert!(m.sample_k(&p, 0, 7).is_err());
}

#[test]
fn single_sample_matches_rollout() {
    let (m, ep) = micro_model(3, 12);
    let p = m.prepare(&ep).unwrap();
    let set = m.sample_k(&p, 1, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise: Vec<Vec<[f64; 2]>> = (0..3)
        .map(|_| {
            (0..3)
                .map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
                .collect()
        })
        .collect();
    let r = m.rollout(&p, 1, &noise).unwrap();
    for (a, agent) in set.agents.iter().enumerate() {
        let expect: Vec<Position> = r.positions[a].iter().map(|&q| q + p.offset).collect();
        assert_eq!(agent.hypotheses[0], expect);
    }
}

#[test]
fn predictions_return_to_episode_frame() {
    let (m, ep) = micro_model(2, 13);
    let mut moved = ep.clone();
    let shift = Position::new(5.0, -3.0);
    for a in &mut moved.agents {
        for q in &mut a.points {
            q.pos = q.pos + shift;
        }
    }
    let mask = (*moved.road_mask).clone();
    moved.road_mask = std::sync::Arc::new(
        crate::data::RoadMask::new(mask.height(), mask.width(), mask.resolution(), mask.center + shift, mask.drivable().to_vec())
            .unwrap(),
    );
    let a = m.sample_k(&m.prepare(&ep).unwrap(), 2, 1).unwrap();
    let b = m.sample_k(&m.prepare(&moved).unwrap(), 2, 1).unwrap();
    for (x, y) in a.agents.iter().zip(&b.agents) {
        for (hx, hy) in x.hypotheses.iter().zip(&y.hypotheses) {
            for (px, py) in hx.iter().zip(hy) {
                assert!((px.x + shift.x - py.x).abs() < 1e-9 && (px.y + shift.y - py.y).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let (m, ep) = micro_model(2, 14);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.dfn");
    m.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.config, m.config);
    let p = m.prepare(&ep).unwrap();
    assert_eq!(m.sample_k(&p, 3, 2).unwrap(), back.sample_k(&p, 3, 2).unwrap());
    assert!(Model::load(&dir.path().join("missing.dfn")).is_err());
}

#[test]
fn horizon_mismatch_is_rejected() {
    let (m, _) = micro_model(2, 15);
    let ep = micro_episode(15, 2, 3).unwrap();
    assert!(matches!(m.prepare(&ep), Err(Error::Precondition(_))));
}

#[test]
fn constant_velocity_extrapolates() {
    let ep = micro_episode(16, 2, 3).unwrap();
    let cv = constant_velocity(&ep).unwrap();
    assert_eq!(cv.k, 1);
    for a in &ep.agents {
        let p0 = a.points[3].pos;
        let v = p0 - a.points[2].pos;
        let h = &cv.agent(a.agent_id).unwrap().hypotheses[0];
        for (t, q) in h.iter().enumerate() {
            let k = (t + 1) as f64;
            assert!((q.x - (p0.x + k * v.x)).abs() < 1e-12 && (q.y - (p0.y + k * v.y)).abs() < 1e-12);
        }
    }
}
