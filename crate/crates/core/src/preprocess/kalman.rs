use nalgebra::{SMatrix, SVector};

use crate::data::{Position, TrackPoint, Trajectory};
use crate::error::{Error, Result};

pub type Mat6 = SMatrix<f64, 6, 6>;
pub type Mat3 = SMatrix<f64, 3, 3>;
pub type Mat36 = SMatrix<f64, 3, 6>;
pub type Vec6 = SVector<f64, 6>;
pub type Vec3 = SVector<f64, 3>;

/// Lower bound on the eigenvalues of the fitted covariances.
pub const COVARIANCE_FLOOR: f64 = 1e-8;
pub const DEFAULT_EM_ITERS: usize = 10;

/// One raw observation; `observed = false` marks a missing frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawObservation {
    pub t: i64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub observed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTrack {
    pub agent_id: i64,
    pub observations: Vec<RawObservation>,
}

impl RawTrack {
    pub fn validate(&self) -> Result<()> {
        if self.observations.windows(2).any(|w| w[0].t >= w[1].t) {
            return Err(Error::Invariant(format!(
                "track {} time indices not strictly increasing",
                self.agent_id
            )));
        }
        if self
            .observations
            .iter()
            .any(|o| o.observed && !(o.x.is_finite() && o.y.is_finite() && o.z.is_finite()))
        {
            return Err(Error::Invariant(format!("track {} has a non-finite observation", self.agent_id)));
        }
        Ok(())
    }

    fn first_t(&self) -> i64 {
        self.observations.first().map_or(0, |o| o.t)
    }

    /// Per-frame measurements over `first_t..=last_t`, `None` where missing.
    fn dense(&self) -> Vec<Option<Vec3>> {
        let (t0, t1) = match (self.observations.first(), self.observations.last()) {
            (Some(a), Some(b)) => (a.t, b.t),
            _ => return Vec::new(),
        };
        let mut out = vec![None; (t1 - t0 + 1) as usize];
        for o in self.observations.iter().filter(|o| o.observed) {
            out[(o.t - t0) as usize] = Some(Vec3::new(o.x, o.y, o.z));
        }
        out
    }
}

/// Constant-velocity linear-Gaussian state-space model over `(x, y, z, vx, vy, vz)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanModel {
    pub f: Mat6,
    pub hm: Mat36,
    pub q: Mat6,
    pub r: Mat3,
    pub m0: Vec6,
    pub p0: Mat6,
}

/// Transition matrix with velocity coupled into position by 0.5 per frame.
pub fn transition_matrix() -> Mat6 {
    let mut f = Mat6::identity();
    for i in 0..3 {
        f[(i, i + 3)] = 0.5;
    }
    f
}

pub fn emission_matrix() -> Mat36 {
    let mut h = Mat36::zeros();
    for i in 0..3 {
        h[(i, i)] = 1.0;
    }
    h
}

/// Symmetrizes and clips eigenvalues below `floor`.
pub fn clip_covariance<const N: usize>(m: &SMatrix<f64, N, N>, floor: f64) -> Result<SMatrix<f64, N, N>> {
    let sym = (m + m.transpose()) * 0.5;
    if !sym.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("covariance update produced non-finite values".into()));
    }
    let eig = nalgebra::DMatrix::from_iterator(N, N, sym.iter().copied()).symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return Ok(sym);
    }
    let clipped = eig.eigenvalues.map(|l| l.max(floor));
    let out = &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let out = SMatrix::<f64, N, N>::from_iterator(out.iter().copied());
    Ok((out + out.transpose()) * 0.5)
}

impl KalmanModel {
    /// Data-driven starting point for EM: position and velocity from the first
    /// two observations, noise levels from the spread of second differences.
    pub fn initial(track: &RawTrack) -> Result<Self> {
        let obs: Vec<&RawObservation> = track.observations.iter().filter(|o| o.observed).collect();
        if obs.len() < 2 {
            return Err(Error::Precondition(format!(
                "track {} needs at least 2 observed points, has {}",
                track.agent_id,
                obs.len()
            )));
        }
        let p = |o: &RawObservation| Vec3::new(o.x, o.y, o.z);
        let (a, b) = (obs[0], obs[1]);
        let vel = (p(b) - p(a)) / (0.5 * (b.t - a.t) as f64);
        let t0 = track.first_t();
        // extrapolate the first observation back to the first frame of the track
        let pos0 = p(a) - vel * (0.5 * (a.t - t0) as f64);
        let mut m0 = Vec6::zeros();
        m0.fixed_rows_mut::<3>(0).copy_from(&pos0);
        m0.fixed_rows_mut::<3>(3).copy_from(&vel);

        let mut noise = Vec3::zeros();
        let mut n = 0usize;
        for w in obs.windows(3) {
            if w[1].t - w[0].t == 1 && w[2].t - w[1].t == 1 {
                let d2 = p(w[2]) - p(w[1]) * 2.0 + p(w[0]);
                noise += d2.component_mul(&d2);
                n += 1;
            }
        }
        // white noise of variance s^2 gives second differences of variance 6 s^2
        let r_diag = if n > 0 { noise / (6.0 * n as f64) } else { Vec3::repeat(0.25) };
        let r = Mat3::from_diagonal(&r_diag.map(|v| v.max(COVARIANCE_FLOOR)));
        let mut q_diag = Vec6::zeros();
        for i in 0..3 {
            q_diag[i] = (0.1 * r_diag[i]).max(COVARIANCE_FLOOR);
            q_diag[i + 3] = (0.4 * r_diag[i]).max(COVARIANCE_FLOOR);
        }
        let mut p0_diag = Vec6::zeros();
        for i in 0..3 {
            p0_diag[i] = r_diag[i].max(1e-4);
            p0_diag[i + 3] = (8.0 * r_diag[i]).max(1e-4);
        }
        Ok(KalmanModel {
            f: transition_matrix(),
            hm: emission_matrix(),
            q: Mat6::from_diagonal(&q_diag),
            r,
            m0,
            p0: Mat6::from_diagonal(&p0_diag),
        })
    }
}

/// Filtered, predicted and smoothed moments of one pass.
pub struct SmootherOutput {
    pub log_likelihood: f64,
    pub smoothed_mean: Vec<Vec6>,
    pub smoothed_cov: Vec<Mat6>,
    /// `Cov(x_{t+1}, x_t | all data)` for `t = 0..T-1`.
    pub lag_one_cov: Vec<Mat6>,
}

/// Kalman filter followed by the Rauch-Tung-Striebel smoother.
pub fn filter_smooth(model: &KalmanModel, ys: &[Option<Vec3>], first_t: i64) -> Result<SmootherOutput> {
    let n = ys.len();
    let (f, h) = (&model.f, &model.hm);
    let mut pred_m = Vec::with_capacity(n);
    let mut pred_p = Vec::with_capacity(n);
    let mut filt_m: Vec<Vec6> = Vec::with_capacity(n);
    let mut filt_p: Vec<Mat6> = Vec::with_capacity(n);
    let mut ll = 0.0;
    for (t, y) in ys.iter().enumerate() {
        let (m_pred, p_pred) = if t == 0 {
            (model.m0, model.p0)
        } else {
            let p = f * filt_p[t - 1] * f.transpose() + model.q;
            (f * filt_m[t - 1], (p + p.transpose()) * 0.5)
        };
        let (m, p) = match y {
            Some(y) => {
                let s = h * p_pred * h.transpose() + model.r;
                let chol = s.cholesky().ok_or_else(|| {
                    Error::Numerical(format!("singular innovation covariance at frame {}", first_t + t as i64))
                })?;
                let v = y - h * m_pred;
                let s_inv_v = chol.solve(&v);
                let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                ll += -0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + log_det + v.dot(&s_inv_v));
                let k = (chol.solve(&(h * p_pred))).transpose();
                let ikh = Mat6::identity() - k * h;
                // Joseph form keeps P symmetric positive semi-definite
                let p = ikh * p_pred * ikh.transpose() + k * model.r * k.transpose();
                (m_pred + k * v, (p + p.transpose()) * 0.5)
            }
            None => (m_pred, p_pred),
        };
        pred_m.push(m_pred);
        pred_p.push(p_pred);
        filt_m.push(m);
        filt_p.push(p);
    }
    let mut sm = filt_m.clone();
    let mut sp = filt_p.clone();
    let mut lag = vec![Mat6::zeros(); n.saturating_sub(1)];
    for t in (0..n.saturating_sub(1)).rev() {
        let pp = pred_p[t + 1];
        let pp_inv = pp
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| pp.try_inverse())
            .ok_or_else(|| {
                Error::Numerical(format!("singular predicted covariance at frame {}", first_t + t as i64 + 1))
            })?;
        let j = filt_p[t] * f.transpose() * pp_inv;
        sm[t] = filt_m[t] + j * (sm[t + 1] - pred_m[t + 1]);
        let p = filt_p[t] + j * (sp[t + 1] - pp) * j.transpose();
        sp[t] = (p + p.transpose()) * 0.5;
        lag[t] = sp[t + 1] * j.transpose();
    }
    Ok(SmootherOutput {
        log_likelihood: ll,
        smoothed_mean: sm,
        smoothed_cov: sp,
        lag_one_cov: lag,
    })
}

/// Maximization step given smoothed moments; `F` and `Hm` stay fixed.
pub fn m_step(model: &KalmanModel, ys: &[Option<Vec3>], e: &SmootherOutput) -> Result<KalmanModel> {
    let n = ys.len();
    let (f, h) = (&model.f, &model.hm);
    let (ms, ps) = (&e.smoothed_mean, &e.smoothed_cov);
    let m0 = ms[0];
    let p0 = clip_covariance(&ps[0], COVARIANCE_FLOOR)?;

    let q = if n > 1 {
        let mut acc = Mat6::zeros();
        for t in 1..n {
            let s11 = ps[t] + ms[t] * ms[t].transpose();
            let s10 = e.lag_one_cov[t - 1] + ms[t] * ms[t - 1].transpose();
            let s00 = ps[t - 1] + ms[t - 1] * ms[t - 1].transpose();
            acc += s11 - s10 * f.transpose() - f * s10.transpose() + f * s00 * f.transpose();
        }
        clip_covariance(&(acc / (n - 1) as f64), COVARIANCE_FLOOR)?
    } else {
        model.q
    };

    let mut acc = Mat3::zeros();
    let mut count = 0usize;
    for (t, y) in ys.iter().enumerate() {
        if let Some(y) = y {
            let v = y - h * ms[t];
            acc += v * v.transpose() + h * ps[t] * h.transpose();
            count += 1;
        }
    }
    let r = clip_covariance(&(acc / count as f64), COVARIANCE_FLOOR)?;
    Ok(KalmanModel {
        f: *f,
        hm: *h,
        q,
        r,
        m0,
        p0,
    })
}

/// Fitted model with the observed-data log-likelihood before each M-step and
/// after the last one.
#[derive(Clone, Debug)]
pub struct EmFit {
    pub model: KalmanModel,
    pub log_likelihoods: Vec<f64>,
}

/// Expectation-maximization over `m0`, `P0`, `Q` and `R`.
pub fn em_fit(track: &RawTrack, iters: usize) -> Result<EmFit> {
    if iters == 0 {
        return Err(Error::Precondition("em_fit needs at least one iteration".into()));
    }
    track.validate()?;
    let model = KalmanModel::initial(track)?;
    em_fit_from(track, model, iters)
}

/// EM from an explicit starting model.
pub fn em_fit_from(track: &RawTrack, mut model: KalmanModel, iters: usize) -> Result<EmFit> {
    let ys = track.dense();
    if ys.iter().filter(|y| y.is_some()).count() == 0 {
        return Err(Error::Precondition(format!("track {} has no observed points", track.agent_id)));
    }
    let t0 = track.first_t();
    let mut lls = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        let e = filter_smooth(&model, &ys, t0)?;
        lls.push(e.log_likelihood);
        model = m_step(&model, &ys, &e)?;
    }
    lls.push(filter_smooth(&model, &ys, t0)?.log_likelihood);
    Ok(EmFit {
        model,
        log_likelihoods: lls,
    })
}

/// Dense smoothed `(x, y)` trajectory over the track's frame span.
pub fn smooth_impute(track: &RawTrack, model: &KalmanModel) -> Result<Trajectory> {
    track.validate()?;
    let ys = track.dense();
    let t0 = track.first_t();
    let e = filter_smooth(model, &ys, t0)?;
    let points = e
        .smoothed_mean
        .iter()
        .enumerate()
        .map(|(i, m)| TrackPoint {
            t: t0 + i as i64,
            pos: Position::new(m[0], m[1]),
            observed: true,
        })
        .collect();
    Ok(Trajectory {
        agent_id: track.agent_id,
        points,
    })
}

/// `em_fit` then `smooth_impute`.
pub fn smooth_track(track: &RawTrack, iters: usize) -> Result<Trajectory> {
    let fit = em_fit(track, iters)?;
    smooth_impute(track, &fit.model)
}
