//! Central finite-difference checking of analytic gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so near-zero gradients
    /// are judged on absolute error.
    pub floor: f64,
    /// Check a random subset of at most this many elements.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn new(h: f64, tol: f64) -> Self {
        GradCheckConfig {
            h,
            tol,
            floor: 1e-5,
            max_elements: None,
            seed: 0,
        }
    }

    pub fn sampled(mut self, max_elements: usize, seed: u64) -> Self {
        self.max_elements = Some(max_elements);
        self.seed = seed;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElementError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub tol: f64,
    pub worst: Option<ElementError>,
    pub failures: Vec<ElementError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.worst.map_or(0.0, |w| w.rel_error)
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} elements, max rel err {:.3e} (tol {:.0e})",
            self.checked,
            self.max_rel_error(),
            self.tol
        )?;
        if let Some(e) = self.failures.first() {
            write!(
                f,
                "; {} failing, first at [{}]: analytic {:.9e} vs numeric {:.9e}",
                self.failures.len(),
                e.index,
                e.analytic,
                e.numeric
            )?;
        }
        Ok(())
    }
}

pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `analytic` to central differences of `f` around `x`.
///
/// `f` must be pure: it is evaluated twice at `x` first and the check is
/// aborted if the two values differ.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if analytic.len() != x.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} inputs but {} gradient entries", x.len(), analytic.len()),
        ));
    }
    let f0 = f(x)?;
    let f1 = f(x)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::Invariant(format!(
            "gradient check aborted: closure is not deterministic ({f0:e} then {f1:e})"
        )));
    }
    let indices: Vec<usize> = match cfg.max_elements {
        Some(m) if m < x.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut v = sample(&mut rng, x.len(), m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..x.len()).collect(),
    };
    let mut work = x.to_vec();
    let mut worst: Option<ElementError> = None;
    let mut failures = Vec::new();
    for &i in &indices {
        let orig = work[i];
        work[i] = orig + cfg.h;
        let fp = f(&work)?;
        work[i] = orig - cfg.h;
        let fm = f(&work)?;
        work[i] = orig;
        let numeric = (fp - fm) / (2.0 * cfg.h);
        let e = ElementError {
            index: i,
            analytic: analytic[i],
            numeric,
            rel_error: rel_error(analytic[i], numeric, cfg.floor),
        };
        if !e.rel_error.is_finite() || e.rel_error >= cfg.tol {
            failures.push(e);
        }
        if worst.is_none_or(|w| !(e.rel_error <= w.rel_error)) {
            worst = Some(e);
        }
    }
    Ok(GradCheckReport {
        checked: indices.len(),
        tol: cfg.tol,
        worst,
        failures,
    })
}
