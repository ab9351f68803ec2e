//! Closed-form exponential of a real 2x2 matrix.
//!
//! Writing `M = s I + N` with `s = tr(M)/2` and `N` traceless gives
//! `N^2 = delta I`, `delta = ((a-d)/2)^2 + bc`, hence
//! `expm(M) = e^s (C(delta) I + S(delta) N)` with
//! `C(delta) = cosh(sqrt(delta))` and `S(delta) = sinh(sqrt(delta))/sqrt(delta)`
//! (their trigonometric continuations for `delta < 0`). Both are entire in
//! `delta`, so near zero their power series are used instead.
//!
//! Matrices are row-major `[a, b, c, d]`.

const SERIES_RADIUS: f64 = 1.0;
const SERIES_TERMS: usize = 14;

/// `(C, S, dC/ddelta, dS/ddelta)`.
fn coefficients(delta: f64) -> (f64, f64, f64, f64) {
    if delta.abs() < SERIES_RADIUS {
        // C = sum delta^k / (2k)!, S = sum delta^k / (2k+1)!
        let mut c = 0.0;
        let mut s = 0.0;
        let mut dc = 0.0;
        let mut ds = 0.0;
        let mut pow = 1.0; // delta^k
        let mut pow_prev = 0.0; // delta^(k-1)
        let mut fact_even = 1.0; // (2k)!
        for k in 0..SERIES_TERMS {
            let fact_odd = fact_even * (2 * k + 1) as f64;
            c += pow / fact_even;
            s += pow / fact_odd;
            if k > 0 {
                dc += k as f64 * pow_prev / fact_even;
                ds += k as f64 * pow_prev / fact_odd;
            }
            pow_prev = pow;
            pow *= delta;
            fact_even = fact_odd * (2 * k + 2) as f64;
        }
        (c, s, dc, ds)
    } else if delta > 0.0 {
        let r = delta.sqrt();
        let c = r.cosh();
        let s = r.sinh() / r;
        (c, s, 0.5 * s, (c - s) / (2.0 * delta))
    } else {
        let r = (-delta).sqrt();
        let c = r.cos();
        let s = r.sin() / r;
        (c, s, 0.5 * s, (c - s) / (2.0 * delta))
    }
}

pub fn expm2x2(m: [f64; 4]) -> [f64; 4] {
    let [a, b, c, d] = m;
    let s = 0.5 * (a + d);
    let n11 = 0.5 * (a - d);
    let delta = n11 * n11 + b * c;
    let (cc, ss, _, _) = coefficients(delta);
    let e = s.exp();
    [
        e * (cc + ss * n11),
        e * ss * b,
        e * ss * c,
        e * (cc - ss * n11),
    ]
}

/// Vector-Jacobian product: given `upstream = dL/d expm(M)`, returns `dL/dM`.
pub fn expm2x2_vjp(m: [f64; 4], upstream: [f64; 4]) -> [f64; 4] {
    let [a, b, c, d] = m;
    let s = 0.5 * (a + d);
    let n11 = 0.5 * (a - d);
    let delta = n11 * n11 + b * c;
    let (cc, ss, dcc, dss) = coefficients(delta);
    let e = s.exp();
    let g = upstream;
    let out = [
        e * (cc + ss * n11),
        e * ss * b,
        e * ss * c,
        e * (cc - ss * n11),
    ];
    let dl_ds: f64 = (0..4).map(|i| g[i] * out[i]).sum();
    let dl_dc = e * (g[0] + g[3]);
    let dl_dss = e * (g[0] * n11 + g[1] * b + g[2] * c - g[3] * n11);
    let dl_ddelta = dl_dc * dcc + dl_dss * dss;
    // direct dependence of E on N entries
    let dn11 = e * ss * (g[0] - g[3]) + dl_ddelta * 2.0 * n11;
    let db = e * ss * g[1] + dl_ddelta * c;
    let dc = e * ss * g[2] + dl_ddelta * b;
    [0.5 * (dl_ds + dn11), db, dc, 0.5 * (dl_ds - dn11)]
}
