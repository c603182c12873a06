//! Penalized cubic smoothing spline (Reinsch form) with the smoothing
//! parameter chosen by generalized cross-validation.

use crate::error::{Error, Result};

/// Window of the moving-average fallback.
pub const FALLBACK_WINDOW: usize = 5;

/// Distinct abscissae with averaged ordinates and multiplicity weights.
struct Knots {
    x: Vec<f64>,
    y: Vec<f64>,
    weight: Vec<f64>,
    /// For every input point, the knot it was merged into.
    slot: Vec<usize>,
}

fn merge_ties(x: &[f64], y: &[f64]) -> Knots {
    let mut k = Knots {
        x: Vec::new(),
        y: Vec::new(),
        weight: Vec::new(),
        slot: Vec::with_capacity(x.len()),
    };
    for (&xi, &yi) in x.iter().zip(y) {
        match k.x.last() {
            Some(&last) if last == xi => {
                let j = k.x.len() - 1;
                k.y[j] += yi;
                k.weight[j] += 1.0;
            }
            _ => {
                k.x.push(xi);
                k.y.push(yi);
                k.weight.push(1.0);
            }
        }
        k.slot.push(k.x.len() - 1);
    }
    for (y, w) in k.y.iter_mut().zip(&k.weight) {
        *y /= w;
    }
    k
}

/// Banded pieces of the Reinsch system for `m` knots: `Q' W^{-1} Q` and `R`,
/// both stored by diagonals.
struct System {
    m: usize,
    h: Vec<f64>,
    // Q'W^{-1}Q: main, first and second super-diagonals
    qwq: [Vec<f64>; 3],
    // R: main and first super-diagonal
    r: [Vec<f64>; 2],
}

impl System {
    fn new(x: &[f64], weight: &[f64]) -> System {
        let m = x.len();
        let h: Vec<f64> = x.windows(2).map(|p| p[1] - p[0]).collect();
        let k = m - 2;
        // column j of Q has entries at rows j, j+1, j+2
        let q = |j: usize| [1.0 / h[j], -1.0 / h[j] - 1.0 / h[j + 1], 1.0 / h[j + 1]];
        let mut qwq = [vec![0.0; k], vec![0.0; k], vec![0.0; k]];
        for (off, diag) in qwq.iter_mut().enumerate() {
            for i in 0..k.saturating_sub(off) {
                let a = q(i);
                let b = q(i + off);
                // rows shared by columns i and i+off are i+off ..= i+2
                let mut s = 0.0;
                for row in i + off..=i + 2 {
                    s += a[row - i] * b[row - i - off] / weight[row];
                }
                diag[i] = s;
            }
        }
        let mut r = [vec![0.0; k], vec![0.0; k]];
        for i in 0..k {
            r[0][i] = (h[i] + h[i + 1]) / 3.0;
            if i + 1 < k {
                r[1][i] = h[i + 1] / 6.0;
            }
        }
        System { m, h, qwq, r }
    }

    /// `Q' y`.
    fn qt(&self, y: &[f64]) -> Vec<f64> {
        (0..self.m - 2)
            .map(|j| {
                (y[j + 1] - y[j]) / self.h[j] * -1.0 + (y[j + 2] - y[j + 1]) / self.h[j + 1]
            })
            .collect()
    }

    /// `W^{-1} Q g`.
    fn wq(&self, g: &[f64], weight: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (j, &gj) in g.iter().enumerate() {
            out[j] += gj / self.h[j];
            out[j + 1] += gj * (-1.0 / self.h[j] - 1.0 / self.h[j + 1]);
            out[j + 2] += gj / self.h[j + 1];
        }
        for (o, w) in out.iter_mut().zip(weight) {
            *o /= w;
        }
        out
    }
}

/// `L D L'` factor of a symmetric pentadiagonal matrix given by diagonals.
struct Ldl {
    d: Vec<f64>,
    l1: Vec<f64>,
    l2: Vec<f64>,
}

fn ldl_pentadiagonal(a0: &[f64], a1: &[f64], a2: &[f64]) -> Option<Ldl> {
    let k = a0.len();
    let mut d = vec![0.0; k];
    let mut l1 = vec![0.0; k];
    let mut l2 = vec![0.0; k];
    let scale = a0.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for i in 0..k {
        let mut di = a0[i];
        if i >= 1 {
            di -= l1[i - 1] * l1[i - 1] * d[i - 1];
        }
        if i >= 2 {
            di -= l2[i - 2] * l2[i - 2] * d[i - 2];
        }
        if !(di > 1e-13 * scale) || !di.is_finite() {
            return None;
        }
        d[i] = di;
        if i + 1 < k {
            let mut v = a1[i];
            if i >= 1 {
                v -= l1[i - 1] * l2[i - 1] * d[i - 1];
            }
            l1[i] = v / di;
        }
        if i + 2 < k {
            l2[i] = a2[i] / di;
        }
    }
    Some(Ldl { d, l1, l2 })
}

impl Ldl {
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let k = b.len();
        let mut y = b.to_vec();
        for i in 0..k {
            if i >= 1 {
                y[i] -= self.l1[i - 1] * y[i - 1];
            }
            if i >= 2 {
                y[i] -= self.l2[i - 2] * y[i - 2];
            }
        }
        for (v, d) in y.iter_mut().zip(&self.d) {
            *v /= d;
        }
        for i in (0..k).rev() {
            if i + 1 < k {
                y[i] -= self.l1[i] * y[i + 1];
            }
            if i + 2 < k {
                y[i] -= self.l2[i] * y[i + 2];
            }
        }
        y
    }

    /// Entries of the inverse within the band (Hutchinson and de Hoog):
    /// main, first and second super-diagonals.
    fn inverse_band(&self) -> [Vec<f64>; 3] {
        let k = self.d.len();
        let mut s0 = vec![0.0; k];
        let mut s1 = vec![0.0; k];
        let mut s2 = vec![0.0; k];
        for i in (0..k).rev() {
            let a = if i + 1 < k { self.l1[i] } else { 0.0 };
            let b = if i + 2 < k { self.l2[i] } else { 0.0 };
            let s11 = if i + 1 < k { s0[i + 1] } else { 0.0 };
            let s22 = if i + 2 < k { s0[i + 2] } else { 0.0 };
            let s12 = if i + 1 < k { s1[i + 1] } else { 0.0 };
            if i + 1 < k {
                s1[i] = -(a * s11 + b * s12);
            }
            if i + 2 < k {
                s2[i] = -(a * s12 + b * s22);
            }
            s0[i] = 1.0 / self.d[i] - a * s1[i] - b * s2[i];
        }
        [s0, s1, s2]
    }
}

struct Fit {
    fitted: Vec<f64>,
    edf: f64,
}

fn fit_knots(k: &Knots, sys: &System, lambda: f64) -> Option<Fit> {
    let m = sys.m;
    let a0: Vec<f64> = sys.r[0].iter().zip(&sys.qwq[0]).map(|(r, q)| r + lambda * q).collect();
    let a1: Vec<f64> = sys.r[1].iter().zip(&sys.qwq[1]).map(|(r, q)| r + lambda * q).collect();
    let a2: Vec<f64> = sys.qwq[2].iter().map(|q| lambda * q).collect();
    let ldl = ldl_pentadiagonal(&a0, &a1, &a2)?;
    let gamma = ldl.solve(&sys.qt(&k.y));
    let corr = sys.wq(&gamma, &k.weight);
    let fitted: Vec<f64> = k.y.iter().zip(&corr).map(|(y, c)| y - lambda * c).collect();
    // tr(A) = m - lambda tr(B^{-1} Q'W^{-1}Q), with B pentadiagonal
    let s = ldl.inverse_band();
    let mut tr = 0.0;
    for i in 0..m - 2 {
        tr += s[0][i] * sys.qwq[0][i] + 2.0 * s[1][i] * sys.qwq[1][i] + 2.0 * s[2][i] * sys.qwq[2][i];
    }
    let edf = m as f64 - lambda * tr;
    fitted.iter().all(|v| v.is_finite()).then_some(Fit { fitted, edf })
}

fn gcv_score(k: &Knots, fit: &Fit) -> f64 {
    let m = k.x.len() as f64;
    let rss: f64 = k
        .y
        .iter()
        .zip(&fit.fitted)
        .zip(&k.weight)
        .map(|((y, f), w)| w * (y - f).powi(2))
        .sum();
    let denom = 1.0 - fit.edf / m;
    if denom <= 1e-10 {
        return f64::INFINITY;
    }
    let v = rss / m / (denom * denom);
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

fn check_input(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Input(format!(
            "smoothing needs equal lengths, got {} abscissae and {} values",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Input("smoothing input contains non-finite values".into()));
    }
    if let Some(i) = x.windows(2).position(|p| p[1] < p[0]) {
        return Err(Error::Input(format!(
            "smoothing abscissae must be ascending (entry {} > entry {})",
            i,
            i + 1
        )));
    }
    Ok(())
}

fn expand(k: &Knots, fitted: &[f64]) -> Vec<f64> {
    k.slot.iter().map(|&s| fitted[s]).collect()
}

/// Spline fit for a fixed smoothing parameter `lambda >= 0`.
pub fn smooth_with_lambda(x: &[f64], y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_input(x, y)?;
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("smoothing parameter must be non-negative, got {lambda}")));
    }
    let k = merge_ties(x, y);
    if k.x.len() < 3 {
        return Ok(expand(&k, &k.y));
    }
    let sys = System::new(&k.x, &k.weight);
    let fit = fit_knots(&k, &sys, lambda)
        .ok_or_else(|| Error::Input("smoothing spline system is ill-conditioned".into()))?;
    Ok(expand(&k, &fit.fitted))
}

/// Centered moving average, window shrinking at the ends.
pub fn moving_average(y: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..y.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(y.len());
            y[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Smoothed series with the smoothing parameter chosen by GCV; falls back to a
/// moving average when the spline system cannot be factored.
pub fn smooth_series(a: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    check_input(a, q)?;
    if a.len() < 4 {
        return Err(Error::Input(format!(
            "smoothing needs at least 4 points, got {}",
            a.len()
        )));
    }
    let k = merge_ties(a, q);
    if k.x.len() < 4 {
        return Ok(expand(&k, &k.y));
    }
    let span = k.x[k.x.len() - 1] - k.x[0];
    let min_gap = k.x.windows(2).map(|p| p[1] - p[0]).fold(f64::INFINITY, f64::min);
    if min_gap <= 1e-12 * span {
        log::warn!("smoothing: abscissae too close for a stable spline, using a moving average");
        return Ok(moving_average(q, FALLBACK_WINDOW));
    }
    let sys = System::new(&k.x, &k.weight);
    // scale the search so that log10(lambda) = 0 balances both penalty traces
    let tr_r: f64 = sys.r[0].iter().sum();
    let tr_q: f64 = sys.qwq[0].iter().sum();
    let base = tr_r / tr_q;
    let score = |t: f64| -> f64 {
        fit_knots(&k, &sys, base * 10f64.powf(t))
            .map(|f| gcv_score(&k, &f))
            .unwrap_or(f64::INFINITY)
    };
    let grid: Vec<f64> = (0..=48).map(|i| -8.0 + 0.25 * i as f64).collect();
    let scores: Vec<f64> = grid.iter().map(|&t| score(t)).collect();
    let (best, best_score) = scores
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    if !best_score.is_finite() {
        log::warn!("smoothing: spline system is ill-conditioned, using a moving average");
        return Ok(moving_average(q, FALLBACK_WINDOW));
    }
    // golden-section refinement between the grid neighbours
    let (mut lo, mut hi) = (grid[best.saturating_sub(1)], grid[(best + 1).min(grid.len() - 1)]);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let (mut fc, mut fd) = (score(c), score(d));
    for _ in 0..40 {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = score(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = score(d);
        }
    }
    let t = if fc.min(fd) <= best_score {
        if fc <= fd {
            c
        } else {
            d
        }
    } else {
        grid[best]
    };
    match fit_knots(&k, &sys, base * 10f64.powf(t)) {
        Some(fit) => Ok(expand(&k, &fit.fitted)),
        None => Ok(moving_average(q, FALLBACK_WINDOW)),
    }
}
