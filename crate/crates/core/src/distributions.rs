//! Normal and chi-square quantile functions plus the empirical quantile.

use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    if x == 0.0 {
        return 0.5;
    }
    // erfc(t) = Q(1/2, t^2), the regularized upper incomplete gamma function
    let tail = 0.5 * gamma_ur(0.5, 0.5 * x * x);
    if x < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Standard normal quantile (Wichura's AS 241, accurate to about 1e-16).
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_812_8e4) * r
            + 6.726_577_092_700_87e4)
            * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5)
            * q;
        let den = ((((((5.226_495_278_852_545e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return num / den;
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_7e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_445_9e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Chi-square CDF with (possibly fractional) degrees of freedom `dof`.
pub fn chi2_cdf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(0.5 * dof, 0.5 * x)
    }
}

fn chi2_density(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let a = 0.5 * dof;
    ((a - 1.0) * x.ln() - 0.5 * x - a * std::f64::consts::LN_2 - ln_gamma(a)).exp()
}

/// Chi-square quantile for fractional degrees of freedom.
///
/// Wilson-Hilferty starting point, then safeguarded Newton iterations on the
/// regularized incomplete gamma function. The upper tail is solved against the
/// complementary function so that quantiles near 1 keep full relative accuracy.
pub fn chi2_quantile(q: f64, dof: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Parameter(format!("quantile level {q} must lie in (0, 1)")));
    }
    if !(dof > 0.0 && dof.is_finite()) {
        return Err(Error::Parameter(format!("degrees of freedom {dof} must be positive")));
    }
    let a = 0.5 * dof;
    let upper = q > 0.5;
    // residual(x) > 0 iff x is above the target quantile
    let residual = |x: f64| -> f64 {
        if upper {
            (1.0 - q) - gamma_ur(a, 0.5 * x)
        } else {
            gamma_lr(a, 0.5 * x) - q
        }
    };

    let z = normal_quantile(q);
    let h = 2.0 / (9.0 * dof);
    let wh = dof * (1.0 - h + z * h.sqrt()).powi(3);
    let mut x = if wh > 0.0 && dof > 0.5 {
        wh
    } else {
        // small-x expansion P(a, x/2) ~ (x/2)^a / Gamma(a + 1)
        2.0 * ((q.ln() + ln_gamma(a + 1.0)) / a).exp()
    };
    if !(x.is_finite() && x > 0.0) {
        x = dof.max(1e-3);
    }

    let mut lo = 0.0_f64;
    let mut hi = f64::INFINITY;
    for _ in 0..400 {
        let f = residual(x);
        if f == 0.0 {
            return Ok(x);
        }
        if f > 0.0 {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        let dens = chi2_density(x, dof);
        let mut next = if dens > 0.0 { x - f / dens } else { f64::NAN };
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x.max(1.0) };
        }
        if (next - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(f64::MIN_POSITIVE) {
            return Ok(next);
        }
        if hi.is_finite() && (hi - lo) <= 4.0 * f64::EPSILON * hi {
            return Ok(0.5 * (lo + hi));
        }
        x = next;
    }
    Ok(x)
}

/// Empirical quantile with linear interpolation between order statistics
/// (the "type 7" definition). Sorts `values` in place.
pub fn empirical_quantile(values: &mut [f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Input("empirical quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Parameter(format!("quantile level {q} must lie in [0, 1]")));
    }
    values.sort_by(f64::total_cmp);
    let h = (values.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(values[lo] + (h - lo as f64) * (values[hi] - values[lo]))
}
