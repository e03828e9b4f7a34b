//! Scalar numeric helpers shared across modules.

/// Propensities are floored at this value before any power or ratio, so
/// `p.powf(1.0 - 2.0 * alpha)` stays finite for alpha > 1/2.
pub const PROPENSITY_FLOOR: f64 = 1e-12;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal cumulative distribution function.
///
/// Graeme West's double-precision algorithm ("Better approximations to
/// cumulative normal functions", Wilmott 2005): a Hart-style rational kernel
/// below 7.07 (relative error ~1e-15) and a continued fraction in the far
/// tail (relative error ~1e-8 on values below 8e-13).
pub fn norm_cdf(x: f64) -> f64 {
    let xabs = x.abs();
    let p = if xabs > 37.0 {
        0.0
    } else {
        let e = (-0.5 * xabs * xabs).exp();
        if xabs < 7.071_067_811_865_475 {
            let mut num = 3.52624965998911e-2 * xabs + 0.700383064443688;
            num = num * xabs + 6.37396220353165;
            num = num * xabs + 33.912866078383;
            num = num * xabs + 112.079291497871;
            num = num * xabs + 221.213596169931;
            num = num * xabs + 220.206867912376;
            let mut den = 8.83883476483184e-2 * xabs + 1.75566716318264;
            den = den * xabs + 16.064177579207;
            den = den * xabs + 86.7807322029461;
            den = den * xabs + 296.564248779674;
            den = den * xabs + 637.333633378831;
            den = den * xabs + 793.826512519948;
            den = den * xabs + 440.413735824752;
            e * num / den
        } else {
            let mut b = xabs + 0.65;
            b = xabs + 4.0 / b;
            b = xabs + 3.0 / b;
            b = xabs + 2.0 / b;
            b = xabs + 1.0 / b;
            e / (b * 2.506_628_274_631_000_5)
        }
    };
    if x > 0.0 {
        1.0 - p
    } else {
        p
    }
}

/// 17-significant-digit float serialization; round-trips every f64 exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

/// FNV-1a over bytes, used for cheap content fingerprints in reports.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Numerically stable softmax; `out` sums to 1 exactly up to rounding.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        let e = (z - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
