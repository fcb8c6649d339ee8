//! Special functions for inference: log-gamma, regularized incomplete gamma,
//! chi-square survival, the normal CDF and its inverse.

use crate::scalar::Scalar;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

const MAX_ITER: usize = 10_000;

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    if x < half {
        // reflection: Γ(x)Γ(1-x) = π / sin(πx)
        let pi = T::of(std::f64::consts::PI);
        return (pi / (pi * x).sin().abs()).ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut acc = T::of(LANCZOS[0]);
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc = acc + T::of(c) / (x + T::of_usize(i));
    }
    let t = x + T::of(LANCZOS_G) + half;
    T::of(0.5 * (2.0 * std::f64::consts::PI).ln()) + (x + half) * t.ln() - t + acc.ln()
}

fn series_lower<T: Scalar>(s: T, x: T) -> T {
    let mut ap = s;
    let mut del = T::one() / s;
    let mut sum = del;
    for _ in 0..MAX_ITER {
        ap = ap + T::one();
        del = del * x / ap;
        sum = sum + del;
        if del.abs() < sum.abs() * T::epsilon() {
            break;
        }
    }
    sum * (-x + s * x.ln() - ln_gamma(s)).exp()
}

fn continued_fraction_upper<T: Scalar>(s: T, x: T) -> T {
    let tiny = T::min_positive_value() / T::epsilon();
    let two = T::of(2.0);
    let mut b = x + T::one() - s;
    let mut c = T::one() / tiny;
    let mut d = T::one() / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let i = T::of_usize(i);
        let an = -i * (i - s);
        b = b + two;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = T::one() / d;
        let del = d * c;
        h = h * del;
        if (del - T::one()).abs() < T::epsilon() {
            break;
        }
    }
    (-x + s * x.ln() - ln_gamma(s)).exp() * h
}

/// Regularized lower incomplete gamma `P(s, x)`.
pub fn gamma_p<T: Scalar>(s: T, x: T) -> T {
    if x <= T::zero() {
        return T::zero();
    }
    if x < s + T::one() {
        series_lower(s, x)
    } else {
        T::one() - continued_fraction_upper(s, x)
    }
}

/// Regularized upper incomplete gamma `Q(s, x) = 1 - P(s, x)`.
pub fn gamma_q<T: Scalar>(s: T, x: T) -> T {
    if x <= T::zero() {
        return T::one();
    }
    if x < s + T::one() {
        T::one() - series_lower(s, x)
    } else {
        continued_fraction_upper(s, x)
    }
}

/// Upper-tail probability `P(χ²_df > x)`.
pub fn chi2_sf<T: Scalar>(x: T, df: usize) -> T {
    if df == 0 || x <= T::zero() {
        return T::one();
    }
    gamma_q(T::of_usize(df) / T::of(2.0), x / T::of(2.0))
}

pub fn erfc<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    if x >= T::zero() {
        gamma_q(half, x * x)
    } else {
        T::one() + gamma_p(half, x * x)
    }
}

/// Standard normal CDF.
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    T::of(0.5) * erfc(-x / T::of(std::f64::consts::SQRT_2))
}

const ACKLAM_A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_69e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const ACKLAM_B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const ACKLAM_C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const ACKLAM_D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996,
    3.754_408_661_907_416,
];

fn acklam(p: f64) -> f64 {
    const P_LOW: f64 = 0.02425;
    let (a, b, c, d) = (ACKLAM_A, ACKLAM_B, ACKLAM_C, ACKLAM_D);
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
            / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
            / (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
            / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    }
}

/// Inverse standard normal CDF: Acklam's rational approximation followed by
/// one Halley correction against [`normal_cdf`].
pub fn normal_quantile<T: Scalar>(p: T) -> T {
    let p = p.as_f64();
    if p <= 0.0 {
        return T::neg_infinity();
    }
    if p >= 1.0 {
        return T::infinity();
    }
    let mut x = acklam(p);
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x -= u / (1.0 + x * u / 2.0);
    T::of(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0_f64)).abs() < 1e-14);
        assert!((ln_gamma(5.0_f64) - 24.0_f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5_f64) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
    }

    #[test]
    fn chi2_one_df_at_one() {
        // P(χ²₁ > 1) = erfc(1/√2)
        assert!((chi2_sf(1.0_f64, 1) - 0.317_310_507_862_914_15).abs() < 1e-12);
        assert_eq!(chi2_sf(0.0_f64, 3), 1.0);
    }

    #[test]
    fn chi2_two_df_is_exponential() {
        for &x in &[0.1_f64, 1.0, 5.0, 20.0] {
            assert!((chi2_sf(x, 2) - (-x / 2.0).exp()).abs() < 1e-13);
        }
    }

    #[test]
    fn z_for_95_percent() {
        let z: f64 = normal_quantile(0.975);
        assert!((z - 1.959_963_984_540_054).abs() < 1e-12);
    }

    #[test]
    fn quantile_inverts_cdf_in_tails() {
        for &p in &[1e-10_f64, 1e-4, 0.01, 0.3, 0.5, 0.9, 0.999_9] {
            let x: f64 = normal_quantile(p);
            assert!((normal_cdf(x) - p).abs() < 1e-8 * p.max(1e-2));
        }
    }
}
