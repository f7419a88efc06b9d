//! Globally adaptive 21-point Gauss–Kronrod quadrature.

use crate::error::{MevError, Result};

const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689,
    0.973_906_528_517_171_720_077_964_012_084,
    0.930_157_491_355_708_226_001_207_180_060,
    0.865_063_366_688_984_510_732_096_688_423,
    0.780_817_726_586_416_897_063_717_578_345,
    0.679_409_568_299_024_406_234_327_365_115,
    0.562_757_134_668_604_683_339_000_099_273,
    0.433_395_394_129_247_190_799_265_943_166,
    0.294_392_862_701_460_198_131_126_603_104,
    0.148_874_338_981_631_210_884_826_001_130,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062,
    0.032_558_162_307_964_727_478_818_972_459,
    0.054_755_896_574_351_996_031_381_300_245,
    0.075_039_674_810_919_952_767_043_140_916,
    0.093_125_454_583_697_605_535_065_465_083,
    0.109_387_158_802_297_641_899_210_590_326,
    0.123_491_976_262_065_851_077_208_732_140,
    0.134_709_217_311_473_325_928_054_001_772,
    0.142_775_938_577_060_080_797_094_273_139,
    0.147_739_104_901_338_491_374_841_515_972,
    0.149_445_554_002_916_905_664_936_468_390,
];

// 10-point Gauss weights, living on the odd Kronrod nodes.
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893,
    0.149_451_349_150_580_593_145_776_339_658,
    0.219_086_362_515_982_043_995_534_934_228,
    0.269_266_719_309_996_355_091_226_921_569,
    0.295_524_224_714_752_870_173_892_994_651,
];

/// Upper bound on the number of subintervals kept alive.
pub const MAX_SUBDIVISIONS: usize = 2000;

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn gk21<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> Result<Segment> {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut res_k = fc * WGK[10];
    let mut res_g = 0.0;
    let mut res_abs = res_k.abs();
    let mut fv1 = [0.0; 10];
    let mut fv2 = [0.0; 10];
    for j in 0..10 {
        let dx = half * XGK[j];
        let (f1, f2) = (f(center - dx), f(center + dx));
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        fv1[j] = f1;
        fv2[j] = f2;
    }
    if !(res_k.is_finite() && fc.is_finite()) {
        return Err(MevError::QuadratureFailure { estimate: f64::NAN, error: f64::INFINITY });
    }
    let mean = 0.5 * res_k;
    let mut res_asc = WGK[10] * (fc - mean).abs();
    for j in 0..10 {
        res_asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let value = res_k * half;
    res_abs *= half.abs();
    res_asc *= half.abs();
    let mut error = ((res_k - res_g) * half).abs();
    if res_asc != 0.0 && error != 0.0 {
        error = res_asc * (200.0 * error / res_asc).powf(1.5).min(1.0);
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        error = error.max(50.0 * f64::EPSILON * res_abs);
    }
    Ok(Segment { a, b, value, error })
}

/// Integrates `f` over the finite points `breaks` (sorted, at least two),
/// subdividing adaptively until the summed error estimate is at most `tolerance`.
pub fn integrate_piecewise<F: FnMut(f64) -> f64>(mut f: F, breaks: &[f64], tolerance: f64) -> Result<f64> {
    if !(tolerance > 0.0) {
        return Err(crate::error::invalid("quadrature tolerance must be positive"));
    }
    if breaks.len() < 2 || breaks.iter().any(|x| !x.is_finite()) {
        return Err(crate::error::invalid("quadrature needs finite limits"));
    }
    let mut live = Vec::with_capacity(64);
    // segments too narrow to split further; their error is final
    let mut done_value = 0.0;
    let mut done_error = 0.0;
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            live.push(gk21(&mut f, w[0], w[1])?);
        } else if w[1] < w[0] {
            return Err(crate::error::invalid("quadrature breakpoints must be sorted"));
        }
    }
    loop {
        let value: f64 = done_value + live.iter().map(|s| s.value).sum::<f64>();
        let error: f64 = done_error + live.iter().map(|s| s.error).sum::<f64>();
        if error <= tolerance || live.is_empty() {
            if error <= tolerance {
                return Ok(value);
            }
            return Err(MevError::QuadratureFailure { estimate: value, error });
        }
        if live.len() >= MAX_SUBDIVISIONS {
            return Err(MevError::QuadratureFailure { estimate: value, error });
        }
        let worst = live
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let seg = live.swap_remove(worst);
        let mid = 0.5 * (seg.a + seg.b);
        if mid <= seg.a || mid >= seg.b || (seg.b - seg.a) < 1e-14 * (1.0 + seg.a.abs().max(seg.b.abs())) {
            done_value += seg.value;
            done_error += seg.error;
            continue;
        }
        live.push(gk21(&mut f, seg.a, mid)?);
        live.push(gk21(&mut f, mid, seg.b)?);
    }
}

/// Adaptive quadrature of `f` over `[lower, upper]`; either limit may be infinite.
///
/// Infinite ranges are mapped onto finite ones (x = t/(1−t²) on the real
/// line, x = a ± t/(1−t) on half lines).
pub fn integrate_1d<F: FnMut(f64) -> f64>(mut f: F, lower: f64, upper: f64, tolerance: f64) -> Result<f64> {
    if lower.is_nan() || upper.is_nan() {
        return Err(crate::error::invalid("quadrature limits must not be NaN"));
    }
    if lower == upper {
        return Ok(0.0);
    }
    if lower > upper {
        return integrate_1d(f, upper, lower, tolerance).map(|v| -v);
    }
    match (lower.is_finite(), upper.is_finite()) {
        (true, true) => integrate_piecewise(f, &[lower, upper], tolerance),
        (false, false) => integrate_piecewise(
            |t| {
                let d = 1.0 - t * t;
                f(t / d) * (1.0 + t * t) / (d * d)
            },
            &[-1.0, 0.0, 1.0],
            tolerance,
        ),
        (true, false) => integrate_piecewise(
            |t| {
                let d = 1.0 - t;
                f(lower + t / d) / (d * d)
            },
            &[0.0, 1.0],
            tolerance,
        ),
        (false, true) => integrate_piecewise(
            |t| {
                let d = 1.0 - t;
                f(upper - t / d) / (d * d)
            },
            &[0.0, 1.0],
            tolerance,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::normal_pdf;

    #[test]
    fn examples() {
        let v = integrate_1d(normal_pdf, f64::NEG_INFINITY, f64::INFINITY, 1e-12).unwrap();
        assert!((v - 1.0).abs() < 1e-10, "{v}");
        let v = integrate_1d(|x| x * normal_pdf(x), f64::NEG_INFINITY, f64::INFINITY, 1e-12).unwrap();
        assert!(v.abs() < 1e-10, "{v}");
        let v = integrate_1d(|x| x * x, 0.0, 1.0, 1e-13).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn half_lines_and_reversed_limits() {
        let v = integrate_1d(normal_pdf, 0.0, f64::INFINITY, 1e-12).unwrap();
        assert!((v - 0.5).abs() < 1e-10);
        let v = integrate_1d(|x| (-x).exp(), f64::NEG_INFINITY, 0.0, 1e-12).unwrap_err();
        assert!(matches!(v, MevError::QuadratureFailure { .. }));
        let v = integrate_1d(|x| x.exp(), f64::NEG_INFINITY, 0.0, 1e-12).unwrap();
        assert!((v - 1.0).abs() < 1e-10);
        let v = integrate_1d(|x| x, 1.0, 0.0, 1e-12).unwrap();
        assert!((v + 0.5).abs() < 1e-14);
    }

    #[test]
    fn kinks_and_jumps() {
        let v = integrate_1d(|x: f64| x.abs(), -1.0, 2.0, 1e-10).unwrap();
        assert!((v - 2.5).abs() < 1e-10);
        let v = integrate_1d(|x| if x < 0.3 { 0.0 } else { 1.0 }, 0.0, 1.0, 1e-9).unwrap();
        assert!((v - 0.7).abs() < 1e-9);
    }

    #[test]
    fn non_convergence_reports_the_estimate() {
        match integrate_1d(|x: f64| 1.0 / x.sqrt().max(1e-300), 0.0, 1.0, 1e-15) {
            Err(MevError::QuadratureFailure { estimate, error }) => {
                assert!(estimate.is_finite() && error > 1e-15);
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }
}
