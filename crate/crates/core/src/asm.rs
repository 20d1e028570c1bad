//! Atmospheric scattering model.
//!
//! `I = t * J + (1 - t) * A` with `t = exp(-beta * z)`, plus the closed form for
//! two hazes applied in sequence (residual haze in the "clean" capture, then
//! synthetic haze on top of it). Every function is generic over [`Real`] so
//! the same code serves as the `f32` production path and the `f64` oracle.

use crate::image::clamp01;
use crate::{DepthMap, Error, HazeParams, Image, Real, Result, TransmissionMap};

/// Default lower bound on transmission when inverting the model.
pub const DEFAULT_T_FLOOR: f64 = 1e-3;

/// `exp(-beta * z)` per pixel.
pub fn transmission<T: Real>(beta: f64, z: &DepthMap<T>) -> Result<TransmissionMap<T>> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::InvalidInput(format!(
            "beta must be finite and >= 0, got {beta}"
        )));
    }
    let b = T::from_f64c(beta);
    let tiny = T::min_positive_value();
    let data = z.data().iter().map(|&d| (-b * d).exp().max(tiny)).collect();
    Ok(TransmissionMap {
        height: z.height(),
        width: z.width(),
        data,
    })
}

fn check_match<T: Real>(op: &'static str, img: &Image<T>, z: &DepthMap<T>) -> Result<()> {
    if img.height() != z.height() || img.width() != z.width() {
        return Err(Error::shape(
            op,
            format!(
                "image {}x{} vs depth {}x{}",
                img.height(),
                img.width(),
                z.height(),
                z.width()
            ),
        ));
    }
    Ok(())
}

fn airlight<T: Real>(p: &HazeParams) -> [T; 3] {
    p.airlight.map(T::from_f64c)
}

/// Hazes `clean` with a single scattering layer.
pub fn apply_asm<T: Real>(clean: &Image<T>, z: &DepthMap<T>, params: &HazeParams) -> Result<Image<T>> {
    check_match("apply_asm", clean, z)?;
    params.validate()?;
    let t = transmission(params.beta, z)?;
    let a = airlight::<T>(params);
    let mut out = Vec::with_capacity(clean.data().len());
    for (px, &tp) in clean.data().chunks_exact(3).zip(t.data()) {
        for c in 0..3 {
            out.push(clamp01(tp * px[c] + (T::one() - tp) * a[c]));
        }
    }
    Ok(Image::from_raw_unchecked(clean.height(), clean.width(), out))
}

/// Algebraic inverse of [`apply_asm`], with transmission floored at `t_floor`
/// and the result clamped into `[0, 1]`.
pub fn invert_asm<T: Real>(
    hazy: &Image<T>,
    z: &DepthMap<T>,
    params: &HazeParams,
    t_floor: f64,
) -> Result<Image<T>> {
    if !(t_floor > 0.0) || !t_floor.is_finite() {
        return Err(Error::InvalidInput(format!(
            "t_floor must be > 0, got {t_floor}"
        )));
    }
    check_match("invert_asm", hazy, z)?;
    params.validate()?;
    let t = transmission(params.beta, z)?;
    let a = airlight::<T>(params);
    let floor = T::from_f64c(t_floor);
    let mut out = Vec::with_capacity(hazy.data().len());
    for (px, &tp) in hazy.data().chunks_exact(3).zip(t.data()) {
        let denom = tp.max(floor);
        for c in 0..3 {
            out.push(clamp01((px[c] - (T::one() - tp) * a[c]) / denom));
        }
    }
    Ok(Image::from_raw_unchecked(hazy.height(), hazy.width(), out))
}

/// Residual haze (`clean_params`) followed by synthetic haze (`synth_params`),
/// evaluated in one pass:
///
/// `e^{-(bh+bc) z} J + e^{-bh z} (1 - e^{-bc z}) Ac + (1 - e^{-bh z}) Ah`
pub fn apply_double_asm<T: Real>(
    ideal_clean: &Image<T>,
    z: &DepthMap<T>,
    clean_params: &HazeParams,
    synth_params: &HazeParams,
) -> Result<Image<T>> {
    check_match("apply_double_asm", ideal_clean, z)?;
    clean_params.validate()?;
    synth_params.validate()?;
    let bc = T::from_f64c(clean_params.beta);
    let bh = T::from_f64c(synth_params.beta);
    let ac = airlight::<T>(clean_params);
    let ah = airlight::<T>(synth_params);
    let one = T::one();
    let mut out = Vec::with_capacity(ideal_clean.data().len());
    for (px, &d) in ideal_clean.data().chunks_exact(3).zip(z.data()) {
        let th = (-bh * d).exp();
        let tc = (-bc * d).exp();
        let t_total = (-(bh + bc) * d).exp();
        for c in 0..3 {
            out.push(clamp01(t_total * px[c] + th * (one - tc) * ac[c] + (one - th) * ah[c]));
        }
    }
    Ok(Image::from_raw_unchecked(ideal_clean.height(), ideal_clean.width(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn img64(v: f64) -> Image<f64> {
        Image::filled(8, 8, [v; 3]).unwrap()
    }

    fn depth64(v: f64) -> DepthMap<f64> {
        DepthMap::filled(8, 8, v).unwrap()
    }

    #[test]
    fn transmission_examples() {
        let t = transmission(0.0, &depth64(1.7)).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
        let t = transmission(0.5, &depth64(2.0)).unwrap();
        assert!(t.data().iter().all(|&v| (v - 0.367_879_441_171_442_3).abs() < 1e-12));
        let t = transmission(0.3, &depth64(1.0)).unwrap();
        assert!(t.data().iter().all(|&v| (v - 0.740_818_220_681_717_8).abs() < 1e-12));
    }

    #[test]
    fn transmission_rejects_bad_beta() {
        assert!(transmission(f64::NAN, &depth64(1.0)).is_err());
        assert!(transmission(f64::INFINITY, &depth64(1.0)).is_err());
        assert!(transmission(-0.1, &depth64(1.0)).is_err());
    }

    #[test]
    fn apply_asm_examples() {
        let j = img64(0.37);
        let out = apply_asm(&j, &depth64(2.0), &HazeParams::new(0.0, [0.9, 0.1, 0.5]).unwrap()).unwrap();
        assert_eq!(out, j);

        let a = [0.8, 0.7, 0.9];
        let j = Image::filled(8, 8, a).unwrap();
        let out = apply_asm(&j, &depth64(2.5), &HazeParams::new(1.3, a).unwrap()).unwrap();
        for (o, e) in out.data().iter().zip(j.data()) {
            assert_abs_diff_eq!(*o, *e, epsilon = 1e-15);
        }

        let out = apply_asm(&img64(0.2), &depth64(1.0), &HazeParams::new(0.5, [1.0; 3]).unwrap()).unwrap();
        let expect = (-0.5f64).exp() * 0.2 + (1.0 - (-0.5f64).exp());
        assert_abs_diff_eq!(expect, 0.514_775, epsilon = 1e-6);
        assert!(out.data().iter().all(|&v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn apply_asm_dimension_mismatch() {
        let j = Image::<f64>::filled(8, 9, [0.5; 3]).unwrap();
        let err = apply_asm(&j, &depth64(1.0), &HazeParams::clear()).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "apply_asm", .. }));
    }

    #[test]
    fn invert_asm_examples() {
        let p = HazeParams::new(0.5, [1.0; 3]).unwrap();
        let out = invert_asm(&img64(0.514_775), &depth64(1.0), &p, DEFAULT_T_FLOOR).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.2).abs() < 2e-6));

        let hazy = img64(0.61);
        let out = invert_asm(&hazy, &depth64(3.0), &HazeParams::clear(), DEFAULT_T_FLOOR).unwrap();
        assert_eq!(out, hazy);

        assert!(invert_asm(&hazy, &depth64(1.0), &p, 0.0).is_err());
        assert!(invert_asm(&hazy, &depth64(1.0), &p, -1.0).is_err());
    }

    #[test]
    fn double_asm_example() {
        let clean = HazeParams::new(0.5, [0.8; 3]).unwrap();
        let synth = HazeParams::new(0.3, [1.0; 3]).unwrap();
        let out = apply_double_asm(&img64(0.2), &depth64(1.0), &clean, &synth).unwrap();
        let nested = apply_asm(
            &apply_asm(&img64(0.2), &depth64(1.0), &clean).unwrap(),
            &depth64(1.0),
            &synth,
        )
        .unwrap();
        // 0.449329*0.2 + 0.740818*0.393469*0.8 + 0.259182*1.0
        let by_hand = (-0.8f64).exp() * 0.2
            + (-0.3f64).exp() * (1.0 - (-0.5f64).exp()) * 0.8
            + (1.0 - (-0.3f64).exp());
        assert_abs_diff_eq!(by_hand, 0.582_239, epsilon = 1e-6);
        for (a, b) in out.data().iter().zip(nested.data()) {
            assert_abs_diff_eq!(*a, by_hand, epsilon = 1e-12);
            assert_abs_diff_eq!(*b, by_hand, epsilon = 1e-12);
        }
    }

    #[test]
    fn double_asm_degenerates_to_single() {
        let j = Image::from_fn(8, 8, |y, x, c| ((y * 8 + x + c) as f64) / 70.0).unwrap();
        let z = DepthMap::new(8, 8, (0..64).map(|i| 0.5 + i as f64 / 30.0).collect()).unwrap();
        let clean = HazeParams::new(0.12, [0.9, 0.8, 0.85]).unwrap();
        let synth = HazeParams::new(0.9, [0.75, 0.95, 1.0]).unwrap();
        let zero_c = HazeParams { beta: 0.0, ..clean };
        let zero_h = HazeParams { beta: 0.0, ..synth };
        let a = apply_double_asm(&j, &z, &zero_c, &synth).unwrap();
        let b = apply_asm(&j, &z, &synth).unwrap();
        let c = apply_double_asm(&j, &z, &clean, &zero_h).unwrap();
        let d = apply_asm(&j, &z, &clean).unwrap();
        for i in 0..a.data().len() {
            assert_abs_diff_eq!(a.data()[i], b.data()[i], epsilon = 1e-15);
            assert_abs_diff_eq!(c.data()[i], d.data()[i], epsilon = 1e-15);
        }
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, HazeParams, HazeParams)> {
        let params = || {
            (0.0f64..2.0, prop::array::uniform3(0.0f64..=1.0))
                .prop_map(|(beta, airlight)| HazeParams { beta, airlight })
        };
        (
            prop::collection::vec(0.0f64..=1.0, 8 * 8 * 3),
            prop::collection::vec(0.1f64..4.0, 8 * 8),
            params(),
            params(),
        )
    }

    proptest! {
        #[test]
        fn composition_identity((j, z, pc, ph) in arb_case()) {
            let j64 = Image::new(8, 8, j).unwrap();
            let z64 = DepthMap::new(8, 8, z).unwrap();
            let direct = apply_double_asm(&j64, &z64, &pc, &ph).unwrap();
            let nested = apply_asm(&apply_asm(&j64, &z64, &pc).unwrap(), &z64, &ph).unwrap();
            for (a, b) in direct.data().iter().zip(nested.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            let (j32, z32) = (j64.cast::<f32>(), z64.cast::<f32>());
            let direct = apply_double_asm(&j32, &z32, &pc, &ph).unwrap();
            let nested = apply_asm(&apply_asm(&j32, &z32, &pc).unwrap(), &z32, &ph).unwrap();
            for (a, b) in direct.data().iter().zip(nested.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn more_scattering_moves_toward_airlight(
            (j, z, p, _) in arb_case(),
            extra in 0.01f64..1.0,
        ) {
            let j = Image::new(8, 8, j).unwrap();
            let z = DepthMap::new(8, 8, z).unwrap();
            let thicker = HazeParams { beta: p.beta + extra, ..p };
            let lo = apply_asm(&j, &z, &p).unwrap();
            let hi = apply_asm(&j, &z, &thicker).unwrap();
            for (i, (l, h)) in lo.data().iter().zip(hi.data()).enumerate() {
                let a = p.airlight[i % 3];
                prop_assert!((h - a).abs() <= (l - a).abs() + 1e-15);
            }
        }

        #[test]
        fn transmission_bounded_and_decreasing(beta in 0.0f64..5.0, d in 0.1f64..5.0, step in 0.01f64..1.0) {
            let t = |b: f64, d: f64| transmission(b, &depth64(d)).unwrap().data()[0];
            let base = t(beta, d);
            prop_assert!(base > 0.0 && base <= 1.0);
            prop_assert!(t(beta + step, d) < base);
            if beta > 0.0 {
                prop_assert!(t(beta, d + step) < base);
            }
        }

        #[test]
        fn invert_round_trip((j, z, p, _) in arb_case()) {
            // Keep transmission >= 0.05 so no floor or clamp activates.
            let z: Vec<f64> = z.iter().map(|d| d.min(1.4)).collect();
            let p = HazeParams { beta: p.beta.min(2.0), ..p };
            let j = Image::new(8, 8, j).unwrap();
            let z = DepthMap::new(8, 8, z).unwrap();
            let hazy = apply_asm(&j, &z, &p).unwrap();
            let back = invert_asm(&hazy, &z, &p, DEFAULT_T_FLOOR).unwrap();
            let mse = back.data().iter().zip(j.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                / j.data().len() as f64;
            let psnr = if mse == 0.0 { 100.0 } else { -10.0 * mse.log10() };
            prop_assert!(psnr >= 60.0, "psnr {psnr}");
        }
    }
}
