//! Achievable-rate curves under fractional power control.
//!
//! A UE granted bandwidth `b` transmits at spectral density
//! `min(γ, P/b)` W/Hz: fractional power control caps the density at `γ`,
//! and the device peak power caps the total at `P`. With channel gain `G`
//! and interference-plus-noise density `I` at the receiver, the achievable
//! rate is
//!
//! ```text
//! h(b) = b · ψ( G · min(γ·b, P) / (I·b) )
//! ```
//!
//! where `ψ` maps SINR to spectral efficiency. `h` is linear with slope
//! `ψ(Gγ/I)` on `[0, P/γ]` and strictly concave beyond the power-limit
//! bandwidth `P/γ`, where extra bandwidth dilutes the fixed power budget.
//! The allocators consume `h`, its subdifferential, and its inverse.

use crate::{require_finite, Error, Result};

/// Bandwidth ceiling for [`rate_inverse`], as a multiple of the
/// power-limit bandwidth `P/γ`. Rates that would need more than this are
/// reported unachievable instead of chasing the log tail of `h`.
pub const RATE_INVERSE_CEILING_FACTOR: f64 = 1e4;

/// Relative tolerance on the inverted rate in [`rate_inverse`].
pub const RATE_INVERSE_REL_TOL: f64 = 1e-9;

/// Spectral-efficiency map `ψ`: SINR to bits/s/Hz. Implementations must be
/// increasing, concave and differentiable on `[0, ∞)` with `ψ(0) = 0`.
pub trait SpectralEfficiency: Send + Sync {
    fn eval(&self, sinr: f64) -> f64;
    fn deriv(&self, sinr: f64) -> f64;
}

/// Shannon capacity, `ψ(s) = log2(1 + s)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Shannon;

impl SpectralEfficiency for Shannon {
    fn eval(&self, sinr: f64) -> f64 {
        (1.0 + sinr).log2()
    }

    fn deriv(&self, sinr: f64) -> f64 {
        1.0 / ((1.0 + sinr) * std::f64::consts::LN_2)
    }
}

/// Shannon capacity scaled by an implementation-loss factor in (0, 1].
#[derive(Debug, Clone, Copy)]
pub struct ScaledShannon {
    pub factor: f64,
}

impl SpectralEfficiency for ScaledShannon {
    fn eval(&self, sinr: f64) -> f64 {
        self.factor * (1.0 + sinr).log2()
    }

    fn deriv(&self, sinr: f64) -> f64 {
        self.factor / ((1.0 + sinr) * std::f64::consts::LN_2)
    }
}

/// Physical-layer parameters of one uplink.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UeLink {
    /// Channel power gain G (linear, dimensionless).
    pub gain: f64,
    /// PSD cap γ from fractional power control, W/Hz.
    pub psd_cap: f64,
    /// Device peak transmit power P, W.
    pub peak_power: f64,
    /// Interference-plus-noise density I at the receiver, W/Hz.
    pub interference_psd: f64,
}

impl UeLink {
    pub fn new(gain: f64, psd_cap: f64, peak_power: f64, interference_psd: f64) -> Result<Self> {
        let check = |name: &'static str, v: f64| -> Result<f64> {
            let v = require_finite(name, v).map_err(|_| Error::InvalidLink { name, value: v })?;
            if v > 0.0 {
                Ok(v)
            } else {
                Err(Error::InvalidLink { name, value: v })
            }
        };
        Ok(Self {
            gain: check("gain", gain)?,
            psd_cap: check("psd_cap", psd_cap)?,
            peak_power: check("peak_power", peak_power)?,
            interference_psd: check("interference_psd", interference_psd)?,
        })
    }

    /// Bandwidth beyond which the peak power, not the PSD cap, binds.
    pub fn power_limit_bw(&self) -> f64 {
        self.peak_power / self.psd_cap
    }

    /// SINR in the PSD-limited (linear) region: `Gγ/I`.
    pub fn psd_sinr(&self) -> f64 {
        self.gain * self.psd_cap / self.interference_psd
    }

    /// SINR when the peak power is spread over bandwidth `b`: `GP/(I·b)`.
    pub fn peak_sinr(&self, b: f64) -> f64 {
        self.gain * self.peak_power / (self.interference_psd * b)
    }
}

/// Closed subdifferential of a concave scalar function, `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeRange {
    pub lo: f64,
    pub hi: f64,
}

impl SlopeRange {
    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// Achievable rate `h(b)` in bits/s over bandwidth `b` Hz.
pub fn rate(link: &UeLink, psi: &dyn SpectralEfficiency, b: f64) -> Result<f64> {
    if !(b >= 0.0) {
        return Err(Error::NegativeBandwidth(b));
    }
    if b == 0.0 {
        return Ok(0.0);
    }
    let sinr = if b <= link.power_limit_bw() {
        link.psd_sinr()
    } else {
        link.peak_sinr(b)
    };
    Ok(b * psi.eval(sinr))
}

/// Subdifferential of `h` at `b`.
///
/// Linear region (`b < P/γ`): the single slope `ψ(Gγ/I)`. Power-limited
/// region (`b > P/γ`): the single slope `ψ(s) − s·ψ′(s)` with
/// `s = GP/(I·b)`. At the kink `b = P/γ` the subdifferential is the closed
/// interval between the right and left limits of those expressions, which
/// coincide in `s = Gγ/I`.
pub fn rate_subdiff(link: &UeLink, psi: &dyn SpectralEfficiency, b: f64) -> Result<SlopeRange> {
    if !(b >= 0.0) {
        return Err(Error::NegativeBandwidth(b));
    }
    let b_kink = link.power_limit_bw();
    if b < b_kink {
        Ok(SlopeRange::point(psi.eval(link.psd_sinr())))
    } else if b > b_kink {
        let s = link.peak_sinr(b);
        Ok(SlopeRange::point(psi.eval(s) - s * psi.deriv(s)))
    } else {
        let s = link.psd_sinr();
        Ok(SlopeRange {
            lo: psi.eval(s) - s * psi.deriv(s),
            hi: psi.eval(s),
        })
    }
}

/// Smallest bandwidth `b` with `h(b) = r`, to relative tolerance
/// [`RATE_INVERSE_REL_TOL`]. Closed form in the linear region; bisection in
/// the power-limited region. Rates beyond
/// `h(RATE_INVERSE_CEILING_FACTOR · P/γ)` error out as unachievable.
pub fn rate_inverse(link: &UeLink, psi: &dyn SpectralEfficiency, r: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::NegativeRate(r));
    }
    if r == 0.0 {
        return Ok(0.0);
    }
    let slope0 = psi.eval(link.psd_sinr());
    let b_kink = link.power_limit_bw();
    let b_lin = r / slope0;
    if b_lin <= b_kink {
        return Ok(b_lin);
    }
    let ceiling = RATE_INVERSE_CEILING_FACTOR * b_kink;
    if rate(link, psi, ceiling)? < r {
        return Err(Error::UnachievableRate { rate: r, ceiling });
    }
    // h is strictly increasing past the kink, so plain bisection is exact
    // enough; 200 iterations exhausts f64 resolution long before the cap.
    let (mut lo, mut hi) = (b_kink, ceiling);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let h = rate(link, psi, mid)?;
        if (h - r).abs() <= RATE_INVERSE_REL_TOL * r {
            return Ok(mid);
        }
        if h < r {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fig3_user1() -> UeLink {
        // SINR 0.5 dB in the PSD-limited region, kink at 5 RBs = 900 kHz.
        let gamma = 10f64.powf(0.05);
        UeLink::new(1.0, gamma, gamma * 900e3, 1.0).unwrap()
    }

    fn fig3_user2() -> UeLink {
        // SINR 4 dB, kink at 8 RBs = 1440 kHz.
        let gamma = 10f64.powf(0.4);
        UeLink::new(1.0, gamma, gamma * 1440e3, 1.0).unwrap()
    }

    #[test]
    fn shannon_values() {
        let psi = Shannon;
        assert_eq!(psi.eval(0.0), 0.0);
        assert_relative_eq!(psi.eval(1.0), 1.0);
        assert_relative_eq!(psi.eval(3.0), 2.0);
    }

    #[test]
    fn rejects_nonpositive_link_parameters() {
        assert!(UeLink::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(UeLink::new(1.0, -1.0, 1.0, 1.0).is_err());
        assert!(UeLink::new(1.0, 1.0, f64::NAN, 1.0).is_err());
        assert!(UeLink::new(1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn rate_is_linear_then_power_limited() {
        let link = fig3_user1();
        let psi = Shannon;
        // Frozen by direct evaluation: 900e3 * log2(1 + 10^0.05).
        let at_kink = rate(&link, &psi, 900e3).unwrap();
        assert_relative_eq!(at_kink, 976_893.4825372784, max_relative = 1e-12);
        // Linear below the kink.
        assert_relative_eq!(
            rate(&link, &psi, 450e3).unwrap(),
            0.5 * at_kink,
            max_relative = 1e-12
        );
        // Concave (sublinear) above it.
        assert!(rate(&link, &psi, 1800e3).unwrap() < 2.0 * at_kink);
        assert!(rate(&link, &psi, 1800e3).unwrap() > at_kink);
    }

    #[test]
    fn rate_zero_bandwidth_and_negative() {
        let link = fig3_user1();
        assert_eq!(rate(&link, &Shannon, 0.0).unwrap(), 0.0);
        assert!(matches!(
            rate(&link, &Shannon, -1.0),
            Err(Error::NegativeBandwidth(_))
        ));
    }

    #[test]
    fn subdiff_linear_region_is_constant() {
        let link = fig3_user2();
        let d = rate_subdiff(&link, &Shannon, 700e3).unwrap();
        // Frozen by direct evaluation: log2(1 + 10^0.4).
        assert_relative_eq!(d.lo, 1.8122461913006254, max_relative = 1e-12);
        assert_eq!(d.lo, d.hi);
    }

    #[test]
    fn subdiff_at_kink_is_the_limit_interval() {
        let link = fig3_user1();
        let at = rate_subdiff(&link, &Shannon, 900e3).unwrap();
        let below = rate_subdiff(&link, &Shannon, 900e3 - 1.0).unwrap();
        let above = rate_subdiff(&link, &Shannon, 900e3 + 1.0).unwrap();
        assert_relative_eq!(at.hi, below.hi, max_relative = 1e-12);
        // One Hz past the kink the concave branch has already moved by a
        // little over 1e-6 relative; this checks continuity, not slope.
        assert_relative_eq!(at.lo, above.lo, max_relative = 1e-5);
        assert!(at.lo < at.hi);
        // Frozen: ψ(s) − s·ψ'(s) at s = 10^0.05.
        assert_relative_eq!(at.lo, 0.3226113864245794, max_relative = 1e-12);
    }

    #[test]
    fn subdiff_matches_finite_differences_of_rate() {
        let link = fig3_user2();
        let psi = Shannon;
        // Central differences away from the kink.
        for &b in &[0.2e6, 1.0e6, 1.6e6, 2.5e6, 8e6] {
            let eps = 1e-4 * b;
            let fd = (rate(&link, &psi, b + eps).unwrap() - rate(&link, &psi, b - eps).unwrap())
                / (2.0 * eps);
            let d = rate_subdiff(&link, &psi, b).unwrap();
            assert_relative_eq!(d.lo, fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn psi_deriv_matches_finite_differences() {
        for psi in [
            &Shannon as &dyn SpectralEfficiency,
            &ScaledShannon { factor: 0.75 },
        ] {
            // Log-spaced SINR grid.
            for k in -6..=6 {
                let s = 10f64.powi(k);
                let eps = 1e-6 * s.max(1e-3);
                let fd = (psi.eval(s + eps) - psi.eval(s - eps)) / (2.0 * eps);
                assert_relative_eq!(psi.deriv(s), fd, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn inverse_round_trip_linear_and_power_limited() {
        let link = fig3_user1();
        let psi = Shannon;
        for &b in &[1.0, 1e3, 450e3, 900e3, 1.2e6, 3e6, 2e7] {
            let r = rate(&link, &psi, b).unwrap();
            let b_back = rate_inverse(&link, &psi, r).unwrap();
            let r_back = rate(&link, &psi, b_back).unwrap();
            assert_relative_eq!(r_back, r, max_relative = 1e-8);
        }
    }

    #[test]
    fn inverse_of_zero_and_unachievable() {
        let link = fig3_user1();
        assert_eq!(rate_inverse(&link, &Shannon, 0.0).unwrap(), 0.0);
        let ceiling = RATE_INVERSE_CEILING_FACTOR * link.power_limit_bw();
        let r_max = rate(&link, &Shannon, ceiling).unwrap();
        assert!(matches!(
            rate_inverse(&link, &Shannon, 2.0 * r_max),
            Err(Error::UnachievableRate { .. })
        ));
    }

    #[test]
    fn subdiff_is_nonincreasing_in_bandwidth() {
        let link = fig3_user2();
        let mut prev = f64::INFINITY;
        for i in 1..200 {
            let b = 25e3 * i as f64;
            let d = rate_subdiff(&link, &Shannon, b).unwrap();
            assert!(d.hi <= prev + 1e-12);
            assert!(d.lo <= d.hi);
            prev = d.lo;
        }
    }
}
