//! Clear-sky irradiance proxy shared by the data generator and the PV
//! forecast features.

use chrono::{Datelike, NaiveDateTime, Timelike};

/// Site latitude in degrees (a subtropical island feeder).
pub const LATITUDE_DEG: f64 = 32.65;
/// Local clock hour of solar noon.
pub const SOLAR_NOON_HOUR: f64 = 13.0;

/// Sine of the solar elevation angle, clipped at 0.
pub fn sun_height(t: NaiveDateTime) -> f64 {
    let doy = t.ordinal() as f64;
    let hour = t.hour() as f64 + t.minute() as f64 / 60.0 + t.second() as f64 / 3600.0;
    let decl = 23.45f64.to_radians() * (2.0 * std::f64::consts::PI * (284.0 + doy) / 365.0).sin();
    let lat = LATITUDE_DEG.to_radians();
    let ha = (15.0 * (hour - SOLAR_NOON_HOUR)).to_radians();
    let s = lat.sin() * decl.sin() + lat.cos() * decl.cos() * ha.cos();
    s.max(0.0)
}

/// Clear-sky output per kWp of PV, in [0, 1]; zero at night.
pub fn clear_sky(t: NaiveDateTime) -> f64 {
    let h = sun_height(t);
    if h <= 0.0 {
        return 0.0;
    }
    // air-mass attenuation, normalised so the zenith sun gives 1.0
    let am = 1.0 / (h + 0.50572 * (h.asin().to_degrees() + 6.07995).powf(-1.6364));
    h * 0.7f64.powf(am.powf(0.678)) / 0.7
}
