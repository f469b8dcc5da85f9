//! Node-level detection on a PV series whose output drops to zero for an
//! hour at 12:30 while the forecast expects normal output.

use chrono::{Duration, NaiveDate};
use lem_guard::detect::{detect_node, ResidualSeries, Thresholds};
use lem_guard::forecast::Target;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t0 = NaiveDate::from_ymd_opt(2024, 6, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let times: Vec<_> = (0..1440).map(|i| t0 + Duration::minutes(i)).collect();
    let expected: Vec<f64> = (0..1440)
        .map(|i| {
            let h = i as f64 / 60.0;
            (3.0 * (std::f64::consts::PI * (h - 6.0) / 14.0).sin()).max(0.0)
        })
        .collect();
    let measured: Vec<f64> = expected
        .iter()
        .enumerate()
        .map(
            |(i, e)| {
                if (750..810).contains(&i) {
                    0.0
                } else {
                    e * (1.0 + 0.03 * ((i * 7919 % 13) as f64 - 6.0) / 6.0)
                }
            },
        )
        .collect();
    let res = ResidualSeries {
        node_id: 17,
        target: Target::Pv,
        times,
        residual: measured.iter().zip(&expected).map(|(m, e)| m - e).collect(),
        scale: expected.iter().map(|e| 0.1 * e).collect(),
    };
    let th = Thresholds::default();
    let flags = detect_node(&res, th.k, th.m, th.scale_floor_kw)?;
    for f in &flags.flags {
        println!("node {} flagged at {} for {} min", flags.node_id, f.onset.as_deref().unwrap_or("?"), f.steps);
    }
    Ok(())
}
