//! Runs a scenario file end to end and writes the results. Defaults to the
//! bundled reference scenario, which trains the forecasters first and takes
//! a minute or two.
//!
//! cargo run --release --example reference_scenario -- [scenario.toml] [out-dir]

use lem_guard::cli_io::emit_results;
use lem_guard::scenario::{load_config, run_timeline};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let cfg_path = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/data/reference.toml").into());
    let out = args.next().unwrap_or_else(|| "out/reference".into());
    let cfg = load_config(&cfg_path)?;
    let r = run_timeline(&cfg)?;
    let s = &r.summary;
    println!("attack {:?}, flagged {:?}, mitigated {:?}", s.attack_onset, s.flag_time, s.mitigation_time);
    println!(
        "import at {}: nominal {:.2} kW, unmitigated {:.2} kW, mitigated {:.2} kW ({:.1}% lower)",
        s.snapshot_time, s.nominal_total_kw, s.unmitigated_total_kw, s.mitigated_total_kw, s.reduction_pct
    );
    emit_results(&r, &out)?;
    println!("results in {out}");
    Ok(())
}
