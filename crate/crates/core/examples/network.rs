//! Loads the bundled 88-bus feeder, checks its topology and prints the size
//! and sparsity of the three-phase admittance matrix.

use lem_guard::netmodel::{build_admittance, load_network, validate_topology};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path =
        std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/data/feeder88.toml").into());
    let net = load_network(&path)?;
    println!("{} buses, {} lines, base {} kVA / {} V", net.len(), net.lines().len(), net.base_kva(), net.base_v());
    println!("topology: {}", validate_topology(net.buses(), net.lines()));

    let y = build_admittance(&net)?;
    let nonzero = y.iter().filter(|v| v.norm() > 0.0).count();
    println!("Y is {}x{} with {nonzero} nonzero entries", y.nrows(), y.ncols());
    Ok(())
}
