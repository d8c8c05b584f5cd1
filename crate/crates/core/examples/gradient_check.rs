//! Central-difference check of every layer type and of the whole micro
//! network.

use dgpnet::network::DgpNetConfig;
use dgpnet::train::gradcheck::{check_all_layer_types, FdOptions};
use dgpnet::verify::gradient_network;

fn main() -> anyhow::Result<()> {
    let r = check_all_layer_types(0, &FdOptions::default())?;
    for g in &r.groups {
        println!("{:<28} {:>5} entries  worst {:.2e}", g.name, g.checked, g.worst_rel);
    }
    println!("{}", gradient_network(DgpNetConfig::micro(), 0, 4)?);
    Ok(())
}
