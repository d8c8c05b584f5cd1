//! Collapse random DGConv layers into single kernels and compare outputs.
//!
//! ```text
//! cargo run --release --example fusion_equivalence -- [layers] [seed]
//! ```

use dgpnet::verify::fusion_equivalence;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let layers = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    for c in [fusion_equivalence::<f64>(layers, seed)?, fusion_equivalence::<f32>(layers, seed)?] {
        println!("{c} (tolerance {:e})", c.tol);
    }
    Ok(())
}
