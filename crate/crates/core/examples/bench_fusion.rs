//! Branched vs fused forward time and cost for the micro network.
//!
//! ```text
//! cargo run --release --example bench_fusion -- [HxW] [reps]
//! ```

use dgpnet::cli::{bench, parse_size};
use dgpnet::network::{DgpNetConfig, DgpNetParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let (h, w) = parse_size(&args.next().unwrap_or_else(|| "128x128".into()))?;
    let reps = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let net = DgpNetParams::<f32>::init(DgpNetConfig::micro(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let r = bench(&net, h, w, reps, 0)?;
    print!("{}", r.csv());
    println!("fused/branched time {:.3}", r.median[1] / r.median[0]);
    Ok(())
}
