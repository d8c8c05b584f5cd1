//! Degrade a synthetic image, train briefly, and write the low-resolution
//! input, bicubic upscale and network output as PNGs.
//!
//! ```text
//! cargo run --release --example super_resolve -- [out_dir] [iterations]
//! ```

use std::path::PathBuf;

use dgpnet::degrade::{clamp01, degrade, make_synthetic_hr, psnr, upsample_bicubic, write_image, SynthKind};
use dgpnet::network::fuse_network;
use dgpnet::train::{train, Dataset, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "sr_out".into()));
    let mut cfg = TrainConfig::micro();
    cfg.iterations = args.next().map(|s| s.parse()).transpose()?.unwrap_or(300);
    cfg.log_every = 0;
    std::fs::create_dir_all(&dir)?;

    let hr = make_synthetic_hr::<f32>(SynthKind::Mixed, 3, 96, 99)?;
    let lr = degrade(&hr, cfg.level, cfg.net.scale, &mut ChaCha8Rng::seed_from_u64(1))?;
    let outcome = train(&cfg, &Dataset::for_config(&cfg)?, None)?;
    let net = fuse_network(outcome.checkpoint.net.branched()?)?;
    let sr = clamp01(&net.forward(&lr)?);
    let bic = clamp01(&upsample_bicubic(&lr, cfg.net.scale)?);

    write_image(&dir.join("lr.png"), &lr)?;
    write_image(&dir.join("bicubic.png"), &bic)?;
    write_image(&dir.join("sr.png"), &sr)?;
    println!("bicubic {:.2} dB, network {:.2} dB", psnr(&bic, &hr, 1.0)?, psnr(&sr, &hr, 1.0)?);
    Ok(())
}
