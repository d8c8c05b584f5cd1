//! Bicubic baseline PSNR at each degradation level.

use dgpnet::degrade::{bicubic_baseline_psnr, make_pairs, Level, PairSpec, SynthKind};

fn main() -> anyhow::Result<()> {
    println!("level,blur_sigma,noise_sigma,rounds,bicubic_psnr");
    for level in Level::ALL {
        let spec = PairSpec {
            kind: SynthKind::Mixed,
            channels: 3,
            hr_size: 64,
            count: 50,
            level,
            scale: 2,
            seed: 7,
        };
        let set = make_pairs::<f32>(&spec)?;
        let p = level.params();
        println!(
            "{level},{},{},{},{:.3}",
            p.blur_sigma,
            p.noise_sigma,
            p.rounds,
            bicubic_baseline_psnr(&set)?
        );
    }
    Ok(())
}
