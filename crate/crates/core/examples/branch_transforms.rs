//! Print each branch's rewrite of one 3x3 kernel as a plain kernel.
//! Gradient branches sum to zero; aggregation does not.

use dgpnet::dgconv::BranchId;

fn show(w: &[f64; 9]) -> String {
    w.chunks(3)
        .map(|r| r.iter().map(|v| format!("{v:7.3}")).collect::<Vec<_>>().join(""))
        .collect::<Vec<_>>()
        .join("\n")
}

fn main() -> anyhow::Result<()> {
    let w = [0.2, -0.5, 0.1, 0.7, 0.3, -0.2, 0.4, 0.0, 0.6];
    let center = 3; // 1-based position of the idg reference sample
    for b in BranchId::ALL {
        let t = b.transform(&w, center)?;
        println!("{b} (sum {:+.3})\n{}\n", t.iter().sum::<f64>(), show(&t));
    }
    Ok(())
}
