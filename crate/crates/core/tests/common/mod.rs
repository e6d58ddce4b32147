use std::fmt::Write as _;
use std::path::Path;

use ridgesvar::simulation::{simulate_svar, DgpPreset};

/// Four positive monthly level series `q,y,p,s` whose `100·ln` follows the
/// VAR(1) Monte Carlo design with non-Gaussian shocks.
pub fn write_synthetic_monthly(path: &Path, t: usize, seed: u64) {
    let panel = simulate_svar(&DgpPreset::McLagsCommonVolatility.spec(t), seed).unwrap();
    let y = panel.observations();
    let base = [460.0, 470.0, 450.0, 480.0];
    let mut out = String::from("date,q,y,p,s\n");
    for r in 0..y.nrows() {
        let (year, month) = (1974 + r / 12, r % 12 + 1);
        write!(out, "{year}-{month:02}").unwrap();
        for j in 0..4 {
            let level = ((base[j] + y[(r, j)] / 4.0) / 100.0).exp();
            write!(out, ",{level:.10}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out).unwrap();
}
