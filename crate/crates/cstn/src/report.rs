//! CSV and aligned-text renderings of evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{self, Result};
use crate::eval::EvalReport;

pub const CSV_HEADER: &str = "protocol,method,domain,scan,mse,mae,ssim";

/// One row per scan, method and domain, then `mean` and `std` rows.
pub fn csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        for row in &r.rows {
            let tag = format!("{},{},{}", r.protocol, row.method, row.domain.name());
            for (i, id) in row.mse.ids.iter().enumerate() {
                writeln!(s, "{tag},{id},{},{},{}", row.mse.values[i], row.mae.values[i], row.ssim.values[i]).unwrap();
            }
            writeln!(s, "{tag},mean,{},{},{}", row.mse.mean, row.mae.mean, row.ssim.mean).unwrap();
            writeln!(s, "{tag},std,{},{},{}", row.mse.std, row.mae.std, row.ssim.std).unwrap();
        }
    }
    s
}

/// Summary table: one line per protocol, method and domain, with MSE and
/// MAE as `mean ± std` and SSIM ×100.
pub fn text(reports: &[EvalReport]) -> String {
    let mut lines = vec![[
        "protocol".to_string(),
        "method".into(),
        "domain".into(),
        "scans".into(),
        "MSE".into(),
        "MAE".into(),
        "SSIM (x100)".into(),
    ]];
    for r in reports {
        for row in &r.rows {
            lines.push([
                format!("{}->{}x{}", r.protocol, r.height, r.width),
                row.method.clone(),
                row.domain.name().into(),
                row.mse.values.len().to_string(),
                row.mse.summary(1.0, 6),
                row.mae.summary(1.0, 6),
                row.ssim.summary(100.0, 2),
            ]);
        }
    }
    let widths: Vec<usize> = (0..7).map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap()).collect();
    let mut s = String::new();
    for l in &lines {
        let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        writeln!(s, "{}", cells.join("  ").trim_end()).unwrap();
    }
    s
}

/// Writes `report.csv` and `report.txt` into `dir`.
pub fn write(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    error::write(&dir.join("report.csv"), csv(reports).as_bytes())?;
    error::write(&dir.join("report.txt"), text(reports).as_bytes())
}
