//! Text and CSV renderings of training and evaluation results.

use epimisr_core::pipeline::{EvalReport, StepRecord, SweepReport};

/// Aligned plain-text table, one row per scene plus the mean.
pub fn eval_table(r: &EvalReport) -> String {
    let header = ["scene", "psnr_misr", "psnr_sisr", "ssim", "ssim_sisr", "lr_cons"];
    let mut rows: Vec<[String; 6]> = r
        .per_scene
        .iter()
        .map(|s| {
            [
                s.scene_id.clone(),
                format!("{:.3}", s.psnr_misr),
                format!("{:.3}", s.psnr_sisr),
                format!("{:.4}", s.ssim),
                format!("{:.4}", s.ssim_sisr),
                format!("{:.3}", s.lr_consistency_psnr),
            ]
        })
        .collect();
    rows.push([
        "mean".into(),
        format!("{:.3}", r.psnr_misr),
        format!("{:.3}", r.psnr_sisr),
        format!("{:.4}", r.ssim),
        format!("{:.4}", r.ssim_sisr),
        format!("{:.3}", r.lr_consistency_psnr),
    ]);
    let widths: Vec<usize> = (0..6)
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        parts.join("  ") + "\n"
    };
    let mut out = line(header.to_vec());
    for r in &rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

pub fn loss_csv(log: &[StepRecord]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for r in log {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
    }
    out
}

/// One row per cell; the unperturbed baseline is repeated on every row.
pub fn sweep_csv(r: &SweepReport) -> String {
    let mut out = String::from("sigma_t,sigma_r,psnr,baseline,seeds\n");
    for c in &r.cells {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.sigma_t,
            c.sigma_r,
            c.psnr,
            r.baseline,
            c.per_seed.len()
        ));
    }
    out
}
