//! Structured text and CSV emission for the experiment reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::pipeline::fidelity::FidelityReport;
use crate::pipeline::trainability::TrainabilityReport;
use crate::pipeline::Paths;

fn write_both(csv: &str, txt: &str, csv_path: &Path, txt_path: &Path) -> Result<()> {
    std::fs::write(csv_path, csv.as_bytes())?;
    std::fs::write(txt_path, txt.as_bytes())?;
    Ok(())
}

pub fn render_fidelity_csv(r: &FidelityReport) -> String {
    let mut out = String::from("arm,images,map,ap50,ap75,ffd\n");
    for row in &r.rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            row.arm, row.images, row.map, row.ap50, row.ap75, row.ffd
        );
    }
    out
}

pub fn render_fidelity_txt(r: &FidelityReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "layout fidelity report");
    let _ = writeln!(out, "seed: {}", r.seed);
    let _ = writeln!(out, "config: {}", r.config_hash);
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<10} {:>7} {:>8} {:>8} {:>8} {:>10}", "arm", "images", "mAP", "AP@0.5", "AP@0.75", "FFD");
    for row in &r.rows {
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>8.4} {:>8.4} {:>8.4} {:>10.4}",
            row.arm, row.images, row.map, row.ap50, row.ap75, row.ffd
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "arms: real = detector on real validation images (upper reference);");
    let _ = writeln!(out, "origin/easy/hard = generated with that attribute strategy.");
    out
}

pub fn write_fidelity(r: &FidelityReport, paths: &Paths) -> Result<()> {
    write_both(
        &render_fidelity_csv(r),
        &render_fidelity_txt(r),
        &paths.fidelity_csv(),
        &paths.fidelity_txt(),
    )
}

pub fn render_trainability_csv(r: &TrainabilityReport) -> String {
    let mut out = String::from("arm,images,map,ap50,ap75\n");
    for row in &r.rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6}",
            row.arm, row.images, row.map, row.ap50, row.ap75
        );
    }
    out
}

pub fn render_trainability_txt(r: &TrainabilityReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "trainability report");
    let _ = writeln!(out, "seed: {}", r.seed);
    let _ = writeln!(out, "config: {}", r.config_hash);
    let _ = writeln!(out, "detector arm config: {}", r.arm_config_hash);
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<12} {:>7} {:>8} {:>8} {:>8}", "arm", "images", "mAP", "AP@0.5", "AP@0.75");
    for row in &r.rows {
        let _ = writeln!(
            out,
            "{:<12} {:>7} {:>8.4} {:>8.4} {:>8.4}",
            row.arm, row.images, row.map, row.ap50, row.ap75
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "each real+X arm trains on the real subset plus one generated");
    let _ = writeln!(out, "image per real layout (strategy X), evaluated on held-out scenes.");
    out
}

pub fn write_trainability(r: &TrainabilityReport, paths: &Paths) -> Result<()> {
    write_both(
        &render_trainability_csv(r),
        &render_trainability_txt(r),
        &paths.trainability_csv(),
        &paths.trainability_txt(),
    )
}

/// Aggregate whatever artifacts exist under the workdir into one summary.
pub fn aggregate_report(paths: &Paths, config_hash: &str, seed: u64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "run report");
    let _ = writeln!(out, "seed: {seed}");
    let _ = writeln!(out, "config: {config_hash}");
    let mut section = |title: &str, path: &Path| {
        let _ = writeln!(out);
        let _ = writeln!(out, "== {title} ==");
        match std::fs::read_to_string(path) {
            Ok(text) => {
                let _ = writeln!(out, "{}", text.trim_end());
            }
            Err(_) => {
                let _ = writeln!(out, "(missing: {})", path.display());
            }
        }
    };
    section("detector", &paths.detector_map_csv());
    section("fidelity", &paths.fidelity_csv());
    section("trainability", &paths.trainability_csv());
    // Loss curve: first and last rows are enough for the summary.
    let _ = writeln!(out);
    let _ = writeln!(out, "== diffusion loss ==");
    match std::fs::read_to_string(paths.loss_csv()) {
        Ok(text) => {
            let lines: Vec<&str> = text.lines().collect();
            if lines.len() > 2 {
                let _ = writeln!(out, "{}", lines[0]);
                let _ = writeln!(out, "{}", lines[1]);
                let _ = writeln!(out, "...");
                let _ = writeln!(out, "{}", lines[lines.len() - 1]);
            } else {
                let _ = writeln!(out, "{}", text.trim_end());
            }
        }
        Err(_) => {
            let _ = writeln!(out, "(missing: {})", paths.loss_csv().display());
        }
    }
    out
}

pub fn write_report(paths: &Paths, config_hash: &str, seed: u64) -> Result<()> {
    let text = aggregate_report(paths, config_hash, seed);
    std::fs::write(paths.report_txt(), text.as_bytes())?;
    Ok(())
}
