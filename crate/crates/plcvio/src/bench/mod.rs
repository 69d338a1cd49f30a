//! Benchmark layer: the pipeline-variant matrix, Monte-Carlo campaigns,
//! error metrics, report emission, and the command-line interface.

pub mod campaign;
pub mod cli;
pub mod metrics;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::filter::AlgorithmVariant;

pub use campaign::{run_campaign, run_variant, CampaignConfig, RobotReport, RunReport, TrajectorySource};

/// The five benchmark pipelines.
///
/// | name        | independent features | common features |
/// |-------------|----------------------|-----------------|
/// | P-VIO       | points               | —               |
/// | PL-VIO      | points + lines       | —               |
/// | P-CVIO      | points               | points          |
/// | IPL-CP-CVIO | points + lines       | points          |
/// | PL-CVIO     | points + lines       | points + lines  |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantName {
    PVio,
    PlVio,
    PCvio,
    IplCpCvio,
    PlCvio,
}

impl VariantName {
    pub const ALL: [VariantName; 5] = [
        VariantName::PVio,
        VariantName::PlVio,
        VariantName::PCvio,
        VariantName::IplCpCvio,
        VariantName::PlCvio,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            VariantName::PVio => "P-VIO",
            VariantName::PlVio => "PL-VIO",
            VariantName::PCvio => "P-CVIO",
            VariantName::IplCpCvio => "IPL-CP-CVIO",
            VariantName::PlCvio => "PL-CVIO",
        }
    }

    pub fn flags(&self) -> AlgorithmVariant {
        match self {
            VariantName::PVio => AlgorithmVariant::p_vio(),
            VariantName::PlVio => AlgorithmVariant::pl_vio(),
            VariantName::PCvio => AlgorithmVariant::p_cvio(),
            VariantName::IplCpCvio => AlgorithmVariant::ipl_cp_cvio(),
            VariantName::PlCvio => AlgorithmVariant::pl_cvio(),
        }
    }
}

impl std::str::FromStr for VariantName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P-VIO" | "PVIO" => Ok(VariantName::PVio),
            "PL-VIO" | "PLVIO" => Ok(VariantName::PlVio),
            "P-CVIO" | "PCVIO" => Ok(VariantName::PCvio),
            "IPL-CP-CVIO" | "IPLCPCVIO" => Ok(VariantName::IplCpCvio),
            "PL-CVIO" | "PLCVIO" => Ok(VariantName::PlCvio),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// Writes per-variant CSVs, the aggregate summary CSV, and a JSON summary.
/// Returns the created file paths.
pub fn emit_reports(reports: &[RunReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut created = Vec::new();

    // stable variant order: first appearance in the report list
    let mut variants: Vec<String> = Vec::new();
    for r in reports {
        if !variants.contains(&r.variant) {
            variants.push(r.variant.clone());
        }
    }

    for variant in &variants {
        let path = out_dir.join(format!("variant_{variant}.csv"));
        let mut f = std::fs::File::create(&path)?;
        writeln!(f, "run,robot,rmse_deg,rmse_m,mean_nees,bytes_per_frame")?;
        for r in reports.iter().filter(|r| &r.variant == variant) {
            for robot in &r.robots {
                writeln!(
                    f,
                    "{},{},{:.6},{:.6},{:.6},{:.3}",
                    r.run, robot.robot_id, robot.rmse_deg, robot.rmse_m, robot.mean_nees, robot.bytes_per_frame
                )?;
            }
        }
        created.push(path);
    }

    // aggregate summary mirroring the variant-by-robot table layout
    let summary_path = out_dir.join("summary.csv");
    {
        let mut f = std::fs::File::create(&summary_path)?;
        writeln!(f, "variant,robot,mean_rmse_deg,mean_rmse_m,mean_nees,mean_bytes_per_frame,runs")?;
        for variant in &variants {
            let subset: Vec<&RunReport> = reports.iter().filter(|r| &r.variant == variant).collect();
            if subset.is_empty() {
                continue;
            }
            let num_robots = subset[0].robots.len();
            for robot_id in 0..num_robots {
                let mut acc = (0.0, 0.0, 0.0, 0.0, 0usize);
                for r in &subset {
                    let rr = &r.robots[robot_id];
                    acc.0 += rr.rmse_deg;
                    acc.1 += rr.rmse_m;
                    acc.2 += rr.mean_nees;
                    acc.3 += rr.bytes_per_frame;
                    acc.4 += 1;
                }
                let n = acc.4 as f64;
                writeln!(
                    f,
                    "{},{},{:.6},{:.6},{:.6},{:.3},{}",
                    variant,
                    robot_id,
                    acc.0 / n,
                    acc.1 / n,
                    acc.2 / n,
                    acc.3 / n,
                    acc.4
                )?;
            }
        }
    }
    created.push(summary_path);

    // machine-readable mirror
    #[derive(serde::Serialize)]
    struct JsonRobot {
        rmse_deg: f64,
        rmse_m: f64,
        mean_nees: f64,
        bytes_per_frame: f64,
        counters: crate::filter::UpdateCounters,
    }
    #[derive(serde::Serialize)]
    struct JsonRun {
        run: usize,
        stream_hash: String,
        robots: Vec<JsonRobot>,
    }
    let mut doc: BTreeMap<String, Vec<JsonRun>> = BTreeMap::new();
    for r in reports {
        doc.entry(r.variant.clone()).or_default().push(JsonRun {
            run: r.run,
            stream_hash: format!("{:016x}", r.stream_hash),
            robots: r
                .robots
                .iter()
                .map(|rr| JsonRobot {
                    rmse_deg: rr.rmse_deg,
                    rmse_m: rr.rmse_m,
                    mean_nees: rr.mean_nees,
                    bytes_per_frame: rr.bytes_per_frame,
                    counters: rr.counters,
                })
                .collect(),
        });
    }
    let json_path = out_dir.join("summary.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&doc)?)?;
    created.push(json_path);
    Ok(created)
}

/// Writes each robot's estimated and ground-truth trajectories in TUM format
/// under `out_dir/trajectories/`.
pub fn emit_trajectories(reports: &[RunReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = out_dir.join("trajectories");
    std::fs::create_dir_all(&dir)?;
    let mut created = Vec::new();
    for r in reports {
        for robot in &r.robots {
            let stem = format!("{}_run{:03}_robot{}", r.variant, r.run, robot.robot_id);
            let est = dir.join(format!("{stem}_est.tum"));
            std::fs::write(&est, crate::sim::format_tum(&robot.est_series))?;
            let gt = dir.join(format!("{stem}_gt.tum"));
            std::fs::write(&gt, crate::sim::format_tum(&robot.gt_series))?;
            created.push(est);
            created.push(gt);
        }
    }
    Ok(created)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_table_matches_flag_matrix() {
        let rows = [
            (VariantName::PVio, false, false, false),
            (VariantName::PlVio, true, false, false),
            (VariantName::PCvio, false, true, false),
            (VariantName::IplCpCvio, true, true, false),
            (VariantName::PlCvio, true, true, true),
        ];
        for (v, lines, cpts, clines) in rows {
            let f = v.flags();
            assert_eq!(f.use_lines_independent, lines, "{}", v.label());
            assert_eq!(f.use_common_points, cpts, "{}", v.label());
            assert_eq!(f.use_common_lines, clines, "{}", v.label());
        }
        // labels parse back
        for v in VariantName::ALL {
            let parsed: VariantName = v.label().parse().unwrap();
            assert_eq!(parsed, v);
        }
        assert!("X-VIO".parse::<VariantName>().is_err());
    }

    #[test]
    fn empty_reports_emit_header_only() {
        let dir = std::env::temp_dir().join(format!("plcvio_emit_{}", std::process::id()));
        let created = emit_reports(&[], &dir).unwrap();
        let summary = created.iter().find(|p| p.ends_with("summary.csv")).unwrap();
        let text = std::fs::read_to_string(summary).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("variant,robot,"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
