use plcvio::bench::campaign::{base_spline, run_variant, CampaignConfig};
use plcvio::bench::VariantName;
use plcvio::sim::generate_run;

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_default();
    let runs: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(2);
    let mut cfg = CampaignConfig::default();
    cfg.sim.mc_runs = runs;
    cfg.sim.duration = 60.0;
    cfg.sim.pixel_sigma = 2.0;
    cfg.cam.sigma_px = 2.0;
    match mode.as_str() {

        "w50" => cfg.filter.weight_mode = plcvio::coop::WeightMode::FixedOwn(0.5),
        "w70" => cfg.filter.weight_mode = plcvio::coop::WeightMode::FixedOwn(0.7),
        "w90" => cfg.filter.weight_mode = plcvio::coop::WeightMode::FixedOwn(0.9),
        "w99" => cfg.filter.weight_mode = plcvio::coop::WeightMode::FixedOwn(0.99),

        _ => {}
    }
    if mode == "rich" {
        cfg.sim.regime = plcvio::sim::Regime::Rich;
    }

    let only_coop = mode.starts_with('w');
    let base = base_spline(&cfg).unwrap();
    let variants: Vec<VariantName> = if only_coop {
        vec![VariantName::PCvio, VariantName::PlCvio]
    } else {
        vec![VariantName::PVio, VariantName::PlVio, VariantName::PCvio, VariantName::IplCpCvio, VariantName::PlCvio]
    };
    let foil = mode == "foil";
    let mut lines = Vec::new();
    if foil {
        cfg.filter.naive_fusion = true;
    }
    let variants = if foil { vec![VariantName::PlCvio] } else { variants };
    for variant in variants {
        let mut rmse_sum = 0.0;
        let mut nees_sum = 0.0;
        let mut cnt = 0.0;
        let mut ci = 0u64;
        let mut ind = 0u64;
        for run in 0..cfg.sim.mc_runs {
            let data = generate_run(&cfg.sim, &base, &cfg.cam, &cfg.calib, run as u64).unwrap();
            let rep = run_variant(&cfg, &data, variant, run).unwrap();
            for robot in &rep.robots {
                rmse_sum += robot.rmse_m;
                nees_sum += robot.mean_nees;
                ci += robot.counters.ci_point_updates + robot.counters.ci_line_updates;
                ind += robot.counters.point_updates + robot.counters.line_updates;
                cnt += 1.0;
            }
        }
        lines.push(format!("{:12} rmse_m {:.4}  nees {:6.2}  ind/robot {:6.0}  ci/robot {:6.0}", variant.label(), rmse_sum / cnt, nees_sum / cnt, ind as f64 / cnt, ci as f64 / cnt));
    }
    for l in lines { println!("{l}"); }
}
