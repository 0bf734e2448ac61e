//! Quick benchmark: anneal the classic two-stage problem and print the
//! temperature trace. Used to sanity-check schedules and grid presets.

use damap::annealer::{anneal, AnnealConfig, GridSettings};
use damap::problem::ProblemSpec;
use std::time::Instant;

fn parse_seed(args: &[String], idx: usize) -> u64 {
    args.get(idx).map_or(7, |s| s.parse().unwrap())
}

fn main() {
    // args: [preset|n_source n_y n_z] [seed]
    let args: Vec<String> = std::env::args().collect();
    let (grids, seed) = match args.get(1).map(String::as_str).unwrap_or("fast") {
        "fine" => (GridSettings { n_source: 2001, n_y: 1001, n_z: 401 }, parse_seed(&args, 2)),
        "default" => (GridSettings::default(), parse_seed(&args, 2)),
        "fast" => (GridSettings { n_source: 151, n_y: 301, n_z: 121 }, parse_seed(&args, 2)),
        n => (
            GridSettings {
                n_source: n.parse().unwrap(),
                n_y: args[2].parse().unwrap(),
                n_z: args[3].parse().unwrap(),
            },
            parse_seed(&args, 4),
        ),
    };
    let problem = ProblemSpec::wce(0.2, 5.0).unwrap();
    let cfg = AnnealConfig { grids, seed, ..AnnealConfig::default() };
    let start = Instant::now();
    let out = anneal(&problem, &cfg).unwrap();
    let elapsed = start.elapsed();
    for rec in &out.trace {
        println!(
            "T={:10.5}  D={:.6}  H={:.4}  M1={}  sweeps={}",
            rec.temperature,
            rec.total_d,
            rec.entropy,
            rec.effective_models_g1,
            rec.sweep_f.len()
        );
    }
    println!("transitions: {:?}", out.transitions.len());
    for t in &out.transitions {
        println!("  T={:.5} stage={} {} -> {}", t.temperature, t.stage.as_str(), t.from, t.to);
    }
    println!(
        "final D = {:.6} (control {:.6} + est {:.6}), models = {}, sweeps = {}, {:.1?}",
        out.breakdown.total_d,
        out.breakdown.control_cost,
        out.breakdown.estimation_error,
        out.g1.bank.len(),
        out.total_sweeps,
        elapsed
    );
    println!("recentered: {:?}", out.recentered);
    // Final bank sorted by intercept, with each model's clientele share.
    let source = out.workspace.source();
    let mut rows: Vec<(f64, f64, f64)> = (0..out.g1.n_models())
        .map(|m| {
            let lm = out.g1.bank.models[m];
            let mass: f64 = (0..source.len())
                .map(|i| out.g1.assoc.prob(m, i) * source.weights()[i])
                .sum();
            (lm.b, lm.a, mass)
        })
        .collect();
    rows.sort_by(|x, y| x.0.total_cmp(&y.0));
    for (b, a, mass) in rows {
        println!("  model a={a:9.5}  b={b:9.5}  mass={mass:.5}");
    }
    // Jumps in the quenched mapping x1(x0).
    let pts = out.signal_points();
    let h = source.spacing();
    let mut jumps = 0;
    for w in pts.windows(2) {
        let dx1 = w[1].x1 - w[0].x1;
        // within a segment x1 moves by about h·(1+a); call anything much
        // larger a discontinuity
        if dx1.abs() > 5.0 * h {
            jumps += 1;
            println!(
                "  jump at x0 ~ {:7.3}: x1 {:8.4} -> {:8.4}",
                0.5 * (w[0].x0 + w[1].x0),
                w[0].x1,
                w[1].x1
            );
        }
    }
    println!("  detected jumps: {jumps}");
}
