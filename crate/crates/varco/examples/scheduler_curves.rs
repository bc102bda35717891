//! Print the compression-ratio trajectory of every schedule family and run
//! the monotonicity checker over each.
//!
//! ```bash
//! cargo run --example scheduler_curves
//! ```

use varco::sched::{ratio_at, validate_monotone, SchedulerSpec};

fn main() -> varco::Result<()> {
    let horizon = 300;
    let specs = [
        ("fixed(4)", SchedulerSpec::fixed(4.0, horizon)),
        ("step(0.01)", SchedulerSpec::step(128.0, 1.0, 0.01, horizon)),
        ("linear(0.8)", SchedulerSpec::linear(128.0, 1.0, 0.8, horizon)),
        ("exponential(1.5)", SchedulerSpec::exponential(128.0, 1.0, 1.5, horizon)),
        ("clamped-linear(a=5)", SchedulerSpec::clamped_linear(128.0, 1.0, 5.0, horizon)),
        ("clamped-linear(a=2)", SchedulerSpec::clamped_linear(128.0, 1.0, 2.0, horizon)),
    ];

    print!("{:>22}", "t =");
    let samples = [0usize, 30, 60, 90, 120, 150, 200, 250, 300];
    for t in samples {
        print!("{t:>9}");
    }
    println!();
    for (name, spec) in &specs {
        print!("{name:>22}");
        for t in samples {
            print!("{:>9.2}", ratio_at(spec, t)?);
        }
        let report = validate_monotone(spec)?;
        println!("   monotone: {}", if report.ok() { "ok" } else { "VIOLATED" });
    }

    println!("\nclamped-linear with slope a reaches lossless (ratio 1) at ceil(K/a):");
    for a in 2..=7u32 {
        let spec = SchedulerSpec::clamped_linear(128.0, 1.0, a as f64, horizon);
        let t_star = (0..=horizon)
            .find(|&t| ratio_at(&spec, t).unwrap() == 1.0)
            .unwrap();
        println!("  a = {a}: lossless from t = {t_star} (= ceil({horizon}/{a}))");
    }
    Ok(())
}
