//! Checks analytic probe gradients against central finite differences.

use quantprobe::nn::Module;
use quantprobe::probes::{build_probe, gradient_check, ProbeConfig};
use quantprobe::synthgen::TaskKind;

fn main() -> quantprobe::Result<()> {
    for task in [TaskKind::Percent, TaskKind::Range, TaskKind::UnitId] {
        let cfg = ProbeConfig::for_task(task, 8, 3, Some(3))?.with_hidden(4);
        let params = build_probe(&cfg, 0)?.param_count();
        let check = gradient_check(&cfg, 42, 5, 1e-5)?;
        println!(
            "{task:>8}: {params} parameters, {} entries checked, max relative error {:.2e}",
            check.entries, check.max_rel_err
        );
    }

    let full = ProbeConfig::for_task(TaskKind::Percent, 768, 5, None)?;
    println!("full-size percent probe: {} parameters", build_probe(&full, 0)?.param_count());
    Ok(())
}
