//! Verify analytic gradients of the full model against central finite
//! differences at 64-bit precision and print the per-parameter table.
//! Every parameter group is sampled, including the latent codewords.

use latentflow::cli::run_gradcheck;
use latentflow::config::ModelConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mc = ModelConfig::toy();
    let report = run_gradcheck(&mc, 16, 16, 2, 2)?;

    println!("{:<22} {:>7} {:>12}", "parameter", "coords", "max rel err");
    for p in &report.params {
        println!("{:<22} {:>7} {:>12.3e}", p.name, p.checked, p.max_rel_err);
    }
    println!(
        "\n{} coordinates checked, max relative error {:.3e}",
        report.coords_checked, report.max_rel_err
    );
    let worst = report.worst_param().unwrap();
    println!("worst parameter: {}", worst.name);
    if let Some((coord, analytic, numeric)) = worst.worst {
        println!("  coordinate {coord}: analytic {analytic:+.6e}, numeric {numeric:+.6e}");
    }
    Ok(())
}
