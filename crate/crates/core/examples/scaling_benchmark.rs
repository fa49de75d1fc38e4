//! Times the likelihood over increasing N and one VI iteration over (S, K).

use flowgp::bench::{bench_iteration, bench_likelihood};

fn main() -> flowgp::Result<()> {
    let lik = bench_likelihood(&[100, 200, 400, 800], 25, 5, 0)?;
    print!("{}", lik.to_table());
    if let Some(s) = lik.log_log_slope() {
        println!("log-log slope over the upper half: {s:.2}");
    }
    let it = bench_iteration(200, 10, &[(2, 1), (8, 1), (2, 10)], 5, 1, 0)?;
    print!("{}", it.to_table());
    println!(
        "running on {} ({} cpus)",
        it.environment.cpu_model, it.environment.available_cpus
    );
    Ok(())
}
