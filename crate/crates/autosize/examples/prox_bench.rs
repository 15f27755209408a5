//! Serial against scan-based row-max prox across row lengths.
//!
//! The serial route is expected linear time but inherently sequential;
//! the scan route does more total work in a logarithmic number of
//! data-parallel sweeps. Agreement within 1e-6 is checked on every timed
//! instance, so the table doubles as an equivalence audit.

use autosize::commands::cmd_prox_bench;

fn main() -> autosize::Result<()> {
    let sizes = [16, 256, 4096, 65_536, 1 << 20];
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    println!(
        "{:>10} {:>8} {:>12} {:>12} {:>8} {:>7} {:>10}",
        "n", "workers", "serial_ns", "parallel_ns", "speedup", "passes", "agreement"
    );
    for rows in [
        cmd_prox_bench(&sizes, 5, 1)?,
        cmd_prox_bench(&sizes, 5, workers)?,
    ] {
        for row in rows {
            println!(
                "{:>10} {:>8} {:>12} {:>12} {:>8.3} {:>7} {:>10}",
                row.n,
                row.workers,
                row.serial_ns,
                row.parallel_ns,
                row.speedup,
                row.pass_count,
                row.agreement
            );
            let log2 = (row.n as f64).log2().ceil() as u32;
            assert!(row.pass_count <= 4 * log2 + 4);
        }
    }
    println!("pass counts stay within 4*ceil(log2 n) + 4");
    Ok(())
}
