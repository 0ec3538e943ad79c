//! Wall-clock and memory comparison of the pad-and-roll attention kernel
//! against the quadratic masked reference.
//!
//! Run with: cargo run --release --example benchmark_kernel
//!
//! Expect kernel time to roughly double per doubling of T while the
//! reference quadruples, and kernel memory to stay a tiny fraction of the
//! reference's T x T footprint. The `beatkit bench-dsa` command runs the
//! full protocol with median-of-5 trials.

use beatkit::alloc_meter::CountingAllocator;
use beatkit::cli::{bench_csv, bench_dsa};

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

fn main() {
    let sizes = [512, 1024, 2048, 4096];
    let rows = bench_dsa(&sizes, 32, 3, 0).unwrap();
    print!("{}", bench_csv(&rows));
    println!();
    for pair in rows.windows(2) {
        println!(
            "T {} -> {}: kernel x{:.2}, reference x{:.2}",
            pair[0].t,
            pair[1].t,
            pair[1].kernel_ns as f64 / pair[0].kernel_ns as f64,
            pair[1].oracle_ns as f64 / pair[0].oracle_ns as f64
        );
    }
    let last = rows.last().unwrap();
    println!(
        "peak memory at T={}: kernel {:.1} MiB vs reference {:.1} MiB",
        last.t,
        last.kernel_peak_bytes as f64 / (1 << 20) as f64,
        last.oracle_peak_bytes as f64 / (1 << 20) as f64
    );
}
