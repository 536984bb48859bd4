use dpn_core::oracle::*;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    for c in mc_dirichlet_oracle_checks(10, 100_000, 42, 3.0).unwrap() {
        println!("{}: worst {:.3} (<= {}) pass={}", c.name, c.worst, c.threshold, c.pass);
    }
    println!("mc elapsed {:?}", t0.elapsed());
    let t1 = Instant::now();
    for c in gradient_oracle_checks(20, 42, 1e-4).unwrap() {
        println!("{}: worst {:.3e} (<= {}) pass={}", c.name, c.worst, c.threshold, c.pass);
    }
    println!("fd elapsed {:?}", t1.elapsed());
}
