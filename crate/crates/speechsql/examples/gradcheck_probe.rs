use speechsql::train::{grad_check, GRAD_CHECK_COMPONENTS};
fn main() {
    for c in GRAD_CHECK_COMPONENTS {
        let t = std::time::Instant::now();
        let err = grad_check(c, 1e-5).unwrap();
        println!("{c}: max rel err {err:.3e} ({:.2}s) {}", t.elapsed().as_secs_f64(), if err < 1e-4 { "PASS" } else { "FAIL" });
    }
}
