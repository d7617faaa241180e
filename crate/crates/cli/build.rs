// Lets the acceptance target call the core test functions directly.
fn main() {
    println!("cargo::rustc-check-cfg=cfg(acceptance)");
    println!("cargo::rustc-cfg=acceptance");
}
