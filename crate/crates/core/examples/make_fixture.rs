//! Write a small synthetic two-domain dataset for smoke testing.
//!
//! Usage: make_fixture <root> <resolution> <len> [<len> ...]

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 3 {
        eprintln!("usage: make_fixture <root> <resolution> <len> [<len> ...]");
        std::process::exit(2);
    }
    let root = std::path::PathBuf::from(&args[0]);
    let resolution: usize = args[1].parse().expect("resolution must be an integer");
    let lens: Vec<usize> = args[2..]
        .iter()
        .map(|s| s.parse().expect("sequence lengths must be integers"))
        .collect();
    lapsegan::data::write_synthetic_fixture(&root, &lens, resolution).unwrap();
    println!("wrote {} sequences at {}x{} under {}", lens.len(), resolution, resolution, root.display());
}
