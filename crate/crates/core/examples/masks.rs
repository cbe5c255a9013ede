//! Prints the causal and prefix attention masks for a short sequence.
//!
//! `cargo run --example masks -- 3 7`

use camlm::attention::{make_causal_mask, make_prefix_mask};

fn main() -> camlm::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (prefix, size) = match args.as_slice() {
        [p, t, ..] => (*p, *t),
        _ => (3, 7),
    };
    println!("causal, T={size}");
    print!("{:?}", make_causal_mask(size));
    println!("prefix, P={prefix} T={size}");
    print!("{:?}", make_prefix_mask(prefix, size)?);
    Ok(())
}
