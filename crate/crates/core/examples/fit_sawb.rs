//! Regenerates the shipped SAWB coefficient table.
//!
//! cargo run --release -p qlstm4-core --example fit_sawb > crates/core/data/sawb_coefficients.txt

fn main() {
    let table = qlstm4::quant::sawb::fit_table(200_000, 2021);
    print!("{}", table.to_text());
}
