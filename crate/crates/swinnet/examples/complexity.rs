//! Print parameter and MAC accounting for both model scales, plus the
//! ablation table at full scale.

use swinnet::complexity::{ablation_table, report};
use swinnet::model::{ModelConfig, Scale};

fn main() {
    println!("== full scale (384 px) ==");
    print!("{}", report(&ModelConfig::full()).table());
    println!();
    println!("== toy scale (96 px) ==");
    print!("{}", report(&ModelConfig::toy()).table());
    println!();
    println!("== ablations, full scale ==");
    print!("{}", ablation_table(Scale::Full));
}
