//! Run every quantizer variant on the toy task.
//!
//! Usage: `toy_ranking [seed ...] [key=value ...]` where keys are task or
//! setup fields (noise, classes, groups, fine_scale, gain_range,
//! outlier_prob, outlier_scale, nuisance_dims, nuisance_scale, epochs, lr, hidden).

use std::time::Instant;

use qlstm4::train::experiments::{ToySetup, Variant};

fn main() {
    let mut setup = ToySetup::default();
    let mut seeds = Vec::new();
    for arg in std::env::args().skip(1) {
        match arg.split_once('=') {
            None => seeds.push(arg.parse::<u64>().expect("seed")),
            Some((k, v)) => {
                let f: f64 = v.parse().expect("number");
                let t = &mut setup.task;
                match k {
                    "noise" => t.noise = f,
                    "classes" => t.classes = f as usize,
                    "groups" => t.groups = f as usize,
                    "fine_scale" => t.fine_scale = f,
                    "gain_range" => t.gain_range = f,
                    "outlier_prob" => t.outlier_prob = f,
                    "outlier_scale" => t.outlier_scale = f,
                    "stay_prob" => t.stay_prob = f,
                    "nuisance_dims" => t.nuisance_dims = f as usize,
                    "nuisance_scale" => t.nuisance_scale = f,
                    "epochs" => setup.epochs = f as usize,
                    "lr" => setup.lr = f,
                    "hidden" => setup.hidden = f as usize,
                    other => panic!("unknown key {other}"),
                }
            }
        }
    }
    if seeds.is_empty() {
        seeds.push(1);
    }
    for v in Variant::ALL {
        let mut mean = 0.0;
        for &s in &seeds {
            let t = Instant::now();
            let out = setup.run_variant(v, s).unwrap();
            let accs: Vec<String> = out
                .metrics
                .iter()
                .map(|m| format!("{:.3}", m.accuracy))
                .collect();
            println!(
                "{:16} seed {s}: {} ({:.1}s)",
                v.label(),
                accs.join(" "),
                t.elapsed().as_secs_f64()
            );
            mean += out.metrics.last().unwrap().accuracy / seeds.len() as f64;
        }
        println!("{:16} mean {:.4}", v.label(), mean);
    }
}
