//! Refit the shipped device profile and print it with its residuals.
//!
//! Usage: `calibrate_perf > crates/core/data/default_device.toml`

use qlstm4::perf::{calibrate, CalibrationTargets, DeviceProfile};

fn main() {
    let base = DeviceProfile::default_profile();
    let cal = calibrate(&base, &CalibrationTargets::default()).expect("calibration");
    let mut p = cal.profile;
    p.name = "calibrated-rnnt-int4".into();
    eprintln!(
        "residuals (encoder, prediction, end-to-end): {:?}",
        cal.residuals
    );
    for s in &cal.speedups {
        eprintln!(
            "B={:2}: encoder {:.4} prediction {:.4} joint {:.4} end-to-end {:.4}",
            s.beam, s.encoder, s.prediction, s.joint, s.end_to_end
        );
    }
    print!("{}", p.to_toml());
}
