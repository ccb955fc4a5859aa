//! Prints the balance-factor ramp and the step learning-rate schedules at
//! full scale and at the desk-scale epoch counts.

use geco_asd::geco::GecoTrainConfig;
use geco_asd::pae::PaeTrainConfig;

fn main() -> geco_asd::Result<()> {
    for epochs in [120, 24] {
        let geco = GecoTrainConfig::default().scaled(epochs);
        let pae = PaeTrainConfig::default().scaled(epochs / 2);
        println!("GeCo {epochs} epochs, PAE {} epochs", epochs / 2);
        for e in (0..epochs).step_by((epochs / 12).max(1)) {
            let lambda = geco.lambda.lambda_at(e)?;
            let pae_lr = if e < epochs / 2 { format!("{:.0e}", pae.lr.at(e)) } else { "-".into() };
            println!(
                "  epoch {e:>3}  lambda {lambda:>6.3} {:<20} lr {:<6} pae lr {pae_lr}",
                "*".repeat((2.0 * lambda).round() as usize),
                geco.lr.at(e)
            );
        }
    }
    Ok(())
}
