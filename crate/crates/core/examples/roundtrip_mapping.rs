//! Maps seeded CoP contacts on the 24-taxel cap to taxel forces and back,
//! reporting how closely the inverse map recovers force and position.

use coptact::sensor_model::{cop_to_taxels, taxels_to_cop};
use coptact::synthetic::{generate_cap_layout, sample_contacts, CapLayoutSpec, ContactSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cap = generate_cap_layout(&CapLayoutSpec::default())?;
    let contacts = sample_contacts(&cap, &ContactSpec { seed: 1, ..ContactSpec::default() }, 10)?;
    println!("{:>4} {:>7} {:>10} {:>10}", "#", "active", "force err", "pos err mm");
    for (i, c) in contacts.iter().enumerate() {
        let reading = cop_to_taxels(c, &cap.layout)?;
        let back = taxels_to_cop(&reading, &cap.layout)?;
        let force_err = (back.force - c.force).norm() / c.force.norm();
        let pos_err = (back.position - c.position).norm() * 1e3;
        println!("{i:>4} {:>7} {force_err:>10.4} {pos_err:>10.3}", back.active_count);
    }
    Ok(())
}
