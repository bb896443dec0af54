//! Writes the bundled singularity-crossing pointer trace.
//!
//! The end point climbs the bases' midline in mode `-+` and passes exactly
//! through the posture where both distal links are collinear, found by
//! forward kinematics at cos θ1 = -1/4, cos θ2 = 1/4.
//!
//! Usage: `cargo run -p kinestat-core --example singularity_trace -- CONFIG OUT`

use std::io::Write;

use kinestat_core::fivebar::{forward_kinematics_in_mode, Sign};
use kinestat_core::model::Vec2;
use kinestat_core::protocol::{ClientMessage, PointerSample};
use kinestat_core::session::load_session_config;

const STEP: f64 = 0.002;
const TOP: f64 = 9.5;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let [_, config, out] = args.as_slice() else {
        return Err("usage: singularity_trace CONFIG OUT".into());
    };
    let cfg = load_session_config(config)?;
    let m = &cfg.model;
    let mode = cfg.params.mode;
    let t1 = (-0.25f64).acos();
    let t2 = 0.25f64.acos();
    let singular = [Sign::Plus, Sign::Minus]
        .into_iter()
        .find_map(|a| forward_kinematics_in_mode(m, t1, t2, mode, a))
        .ok_or("singular posture not reachable in this mode")?
        .p;

    let start = cfg.start;
    let below = ((singular.y - start.y) / STEP).ceil() as usize;
    let above = ((TOP - singular.y) / STEP).ceil() as usize;
    let mut path: Vec<Vec2> = (0..below)
        .map(|k| start + (singular - start) * (k as f64 / below as f64))
        .collect();
    let top = Vec2::new(singular.x, TOP);
    path.extend((0..=above).map(|k| singular + (top - singular) * (k as f64 / above as f64)));

    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    for (k, p) in path.iter().enumerate() {
        let raw = p - start;
        let msg = ClientMessage::pointer(PointerSample {
            seq: k as u64 + 1,
            t: k as u64 * 1_000_000,
            x: raw.x,
            y: raw.y,
        });
        writeln!(w, "{}", serde_json::to_string(&msg)?)?;
    }
    w.flush()?;
    eprintln!("{} samples, singular point {:?}", path.len(), singular);
    Ok(())
}
