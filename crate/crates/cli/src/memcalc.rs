use clap::Args;
use cotrain_core::memcalc::{find_preset, memory_report, presets, MemoryReport, TechniqueFlags};

use crate::{CmdResult, Failure};

#[derive(Debug, Clone, Args)]
pub struct MemcalcArgs {
    /// Model preset name (see --list).
    #[arg(long, required_unless_present = "list")]
    pub preset: Option<String>,
    /// Optimizer state precision: 32 or 8.
    #[arg(long, default_value_t = 32)]
    pub opt_bits: u8,
    /// Keep optimizer statistics in host memory.
    #[arg(long)]
    pub offload: bool,
    /// Recompute activations between checkpoints.
    #[arg(long)]
    pub checkpointing: bool,
    /// Number of layers sharing one set of weights.
    #[arg(long, default_value_t = 1)]
    pub sharing: u64,
    #[arg(long, default_value_t = 1)]
    pub batch: u64,
    #[arg(long, default_value_t = 1024)]
    pub seq: u64,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
    /// List presets and exit.
    #[arg(long)]
    pub list: bool,
}

pub fn report(args: &MemcalcArgs) -> Result<MemoryReport, Failure> {
    let name = args.preset.as_deref().unwrap_or_default();
    let preset = find_preset(name).map_err(Failure::config)?;
    let flags = TechniqueFlags {
        optimizer_bits: args.opt_bits,
        offload: args.offload,
        checkpointing: args.checkpointing,
        sharing_factor: args.sharing,
    };
    memory_report(&preset, &flags, args.batch, args.seq).map_err(Failure::config)
}

fn human(bytes: u64) -> String {
    const UNITS: [&str; 5] = ["B", "KB", "MB", "GB", "TB"];
    let mut v = bytes as f64;
    let mut unit = 0;
    while v >= 1000.0 && unit < UNITS.len() - 1 {
        v /= 1000.0;
        unit += 1;
    }
    if unit == 0 {
        format!("{bytes} B")
    } else {
        format!("{v:.3} {}", UNITS[unit])
    }
}

pub fn render_table(r: &MemoryReport) -> String {
    let rows = [
        ("device weights", r.device.weights),
        ("device gradients", r.device.gradients),
        ("device optimizer_state", r.device.optimizer_state),
        ("device activations", r.device.activations),
        ("device total", r.device.total),
        ("host offloaded_state", r.host.offloaded_state),
        ("host total", r.host.total),
        ("grand_total", r.grand_total),
    ];
    let mut out = format!(
        "preset         {}\nparam_count    {}\nstored_params  {}\n\n",
        r.preset, r.param_count, r.stored_params
    );
    for (name, bytes) in rows {
        out += &format!("{name:<24}{bytes:>16}  {:>12}\n", human(bytes));
    }
    out
}

pub fn run(args: &MemcalcArgs) -> CmdResult {
    if args.list {
        for p in presets() {
            println!("{:<12} {}", p.name, p.params().map_err(Failure::config)?);
        }
        return Ok(());
    }
    let r = report(args)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&r)?);
    } else {
        print!("{}", render_table(&r));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn human_units() {
        assert_eq!(human(999), "999 B");
        assert_eq!(human(6_192_000_000), "6.192 GB");
    }

    #[test]
    fn table_lists_every_field() {
        let args = MemcalcArgs {
            preset: Some("gpt2".into()),
            opt_bits: 8,
            offload: true,
            checkpointing: false,
            sharing: 1,
            batch: 1,
            seq: 128,
            json: false,
            list: false,
        };
        let r = report(&args).unwrap();
        let t = render_table(&r);
        assert!(t.contains(&r.host.offloaded_state.to_string()));
        assert_eq!(t.lines().count(), 12);
    }
}
