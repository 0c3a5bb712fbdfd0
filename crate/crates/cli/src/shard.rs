use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Subcommand};
use cotrain_core::shard::{decode_shard, encode_shard, read_header, shard_file_name, Record};
use cotrain_core::stream::{stream_records, ShardSource, StreamConfig};

use crate::{CmdResult, Failure};

#[derive(Debug, Clone, Subcommand)]
pub enum ShardCommand {
    /// Pack JSON-lines records into numbered shard files.
    Pack(PackArgs),
    /// Write the records of a shard file, directory or URL as JSON lines.
    Unpack(UnpackArgs),
    /// Print a shard header and verify its contents.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PackArgs {
    /// Input file with one record per line, or `-` for stdin.
    pub input: PathBuf,
    /// Directory receiving shard-NNNNN.tshd files.
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub per_shard: usize,
}

#[derive(Debug, Clone, Args)]
pub struct UnpackArgs {
    /// A shard file, a directory of shards, or an http(s) base URL.
    pub source: String,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Skip shards that fail verification.
    #[arg(long)]
    pub skip_corrupt: bool,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    pub file: PathBuf,
}

fn read_records(input: &Path) -> Result<Vec<Record>, Failure> {
    let reader: Box<dyn BufRead> = if input == Path::new("-") {
        Box::new(BufReader::new(io::stdin()))
    } else {
        let f = fs::File::open(input).with_context(|| format!("opening {}", input.display()))?;
        Box::new(BufReader::new(f))
    };
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line)
            .with_context(|| format!("line {}", i + 1))
            .map_err(Failure::config)?;
        r.validate()
            .with_context(|| format!("line {}", i + 1))
            .map_err(Failure::config)?;
        records.push(r);
    }
    Ok(records)
}

pub fn pack(args: &PackArgs) -> CmdResult {
    if args.per_shard == 0 {
        return Err(Failure::config(anyhow::anyhow!("--per-shard must be at least 1")));
    }
    let records = read_records(&args.input)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut stored = 0;
    let mut shards = 0;
    for (i, chunk) in records.chunks(args.per_shard).enumerate() {
        let bytes = encode_shard(chunk)?;
        let path = args.out.join(shard_file_name(i));
        fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
        stored += bytes.len();
        shards += 1;
    }
    println!("packed {} records into {shards} shards ({stored} bytes)", records.len());
    Ok(())
}

pub fn unpack(args: &UnpackArgs) -> CmdResult {
    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let path = Path::new(&args.source);
    if path.is_file() {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        for r in decode_shard(&bytes)? {
            writeln!(out, "{}", serde_json::to_string(&r)?)?;
        }
    } else {
        let cfg = StreamConfig {
            skip_corrupt: args.skip_corrupt,
            ..StreamConfig::default()
        };
        for r in stream_records(&ShardSource::parse(&args.source), &cfg)? {
            writeln!(out, "{}", serde_json::to_string(&r?)?)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn inspect(args: &InspectArgs) -> CmdResult {
    let mut bytes = Vec::new();
    fs::File::open(&args.file)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .with_context(|| format!("reading {}", args.file.display()))?;
    let h = read_header(&bytes)?;
    println!("version          {}", h.version);
    println!("records          {}", h.record_count);
    println!("uncompressed     {}", h.uncompressed_len);
    println!("stored           {}", bytes.len());
    println!("checksum         {:016x}", h.checksum);
    let records = decode_shard(&bytes)?;
    println!("verified         {} records", records.len());
    Ok(())
}

pub fn run(cmd: &ShardCommand) -> CmdResult {
    match cmd {
        ShardCommand::Pack(a) => pack(a),
        ShardCommand::Unpack(a) => unpack(a),
        ShardCommand::Inspect(a) => inspect(a),
    }
}
