use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use vibekit::bench::{bench_attn, to_csv};
use vibekit::config::{DataRole, RunConfig};
use vibekit::eval::{detail_gain, held_out_reconstruction};
use vibekit::gclfa::{mask_stats, CoarseSpec, GridSize, MaskStats, WindowSpec};
use vibekit::hfato::{degrade, hf_energy};
use vibekit::numcore::Upsample;
use vibekit::relay_lora::{
    adapters_from_checkpoint, adapters_to_checkpoint, compose_inference, inspect, merge, strip, train_stage1,
    train_stage2, write_atomic, Checkpoint,
};
use vibekit::toydit::{pretrain_base, sample, AttentionMode, ToyDiT};
use vibekit::Error;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (unknown subcommand, bad flag)
  3  configuration schema or validation error
  4  missing input file
  5  runtime or checkpoint format error
  6  relay violation (LoRA2 composed onto a merged checkpoint)

Outputs go to the config's output_dir; the VIBEKIT_OUT environment variable
overrides it. Every subcommand also writes manifest.json there.";

#[derive(Parser)]
#[command(name = "vibekit", version, about = "Relay LoRA, GCLFA and HFATO experiments on a tiny DiT", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Full-parameter flow-matching training of the base model on smooth low-res data.
    PretrainBase(Common),
    /// Train LoRA1 on the frozen base at low resolution.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
    },
    /// Train LoRA2 on the frozen merged checkpoint at high resolution.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        merged: PathBuf,
    },
    /// Fold an adapter into a checkpoint.
    MergeLora {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        lora: PathBuf,
    },
    /// Remove a previously merged adapter.
    StripLora {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        merged: PathBuf,
        #[arg(long)]
        lora: PathBuf,
    },
    /// Apply LoRA2 to the original, unmerged base for inference.
    Compose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        lora: PathBuf,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        /// First sample seed; defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 4)]
        count: u64,
        /// Grid as HxW; defaults to the config's low_res.
        #[arg(long, value_parser = parse_hw)]
        res: Option<(usize, usize)>,
        #[arg(long, value_enum, default_value_t = Attention::Dense)]
        attention: Attention,
    },
    /// Low-res base sample, upsample, re-noise and refine with base + LoRA2.
    CoarseToFine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        lora2: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 16)]
        count: u64,
    },
    /// Paired held-out reconstruction error of base vs base + LoRA2.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        lora2: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: u64,
    },
    /// Key counts and analytic FLOPs of a GCLFA configuration.
    MaskStats {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_hw)]
        grid: (usize, usize),
        #[arg(long, value_parser = parse_hw)]
        win: (usize, usize),
        #[arg(long, default_value_t = 2)]
        pool: usize,
        /// Channel width used in the FLOP formulas.
        #[arg(long, default_value_t = 16)]
        dim: usize,
    },
    /// Time the dense oracle against the blocked executor over the config's sweep.
    BenchAttn {
        #[command(flatten)]
        common: Common,
        /// Worker threads for the blocked executor.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Apply the downsample/upsample degradation to every 2-D tensor of a checkpoint.
    Degrade {
        #[command(flatten)]
        common: Common,
        input: PathBuf,
        /// Output file name inside the output directory.
        #[arg(default_value = "degraded.vbcp")]
        output: String,
        /// Degradation factor; defaults to the config's hfato.factor.
        #[arg(long)]
        factor: Option<usize>,
        /// Upsampling kernel; defaults to the config's hfato.up.
        #[arg(long, value_enum)]
        up: Option<Up>,
    },
    /// High-frequency energy of every 2-D tensor of a checkpoint, or of one.
    HfEnergy {
        #[command(flatten)]
        common: Common,
        input: PathBuf,
        /// Print only this tensor's energy.
        #[arg(long)]
        tensor: Option<String>,
    },
    /// Print a checkpoint header as JSON.
    Inspect {
        #[command(flatten)]
        common: Common,
        path: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Up {
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, ValueEnum)]
enum Attention {
    Dense,
    Gclfa,
}

impl From<Attention> for AttentionMode {
    fn from(a: Attention) -> Self {
        match a {
            Attention::Dense => AttentionMode::Dense,
            Attention::Gclfa => AttentionMode::Gclfa,
        }
    }
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
    Ok((p(h)?, p(w)?))
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Schema(String),
    MissingInput(String),
    Runtime(String),
    Relay(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Schema(_) => 3,
            CliError::MissingInput(_) => 4,
            CliError::Runtime(_) => 5,
            CliError::Relay(_) => 6,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Schema(m) | CliError::MissingInput(m) | CliError::Runtime(m) | CliError::Relay(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Schema(e.to_string()),
            Error::RelayViolation(_) => CliError::Relay(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: &'a str,
    seed: u64,
    versions: BTreeMap<&'static str, String>,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

/// One subcommand invocation: loaded config, output directory and the
/// digests of everything read and written.
struct Run {
    command: &'static str,
    cfg: RunConfig,
    config_sha256: String,
    out_dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Run {
    fn start(command: &'static str, common: &Common) -> CliResult<Run> {
        let cfg = match &common.config {
            Some(path) => {
                let text = read_input(path)?;
                let text = String::from_utf8(text)
                    .map_err(|_| CliError::Schema(format!("{}: config is not UTF-8", path.display())))?;
                RunConfig::from_json(&text)?
            }
            None => RunConfig::default(),
        };
        cfg.validate()?;
        let out_dir = match std::env::var_os("VIBEKIT_OUT") {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => PathBuf::from(&cfg.output_dir),
        };
        std::fs::create_dir_all(&out_dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
        Ok(Run {
            command,
            config_sha256: sha256_hex(cfg.to_json().as_bytes()),
            cfg,
            out_dir,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn read(&mut self, role: &str, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = read_input(path)?;
        self.inputs.insert(role.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn checkpoint(&mut self, role: &str, path: &Path) -> CliResult<Checkpoint> {
        let bytes = self.read(role, path)?;
        Checkpoint::from_bytes(&bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.out_dir.join(name);
        write_atomic(&path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    fn write_checkpoint(&mut self, name: &str, ckpt: &Checkpoint) -> CliResult<PathBuf> {
        let bytes = ckpt.to_bytes()?;
        self.write(name, &bytes)
    }

    fn finish(self) -> CliResult<()> {
        let mut versions = BTreeMap::new();
        versions.insert("vibekit", env!("CARGO_PKG_VERSION").to_string());
        versions.insert("vbcp", vibekit::relay_lora::VERSION.to_string());
        let manifest = Manifest {
            command: self.command,
            config_sha256: &self.config_sha256,
            seed: self.cfg.seed,
            versions,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        let path = self.out_dir.join("manifest.json");
        write_atomic(&path, text.as_bytes()).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}

fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingInput(format!("missing input {}", path.display())),
        _ => CliError::Runtime(format!("{}: {e}", path.display())),
    })
}

fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l:e}");
    }
    s
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::PretrainBase(common) => {
            let mut r = Run::start("pretrain-base", &common)?;
            let data = r.cfg.dataset(DataRole::Pretrain)?;
            let out = pretrain_base(r.cfg.dit(AttentionMode::Dense), &data, &r.cfg.pretrain_config())?;
            let path = r.write_checkpoint("base.vbcp", &out.weights)?;
            r.write("pretrain_loss.csv", losses_csv(&out.losses).as_bytes())?;
            println!("{}", path.display());
            r.finish()
        }
        Command::TrainStage1 { common, base } => {
            let mut r = Run::start("train-stage1", &common)?;
            let w0 = r.checkpoint("base", &base)?;
            let out = train_stage1(&w0, &r.cfg)?;
            let path = r.write_checkpoint("lora1.vbcp", &adapters_to_checkpoint(&out.adapters, "stage1")?)?;
            r.write("stage1_loss.csv", losses_csv(&out.losses).as_bytes())?;
            println!("{}", path.display());
            r.finish()
        }
        Command::TrainStage2 { common, merged } => {
            let mut r = Run::start("train-stage2", &common)?;
            let w1 = r.checkpoint("merged", &merged)?;
            let out = train_stage2(&w1, &r.cfg)?;
            let path = r.write_checkpoint("lora2.vbcp", &adapters_to_checkpoint(&out.adapters, "stage2")?)?;
            r.write("stage2_loss.csv", losses_csv(&out.losses).as_bytes())?;
            println!("{}", path.display());
            r.finish()
        }
        Command::MergeLora { common, base, lora } => {
            let mut r = Run::start("merge-lora", &common)?;
            let w = r.checkpoint("base", &base)?;
            let adapters = adapters_from_checkpoint(&r.checkpoint("lora", &lora)?)?;
            let path = r.write_checkpoint("merged.vbcp", &merge(&w, &adapters)?)?;
            println!("{}", path.display());
            r.finish()
        }
        Command::StripLora { common, merged, lora } => {
            let mut r = Run::start("strip-lora", &common)?;
            let w = r.checkpoint("merged", &merged)?;
            let adapters = adapters_from_checkpoint(&r.checkpoint("lora", &lora)?)?;
            let path = r.write_checkpoint("stripped.vbcp", &strip(&w, &adapters)?)?;
            println!("{}", path.display());
            r.finish()
        }
        Command::Compose { common, base, lora } => {
            let mut r = Run::start("compose", &common)?;
            let w = r.checkpoint("base", &base)?;
            let adapters = adapters_from_checkpoint(&r.checkpoint("lora", &lora)?)?;
            let path = r.write_checkpoint("composed.vbcp", &compose_inference(&w, &adapters)?)?;
            println!("{}", path.display());
            r.finish()
        }
        Command::Sample { common, weights, seed, count, res, attention } => {
            let mut r = Run::start("sample", &common)?;
            let w = r.checkpoint("weights", &weights)?;
            let model = ToyDiT::new(r.cfg.dit(attention.into()), w)?;
            let (h, wd) = res.unwrap_or((r.cfg.low_res[0], r.cfg.low_res[1]));
            let first = seed.unwrap_or(r.cfg.seed);
            let mut out = Checkpoint::new();
            out.set_meta("stage", "samples");
            let mut csv = String::from("seed,hf_energy\n");
            for s in first..first + count {
                let x = sample(&model, h, wd, s, &r.cfg.sampler)?;
                let _ = writeln!(csv, "{s},{:e}", hf_energy(&x)?);
                out.insert(format!("sample.{s}"), x)?;
            }
            let path = r.write_checkpoint("samples.vbcp", &out)?;
            r.write("samples.csv", csv.as_bytes())?;
            println!("{}", path.display());
            r.finish()
        }
        Command::CoarseToFine { common, base, lora2, seed, count } => {
            let mut r = Run::start("coarse-to-fine", &common)?;
            let w0 = r.checkpoint("base", &base)?;
            let adapters = adapters_from_checkpoint(&r.checkpoint("lora2", &lora2)?)?;
            let first = seed.unwrap_or(r.cfg.seed);
            let gains = detail_gain(&r.cfg, &w0, &adapters, first..first + count)?;
            let mut out = Checkpoint::new();
            out.set_meta("stage", "coarse_to_fine");
            let mut csv = String::from("seed,hf_upsampled,hf_refined\n");
            for g in &gains {
                let _ = writeln!(csv, "{},{:e},{:e}", g.seed, g.hf_upsampled, g.hf_refined);
                out.insert(format!("{}.low_res", g.seed), g.result.low_res.clone())?;
                out.insert(format!("{}.upsampled", g.seed), g.result.upsampled.clone())?;
                out.insert(format!("{}.high_res", g.seed), g.result.high_res.clone())?;
            }
            r.write_checkpoint("coarse_to_fine.vbcp", &out)?;
            r.write("coarse_to_fine.csv", csv.as_bytes())?;
            let won = gains.iter().filter(|g| g.gained()).count();
            println!("detail gain on {won}/{} seeds", gains.len());
            r.finish()
        }
        Command::Evaluate { common, base, lora2, count } => {
            let mut r = Run::start("evaluate", &common)?;
            let w0 = r.checkpoint("base", &base)?;
            let adapters = adapters_from_checkpoint(&r.checkpoint("lora2", &lora2)?)?;
            let pairs = held_out_reconstruction(&r.cfg, &w0, &adapters, count)?;
            let mut csv = String::from("index,base,lora2\n");
            for p in &pairs {
                let _ = writeln!(csv, "{},{:e},{:e}", p.index, p.base, p.adapted);
            }
            r.write("held_out.csv", csv.as_bytes())?;
            let won = pairs.iter().filter(|p| p.adapted_wins()).count();
            println!("lora2 wins on {won}/{} held-out samples", pairs.len());
            r.finish()
        }
        Command::MaskStats { common, grid, win, pool, dim } => {
            let mut r = Run::start("mask-stats", &common)?;
            let stats = mask_stats(
                GridSize::new(grid.0, grid.1)?,
                WindowSpec::new(win.0, win.1)?,
                CoarseSpec::new(pool)?,
                dim,
            )?;
            r.write("mask_stats.csv", format!("{}\n{}\n", MaskStats::CSV_HEADER, stats.csv_row()).as_bytes())?;
            print!("{}", describe(&stats));
            r.finish()
        }
        Command::BenchAttn { common, threads } => {
            let mut r = Run::start("bench-attn", &common)?;
            let cfg = vibekit::bench::BenchConfig { threads, ..r.cfg.bench.clone() };
            let rows = bench_attn(&cfg)?;
            let csv = to_csv(&rows);
            r.write("bench_attn.csv", csv.as_bytes())?;
            print!("{csv}");
            r.finish()
        }
        Command::Degrade { common, input, output, factor, up } => {
            if Path::new(&output).file_name().map(|n| n != output.as_str()).unwrap_or(true) {
                return Err(CliError::Usage(format!("output `{output}` must be a bare file name; outputs go to the output directory")));
            }
            let mut r = Run::start("degrade", &common)?;
            let ckpt = r.checkpoint("input", &input)?;
            let mut deg = r.cfg.hfato.degradation();
            if let Some(f) = factor {
                deg.factor = f;
            }
            match up {
                Some(Up::Nearest) => deg.up = Upsample::Nearest,
                Some(Up::Bilinear) => deg.up = Upsample::Bilinear,
                None => {}
            }
            let mut out = Checkpoint::new();
            for (name, t) in ckpt.iter() {
                if t.rank() == 2 {
                    out.insert(name, degrade(t, &deg)?)?;
                }
            }
            out.set_meta("degradation_factor", deg.factor.to_string());
            let path = r.write_checkpoint(&output, &out)?;
            println!("{}", path.display());
            r.finish()
        }
        Command::HfEnergy { common, input, tensor } => {
            let mut r = Run::start("hf-energy", &common)?;
            let ckpt = r.checkpoint("input", &input)?;
            let mut csv = String::from("tensor,hf_energy\n");
            match &tensor {
                Some(name) => {
                    let e = hf_energy(ckpt.require(name)?)?;
                    let _ = writeln!(csv, "{name},{e:e}");
                    println!("{e}");
                }
                None => {
                    for (name, t) in ckpt.iter() {
                        if t.rank() == 2 {
                            let _ = writeln!(csv, "{name},{:e}", hf_energy(t)?);
                        }
                    }
                    print!("{csv}");
                }
            }
            r.write("hf_energy.csv", csv.as_bytes())?;
            r.finish()
        }
        Command::Inspect { common, path } => {
            let mut r = Run::start("inspect", &common)?;
            let bytes = r.read("checkpoint", &path)?;
            let text = inspect(&bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            r.write("inspect.json", text.as_bytes())?;
            print!("{text}");
            r.finish()
        }
    }
}

fn describe(s: &MaskStats) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "grid {}x{}, window {}x{}, pool {}", s.grid.h, s.grid.w, s.win.h, s.win.w, s.pool);
    let _ = writeln!(out, "local keys per query: {}", s.local_keys);
    for (keys, queries) in &s.keys_per_query {
        let _ = writeln!(out, "  {keys} keys: {queries} queries");
    }
    let _ = writeln!(out, "coarse keys: {}", s.coarse_keys);
    let _ = writeln!(out, "flops dense: {}", s.flops_dense);
    let _ = writeln!(out, "flops sparse: {}", s.flops_sparse);
    let _ = writeln!(out, "reduction {}", s.reduction);
    out
}
