use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use defer::bench::{self, BenchPlan, ModelSpec};
use defer::codec::{CodecSpec, Compression};
use defer::dispatcher::{self, ChainConfig, NodeAddress};
use defer::metrics::{self, ClassCodecs, CsvRow, EnergyParams};
use defer::model::{load_model, save_model};
use defer::node::{ComputeNode, NodeListeners, NodeOptions};
use defer::partition::{auto_cuts, bridges, partition_model, CutPoint};
use defer::wire::ChunkConfig;
use defer::{Exec, Tensor};

#[derive(Parser)]
#[command(
    name = "defer",
    version,
    about = "Partitioned, pipelined DNN inference over a chain of compute nodes"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a compute node for one configuration and inference session.
    Compute(ComputeArgs),
    /// Partition a model over a node chain and stream inputs through it.
    Dispatch(DispatchArgs),
    /// Show how a model would be split over k nodes.
    InspectPartitions(InspectArgs),
    /// Run a benchmark plan and write the results CSV.
    Bench(BenchArgs),
    /// Generate a synthetic model and inputs.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ComputeArgs {
    #[arg(long, default_value = "0.0.0.0")]
    host: String,
    /// 0 picks a free port; the bound ports are printed on a READY line.
    #[arg(long)]
    model_port: u16,
    #[arg(long)]
    weights_port: u16,
    #[arg(long)]
    data_port: u16,
    /// Append this node's counters as one CSV line on exit.
    #[arg(long)]
    log_metrics: Option<PathBuf>,
    /// Synthetic compute time added per layer of the partition.
    #[arg(long, default_value_t = 0.0)]
    delay_per_layer_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    jitter_ms: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = defer::wire::DEFAULT_CHUNK_BYTES)]
    chunk_bytes: usize,
    /// Run kernels on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct DispatchArgs {
    /// Model directory (see `synth`).
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated `host:model_port:weights_port:data_port`, in chain order.
    #[arg(long, value_delimiter = ',', required = true)]
    nodes: Vec<String>,
    #[arg(long, default_value = "bin32+lz")]
    data_codec: String,
    #[arg(long, default_value = "bin32+lz")]
    weights_codec: String,
    #[arg(long, value_enum, default_value_t = ArchCompression::None)]
    arch_compression: ArchCompression,
    #[arg(long, default_value_t = defer::wire::DEFAULT_CHUNK_BYTES)]
    chunk_bytes: usize,
    /// Maximum inputs in flight.
    #[arg(long, default_value_t = dispatcher::DEFAULT_WINDOW)]
    window: usize,
    /// Explicit `producer->consumer` cuts instead of balanced ones.
    #[arg(long, value_delimiter = ',')]
    cuts: Vec<String>,
    /// Address the dispatcher listens on for results.
    #[arg(long, default_value = "0.0.0.0:0")]
    result_bind: String,
    /// Result address given to the last node, when not the bound address.
    #[arg(long)]
    result_advertise: Option<String>,
    /// Directory of tensor files (sorted by name), a file of concatenated
    /// tensors, or `-` for stdin.
    #[arg(long)]
    inputs: String,
    /// Directory (one file per input, same names) or file / `-` for a
    /// concatenated stream.
    #[arg(long, default_value = "-")]
    outputs: String,
    /// Metrics CSV path; stderr if omitted.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchCompression {
    None,
    Lz,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    nodes: usize,
    /// Also write one CSV row per partition.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the plan's mode.
    #[arg(long)]
    in_process: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// `chain:LAYERS:WIDTH` or `resnet:BLOCKS:CHANNELS:SPATIAL`.
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Number of random inputs to write.
    #[arg(long, default_value_t = 0)]
    inputs: u64,
    /// Input directory; defaults to `<out>/inputs`.
    #[arg(long)]
    inputs_out: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Cmd::Compute(a) => compute(a),
        Cmd::Dispatch(a) => dispatch(a),
        Cmd::InspectPartitions(a) => inspect(a),
        Cmd::Bench(a) => run_bench(a),
        Cmd::Synth(a) => synth(a),
    };
    if let Err(e) = res {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn ms(v: f64) -> Result<Duration> {
    if !(v >= 0.0 && v.is_finite()) {
        bail!("durations must be ≥ 0, got {v}");
    }
    Ok(Duration::from_secs_f64(v / 1000.0))
}

fn compute(a: ComputeArgs) -> Result<()> {
    let listeners = match NodeListeners::bind(&a.host, a.model_port, a.weights_port, a.data_port) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot bind: {e}");
            std::process::exit(bench::EXIT_BIND_FAILURE);
        }
    };
    let (m, w, d) = listeners.ports()?;
    let options = NodeOptions {
        delay_per_layer: ms(a.delay_per_layer_ms)?,
        jitter: ms(a.jitter_ms)?,
        chunk: ChunkConfig::new(a.chunk_bytes)?,
        seed: a.seed,
        exec: if a.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        },
        ..NodeOptions::default()
    };
    println!("{}", bench::ready_line(m, w, d));
    io::stdout().flush()?;
    let outcome = ComputeNode::new(listeners, options).run()?;
    let r = &outcome.report;
    if let Some(path) = a.log_metrics {
        let new = !path.exists();
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&path)?;
        if new {
            writeln!(f, "index,layers,cycles,compute_s,overhead_s,sent_bytes")?;
        }
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.index,
            r.layers,
            r.cycles,
            r.compute.as_secs_f64(),
            r.overhead.as_secs_f64(),
            r.sent_bytes
        )?;
    }
    Ok(())
}

fn read_tensor_stream(mut r: impl Read) -> Result<Vec<Tensor>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut rest = buf.as_slice();
    let mut out = Vec::new();
    while !rest.is_empty() {
        out.push(Tensor::read_from(&mut rest).context("malformed tensor stream")?);
    }
    Ok(out)
}

/// Inputs with their names (file names for a directory, indices otherwise).
fn read_inputs(spec: &str) -> Result<Vec<(String, Tensor)>> {
    let named = |ts: Vec<Tensor>| {
        ts.into_iter()
            .enumerate()
            .map(|(i, t)| (format!("{i:06}"), t))
            .collect()
    };
    if spec == "-" {
        return Ok(named(read_tensor_stream(io::stdin().lock())?));
    }
    let p = Path::new(spec);
    if p.is_dir() {
        let mut files: Vec<_> = fs::read_dir(p)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .collect();
        files.sort_by_key(|e| e.file_name());
        files
            .into_iter()
            .map(|e| {
                let t = Tensor::load(e.path()).with_context(|| e.path().display().to_string())?;
                Ok((e.file_name().to_string_lossy().into_owned(), t))
            })
            .collect()
    } else {
        Ok(named(read_tensor_stream(
            fs::File::open(p).with_context(|| spec.to_string())?,
        )?))
    }
}

fn dispatch(a: DispatchArgs) -> Result<()> {
    let graph = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let nodes = a
        .nodes
        .iter()
        .map(|s| s.parse::<NodeAddress>())
        .collect::<Result<Vec<_>, _>>()?;
    let mut cfg = ChainConfig::new(nodes);
    cfg.data_codec = a.data_codec.parse()?;
    cfg.weights_codec = a.weights_codec.parse()?;
    cfg.arch_codec = CodecSpec::TEXT.with_compression(match a.arch_compression {
        ArchCompression::None => Compression::None,
        ArchCompression::Lz => Compression::Lz,
    });
    cfg.chunk = ChunkConfig::new(a.chunk_bytes)?;
    cfg.window = a.window;
    cfg.result_bind = a.result_bind.parse().context("--result-bind")?;
    cfg.result_advertise = a.result_advertise;
    if !a.cuts.is_empty() {
        cfg.cuts = Some(
            a.cuts
                .iter()
                .map(|c| c.parse().map_err(anyhow::Error::msg))
                .collect::<Result<Vec<CutPoint>>>()?,
        );
    }
    let inputs = read_inputs(&a.inputs)?;
    let (names, tensors): (Vec<_>, Vec<_>) = inputs.into_iter().unzip();

    let mut chain = dispatcher::configure(&graph, &cfg)?;
    let start = Instant::now();
    let outputs = chain.infer_stream(tensors)?;
    let elapsed = start.elapsed().as_secs_f64();
    let report = chain.shutdown()?;

    if a.outputs == "-" {
        let mut out = io::stdout().lock();
        for t in &outputs {
            t.write_to(&mut out)?;
        }
        out.flush()?;
    } else if Path::new(&a.outputs).is_dir() || a.outputs.ends_with('/') {
        fs::create_dir_all(&a.outputs)?;
        for (name, t) in names.iter().zip(&outputs) {
            t.save(Path::new(&a.outputs).join(name))?;
        }
    } else {
        let mut f = io::BufWriter::new(fs::File::create(&a.outputs)?);
        for t in &outputs {
            t.write_to(&mut f)?;
        }
        f.flush()?;
    }

    let m = report.metrics(outputs.len() as u64, elapsed);
    let rows = CsvRow::from_report(
        &a.model
            .file_name()
            .map_or("model".into(), |n| n.to_string_lossy().into_owned()),
        &ClassCodecs {
            architecture: cfg.arch_codec,
            weights: cfg.weights_codec,
            data: cfg.data_codec,
        },
        &m,
        &EnergyParams::default(),
    );
    match a.metrics {
        Some(p) => metrics::write_csv(fs::File::create(p)?, &rows)?,
        None => metrics::write_csv(io::stderr().lock(), &rows)?,
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let graph = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let b = bridges(&graph);
    println!(
        "model: {} layers, {} weight bytes",
        graph.compute_layer_count(),
        graph.weight_bytes()
    );
    println!(
        "bridges: {}",
        b.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
    );
    let cuts = auto_cuts(&graph, a.nodes)?;
    println!(
        "cuts: {}",
        cuts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
    );
    let parts = partition_model(&graph, &cuts)?;
    let mut csv_rows = Vec::new();
    for p in &parts {
        let ids = p.layer_ids();
        println!("partition {}:", p.index);
        println!("  layers: {} [{}]", p.layer_count(), ids.join(", "));
        println!("  weight_bytes: {}", p.graph.weight_bytes());
        println!("  input_shape: {:?}", p.input_shape());
        println!("  output_shape: {:?}", p.output_shape());
        csv_rows.push([
            p.index.to_string(),
            p.layer_count().to_string(),
            ids.join(" "),
            p.graph.weight_bytes().to_string(),
            dims(p.input_shape()),
            dims(&p.output_shape()),
        ]);
    }
    if let Some(path) = a.csv {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "partition",
            "layers",
            "layer_ids",
            "weight_bytes",
            "input_shape",
            "output_shape",
        ])?;
        for r in csv_rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn dims(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let mut plan = BenchPlan::load(&a.plan)?;
    if a.in_process {
        plan.mode = bench::Mode::InProcess;
    }
    let exe = std::env::current_exe()?;
    let outcome = bench::run_bench(&plan, Some(&exe))?;
    metrics::write_csv(fs::File::create(&a.out)?, &outcome.rows)?;
    for (k, reason) in &outcome.skipped {
        eprintln!("skipped {k} node(s): {reason}");
    }
    let mut mismatches = 0;
    for r in &outcome.runs {
        if !r.accounting_matches() {
            mismatches += 1;
            eprintln!(
                "payload accounting mismatch: {} node(s), {}: reported {:?}, relays {:?}",
                r.nodes, r.codec, r.metrics.classes, r.transport
            );
        }
    }
    eprintln!(
        "{} row(s) written to {}; {} run(s), {} accounting mismatch(es)",
        outcome.rows.len(),
        a.out.display(),
        outcome.runs.len(),
        mismatches
    );
    if mismatches > 0 {
        bail!("payload accounting mismatch");
    }
    Ok(())
}

fn parse_model_spec(s: &str) -> Result<ModelSpec> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |i: usize| -> Result<usize> {
        parts
            .get(i)
            .context("missing field")?
            .parse()
            .with_context(|| format!("bad number in `{s}`"))
    };
    match parts[0] {
        "chain" if parts.len() == 3 => Ok(ModelSpec::Chain {
            input: num(2)?,
            sizes: vec![num(2)?; num(1)?],
            relu: false,
        }),
        "resnet" if parts.len() == 4 => Ok(ModelSpec::ResnetLike {
            blocks: num(1)?,
            channels: num(2)?,
            spatial: num(3)?,
            classes: 10,
        }),
        _ => bail!("expected chain:LAYERS:WIDTH or resnet:BLOCKS:CHANNELS:SPATIAL, got `{s}`"),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = parse_model_spec(&a.model)?;
    let graph = spec.build(a.seed)?;
    save_model(&a.out, &graph)?;
    if a.inputs > 0 {
        let dir = a.inputs_out.unwrap_or_else(|| a.out.join("inputs"));
        fs::create_dir_all(&dir)?;
        for i in 0..a.inputs {
            bench::input_tensor(graph.input_shape(), a.seed, i).save(dir.join(format!("{i:06}")))?;
        }
    }
    println!(
        "{}: {} layers, {} weight bytes -> {}",
        spec.label(),
        graph.compute_layer_count(),
        graph.weight_bytes(),
        a.out.display()
    );
    Ok(())
}
