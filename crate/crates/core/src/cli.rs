//! Command-line front end: simulation, detection, benchmarking, threshold
//! calibration, and format conversion.
//!
//! Node ids and ticks are 1-based in every file and flag.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::{
    calibrate_threshold, collect_null_traces, run_experiment, ExperimentSpec, MetricReport,
};
use crate::detector::{
    read_trace_csv, run_detector, write_trace_csv, CascadeDetector, DetectorConfig,
    StoppingReport,
};
use crate::error::{Error, Result};
use crate::sim::{
    gen_measurements, read_cascade_csv, read_panel_csv, sample_cascade, write_cascade_csv,
    write_panel_csv, PostChangeParams,
};
use crate::topology::{
    emit_edge_list, from_json, load_edge_list, parse_matpower_branches, to_json, Graph,
    InfluenceMatrix,
};

#[derive(Debug, Parser)]
#[command(
    name = "netcpd",
    version,
    about = "Online detection of cascading change-points on networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a failure cascade and its measurement panel.
    Simulate(SimulateArgs),
    /// Run the cascade detector over a panel file or a stdin stream.
    Detect(DetectArgs),
    /// Run a benchmark experiment described by a JSON spec.
    Bench(BenchArgs),
    /// Calibrate one method's threshold to the spec's target ARL.
    Calibrate(CalibrateArgs),
    /// Convert between graph formats and canonicalize data CSVs.
    Convert(ConvertArgs),
}

/// Graph input shared by several subcommands.
#[derive(Debug, Args)]
pub struct GraphArgs {
    /// Graph file: edge-list CSV, MATPOWER case, or topology JSON.
    #[arg(long)]
    pub graph: PathBuf,
    /// Uniform symmetric influence rate; required for formats without
    /// rates (MATPOWER), rejected for formats that carry them.
    #[arg(long)]
    pub alpha0: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    /// 1-based node that fails first.
    #[arg(long)]
    pub seed_node: usize,
    /// Time of the first failure.
    #[arg(long, default_value_t = 1.0)]
    pub seed_time: f64,
    /// Simulation horizon; defaults to the panel length.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Number of measurement ticks to draw.
    #[arg(long)]
    pub ticks: usize,
    /// Post-change mean, shared by all nodes.
    #[arg(long, default_value_t = 1.0)]
    pub post_mean: f64,
    /// Post-change standard deviation, shared by all nodes.
    #[arg(long, default_value_t = 1.0)]
    pub post_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output prefix; writes `<out>_cascade.csv` and `<out>_panel.csv`.
    #[arg(long, default_value = "sim")]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Detector configuration file (JSON or key=value); defaults apply
    /// otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Panel CSV to scan; omit to stream ticks from stdin.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Seed for the hypothesis-search sampler.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trace CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Experiment spec JSON.
    #[arg(long)]
    pub spec: PathBuf,
    /// Override the spec's trial count.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Override the spec's base seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for parallel trials.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Results CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Experiment spec JSON.
    #[arg(long)]
    pub spec: PathBuf,
    /// Method label to calibrate; defaults to the spec's first method.
    #[arg(long)]
    pub method: Option<String>,
    /// Override the spec's target ARL.
    #[arg(long)]
    pub target: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Calibration CSV destination; stdout when omitted. Delay columns
    /// are NaN: calibration runs no post-change trials.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Input file; the format is detected from the content.
    #[arg(long)]
    pub input: PathBuf,
    /// Target format for graph inputs: edge-list or json.
    #[arg(long)]
    pub to: Option<GraphFormat>,
    /// Uniform rate required when converting from MATPOWER.
    #[arg(long)]
    pub alpha0: Option<f64>,
    /// Destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GraphFormat {
    EdgeList,
    Json,
}

/// Executes a parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Detect(args) => cmd_detect(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Convert(args) => cmd_convert(args),
    }
}

/// What a text input holds, detected from its content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InputKind {
    Matpower,
    TopologyJson,
    EdgeList,
    CascadeCsv,
    PanelCsv,
    TraceCsv,
    ResultsCsv,
}

fn sniff_kind(text: &str) -> InputKind {
    if text.contains("mpc.branch") {
        return InputKind::Matpower;
    }
    let first = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .unwrap_or("");
    if first.starts_with('{') {
        return InputKind::TopologyJson;
    }
    if first == "node,tau" {
        return InputKind::CascadeCsv;
    }
    if first == "t,S_eta,alarm" {
        return InputKind::TraceCsv;
    }
    if first == "method,threshold,arl,arl_se,edd,edd_se,censored_frac" {
        return InputKind::ResultsCsv;
    }
    if first.starts_with("t,x_1") {
        return InputKind::PanelCsv;
    }
    InputKind::EdgeList
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::file(path, e))
}

fn load_graph(args: &GraphArgs) -> Result<(Graph, InfluenceMatrix)> {
    let text = read_file(&args.graph)?;
    let need_alpha0 = |what: &str| {
        args.alpha0.ok_or_else(|| {
            Error::InvalidConfig(format!("--alpha0 required for {what} input"))
        })
    };
    let reject_alpha0 = |what: &str| {
        if args.alpha0.is_some() {
            Err(Error::InvalidConfig(format!(
                "--alpha0 conflicts with {what} input, which already carries rates"
            )))
        } else {
            Ok(())
        }
    };
    match sniff_kind(&text) {
        InputKind::Matpower => {
            let a0 = need_alpha0("MATPOWER")?;
            let topo = parse_matpower_branches(&text)?;
            let alpha = InfluenceMatrix::uniform(&topo.graph, a0)?;
            Ok((topo.graph, alpha))
        }
        InputKind::TopologyJson => {
            reject_alpha0("topology JSON")?;
            from_json(&text)
        }
        InputKind::EdgeList => {
            reject_alpha0("edge-list")?;
            load_edge_list(Cursor::new(text))
        }
        other => Err(Error::InvalidData(format!(
            "{} does not look like a graph file (detected {other:?})",
            args.graph.display()
        ))),
    }
}

fn load_detector_config(path: Option<&Path>, n: usize) -> Result<DetectorConfig> {
    let config = match path {
        Some(p) => DetectorConfig::from_config_text(&read_file(p)?)?,
        None => DetectorConfig::default(),
    };
    config.validate(n)?;
    Ok(config)
}

/// Opens `--out` or falls back to stdout.
fn open_sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::file(p, e))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let (graph, alpha) = load_graph(&args.graph)?;
    let n = graph.node_count();
    if args.seed_node < 1 || args.seed_node > n {
        return Err(Error::InvalidData(format!(
            "--seed-node {} out of range for {n} nodes",
            args.seed_node
        )));
    }
    if args.ticks == 0 {
        return Err(Error::InvalidData("--ticks must be positive".into()));
    }
    let horizon = args.horizon.unwrap_or(args.ticks as f64);
    let params = PostChangeParams::uniform(n, args.post_mean, args.post_std)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let times = sample_cascade(
        &graph,
        &alpha,
        args.seed_node - 1,
        args.seed_time,
        horizon,
        &mut rng,
    )?;
    let panel = gen_measurements(&times, &params, args.ticks, &mut rng)?;
    let cascade_path = format!("{}_cascade.csv", args.out);
    let panel_path = format!("{}_panel.csv", args.out);
    write_cascade_csv(&times, BufWriter::new(File::create(&cascade_path)?))?;
    write_panel_csv(&panel, BufWriter::new(File::create(&panel_path)?))?;
    println!(
        "wrote {cascade_path} and {panel_path}: {} of {n} nodes failed",
        times.finite_count()
    );
    Ok(())
}

fn cmd_detect(args: DetectArgs) -> Result<()> {
    let (graph, alpha) = load_graph(&args.graph)?;
    let config = load_detector_config(args.config.as_deref(), graph.node_count())?;
    let report = match &args.panel {
        Some(path) => {
            let panel = read_panel_csv(BufReader::new(File::open(path).map_err(|e| Error::file(path, e))?))?;
            if panel.node_count() != graph.node_count() {
                return Err(Error::InvalidData(format!(
                    "panel has {} nodes but the graph has {}",
                    panel.node_count(),
                    graph.node_count()
                )));
            }
            run_detector(
                panel.rows().map(<[f64]>::to_vec),
                graph,
                alpha,
                config.clone(),
                args.seed,
            )?
        }
        None => detect_streaming(&graph, &alpha, &config, args.seed, args.out.as_deref())?,
    };
    if args.panel.is_some() {
        let mut sink = open_sink(args.out.as_deref())?;
        write_trace_csv(&report, &config, &mut sink)?;
        sink.flush()?;
    }
    let alarm_line = match report.alarm_tick {
        Some(t) => {
            let s = report.trace.last().map(|&(_, s)| s).unwrap_or(f64::NAN);
            format!("alarm at tick {t} (S_eta={s})")
        }
        None => format!("no alarm in {} ticks", report.last_tick),
    };
    // keep the alarm line off stdout when the trace itself goes there
    if args.out.is_some() {
        println!("{alarm_line}");
    } else {
        eprintln!("{alarm_line}");
    }
    Ok(())
}

/// Streaming detect: reads panel-CSV lines from stdin and emits each trace
/// row as soon as its statistic is computed.
fn detect_streaming(
    graph: &Graph,
    alpha: &InfluenceMatrix,
    config: &DetectorConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<StoppingReport> {
    let n = graph.node_count();
    let mut det = CascadeDetector::new(graph.clone(), alpha.clone(), config.clone())?;
    det.reset(seed);
    let mut sink = open_sink(out)?;
    for line in config.to_key_value_string().lines() {
        writeln!(sink, "# {line}")?;
    }
    writeln!(sink, "t,S_eta,alarm")?;
    sink.flush()?;
    let stdin = io::stdin();
    let mut trace = Vec::new();
    let mut alarm_tick = None;
    let mut saw_header = false;
    let mut expected_t = 1u64;
    for (idx, line) in stdin.lock().lines().enumerate() {
        let line = line?;
        let text = line.trim();
        let lineno = idx + 1;
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        if !saw_header {
            let cols: Vec<&str> = text.split(',').collect();
            if cols.len() != n + 1 || cols[0] != "t" {
                return Err(Error::parse(
                    lineno,
                    format!("expected header t,x_1,...,x_{n}"),
                ));
            }
            saw_header = true;
            continue;
        }
        let row = parse_panel_line(text, n, expected_t, lineno)?;
        expected_t += 1;
        if let Some(stat) = det.step(&row) {
            let t = det.ticks_seen();
            let alarm = alarm_tick.is_none() && stat > config.b;
            trace.push((t, stat));
            writeln!(sink, "{t},{stat},{}", alarm as u8)?;
            sink.flush()?;
            if alarm {
                alarm_tick = Some(t);
                break;
            }
        }
    }
    Ok(StoppingReport {
        alarm_tick,
        last_tick: det.ticks_seen(),
        trace,
        alarming: None,
    })
}

fn parse_panel_line(text: &str, n: usize, expected_t: u64, lineno: usize) -> Result<Vec<f64>> {
    let fields: Vec<&str> = text.split(',').collect();
    if fields.len() != n + 1 {
        return Err(Error::parse(
            lineno,
            format!("expected {} fields, got {}", n + 1, fields.len()),
        ));
    }
    let t: u64 = fields[0]
        .parse()
        .map_err(|_| Error::parse(lineno, format!("bad tick {:?}", fields[0])))?;
    if t != expected_t {
        return Err(Error::parse(
            lineno,
            format!("tick {t} out of order, expected {expected_t}"),
        ));
    }
    fields[1..]
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(lineno, format!("bad measurement {s:?}")))
        })
        .collect()
}

fn set_jobs(jobs: Option<usize>) -> Result<()> {
    if let Some(j) = jobs {
        if j == 0 {
            return Err(Error::InvalidConfig("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn load_spec(path: &Path, trials: Option<usize>, seed: Option<u64>) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::from_json(&read_file(path)?)?;
    if let Some(t) = trials {
        spec.trials = t;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    set_jobs(args.jobs)?;
    let spec = load_spec(&args.spec, args.trials, args.seed)?;
    let report = run_experiment(&spec)?;
    let mut sink = open_sink(args.out.as_deref())?;
    report.write_csv(&mut sink)?;
    sink.flush()?;
    if let Some(out) = &args.out {
        println!("wrote {} ({} rows)", out.display(), report.rows.len());
    }
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    set_jobs(args.jobs)?;
    let mut spec = load_spec(&args.spec, args.trials, args.seed)?;
    if let Some(t) = args.target {
        spec.target_arl = t;
    }
    let (graph, alpha) = spec.build_graph()?;
    spec.validate(&graph, &alpha)?;
    let method = match &args.method {
        Some(label) => spec
            .methods
            .iter()
            .find(|m| m.label() == *label)
            .ok_or_else(|| {
                Error::InvalidConfig(format!("no method labeled {label:?} in the spec"))
            })?,
        None => &spec.methods[0],
    };
    let traces = collect_null_traces(method, &spec, &graph, &alpha)?;
    let warmup = method.build(&graph, &alpha)?.warmup();
    let cal = calibrate_threshold(&traces, spec.run_cap, warmup, spec.target_arl, spec.arl_tol)?;
    let mut sink = open_sink(args.out.as_deref())?;
    writeln!(sink, "method,threshold,arl,arl_se,edd,edd_se,censored_frac")?;
    writeln!(
        sink,
        "{},{},{},{},NaN,NaN,{}",
        method.label(),
        cal.threshold,
        cal.arl.mean,
        cal.arl.se,
        cal.arl.censored_frac()
    )?;
    sink.flush()?;
    Ok(())
}

fn cmd_convert(args: ConvertArgs) -> Result<()> {
    let text = read_file(&args.input)?;
    let kind = sniff_kind(&text);
    let graph_target = |default: GraphFormat| args.to.unwrap_or(default);
    let mut sink = open_sink(args.out.as_deref())?;
    match kind {
        InputKind::Matpower => {
            let a0 = args.alpha0.ok_or_else(|| {
                Error::InvalidConfig("--alpha0 required to convert MATPOWER input".into())
            })?;
            let topo = parse_matpower_branches(&text)?;
            let alpha = InfluenceMatrix::uniform(&topo.graph, a0)?;
            write_graph(&topo.graph, &alpha, graph_target(GraphFormat::EdgeList), &mut sink)?;
        }
        InputKind::TopologyJson => {
            let (graph, alpha) = from_json(&text)?;
            write_graph(&graph, &alpha, graph_target(GraphFormat::EdgeList), &mut sink)?;
        }
        InputKind::EdgeList => {
            let (graph, alpha) = load_edge_list(Cursor::new(text))?;
            write_graph(&graph, &alpha, graph_target(GraphFormat::Json), &mut sink)?;
        }
        InputKind::CascadeCsv => {
            let times = read_cascade_csv(Cursor::new(text))?;
            write_cascade_csv(&times, &mut sink)?;
        }
        InputKind::PanelCsv => {
            let panel = read_panel_csv(Cursor::new(text))?;
            write_panel_csv(&panel, &mut sink)?;
        }
        InputKind::TraceCsv => {
            let (rows, alarm) = read_trace_csv(Cursor::new(text))?;
            writeln!(sink, "t,S_eta,alarm")?;
            for (t, s) in rows {
                writeln!(sink, "{t},{s},{}", (alarm == Some(t)) as u8)?;
            }
        }
        InputKind::ResultsCsv => {
            let report = MetricReport::read_csv(Cursor::new(text))?;
            report.write_csv(&mut sink)?;
        }
    }
    sink.flush()?;
    Ok(())
}

fn write_graph(
    graph: &Graph,
    alpha: &InfluenceMatrix,
    target: GraphFormat,
    sink: &mut impl Write,
) -> Result<()> {
    match target {
        GraphFormat::EdgeList => emit_edge_list(graph, alpha, sink),
        GraphFormat::Json => {
            writeln!(sink, "{}", to_json(graph, alpha)?)?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sniffs_every_input_kind() {
        assert_eq!(sniff_kind("function mpc = x\nmpc.branch = [\n1 2;\n];"), InputKind::Matpower);
        assert_eq!(sniff_kind("{\"nodes\": 2, \"rates\": []}"), InputKind::TopologyJson);
        assert_eq!(sniff_kind("node,tau\n1,inf\n"), InputKind::CascadeCsv);
        assert_eq!(sniff_kind("# L=5\nt,S_eta,alarm\n5,0.1,0\n"), InputKind::TraceCsv);
        assert_eq!(sniff_kind("t,x_1,x_2\n1,0.5,-0.2\n"), InputKind::PanelCsv);
        assert_eq!(
            sniff_kind("method,threshold,arl,arl_se,edd,edd_se,censored_frac\n"),
            InputKind::ResultsCsv
        );
        assert_eq!(sniff_kind("1,2,0.5\n"), InputKind::EdgeList);
    }

    #[test]
    fn panel_line_parser_rejects_malformed_rows() {
        assert_eq!(parse_panel_line("1,0.5,-1.0", 2, 1, 3).unwrap(), vec![0.5, -1.0]);
        assert!(parse_panel_line("2,0.5,-1.0", 2, 1, 3).is_err());
        assert!(parse_panel_line("1,0.5", 2, 1, 3).is_err());
        assert!(parse_panel_line("1,0.5,nope", 2, 1, 3).is_err());
        assert!(parse_panel_line("1,0.5,inf", 2, 1, 3).is_err());
    }

    #[test]
    fn cli_parses_each_subcommand() {
        use clap::Parser as _;
        let cli = Cli::try_parse_from([
            "netcpd", "simulate", "--graph", "g.csv", "--seed-node", "1", "--ticks", "10",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::Simulate(_)));
        let cli = Cli::try_parse_from(["netcpd", "detect", "--graph", "g.csv"]).unwrap();
        assert!(matches!(cli.command, Command::Detect(_)));
        let cli = Cli::try_parse_from(["netcpd", "bench", "--spec", "s.json"]).unwrap();
        assert!(matches!(cli.command, Command::Bench(_)));
        let cli =
            Cli::try_parse_from(["netcpd", "calibrate", "--spec", "s.json", "--target", "50"])
                .unwrap();
        assert!(matches!(cli.command, Command::Calibrate(_)));
        let cli = Cli::try_parse_from(["netcpd", "convert", "--input", "g.m"]).unwrap();
        assert!(matches!(cli.command, Command::Convert(_)));
        assert!(Cli::try_parse_from(["netcpd", "nonsense"]).is_err());
    }
}
