use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use voxroute::amdb::ProposalRegion;
use voxroute::bench::{bench_pipeline, bench_spconv, write_csv, SpconvBench};
use voxroute::dispatcher::{
    classify_scene, route_statistics, Dispatcher, ExpertKind, RouteThresholds,
};
use voxroute::experts::write_json_lines;
use voxroute::formats::read_points;
use voxroute::pipeline::{run_pipeline, ImageSource, PipelineConfig};
use voxroute::runtime::{
    annotate_placement, execute_graph, fuse_graph, prune_graph, quantize_graph, random_graph,
    simulate_pipeline, ComputeGraph, PipelineSpec, DEFAULT_PATTERNS,
};
use voxroute::training::{
    adaptive_lr, balanced_probs, divide_subsets, ks_two_sample, AdaptiveLrInput, TRAINED_EXPERTS,
};
use voxroute::voxel::{voxelize, MeanIntensityRecipe};

#[derive(Parser)]
#[command(
    name = "voxroute",
    version,
    about = "Sparse voxel detection with scenario routing"
)]
struct Cli {
    /// Pipeline configuration (JSON). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for anything random.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Voxelize a point cloud and print one CSV row per occupied cell.
    Voxelize {
        #[arg(long)]
        cloud: PathBuf,
    },
    /// Run the routed pipeline and emit detections as JSON lines.
    Detect(DetectArgs),
    /// Route a file of scenes and report per-expert statistics as CSV.
    RouteStats {
        /// JSON lines; each line is an array of `{min, max, confidence}`.
        #[arg(long)]
        scenes: PathBuf,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
    /// Sparse vs dense multiply-add counts and timings over an occupancy sweep.
    BenchSpconv {
        #[arg(long, default_value_t = 16)]
        grid: usize,
        #[arg(long, default_value_t = 3)]
        kernel: usize,
        #[arg(long, default_value_t = 4)]
        cin: usize,
        #[arg(long, default_value_t = 4)]
        cout: usize,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0,0.02,0.05,0.1,0.2,0.5,1"
        )]
        occupancy: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Overlapped vs serial makespans for chunked transfer/compute.
    BenchPipeline {
        /// Comma-separated `chunks:transfer:compute` triples.
        #[arg(long, value_delimiter = ',')]
        specs: Vec<String>,
        /// Also write the overlapped event timeline of the first spec.
        #[arg(long)]
        timeline: Option<PathBuf>,
    },
    /// Apply optimization passes to a graph and write the result as JSON.
    GraphOpt {
        /// Graph JSON; a seeded random graph when absent.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Passes in order: prune, quantize, fuse, place.
        #[arg(long, value_delimiter = ',', default_value = "fuse,place")]
        passes: Vec<String>,
        /// Magnitude threshold for the prune pass.
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
    },
    /// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
    KsTest {
        /// Single-column numeric text file.
        a: PathBuf,
        b: PathBuf,
    },
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    image_features: Option<PathBuf>,
    /// Write the full run report (route, timings, op counts) as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

#[derive(Args)]
struct ThresholdArgs {
    /// Distance threshold D in meters.
    #[arg(long)]
    distance_d: Option<f64>,
    /// Confidence threshold C.
    #[arg(long)]
    confidence_c: Option<f64>,
}

impl ThresholdArgs {
    fn apply(&self, th: &mut RouteThresholds) -> Result<()> {
        if let Some(d) = self.distance_d {
            th.distance_d = d;
        }
        if let Some(c) = self.confidence_c {
            th.confidence_c = c;
        }
        th.validate()?;
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        bail!("--workers must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .context("configuring worker pool")?;

    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::reference(),
    };
    let out = cli.out.as_deref();

    match cli.command {
        Command::Voxelize { cloud } => cmd_voxelize(&cfg, &cloud, out),
        Command::Detect(args) => {
            args.thresholds.apply(&mut cfg.dispatch)?;
            if let Some(seed) = cli.seed {
                cfg.model_seed = Some(seed);
            }
            cmd_detect(&cfg, &args, out, workers)
        }
        Command::RouteStats { scenes, thresholds } => {
            thresholds.apply(&mut cfg.dispatch)?;
            cmd_route_stats(&cfg, &scenes, cli.seed.unwrap_or(cfg.train.seed), out)
        }
        Command::BenchSpconv {
            grid,
            kernel,
            cin,
            cout,
            occupancy,
            repeats,
        } => {
            let bench = SpconvBench {
                extents: [grid; 3],
                kernel,
                in_channels: cin,
                out_channels: cout,
                repeats,
                seed: cli.seed.unwrap_or(0),
                workers,
            };
            let rows = bench_spconv(&bench, &occupancy)?;
            write_csv(sink(out)?, &rows)?;
            Ok(())
        }
        Command::BenchPipeline { specs, timeline } => {
            cmd_bench_pipeline(&specs, timeline.as_deref(), out)
        }
        Command::GraphOpt {
            graph,
            passes,
            threshold,
        } => cmd_graph_opt(
            graph.as_deref(),
            &passes,
            threshold,
            cli.seed.unwrap_or(0),
            out,
        ),
        Command::KsTest { a, b } => {
            let r = ks_two_sample(&read_column(&a)?, &read_column(&b)?)?;
            writeln!(sink(out)?, "D={:.6} p={:.6}", r.statistic, r.p_value)?;
            Ok(())
        }
    }
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_voxelize(cfg: &PipelineConfig, cloud: &Path, out: Option<&Path>) -> Result<()> {
    let pc = read_points(cloud)?;
    let v = voxelize(&pc.points, &cfg.grid, &MeanIntensityRecipe)?;
    let mut w = csv::Writer::from_writer(sink(out)?);
    w.write_record(["x", "y", "z", "intensity", "count", "dx", "dy", "dz"])?;
    for (c, f) in v.tensor.rows() {
        let mut rec = vec![c.x.to_string(), c.y.to_string(), c.z.to_string()];
        rec.extend(f.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    eprintln!(
        "{} points, {} voxels, {} dropped, {} intensities clamped",
        pc.points.len(),
        v.tensor.len(),
        v.dropped,
        pc.clamped
    );
    Ok(())
}

fn cmd_detect(
    cfg: &PipelineConfig,
    args: &DetectArgs,
    out: Option<&Path>,
    workers: usize,
) -> Result<()> {
    let models = cfg.load_models()?;
    let dispatcher = Dispatcher::new(cfg.dispatch)?;
    let pc = read_points(&args.cloud)?;
    let image = match &args.image_features {
        Some(p) => ImageSource::File(p.clone()),
        None => ImageSource::None,
    };
    let report = run_pipeline(&pc.points, image, cfg, &models, &dispatcher, workers)?;

    let det_path = out.or(cfg.outputs.detections.as_deref());
    write_json_lines(sink(det_path)?, &report.detections, &cfg.class_names)?;
    if let Some(p) = args.report.as_deref().or(cfg.outputs.report.as_deref()) {
        fs::write(p, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!(
        "route {} ({:?}), {} proposals, {} detections, {} backbone FMAs",
        report.decision.expert,
        report.decision.scenario,
        report.proposals.len(),
        report.detections.len(),
        report.backbone_fmas.sparse_fmas
    );
    Ok(())
}

fn cmd_route_stats(
    cfg: &PipelineConfig,
    scenes: &Path,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let text =
        fs::read_to_string(scenes).with_context(|| format!("reading {}", scenes.display()))?;
    let mut decisions = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let props: Vec<ProposalRegion> =
            serde_json::from_str(line).with_context(|| format!("scene on line {}", i + 1))?;
        decisions.push(classify_scene(&props, &cfg.dispatch));
    }
    if decisions.is_empty() {
        bail!("{} contains no scenes", scenes.display());
    }
    let stats = route_statistics(&decisions);
    let labeled: Vec<(u64, ExpertKind)> = decisions
        .iter()
        .enumerate()
        .map(|(i, d)| (i as u64, d.expert))
        .collect();
    let sizes: Vec<usize> = divide_subsets(&labeled, seed)?.sizes();
    // Subset sizes are only all positive when every expert saw a scene.
    let probs = balanced_probs(&sizes).ok();

    let mut w = csv::Writer::from_writer(sink(out)?);
    w.write_record([
        "expert",
        "count",
        "fraction",
        "subset_size",
        "balanced_prob",
        "adaptive_lr",
    ])?;
    for (i, e) in TRAINED_EXPERTS.iter().enumerate() {
        let lr = adaptive_lr(&AdaptiveLrInput {
            base_rate: cfg.train.base_rate,
            batch_flags: decisions.iter().map(|d| d.expert == *e).collect(),
        })?;
        w.write_record([
            e.tag().to_string(),
            stats.count(*e).to_string(),
            stats.fraction(*e).to_string(),
            sizes[i].to_string(),
            probs.as_ref().map_or(String::new(), |p| p[i].to_string()),
            lr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_spec(s: &str) -> Result<(usize, f64, f64)> {
    let parts: Vec<&str> = s.split(':').collect();
    let [n, t, c] = parts.as_slice() else {
        bail!("spec {s:?} is not chunks:transfer:compute");
    };
    Ok((n.parse()?, t.parse()?, c.parse()?))
}

fn cmd_bench_pipeline(specs: &[String], timeline: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let specs: Vec<(usize, f64, f64)> = if specs.is_empty() {
        let mut v = Vec::new();
        for n in [1, 2, 4, 8] {
            for t in [0.0, 1.0, 2.0] {
                for c in [0.0, 1.0, 3.0] {
                    v.push((n, t, c));
                }
            }
        }
        v
    } else {
        specs.iter().map(|s| parse_spec(s)).collect::<Result<_>>()?
    };
    let rows = bench_pipeline(&specs)?;
    write_csv(sink(out)?, &rows)?;
    if let Some(p) = timeline {
        let (n, t, c) = specs[0];
        let run = simulate_pipeline(&PipelineSpec::new(n, t, c, true)?)?;
        run.write_csv(File::create(p).with_context(|| format!("creating {}", p.display()))?)?;
    }
    Ok(())
}

fn cmd_graph_opt(
    path: Option<&Path>,
    passes: &[String],
    threshold: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let (mut g, inputs) = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            (ComputeGraph::from_json(&text)?, None)
        }
        None => {
            let r = random_graph(seed, 12);
            (r.graph, Some(r.inputs))
        }
    };
    let original = g.clone();
    let mut summary = serde_json::Map::new();
    summary.insert("nodes_before".into(), g.len().into());
    for pass in passes {
        g = match pass.as_str() {
            "prune" => {
                if threshold.is_nan() || threshold < 0.0 {
                    bail!("--threshold must be non-negative");
                }
                let p = prune_graph(&g, threshold);
                summary.insert("pruned_weights".into(), p.zeroed_weights.into());
                summary.insert("pruned_magnitude".into(), p.removed_magnitude.into());
                summary.insert("pruned_nodes".into(), p.removed_nodes.into());
                p.graph
            }
            "quantize" => {
                let q = quantize_graph(&g);
                let scales: serde_json::Map<String, serde_json::Value> = q
                    .scales
                    .iter()
                    .map(|(k, v)| (k.to_string(), (*v).into()))
                    .collect();
                summary.insert("scales".into(), scales.into());
                q.graph
            }
            "fuse" => fuse_graph(&g, &DEFAULT_PATTERNS),
            "place" => annotate_placement(&g),
            other => bail!("unknown pass {other:?}; expected prune, quantize, fuse or place"),
        };
        g.validate()?;
    }
    summary.insert("nodes_after".into(), g.len().into());
    if let Some(inputs) = inputs {
        let a = execute_graph(&original, &inputs)?;
        let b = execute_graph(&g, &inputs)?;
        let diff = a
            .iter()
            .zip(&b)
            .flat_map(|(x, y)| x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max);
        summary.insert("max_output_diff".into(), diff.into());
    }
    let mut w = sink(out)?;
    writeln!(w, "{}", g.to_json()?)?;
    w.flush()?;
    eprintln!("{}", serde_json::Value::Object(summary));
    Ok(())
}

fn read_column(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .with_context(|| format!("{} line {}: {l:?}", path.display(), i + 1))
        })
        .collect()
}
