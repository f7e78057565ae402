//! Command-line interface.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};
use maqi_core::model::{format_timestamp, parse_timestamp};
use maqi_core::sim::{generate_samples, generate_traces, metrics_csv, run_scenario, ScenarioConfig, SyntheticField};
use maqi_core::tasking::{
    assign_tasks, build_association_matrix, extract_mobility_features, read_credits, read_traces, write_traces,
    CellScheme,
};
use maqi_core::wire::to_json_lines;
use maqi_core::{MaqiRecord, PollutantKind, Quadkey, RawSample, SourceClass};

use crate::config::ServiceConfig;
use crate::state::{RecordOutcome, Service};

#[derive(Debug, Parser)]
#[command(name = "maqi", version, about = "Multi-source air quality fusion service")]
pub struct Cli {
    /// Service config file (TOML).
    #[arg(long, global = true, env = crate::config::CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Overrides the configured spool directory.
    #[arg(long, global = true)]
    pub spool_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate line-delimited sample files, route them to edges and spool closed slots.
    Ingest {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Clock used to decide which slots are closed (default: now).
        #[arg(long)]
        now: Option<String>,
    },
    /// Fuse a spooled slot and print its M-AQI table.
    Fuse {
        /// Any instant inside the slot.
        slot: String,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Write seeded synthetic samples as line-delimited JSON.
    Simulate {
        scenario: PathBuf,
        /// Only this seed instead of every seed in the scenario.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write mobility traces to this CSV file.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Fuse seeded scenarios under each weight setting and print RMSE per pollutant.
    Evaluate { scenario: PathBuf },
    /// Assign crowdsensing tasks for a slot from mobility traces.
    AssignTasks {
        /// Any instant inside the slot.
        slot: String,
        #[arg(long)]
        traces: PathBuf,
        /// Credit scores CSV; residents without one get the neutral prior.
        #[arg(long)]
        credits: Option<PathBuf>,
        /// Sensing points, one quadkey per line (default: every visited cell).
        #[arg(long)]
        points: Option<PathBuf>,
        /// Residents per point.
        #[arg(short, long, default_value_t = 1)]
        k: usize,
        /// Maximum tasks per resident.
        #[arg(short, long, default_value_t = 1)]
        q: usize,
        /// Cell depth of sensing points.
        #[arg(long, default_value_t = 8)]
        depth: u8,
        /// Number of slots, ending with this one, that count as history.
        #[arg(long, default_value_t = 24)]
        window: u32,
    },
}

/// Runs a parsed command, writing its output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut config = ServiceConfig::load(cli.config.as_deref())?;
    if cli.spool_dir.is_some() {
        config.spool_dir = cli.spool_dir;
    }
    match cli.command {
        Command::Ingest { files, now } => ingest(config, &files, now.as_deref(), out),
        Command::Fuse { slot } => fuse(config, &slot, out),
        Command::Serve { listen } => {
            if let Some(l) = listen {
                config.listen = l;
            }
            serve(config)
        }
        Command::Simulate { scenario, seed, traces } => simulate(&scenario, seed, traces.as_deref(), out),
        Command::Evaluate { scenario } => evaluate(&scenario, out),
        Command::AssignTasks { slot, traces, credits, points, k, q, depth, window } => {
            let args = TaskArgs { traces, credits, points, k, q, depth, window };
            assign(config, &slot, &args, out)
        }
    }
}

fn ingest(config: ServiceConfig, files: &[PathBuf], now: Option<&str>, out: &mut dyn Write) -> anyhow::Result<()> {
    if config.spool_dir.is_none() {
        bail!("ingest needs a spool directory (config spool_dir or --spool-dir)");
    }
    let now: DateTime<Utc> = match now {
        Some(s) => parse_timestamp("now", s)?,
        None => Utc::now(),
    };
    let service = Service::new(config)?;
    let mut failures = 0usize;
    writeln!(out, "file,index,status,sample_id,error")?;
    for file in files {
        let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
        let report = service.ingest_samples(&text).with_context(|| format!("parsing {}", file.display()))?;
        for r in &report.records {
            let status = match r.status {
                RecordOutcome::Accepted => "accepted",
                RecordOutcome::Duplicate => "duplicate",
                RecordOutcome::Rejected => "rejected",
            };
            writeln!(
                out,
                "{},{},{status},{},{}",
                file.display(),
                r.index,
                r.sample_id.as_deref().unwrap_or(""),
                r.error.as_deref().unwrap_or("")
            )?;
        }
        failures += report.rejected;
    }
    for slot in service.pending_slots() {
        match service.fuse_slot(slot, now) {
            Ok(s) => writeln!(out, "# spooled {} batch(es) for {}", s.batches, s.slot)?,
            Err(e) => {
                failures += 1;
                writeln!(out, "# {}: {e}", e.name())?;
            }
        }
    }
    if failures > 0 {
        bail!("{failures} record(s) or slot(s) failed");
    }
    Ok(())
}

/// Fixed-width M-AQI table, one row per cell.
pub fn format_maqi_table(records: &[MaqiRecord]) -> String {
    let mut s = format!(
        "{:<18} {:<22} {:>9} {:>8} {:>4} {:<7}",
        "cell", "slot", "lon", "lat", "aqi", "primary"
    );
    for k in PollutantKind::ALL {
        s.push_str(&format!(" {:>8}", k.label()));
    }
    for c in SourceClass::ALL {
        s.push_str(&format!(" {:>6}", &c.as_str()[..c.as_str().len().min(6)]));
    }
    s.push('\n');
    for r in records {
        let primary = r.primary_pollutant.map_or("-", |p| p.label());
        s.push_str(&format!(
            "{:<18} {:<22} {:>9.4} {:>8.4} {:>4} {:<7}",
            r.cell.as_str(),
            r.slot.to_string(),
            r.centroid.lon,
            r.centroid.lat,
            r.aqi,
            primary
        ));
        for k in PollutantKind::ALL {
            match r.values.get(k) {
                Some(v) => s.push_str(&format!(" {:>8}", trim_float(v))),
                None => s.push_str(&format!(" {:>8}", "-")),
            }
        }
        for c in SourceClass::ALL {
            s.push_str(&format!(" {:>6}", r.sample_counts.get(c)));
        }
        s.push('\n');
    }
    s
}

fn trim_float(v: f64) -> String {
    let t = format!("{v:.3}");
    let t = t.trim_end_matches('0').trim_end_matches('.');
    t.to_string()
}

fn fuse(config: ServiceConfig, slot: &str, out: &mut dyn Write) -> anyhow::Result<()> {
    if config.spool_dir.is_none() {
        bail!("fuse needs a spool directory (config spool_dir or --spool-dir)");
    }
    let service = Service::new(config)?;
    let slot = service.slot_of(parse_timestamp("slot", slot)?);
    let records = service.maqi(slot, None)?;
    out.write_all(format_maqi_table(&records).as_bytes())?;
    Ok(())
}

fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listen = config.listen.clone();
        let interval = config.auto_fuse_interval_s;
        let service = Arc::new(Service::new(config)?);
        if interval > 0 {
            let s = service.clone();
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(std::time::Duration::from_secs(interval));
                loop {
                    tick.tick().await;
                    for r in s.fuse_closed(Utc::now()) {
                        match r {
                            Ok(f) => tracing::info!(slot = %f.slot, records = f.records, "fused"),
                            Err(e) => tracing::warn!(error = %e, "auto-fuse failed"),
                        }
                    }
                }
            });
        }
        let listener = tokio::net::TcpListener::bind(&listen).await.with_context(|| format!("binding {listen}"))?;
        tracing::info!(%listen, "serving");
        axum::serve(listener, crate::http::router(service))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn load_scenario(path: &Path) -> anyhow::Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let scenario: ScenarioConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    scenario.slot()?;
    Ok(scenario)
}

fn simulate(path: &Path, seed: Option<u64>, traces: Option<&Path>, out: &mut dyn Write) -> anyhow::Result<()> {
    let sc = load_scenario(path)?;
    let slot = sc.slot()?;
    let seeds = seed.map_or_else(|| sc.seeds.clone(), |s| vec![s]);
    for &seed in &seeds {
        let field = SyntheticField::random(&sc.field, &sc.bbox, seed)?;
        let samples = generate_samples(&field, &sc.noise, sc.counts, &sc.bbox, slot, seed)?;
        let raws: Vec<RawSample> = samples.iter().map(RawSample::from).collect();
        out.write_all(to_json_lines(&raws).as_bytes())?;
    }
    if let Some(path) = traces {
        let seed = seeds.first().copied().unwrap_or(0);
        let t = generate_traces(sc.residents, &sc.mobility, seed)?;
        let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_traces(file, &t)?;
    }
    Ok(())
}

fn evaluate(path: &Path, out: &mut dyn Write) -> anyhow::Result<()> {
    let sc = load_scenario(path)?;
    let rows = run_scenario(&sc, &maqi_core::BreakpointTable::default())?;
    out.write_all(metrics_csv(&rows).as_bytes())?;
    Ok(())
}

struct TaskArgs {
    traces: PathBuf,
    credits: Option<PathBuf>,
    points: Option<PathBuf>,
    k: usize,
    q: usize,
    depth: u8,
    window: u32,
}

fn assign(config: ServiceConfig, slot: &str, a: &TaskArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let open = |p: &Path| std::fs::File::open(p).with_context(|| format!("opening {}", p.display()));
    let traces = read_traces(open(&a.traces)?)?;
    let credits = match &a.credits {
        Some(p) => read_credits(open(p)?)?,
        None => BTreeMap::new(),
    };
    let scheme = CellScheme { bbox: config.bbox, depth: a.depth, slot_duration: config.slot_duration() };
    let features = traces
        .iter()
        .filter(|t| !t.points().is_empty())
        .map(|t| extract_mobility_features(t, &scheme))
        .collect::<Result<Vec<_>, _>>()?;
    let slot = maqi_core::TimeSlot::containing(parse_timestamp("slot", slot)?, config.slot_duration());
    let points: Vec<Quadkey> = match &a.points {
        Some(p) => std::fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.parse::<Quadkey>().with_context(|| format!("invalid quadkey {l:?}")))
            .collect::<Result<_, _>>()?,
        None => {
            let first = slot.offset(1 - a.window as i32);
            features
                .iter()
                .flat_map(|f| f.visits.range(first..=slot).flat_map(|(_, cells)| cells.iter().cloned()))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        }
    };
    let matrix = build_association_matrix(&features, &points, slot, a.window)?;
    let assignment = assign_tasks(&matrix, &credits, a.k, a.q, slot)?;
    writeln!(out, "point,residents")?;
    for (point, residents) in &assignment.assignments {
        writeln!(out, "{point},{}", residents.join(";"))?;
    }
    writeln!(out, "# slot {} starting {}", slot, format_timestamp(&slot.start()))?;
    writeln!(out, "# coverage {:.6}", assignment.coverage())?;
    Ok(())
}
