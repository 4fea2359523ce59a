//! Subcommand definitions and dispatch.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use impervia_core::evaluation::{self, null_resolution, EvalInputs, EvalReport, NullResolution};
use impervia_core::raster::Grid;
use impervia_core::synthetic;

use crate::ascii::{read_raw, RawKind};
use crate::config::{keys_for, Config, Settings};
use crate::manifest::RunManifest;
use crate::pipeline::{self, Dataset};
use crate::{checkpoint, fixtures, igrd, plot, tables, Error, Result};

pub const OUT_ENV: &str = "IMPERVIA_OUT";

const COMMANDS: &[(&str, &str)] = &[
    ("ingest", "convert raw rasters (ESRI ASCII or IGRD) into a dataset directory"),
    ("synth", "write a synthetic dataset directory"),
    ("likelihood", "imperviousness transition likelihood maps and probability tables"),
    ("cluster", "temporal signatures, DTW k-medoids clusters and tile sampling weights"),
    ("train", "train the conditional denoiser"),
    ("sample", "DDIM forecasts over every tile and seed"),
    ("ca-forecast", "CA-Markov baseline forecast"),
    ("evaluate", "multi-scale MAE, null resolution and change confusion"),
    ("plot", "SVG of model and null MAE curves"),
];

fn flag_name(key: &'static str) -> &'static str {
    // the key table is static, so the few dashed names live for the process
    Box::leak(key.replace('_', "-").into_boxed_str())
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("PATH").value_parser(clap::value_parser!(PathBuf)).help(help)
}

fn year_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("YEAR").value_parser(clap::value_parser!(u16)).help(help)
}

fn subcommand(name: &'static str, about: &'static str) -> Command {
    let mut cmd = Command::new(name).about(about);
    let mut keys = String::from("Config keys read:");
    for k in keys_for(name) {
        keys.push_str(&format!(" {}", k.name));
        if k.name == "seed" {
            continue;
        }
        let mut arg = Arg::new(k.name)
            .long(flag_name(k.name))
            .value_name("VALUE")
            .help(format!("{} [config key {}, default {:?}]", k.help, k.name, k.default));
        if k.name == "train_steps" {
            arg = arg.visible_alias("steps");
        }
        cmd = cmd.arg(arg);
    }
    cmd = cmd.after_help(keys);
    match name {
        "ingest" => cmd
            .arg(Arg::new("lulc").long("lulc").value_name("YEAR=PATH").action(ArgAction::Append).help("NLCD land-cover raster for one year"))
            .arg(Arg::new("imperv").long("imperv").value_name("YEAR=PATH").action(ArgAction::Append).help("imperviousness raster for one year")),
        "likelihood" => cmd
            .arg(path_arg("data", "dataset directory").required(true))
            .arg(Arg::new("years").long("years").value_name("Y1,Y2,...").help("land-cover years in order (default: all)")),
        "cluster" => cmd.arg(path_arg("data", "dataset directory").required(true)),
        "train" => cmd
            .arg(path_arg("data", "dataset directory").required(true))
            .arg(path_arg("weights", "tile sampling weights CSV written by cluster")),
        "sample" => cmd
            .arg(path_arg("data", "dataset directory").required(true))
            .arg(path_arg("checkpoint", "IDNP checkpoint written by train").required(true))
            .arg(year_arg("target", "forecast year").required(true)),
        "ca-forecast" => cmd
            .arg(path_arg("data", "dataset directory").required(true))
            .arg(year_arg("from", "earlier land-cover year").required(true))
            .arg(year_arg("to", "later land-cover year").required(true)),
        "evaluate" => cmd
            .arg(Arg::new("fixture").long("fixture").value_name("NAME").help("bundled curves: all, vegas or chicago"))
            .arg(path_arg("curves", "curve CSV (resolution_km,model_mae,null_mae)"))
            .arg(path_arg("forecast", "forecast grid, one per seed").action(ArgAction::Append))
            .arg(path_arg("truth", "observed imperviousness at the target year"))
            .arg(path_arg("past", "imperviousness of the persistence baseline year")),
        "plot" => cmd
            .arg(path_arg("curves", "curve CSV (resolution_km,model_mae,null_mae)").required(true))
            .arg(Arg::new("title").long("title").value_name("TEXT").default_value("MAE vs resolution")),
        _ => cmd,
    }
}

pub fn command() -> Command {
    let mut root = Command::new("impervia")
        .about("Imperviousness change forecasting: transition likelihoods, diffusion forecasts, CA-Markov and multi-scale evaluation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(path_arg("config", "flat key=value config file").global(true))
        .arg(Arg::new("seed").long("seed").value_name("U64").value_parser(clap::value_parser!(u64)).global(true).help("master random seed"))
        .arg(
            Arg::new("threads")
                .long("threads")
                .value_name("N")
                .value_parser(clap::value_parser!(usize))
                .default_value("1")
                .global(true)
                .help("worker threads"),
        )
        .arg(path_arg("out", "output directory (default: $IMPERVIA_OUT/<command> or ./<command>)").global(true));
    for &(name, about) in COMMANDS {
        root = root.subcommand(subcommand(name, about));
    }
    root
}

struct Ctx {
    settings: Settings,
    threads: usize,
    out: PathBuf,
    manifest: RunManifest,
}

impl Ctx {
    fn new(name: &'static str, m: &ArgMatches) -> Result<Self> {
        let mut overrides = Vec::new();
        if let Some(seed) = m.get_one::<u64>("seed") {
            overrides.push(("seed".to_string(), seed.to_string()));
        }
        for k in keys_for(name) {
            if let Some(v) = m.try_get_one::<String>(k.name).ok().flatten() {
                overrides.push((k.name.to_string(), v.clone()));
            }
        }
        let config = Config::load(m.get_one::<PathBuf>("config").map(PathBuf::as_path), &overrides)?;
        let settings = config.settings()?;
        let threads = (*m.get_one::<usize>("threads").expect("defaulted")).max(1);
        let out = match m.get_one::<PathBuf>("out") {
            Some(p) => p.clone(),
            None => std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from).join(name),
        };
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let seeds = match name {
            "sample" => (0..settings.seeds as u64).collect(),
            _ => vec![settings.seed],
        };
        let manifest = RunManifest::new(name, config.snapshot_for(name), seeds);
        Ok(Self { settings, threads, out, manifest })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.add_input(&self.out, path)
    }

    fn write(&mut self, file: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.out.join(file);
        igrd::write_atomic(&p, bytes)?;
        self.manifest.add_output(&self.out, &p)?;
        Ok(p)
    }

    fn grid(&mut self, file: &str, g: &Grid) -> Result<PathBuf> {
        self.write(file, &igrd::encode(g)?)
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.seal();
        self.manifest.write(&self.out)?;
        Ok(())
    }
}

fn parse_year_path(v: &str) -> Result<(u16, PathBuf)> {
    let (y, p) = v.split_once('=').ok_or_else(|| Error::Config(format!("{v:?} is not YEAR=PATH")))?;
    let y = y.parse().map_err(|_| Error::Config(format!("{y:?} is not a year")))?;
    Ok((y, PathBuf::from(p)))
}

fn ingest(mut cx: Ctx, m: &ArgMatches) -> Result<()> {
    let list = |id: &str| -> Result<Vec<(u16, PathBuf)>> {
        m.get_many::<String>(id).into_iter().flatten().map(|v| parse_year_path(v)).collect()
    };
    let (lulc_in, imperv_in) = (list("lulc")?, list("imperv")?);
    if imperv_in.is_empty() {
        return Err(Error::Config("ingest needs at least one --imperv YEAR=PATH".into()));
    }
    let mut lulc = Vec::new();
    for (y, p) in &lulc_in {
        cx.input(p)?;
        lulc.push((*y, read_raw(p, RawKind::NlcdLandCover)?));
    }
    let mut imperv = Vec::new();
    for (y, p) in &imperv_in {
        cx.input(p)?;
        imperv.push((*y, read_raw(p, RawKind::Imperviousness)?));
    }
    let written = pipeline::write_dataset(&cx.out, &lulc, &imperv, cx.settings.model.input_side)?;
    for p in &written {
        cx.manifest.add_output(&cx.out, p)?;
    }
    println!("ingested {} land-cover and {} imperviousness grids into {}", lulc.len(), imperv.len(), cx.out.display());
    cx.finish()
}

fn synth(mut cx: Ctx) -> Result<()> {
    let s = &cx.settings;
    let land = synthetic::landscape(s.synth_side, &s.synth_years, s.seed)?;
    let lulc: Vec<_> = land.years.iter().copied().zip(land.lulc).collect();
    let imperv: Vec<_> = land.years.iter().copied().zip(land.imperv).collect();
    let written = pipeline::write_dataset(&cx.out, &lulc, &imperv, s.model.input_side)?;
    for p in &written {
        cx.manifest.add_output(&cx.out, p)?;
    }
    println!("wrote synthetic dataset ({} years, {}x{}) to {}", land.years.len(), s.synth_side, s.synth_side, cx.out.display());
    cx.finish()
}

fn likelihood(mut cx: Ctx, m: &ArgMatches) -> Result<()> {
    let ds = Dataset::open(m.get_one::<PathBuf>("data").expect("required"))?;
    let years: Vec<u16> = match m.get_one::<String>("years") {
        Some(v) => v
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("{t:?} is not a year"))))
            .collect::<Result<_>>()?,
        None => ds.lulc_years.clone(),
    };
    for &y in &years {
        cx.input(&ds.lulc_path(y))?;
    }
    let (maps, pairs) = pipeline::likelihood_maps(&ds, &years)?;
    for (y, g) in &maps {
        cx.grid(&format!("likelihood_{y}.igrd"), g)?;
    }
    for ((a, b), t) in &pairs {
        cx.write(&format!("probs_{a}_{b}.txt"), tables::probs_table(&t.probs).as_bytes())?;
    }
    println!("wrote {} likelihood maps and {} probability tables to {}", maps.len(), pairs.len(), cx.out.display());
    cx.finish()
}

fn cluster(mut cx: Ctx, m: &ArgMatches) -> Result<()> {
    let ds = Dataset::open(m.get_one::<PathBuf>("data").expect("required"))?;
    for &y in &ds.imperv_years {
        cx.input(&ds.imperv_path(y))?;
    }
    let (ts, sigs, model) = pipeline::cluster_tiles(&ds, &cx.settings)?;
    let ids: Vec<String> = ts.tiles.iter().map(|t| t.index.to_string()).collect();
    cx.write("clusters.csv", tables::clusters_csv(&model, &ids).as_bytes())?;
    cx.write("signatures.csv", tables::signatures_csv(&sigs, &ids).as_bytes())?;
    cx.write("weights.csv", pipeline::weights_csv(&model.patch_weights()).as_bytes())?;
    let shares: Vec<String> = model.ratios.iter().enumerate().map(|(c, r)| format!("{}={:.3}", impervia_core::clustering::ClusterModel::label(c), r)).collect();
    println!("clustered {} tiles into {} groups ({})", ids.len(), model.k, shares.join(" "));
    cx.finish()
}

fn train(mut cx: Ctx, m: &ArgMatches) -> Result<()> {
    let ds = Dataset::open(m.get_one::<PathBuf>("data").expect("required"))?;
    let weights = match m.get_one::<PathBuf>("weights") {
        Some(p) => {
            cx.input(p)?;
            Some(pipeline::parse_weights_csv(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?)
        }
        None => None,
    };
    for y in ds.paired_years() {
        cx.input(&ds.imperv_path(y))?;
        cx.input(&ds.lulc_path(y))?;
    }
    let data = pipeline::training_set(&ds, &cx.settings, weights.as_ref())?;
    let (model, ema, losses) = pipeline::train(&data, &cx.settings, cx.threads)?;
    cx.write("checkpoint.idnp", &checkpoint::encode(&model, &ema)?)?;
    cx.write("loss.csv", tables::loss_csv(&losses).as_bytes())?;
    match losses.last() {
        Some(l) => println!("trained {} steps on {} patches, final loss {l:.5}", losses.len(), data.examples.len()),
        None => println!("wrote the initial model ({} patches available)", data.examples.len()),
    }
    cx.finish()
}

fn sample(mut cx: Ctx, m: &ArgMatches) -> Result<()> {
    let ds = Dataset::open(m.get_one::<PathBuf>("data").expect("required"))?;
    let ck_path = m.get_one::<PathBuf>("checkpoint").expect("required");
    let target = *m.get_one::<u16>("target").expect("required");
    cx.input(ck_path)?;
    for y in ds.paired_years() {
        cx.input(&ds.imperv_path(y))?;
        cx.input(&ds.lulc_path(y))?;
    }
    let model = checkpoint::load(ck_path, &cx.settings.model)?.ema_model()?;
    let forecasts = pipeline::sample(&ds, &model, &cx.settings, target, cx.threads)?;
    for (k, g) in forecasts.iter().enumerate() {
        cx.grid(&format!("forecast_{target}_seed{k}.igrd"), g)?;
    }
    let (mean, std) = evaluation::seed_stats(&forecasts)?;
    cx.grid(&format!("forecast_{target}_mean.igrd"), &mean)?;
    cx.grid(&format!("forecast_{target}_std.igrd"), &std)?;
    println!("sampled {} seeds for {target} into {}", forecasts.len(), cx.out.display());
    cx.finish()
}

fn ca_forecast(mut cx: Ctx, m: &ArgMatches) -> Result<()> {
    let ds = Dataset::open(m.get_one::<PathBuf>("data").expect("required"))?;
    let from = *m.get_one::<u16>("from").expect("required");
    let to = *m.get_one::<u16>("to").expect("required");
    cx.input(&ds.lulc_path(from))?;
    cx.input(&ds.lulc_path(to))?;
    let f = pipeline::ca_forecast(&ds, from, to, &cx.settings)?;
    let next = to + (to - from);
    cx.write("markov.txt", tables::markov_table(&f.model.p).as_bytes())?;
    cx.grid(&format!("ca_{next}.igrd"), &f.outcome.map)?;
    cx.grid(&format!("ca_change_{next}.igrd"), &f.change)?;
    println!(
        "CA-Markov {from}->{to} projected to {next}: {} iterations, converged {}, {} fix-up moves",
        f.outcome.iterations, f.outcome.converged, f.outcome.fixup_moves
    );
    cx.finish()
}

fn describe(nr: NullResolution) -> String {
    match nr {
        NullResolution::Resolved { km, mae } => format!("{km:.2} km (MAE {mae:.4})"),
        NullResolution::BelowRange => "BELOW_RANGE".into(),
        NullResolution::AboveRange => "ABOVE_RANGE".into(),
    }
}

fn report_text(r: &EvalReport) -> String {
    let mut s = format!("null_resolution={}\n", describe(r.null_resolution));
    if let NullResolution::Resolved { km, mae } = r.null_resolution {
        s.push_str(&format!("null_resolution_km={km}\nmae_at_null_resolution={mae}\n"));
    }
    s.push_str(&format!("seeds={}\n", r.seed_count));
    if let Some(sd) = r.mean_seed_std {
        s.push_str(&format!("mean_seed_std={sd}\n"));
    }
    if let Some(c) = &r.confusion {
        s.push_str(&format!(
            "tp={}\nfp={}\nfn={}\ntn={}\nprecision={:.2}\nrecall={:.2}\nf1={:.2}\n",
            c.tp, c.fp, c.fn_, c.tn, c.precision, c.recall, c.f1
        ));
    }
    s
}

fn evaluate(mut cx: Ctx, m: &ArgMatches) -> Result<()> {
    let opts = cx.settings.null_resolution;
    let curves = match (m.get_one::<String>("fixture"), m.get_one::<PathBuf>("curves")) {
        (Some(name), None) => Some(fixtures::fixture(name)?),
        (None, Some(p)) => {
            cx.input(p)?;
            Some(tables::parse_curve_csv(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?)
        }
        (Some(_), Some(_)) => return Err(Error::Config("--fixture and --curves are exclusive".into())),
        (None, None) => None,
    };
    let report = match curves {
        Some((model, null)) => {
            let nr = null_resolution(&model, &null, opts)?;
            EvalReport { model_curve: model, null_curve: null, null_resolution: nr, seed_count: 0, mean_seed_std: None, confusion: None }
        }
        None => {
            let need = |id: &str| {
                m.get_one::<PathBuf>(id).cloned().ok_or_else(|| Error::Config(format!("evaluate needs --{id} (or --fixture / --curves)")))
            };
            let forecasts: Vec<PathBuf> = m.get_many::<PathBuf>("forecast").into_iter().flatten().cloned().collect();
            if forecasts.is_empty() {
                return Err(Error::Config("evaluate needs at least one --forecast (or --fixture / --curves)".into()));
            }
            let (truth_p, past_p) = (need("truth")?, need("past")?);
            let mut preds = Vec::new();
            for p in &forecasts {
                cx.input(p)?;
                preds.push(igrd::load_grid(p)?);
            }
            cx.input(&truth_p)?;
            cx.input(&past_p)?;
            let (truth, past) = (igrd::load_grid(&truth_p)?, igrd::load_grid(&past_p)?);
            if let Some(&s) = cx.settings.scales.iter().find(|&&s| truth.width() % s != 0 || truth.height() % s != 0) {
                return Err(Error::Config(format!(
                    "scales: cell {s} does not divide the {}x{} grid",
                    truth.width(),
                    truth.height()
                )));
            }
            evaluation::evaluate(EvalInputs { forecasts: &preds, truth: &truth, past: &past, cells: &cx.settings.scales }, opts)?
        }
    };
    cx.write("curves.csv", tables::curve_csv(&report.model_curve, &report.null_curve)?.as_bytes())?;
    cx.write("report.txt", report_text(&report).as_bytes())?;
    println!("null resolution: {}", describe(report.null_resolution));
    if let Some(c) = &report.confusion {
        println!("change precision {:.2} recall {:.2} F1 {:.2}", c.precision, c.recall, c.f1);
    }
    cx.finish()
}

fn plot_cmd(mut cx: Ctx, m: &ArgMatches) -> Result<()> {
    let p = m.get_one::<PathBuf>("curves").expect("required");
    cx.input(p)?;
    let (model, null) = tables::parse_curve_csv(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?;
    let nr = if model.len() >= 4 { null_resolution(&model, &null, cx.settings.null_resolution).ok() } else { None };
    let title = m.get_one::<String>("title").expect("defaulted");
    cx.write("curves.csv", tables::curve_csv(&model, &null)?.as_bytes())?;
    let svg = cx.write("mae.svg", plot::mae_svg(title, &model, &null, nr).as_bytes())?;
    println!("wrote {}", svg.display());
    cx.finish()
}

fn dispatch(name: &'static str, m: &ArgMatches) -> Result<()> {
    let cx = Ctx::new(name, m)?;
    match name {
        "ingest" => ingest(cx, m),
        "synth" => synth(cx),
        "likelihood" => likelihood(cx, m),
        "cluster" => cluster(cx, m),
        "train" => train(cx, m),
        "sample" => sample(cx, m),
        "ca-forecast" => ca_forecast(cx, m),
        "evaluate" => evaluate(cx, m),
        "plot" => plot_cmd(cx, m),
        _ => unreachable!("clap only yields declared subcommands"),
    }
}

/// Runs the CLI; returns the process exit status (0 ok, 1 runtime error,
/// 2 usage error).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (sub, m) = matches.subcommand().expect("subcommand required");
    let name = COMMANDS.iter().map(|c| c.0).find(|&c| c == sub).expect("declared subcommand");
    match dispatch(name, m) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.code(), e.to_string().replace('\n', " "));
            if matches!(e, Error::Config(_)) { 2 } else { 1 }
        }
    }
}
