//! Dataset directories and the end-to-end steps behind each subcommand.
//!
//! A dataset directory holds aligned `lulc_<year>.igrd` (16-class legend
//! indices) and `imperv_<year>.igrd` (percent) grids plus `tiles.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use impervia_core::camarkov::{self, AllocationOutcome, MarkovModel};
use impervia_core::clustering::{self, ClusterModel};
use impervia_core::denoiser::{ConditioningStack, Denoiser};
use impervia_core::diffusion::{
    ddim_sample_with, denormalize_percent, normalize_percent, Trainer, TrainingExample, TrainingSet,
};
use impervia_core::raster::{tile, Grid, GridKind, LulcLegend, Tile, TileSet};
use impervia_core::split::conditioning_years;
use impervia_core::transition::{likelihood_series_with_tables, TransitionTables};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Settings;
use crate::exec::{par_map, ThreadedExecutor};
use crate::igrd::{load_grid, save_grid, write_atomic};
use crate::{Error, Result};

pub fn lulc_name(year: u16) -> String {
    format!("lulc_{year}.igrd")
}

pub fn imperv_name(year: u16) -> String {
    format!("imperv_{year}.igrd")
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub lulc_years: Vec<u16>,
    pub imperv_years: Vec<u16>,
}

fn year_of(name: &str, prefix: &str) -> Option<u16> {
    name.strip_prefix(prefix)?.strip_suffix(".igrd")?.parse().ok()
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let (mut lulc_years, mut imperv_years) = (Vec::new(), Vec::new());
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(y) = year_of(&name, "lulc_") {
                lulc_years.push(y);
            } else if let Some(y) = year_of(&name, "imperv_") {
                imperv_years.push(y);
            }
        }
        lulc_years.sort_unstable();
        imperv_years.sort_unstable();
        if imperv_years.is_empty() {
            return Err(Error::Schema(format!("{} holds no imperv_<year>.igrd grids", dir.display())));
        }
        Ok(Self { dir, lulc_years, imperv_years })
    }

    pub fn lulc_path(&self, year: u16) -> PathBuf {
        self.dir.join(lulc_name(year))
    }

    pub fn imperv_path(&self, year: u16) -> PathBuf {
        self.dir.join(imperv_name(year))
    }

    pub fn lulc(&self, year: u16) -> Result<Grid> {
        let g = load_grid(self.lulc_path(year))?;
        g.check_classes(LulcLegend::nlcd16().class_count())?;
        Ok(g)
    }

    pub fn imperv(&self, year: u16) -> Result<Grid> {
        let g = load_grid(self.imperv_path(year))?;
        if g.kind() != GridKind::Continuous {
            return Err(Error::Schema(format!("imperviousness for {year} is not continuous")));
        }
        Ok(g)
    }

    /// Years carrying both land cover and imperviousness.
    pub fn paired_years(&self) -> Vec<u16> {
        self.imperv_years.iter().copied().filter(|y| self.lulc_years.contains(y)).collect()
    }

    pub fn tiles(&self, side: usize) -> Result<TileSet> {
        let first = self.imperv(self.imperv_years[0])?;
        Ok(tile(&first, side)?)
    }
}

pub fn tiles_csv(ts: &TileSet) -> String {
    let mut s = String::from("tile_id,x,y,side,nodata_fraction\n");
    for t in &ts.tiles {
        let _ = writeln!(s, "{},{},{},{},{}", t.index, t.x, t.y, ts.side, t.nodata_fraction());
    }
    s
}

/// Writes a dataset directory; every grid must share one shape.
pub fn write_dataset(dir: &Path, lulc: &[(u16, Grid)], imperv: &[(u16, Grid)], side: usize) -> Result<Vec<PathBuf>> {
    let first = imperv.first().map(|p| &p.1).ok_or_else(|| Error::Schema("no imperviousness grids".into()))?;
    for (y, g) in lulc.iter().chain(imperv) {
        if !g.same_shape(first) {
            return Err(Error::Schema(format!(
                "grid for {y} is {}x{}, expected {}x{}",
                g.width(),
                g.height(),
                first.width(),
                first.height()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (y, g) in lulc {
        let p = dir.join(lulc_name(*y));
        save_grid(g, &p)?;
        written.push(p);
    }
    for (y, g) in imperv {
        let p = dir.join(imperv_name(*y));
        save_grid(g, &p)?;
        written.push(p);
    }
    let ts = tile(first, side)?;
    let p = dir.join("tiles.csv");
    write_atomic(&p, tiles_csv(&ts).as_bytes())?;
    written.push(p);
    Ok(written)
}

pub type PairTables = Vec<((u16, u16), TransitionTables)>;

/// Likelihood maps for `years` (chronological) of the dataset.
pub fn likelihood_maps(ds: &Dataset, years: &[u16]) -> Result<(Vec<(u16, Grid)>, PairTables)> {
    let series = years.iter().map(|&y| ds.lulc(y)).collect::<Result<Vec<_>>>()?;
    let (maps, tables) = likelihood_series_with_tables(&series, &LulcLegend::nlcd16())?;
    let pairs = years.windows(2).map(|w| (w[0], w[1])).zip(tables).collect();
    Ok((years.iter().copied().zip(maps).collect(), pairs))
}

/// Full-extent conditioning rasters for one set of years.
pub struct Conditioning {
    pub years: Vec<u16>,
    pub imperv: Vec<Grid>,
    pub likelihood: Vec<Grid>,
}

impl Conditioning {
    pub fn load(ds: &Dataset, years: &[u16]) -> Result<Self> {
        let imperv = years.iter().map(|&y| ds.imperv(y)).collect::<Result<Vec<_>>>()?;
        let (maps, _) = likelihood_maps(ds, years)?;
        Ok(Self { years: years.to_vec(), imperv, likelihood: maps.into_iter().map(|m| m.1).collect() })
    }

    pub fn stack(&self, t: &Tile, side: usize) -> Result<ConditioningStack> {
        let crop = |g: &Grid| g.crop(t.x, t.y, side, side);
        let imperv = self.imperv.iter().map(crop).collect::<impervia_core::Result<Vec<_>>>()?;
        let lik = self.likelihood.iter().map(crop).collect::<impervia_core::Result<Vec<_>>>()?;
        Ok(ConditioningStack::from_grids(&imperv, &lik, self.years.clone())?)
    }
}

/// Signatures of every tile across the imperviousness series and their
/// DTW k-medoids clustering.
pub fn cluster_tiles(ds: &Dataset, settings: &Settings) -> Result<(TileSet, Vec<Vec<f64>>, ClusterModel)> {
    let side = settings.model.input_side;
    let ts = ds.tiles(side)?;
    let series = ds.imperv_years.iter().map(|&y| ds.imperv(y)).collect::<Result<Vec<_>>>()?;
    let signatures = ts
        .tiles
        .iter()
        .map(|t| {
            let crops = series.iter().map(|g| g.crop(t.x, t.y, side, side)).collect::<impervia_core::Result<Vec<_>>>()?;
            Ok(clustering::signature(&crops, settings.signature)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let k = settings.clusters.min(signatures.len());
    let model = clustering::cluster(&signatures, k, settings.seed)?;
    Ok((ts, signatures, model))
}

pub fn weights_csv(weights: &[f64]) -> String {
    let mut s = String::from("tile_id,weight\n");
    for (i, w) in weights.iter().enumerate() {
        let _ = writeln!(s, "{i},{w}");
    }
    s
}

pub fn parse_weights_csv(text: &str) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let (id, w) = line.split_once(',').ok_or_else(|| Error::Format(format!("bad weights row {line:?}")))?;
        let id = id.trim().parse().map_err(|_| Error::Format(format!("bad tile id {id}")))?;
        let w: f64 = w.trim().parse().map_err(|_| Error::Format(format!("bad weight {w}")))?;
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Format(format!("weight {w} must be finite and nonnegative")));
        }
        out.insert(id, w);
    }
    Ok(out)
}

/// Target years with enough history, or the configured list.
pub fn training_targets(ds: &Dataset, settings: &Settings) -> Result<Vec<(u16, Vec<u16>)>> {
    let years = ds.paired_years();
    let n = settings.model.n_cond;
    let candidates = if settings.target_years.is_empty() { years.clone() } else { settings.target_years.clone() };
    let mut out = Vec::new();
    for t in candidates {
        if settings.holdout_years.contains(&t) {
            continue;
        }
        if !ds.imperv_years.contains(&t) {
            return Err(Error::Config(format!("target year {t} has no imperviousness grid")));
        }
        match conditioning_years(&years, t, settings.cond_lag, n) {
            Ok(c) => out.push((t, c)),
            Err(e) if !settings.target_years.is_empty() => return Err(e.into()),
            Err(_) => {}
        }
    }
    if out.is_empty() {
        return Err(Error::Core(impervia_core::Error::Insufficient(format!(
            "no target year has {n} conditioning years at least {} years older",
            settings.cond_lag
        ))));
    }
    Ok(out)
}

/// One example per (target year, fully valid tile). Tile weights, when
/// given, are keyed by tile id and reused for every target year.
pub fn training_set(ds: &Dataset, settings: &Settings, tile_weights: Option<&BTreeMap<usize, f64>>) -> Result<TrainingSet> {
    let side = settings.model.input_side;
    let ts = ds.tiles(side)?;
    let mut examples = Vec::new();
    let mut weights = Vec::new();
    for (target, cond_years) in training_targets(ds, settings)? {
        let cond = Conditioning::load(ds, &cond_years)?;
        let truth = ds.imperv(target)?;
        for t in &ts.tiles {
            let patch = truth.crop(t.x, t.y, side, side)?;
            if patch.valid_count() != patch.len() {
                continue;
            }
            examples.push(TrainingExample {
                cond: cond.stack(t, side)?,
                target: patch.values().iter().map(|&v| normalize_percent(v)).collect(),
            });
            weights.push(tile_weights.map_or(Ok(1.0), |w| {
                w.get(&t.index).copied().ok_or_else(|| Error::Schema(format!("no weight for tile {}", t.index)))
            })?);
        }
    }
    if examples.is_empty() {
        return Err(Error::Core(impervia_core::Error::Insufficient("no fully valid training tiles".into())));
    }
    let weights = tile_weights.is_some().then_some(weights);
    Ok(TrainingSet { examples, weights })
}

pub fn train(data: &TrainingSet, settings: &Settings, threads: usize) -> Result<(Denoiser, Vec<f64>, Vec<f64>)> {
    let model = Denoiser::new(settings.model, settings.seed)?;
    let trainer = Trainer::new(model, settings.schedule.clone(), settings.train)?;
    let out = trainer.run(data, &ThreadedExecutor { threads })?;
    Ok((out.model, out.ema, out.losses))
}

/// Per-seed forecasts for `target`, stitched back to the full extent
/// (pixels outside the tiling are nodata). Tile `i`, seed `k` draws from
/// ChaCha stream `i * seeds + k` of the master seed.
pub fn sample(ds: &Dataset, model: &Denoiser, settings: &Settings, target: u16, threads: usize) -> Result<Vec<Grid>> {
    let side = settings.model.input_side;
    let cond_years = conditioning_years(&ds.paired_years(), target, settings.cond_lag, settings.model.n_cond)?;
    let cond = Conditioning::load(ds, &cond_years)?;
    let ts = ds.tiles(side)?;
    let stacks = ts.tiles.iter().map(|t| cond.stack(t, side)).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..ts.tiles.len()).flat_map(|i| (0..settings.seeds).map(move |k| (i, k))).collect();
    let patches = par_map(&jobs, threads, |_, &(i, k)| {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream((i * settings.seeds + k) as u64);
        ddim_sample_with(model, &stacks[i], &settings.schedule, settings.ddim, &mut rng)
    });
    let base = &cond.imperv[0];
    let (w, h) = (base.width(), base.height());
    let mut grids = vec![(vec![-1.0; w * h], vec![false; w * h]); settings.seeds];
    for (&(i, k), patch) in jobs.iter().zip(patches) {
        let patch = patch?;
        let t = &ts.tiles[i];
        let (values, valid) = &mut grids[k];
        for y in 0..side {
            for x in 0..side {
                let at = (t.y + y) * w + t.x + x;
                values[at] = denormalize_percent(patch[y * side + x]);
                valid[at] = true;
            }
        }
    }
    grids
        .into_iter()
        .map(|(v, m)| Ok(Grid::with_mask(w, h, base.pixel_size(), GridKind::Continuous, v, m, -1.0)?))
        .collect()
}

pub struct CaForecast {
    pub model: MarkovModel,
    pub outcome: AllocationOutcome,
    /// Cells that turn Developed relative to the `to` map.
    pub change: Grid,
}

pub fn ca_forecast(ds: &Dataset, from: u16, to: u16, settings: &Settings) -> Result<CaForecast> {
    if from >= to {
        return Err(Error::Config(format!("--from {from} must precede --to {to}")));
    }
    let a = camarkov::reclassify_nlcd16(&ds.lulc(from)?)?;
    let b = camarkov::reclassify_nlcd16(&ds.lulc(to)?)?;
    let (model, outcome) = camarkov::forecast(&a, &b, settings.ca_window, settings.allocation)?;
    let change = camarkov::imperv_change_binary(&b, &outcome.map)?;
    Ok(CaForecast { model, outcome, change })
}
