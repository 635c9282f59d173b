use super::reference::{published_reference, PublishedReference};
use super::split::stratified_split;
use super::sweep::scale_sweep;
use crate::augment::{generate_synthetic_dataset, Dataset, SyntheticSpec};
use crate::io::kv::{parse_bool, parse_list, parse_sections, parse_value, Entry};
use crate::io::read_tiles;
use crate::numerics::{Element, Streams};
use crate::train::{csv_row, Checkpoint, LossConfig, Precision, TrainConfig, Trainer, CSV_HEADER};
use crate::vit::ModelParams;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Name of the untrained-encoder pseudo cell.
pub const RANDOM_INIT: &str = "random_init";

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Tiles(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(s) => generate_synthetic_dataset(s),
            DataSource::Tiles(p) => read_tiles(p),
        }
    }
}

/// One row of the grid: config keys that differ from the shared base.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub deltas: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub base: TrainConfig,
    pub cells: Vec<AblationCell>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub k: usize,
    pub data: DataSource,
    pub split_seed: u64,
    pub train_fraction: f64,
    /// Also evaluate the untrained encoder for every seed.
    pub random_init: bool,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            base: TrainConfig::default(),
            cells: Vec::new(),
            ratios: super::sweep::DEFAULT_RATIOS.to_vec(),
            seeds: vec![0],
            k: 20,
            data: DataSource::Synthetic(SyntheticSpec::default()),
            split_seed: 0,
            train_fraction: 0.8,
            random_init: false,
        }
    }
}

fn located(e: &Entry, err: Error) -> Error {
    match err {
        Error::Config(m) => Error::config(format!("line {}: {m}", e.line)),
        other => other,
    }
}

impl AblationGrid {
    /// Parse a grid file. Relative `data` paths resolve against `dir`.
    ///
    /// ```text
    /// ratios = 0.25, 0.5, 1.0
    /// seeds = 0, 1
    /// k = 10
    /// base.epochs = 4
    /// dataset.images_per_class = 32
    ///
    /// [full]
    /// [no_cc]
    /// cross_consis = off
    /// ```
    pub fn parse(text: &str, dir: &Path) -> Result<Self> {
        let mut g = AblationGrid::default();
        let mut spec = SyntheticSpec::default();
        let mut tiles = None;
        for sec in parse_sections(text)? {
            let Some(name) = sec.name else {
                for e in &sec.entries {
                    g.set_global(e, &mut spec, &mut tiles)
                        .map_err(|err| located(e, err))?;
                }
                continue;
            };
            let mut deltas = Vec::new();
            for e in &sec.entries {
                if e.key == "seed" {
                    return Err(Error::config(format!(
                        "line {}: seeds are set by the grid, not by cell [{name}]",
                        e.line
                    )));
                }
                TrainConfig::default()
                    .set(&e.key, &e.value)
                    .map_err(|err| located(e, err))?;
                deltas.push((e.key.clone(), e.value.clone()));
            }
            g.cells.push(AblationCell { name, deltas });
        }
        if let Some(t) = tiles {
            g.data = DataSource::Tiles(dir.join(t));
        } else {
            spec.validate()?;
            g.data = DataSource::Synthetic(spec);
        }
        g.validate()?;
        Ok(g)
    }

    fn set_global(
        &mut self,
        e: &Entry,
        spec: &mut SyntheticSpec,
        tiles: &mut Option<String>,
    ) -> Result<()> {
        let (k, v) = (e.key.as_str(), e.value.as_str());
        if let Some(key) = k.strip_prefix("base.") {
            return self.base.set(key, v);
        }
        if let Some(key) = k.strip_prefix("dataset.") {
            return spec.set(key, v);
        }
        match k {
            "ratios" => self.ratios = parse_list(k, v)?,
            "seeds" => self.seeds = parse_list(k, v)?,
            "k" => self.k = parse_value(k, v)?,
            "data" => *tiles = Some(v.to_string()),
            "split_seed" => self.split_seed = parse_value(k, v)?,
            "train_fraction" => self.train_fraction = parse_value(k, v)?,
            "random_init" => self.random_init = parse_bool(k, v)?,
            _ => return Err(Error::config(format!("unknown key {k:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() && !self.random_init {
            return Err(Error::config("ablation grid has no cells"));
        }
        if self.seeds.is_empty() || self.ratios.is_empty() {
            return Err(Error::config(
                "ablation grid needs at least one seed and one ratio",
            ));
        }
        if self.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::config("evaluation ratios must be positive"));
        }
        if self.k == 0 {
            return Err(Error::config("k must be positive"));
        }
        let mut names: Vec<&str> = self.cells.iter().map(|c| c.name.as_str()).collect();
        if names.contains(&RANDOM_INIT) {
            return Err(Error::config(format!(
                "cell name {RANDOM_INIT:?} is reserved"
            )));
        }
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("duplicate cell name"));
        }
        for c in &self.cells {
            self.cell_config(c, self.seeds[0])?;
        }
        Ok(())
    }

    /// Base config with the cell's deltas applied and the seed overridden.
    pub fn cell_config(&self, cell: &AblationCell, seed: u64) -> Result<TrainConfig> {
        let mut c = self.base.clone();
        for (k, v) in &cell.deltas {
            c.set(k, v)?;
        }
        c.seed = seed;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub ratio: f64,
    /// Effective loss flags; `None` for the untrained encoder.
    pub losses: Option<LossConfig>,
    pub gsd_positional: bool,
    pub k: usize,
    pub accuracy: f64,
    pub reference: Option<PublishedReference>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub cell: String,
    pub ratio: f64,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
    /// Published value in percent, where one exists for this flag pattern
    /// and ratio.
    pub published: Option<f64>,
    pub published_study: Option<&'static str>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

pub const REPORT_HEADER: &str = "cell,seed,ratio,multi_scale,cross_consis,cross_pred,\
negatives_encoder,negatives_decoder,reconstruction,gsd_positional,k,accuracy";

pub const SUMMARY_HEADER: &str =
    "cell,ratio,mean_accuracy,std_accuracy,seeds,published_knn_percent,published_study";

pub const PUBLISHED_NOTE: &str = "published_knn_percent: published ViT-Base numbers \
(fMoW-RGB pretraining, RESISC45 KNN); not reproducible at this scale, shown for orientation only";

impl AblationReport {
    pub fn csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let flags = match &r.losses {
                Some(l) => [
                    l.multi_scale,
                    l.cross_consis,
                    l.cross_pred,
                    l.negatives_encoder,
                    l.negatives_decoder,
                    l.reconstruction,
                    r.gsd_positional,
                ]
                .map(|b| u8::from(b).to_string())
                .join(","),
                None => ["-"; 7].join(","),
            };
            let _ = writeln!(
                s,
                "{},{},{},{flags},{},{}",
                r.cell, r.seed, r.ratio, r.k, r.accuracy
            );
        }
        s
    }

    /// Mean and sample standard deviation over seeds, per cell and ratio,
    /// in first-appearance order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut out: Vec<SummaryRow> = Vec::new();
        let mut acc: Vec<Vec<f64>> = Vec::new();
        for r in &self.rows {
            let i = match out
                .iter()
                .position(|s| s.cell == r.cell && s.ratio == r.ratio)
            {
                Some(i) => i,
                None => {
                    out.push(SummaryRow {
                        cell: r.cell.clone(),
                        ratio: r.ratio,
                        mean: 0.0,
                        std: 0.0,
                        seeds: 0,
                        published: r.reference.and_then(|p| p.at(r.ratio)),
                        published_study: r.reference.map(|p| p.study),
                    });
                    acc.push(Vec::new());
                    out.len() - 1
                }
            };
            acc[i].push(r.accuracy);
        }
        for (s, a) in out.iter_mut().zip(&acc) {
            let n = a.len() as f64;
            s.seeds = a.len();
            s.mean = a.iter().sum::<f64>() / n;
            s.std = if a.len() > 1 {
                (a.iter().map(|x| (x - s.mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("# {PUBLISHED_NOTE}\n{SUMMARY_HEADER}\n");
        for r in self.summary() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.cell,
                r.ratio,
                r.mean,
                r.std,
                r.seeds,
                r.published.map_or(String::new(), |p| p.to_string()),
                r.published_study.unwrap_or("")
            );
        }
        s
    }

    /// Fixed-width table for the terminal.
    pub fn summary_table(&self) -> String {
        let rows = self.summary();
        let w = rows.iter().map(|r| r.cell.len()).max().unwrap_or(4).max(4);
        let mut s = format!(
            "{:<w$}  {:>6}  {:>8}  {:>7}  {:>5}  {:>6}\n",
            "cell", "ratio", "knn %", "std", "seeds", "published"
        );
        for r in rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>6}  {:>8.2}  {:>7.2}  {:>5}  {:>6}",
                r.cell,
                r.ratio,
                100.0 * r.mean,
                100.0 * r.std,
                r.seeds,
                r.published.map_or("-".to_string(), |p| format!("{p:.1}"))
            );
        }
        s.push_str(&format!("published: {PUBLISHED_NOTE}\n"));
        s
    }
}

fn train_params<T: Element>(
    cfg: &TrainConfig,
    data: &Dataset,
    ckpt: Option<&Path>,
    resume: bool,
    progress: &mut dyn FnMut(&str),
) -> Result<ModelParams<T>> {
    let mut trainer = match ckpt {
        Some(p) if resume && p.exists() => {
            let t = Checkpoint::<T>::load(p, Some(cfg))?.into_trainer()?;
            progress(&format!("resumed {} at step {}", p.display(), t.step()));
            t
        }
        _ => Trainer::<T>::new(cfg.clone())?,
    };
    let total = cfg.total_steps(data.len());
    if trainer.step() < total {
        let mut log = if trainer.step() == 0 {
            format!("{CSV_HEADER}\n")
        } else {
            String::new()
        };
        trainer.run(data, None, |l| {
            log.push_str(&csv_row(l));
            log.push('\n');
            Ok(())
        })?;
        if let Some(p) = ckpt {
            Checkpoint::from_trainer(&trainer).save(p)?;
            let lp = p.with_extension("csv");
            if log.starts_with(CSV_HEADER) {
                fs::write(lp, log)?;
            } else {
                let mut prev = fs::read_to_string(&lp).unwrap_or_default();
                prev.push_str(&log);
                fs::write(lp, prev)?;
            }
        }
    }
    Ok(trainer.params().clone())
}

fn evaluate<T: Element>(
    cfg: &TrainConfig,
    trained: bool,
    (train, test): (&Dataset, &Dataset),
    grid: &AblationGrid,
    ckpt: Option<&Path>,
    resume: bool,
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<(f64, f64)>> {
    let params = if trained {
        train_params::<T>(cfg, train, ckpt, resume, progress)?
    } else {
        ModelParams::<T>::init(&cfg.model_config(), &Streams::new(cfg.seed))?
    };
    scale_sweep(&params, train, test, &grid.ratios, grid.k)
}

/// Train every (cell, seed) on the training split and KNN-evaluate it at
/// every ratio. With `out`, checkpoints and step logs go to `out/cells/`
/// and the reports to `out/report.csv` and `out/summary.csv`. With
/// `resume`, existing checkpoints are loaded and training continues from
/// their step (finished runs are only re-evaluated).
pub fn run_ablation(
    grid: &AblationGrid,
    out: Option<&Path>,
    resume: bool,
    mut progress: impl FnMut(&str),
) -> Result<AblationReport> {
    grid.validate()?;
    let data = grid.data.load()?;
    let (tr, te) = stratified_split(&data.labels, grid.train_fraction, grid.split_seed)?;
    let (train, test) = (data.subset(&tr), data.subset(&te));
    if grid.k > train.len() {
        return Err(Error::config(format!(
            "k = {} exceeds the {} training images",
            grid.k,
            train.len()
        )));
    }
    let cells_dir = out.map(|o| o.join("cells"));
    if let Some(d) = &cells_dir {
        fs::create_dir_all(d)?;
    }
    let mut jobs: Vec<(String, Option<&AblationCell>)> = Vec::new();
    if grid.random_init {
        jobs.push((RANDOM_INIT.to_string(), None));
    }
    jobs.extend(grid.cells.iter().map(|c| (c.name.clone(), Some(c))));
    let mut report = AblationReport::default();
    for (name, cell) in jobs {
        for &seed in &grid.seeds {
            let cfg = match cell {
                Some(c) => grid.cell_config(c, seed)?,
                None => {
                    let mut c = grid.base.clone();
                    c.seed = seed;
                    c
                }
            };
            progress(&format!("cell {name} seed {seed}"));
            let ckpt = cells_dir
                .as_ref()
                .map(|d| d.join(format!("{name}_seed{seed}.ckpt")));
            let trained = cell.is_some();
            let split = (&train, &test);
            let acc = match cfg.precision {
                Precision::F32 => evaluate::<f32>(
                    &cfg,
                    trained,
                    split,
                    grid,
                    ckpt.as_deref(),
                    resume,
                    &mut progress,
                )?,
                Precision::F64 => evaluate::<f64>(
                    &cfg,
                    trained,
                    split,
                    grid,
                    ckpt.as_deref(),
                    resume,
                    &mut progress,
                )?,
            };
            for (ratio, accuracy) in acc {
                report.rows.push(AblationRow {
                    cell: name.clone(),
                    seed,
                    ratio,
                    losses: trained.then(|| cfg.losses.effective()),
                    gsd_positional: cfg.gsd_positional,
                    k: grid.k,
                    accuracy,
                    reference: if trained {
                        published_reference(&cfg)
                    } else {
                        None
                    },
                });
            }
        }
    }
    if let Some(o) = out {
        fs::write(o.join("report.csv"), report.csv())?;
        fs::write(o.join("summary.csv"), report.summary_csv())?;
    }
    Ok(report)
}
