//! End-to-end runs: load or generate data, train, evaluate, write reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbones::{BackboneConfig, BackboneKind};
use crate::data::{k_core_filter, load_ratings, split_80_20, synth_generate, BoundDataset, DataFormat, SynthSpec};
use crate::distributions::DistKind;
use crate::error::{GrpError, Result};
use crate::grp::{FusionConfig, GrpModel, ModelConfig, ParamMode, StackOrder, Variant};
use crate::params::ParamStore;
use crate::report::{emit, EmitKind, ExperimentReport, ReportMeta};
use crate::training::{predict_all, train, write_history_csv, HistoryRow, TrainConfig};

/// Seed used when neither a flag, the config file nor `GRP_SEED` sets one.
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    File { path: PathBuf, format: DataFormat },
    /// A spec accepted by [`SynthSpec::parse`].
    Synth(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: DataSource,
    pub levels: usize,
    pub k_core: usize,
    pub backbone: BackboneConfig,
    pub dist: DistKind,
    pub param_mode: ParamMode,
    pub variant: Variant,
    pub fusion: FusionConfig,
    /// Train the backbone alone first, then freeze it while the rest trains.
    pub freeze_backbone: bool,
    pub train: TrainConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            source: DataSource::Synth("table2:musical".into()),
            levels: 5,
            k_core: 5,
            backbone: BackboneConfig::default(),
            dist: DistKind::Gumbel,
            param_mode: ParamMode::Dynamic,
            variant: Variant::Full,
            fusion: FusionConfig::default(),
            freeze_backbone: false,
            train: TrainConfig { seed: DEFAULT_SEED, ..TrainConfig::default() },
            out: PathBuf::from("grp-out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| GrpError::config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(GrpError::config(format!("invalid value '{value}' for '{key}'"))),
    }
}

/// Keys accepted in config files and written to manifests.
pub const CONFIG_KEYS: [&str; 24] = [
    "data",
    "format",
    "synth",
    "levels",
    "k_core",
    "backbone",
    "dim",
    "mlp_out",
    "dist",
    "param_mode",
    "variant",
    "epochs",
    "lr",
    "lr_decay",
    "batch",
    "seed",
    "xi",
    "phi",
    "delta",
    "filters_per_scale",
    "freeze_backbone",
    "stack_order",
    "out",
    "adam",
];

impl RunConfig {
    /// Sets one `key = value` pair. A `data` or `synth` key replaces the
    /// current data source.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data" => {
                let format = match &self.source {
                    DataSource::File { format, .. } => *format,
                    DataSource::Synth(_) => DataFormat::Csv,
                };
                self.source = DataSource::File { path: PathBuf::from(v), format };
            }
            "format" => {
                let f: DataFormat = v.parse()?;
                if let DataSource::File { format, .. } = &mut self.source {
                    *format = f;
                }
            }
            "synth" => self.source = DataSource::Synth(v.to_string()),
            "levels" => self.levels = parse(key, v)?,
            "k_core" => self.k_core = parse(key, v)?,
            "backbone" => self.backbone.kind = v.parse::<BackboneKind>()?,
            "dim" => self.backbone.dim = parse(key, v)?,
            "mlp_out" => self.backbone.mlp_out = parse(key, v)?,
            "dist" => self.dist = v.parse()?,
            "param_mode" => self.param_mode = v.parse()?,
            "variant" => self.variant = v.parse()?,
            "epochs" => self.train.max_epochs = parse(key, v)?,
            "lr" => self.train.learning_rate = parse(key, v)?,
            "lr_decay" => self.train.lr_decay_factor = parse(key, v)?,
            "batch" => self.train.batch_size = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "xi" => self.fusion.xi = parse(key, v)?,
            "phi" => self.fusion.phi = parse(key, v)?,
            "delta" => self.fusion.delta = parse(key, v)?,
            "filters_per_scale" => self.fusion.filters_per_scale = parse(key, v)?,
            "freeze_backbone" => self.freeze_backbone = parse_bool(key, v)?,
            "stack_order" => self.fusion.stack_order = v.parse::<StackOrder>()?,
            "out" => self.out = PathBuf::from(v),
            "adam" => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                let [b1, b2, eps] = parts[..] else {
                    return Err(GrpError::config("adam expects 'beta1,beta2,epsilon'"));
                };
                self.train.beta1 = parse(key, b1)?;
                self.train.beta2 = parse(key, b2)?;
                self.train.epsilon = parse(key, eps)?;
            }
            other => return Err(GrpError::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a flat `key=value` text; `#` starts a comment. Both `data`
    /// and `synth` in one text is an error.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut sources = 0;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GrpError::config(format!("line {}: expected key=value", n + 1)))?;
            if matches!(k.trim(), "data" | "synth") {
                sources += 1;
            }
            self.apply(k, v)?;
        }
        if sources > 1 {
            return Err(GrpError::config("give exactly one of 'data' and 'synth'"));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GrpError::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(GrpError::config("need at least two rating levels"));
        }
        if self.k_core == 0 {
            return Err(GrpError::config("k_core must be at least 1"));
        }
        let mut fusion = self.fusion;
        fusion.c = self.levels;
        fusion.validate()?;
        self.train.validate()?;
        if self.param_mode == ParamMode::Mle && self.dist != DistKind::Gumbel {
            return Err(GrpError::config("param_mode=mle requires dist=gumbel"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            fusion: FusionConfig { c: self.levels, ..self.fusion },
            backbone: self.backbone,
            dist: self.dist,
            variant: self.variant,
            param_mode: self.param_mode,
        }
    }

    /// Table-style label, e.g. `PMF`, `PMF(G)`, `NeuMF(M)`, `PMF(G) -G`.
    pub fn method_label(&self) -> String {
        let base = self.backbone.kind.label();
        let tag = match self.param_mode {
            ParamMode::Mle => 'M',
            ParamMode::Dynamic => self.dist.tag(),
        };
        match self.variant {
            Variant::BackboneOnly => base.to_string(),
            Variant::Full => format!("{base}({tag})"),
            Variant::MinusG => format!("{base}({tag}) -G"),
            Variant::MinusF => format!("{base}({tag}) -F"),
            Variant::MinusD => format!("{base}({tag}) -D"),
        }
    }

    /// Flat `key=value` text that [`RunConfig::apply_text`] reads back.
    pub fn to_manifest(&self, build_id: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# grp run manifest");
        let _ = writeln!(s, "# build={build_id}");
        match &self.source {
            DataSource::File { path, format } => {
                let _ = writeln!(s, "data={}", path.display());
                let _ = writeln!(s, "format={format}");
            }
            DataSource::Synth(spec) => {
                let _ = writeln!(s, "synth={spec}");
            }
        }
        let t = &self.train;
        let f = &self.fusion;
        let b = &self.backbone;
        let pairs: [(&str, String); 21] = [
            ("levels", self.levels.to_string()),
            ("k_core", self.k_core.to_string()),
            ("backbone", b.kind.name().into()),
            ("dim", b.dim.to_string()),
            ("mlp_out", b.mlp_out.to_string()),
            ("dist", self.dist.name().into()),
            ("param_mode", self.param_mode.name().into()),
            ("variant", self.variant.name().into()),
            ("epochs", t.max_epochs.to_string()),
            ("lr", format!("{:?}", t.learning_rate)),
            ("lr_decay", format!("{:?}", t.lr_decay_factor)),
            ("batch", t.batch_size.to_string()),
            ("seed", t.seed.to_string()),
            ("adam", format!("{:?},{:?},{:?}", t.beta1, t.beta2, t.epsilon)),
            ("xi", format!("{:?}", f.xi)),
            ("phi", format!("{:?}", f.phi)),
            ("delta", format!("{:?}", f.delta)),
            ("filters_per_scale", f.filters_per_scale.to_string()),
            ("freeze_backbone", self.freeze_backbone.to_string()),
            ("stack_order", f.stack_order.name().into()),
            ("out", self.out.display().to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "# dropout={:?} (fixed)", t.dropout);
        s
    }
}

/// Loads, filters, splits and binds the dataset named by `cfg`. Returns the
/// bound data and a display name.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<(BoundDataset, String)> {
    let seed = cfg.train.seed;
    let (records, name) = match &cfg.source {
        DataSource::File { path, format } => {
            let loaded = load_ratings(path, *format, cfg.levels)?;
            for e in loaded.row_errors.iter().take(10) {
                log::warn!("{}:{}: {}", path.display(), e.line, e.message);
            }
            if loaded.duplicates_removed > 0 {
                log::info!("removed {} duplicate (user, item) rows", loaded.duplicates_removed);
            }
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("data")
                .to_string();
            (loaded.records, name)
        }
        DataSource::Synth(spec) => {
            let s = SynthSpec::parse(spec, seed)?;
            if s.level_ratios.len() != cfg.levels {
                return Err(GrpError::config(format!(
                    "synthetic spec has {} levels but the run uses {}",
                    s.level_ratios.len(),
                    cfg.levels
                )));
            }
            (synth_generate(&s)?, s.label.clone())
        }
    };
    let before = records.len();
    let records = k_core_filter(&records, cfg.k_core)?;
    if records.is_empty() {
        log::warn!("{}-core filtering removed every record", cfg.k_core);
    }
    log::info!("{name}: {} of {before} records survive {}-core filtering", records.len(), cfg.k_core);
    let split = split_80_20(&records, seed)?;
    Ok((BoundDataset::bind(&split, cfg.levels)?, name))
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: ExperimentReport,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    /// Smallest value of any positivity-guarded density parameter over all
    /// entities after training; `None` when the variant has no densities.
    pub min_guarded_param: Option<f64>,
    pub files: Vec<PathBuf>,
}

/// Trains and evaluates without touching the file system.
pub fn execute(cfg: &RunConfig, ds: &BoundDataset, dataset_name: &str) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = GrpModel::for_dataset(&mut store, cfg.model_config(), ds, &mut rng)?;
    if cfg.freeze_backbone && cfg.variant != Variant::BackboneOnly {
        let mut pre = model.clone();
        pre.config.variant = Variant::BackboneOnly;
        let out = train(&pre, &mut store, ds, &cfg.train)?;
        log::info!("backbone pre-training kept epoch {} (test mae {:.4})", out.best_epoch, out.best_test_mae);
        for id in model.backbone_param_ids() {
            store.set_frozen(id, true);
        }
    }
    let outcome = train(&model, &mut store, ds, &cfg.train)?;
    let preds = predict_all(&model, &store, ds, &ds.test)?;
    let truths: Vec<u32> = ds.test.iter().map(|e| e.rating).collect();
    let meta = ReportMeta {
        dataset: dataset_name.to_string(),
        model: cfg.method_label(),
        variant: cfg.variant.name().to_string(),
        seed: cfg.train.seed,
    };
    let report = ExperimentReport::from_predictions(meta, &preds, &truths, ds.c)?;
    let min_guarded_param = if cfg.variant == Variant::BackboneOnly || cfg.variant == Variant::MinusG {
        None
    } else {
        Some(model.min_guarded_param(&store, ds)?)
    };
    Ok(RunOutcome {
        report,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        min_guarded_param,
        files: Vec::new(),
    })
}

/// Full run: prepare data, train, evaluate, and write `report.csv`,
/// `report-<panel>.dat`, `history.csv` and `manifest.txt` into `cfg.out`.
pub fn run(cfg: &RunConfig, build_id: &str) -> Result<RunOutcome> {
    cfg.validate()?;
    let (ds, name) = prepare_dataset(cfg)?;
    let mut outcome = execute(cfg, &ds, &name)?;
    outcome.files = write_outputs(cfg, &outcome, build_id)?;
    Ok(outcome)
}

fn write_outputs(cfg: &RunConfig, outcome: &RunOutcome, build_id: &str) -> Result<Vec<PathBuf>> {
    let out = &cfg.out;
    std::fs::create_dir_all(out).map_err(|e| GrpError::io(out, e))?;
    let report_path = out.join("report.csv");
    let mut files = emit(&outcome.report, &report_path, EmitKind::Csv)?;
    files.extend(emit(&outcome.report, &report_path, EmitKind::PlotData)?);
    let history = out.join("history.csv");
    write_history_csv(&history, &outcome.history)?;
    files.push(history);
    let manifest = out.join("manifest.txt");
    std::fs::write(&manifest, cfg.to_manifest(build_id)).map_err(|e| GrpError::io(&manifest, e))?;
    files.push(manifest);
    Ok(files)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Dist,
    Variant,
    ParamMode,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Dist => "dist",
            SweepAxis::Variant => "variant",
            SweepAxis::ParamMode => "param_mode",
        }
    }

    /// The settings along this axis in table order.
    pub fn cells(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            SweepAxis::Dist => DistKind::ALL
                .into_iter()
                .map(|d| {
                    let c = with(&|c| {
                        c.dist = d;
                        c.param_mode = ParamMode::Dynamic;
                        c.variant = Variant::Full;
                    });
                    (d.name().to_string(), c)
                })
                .collect(),
            SweepAxis::Variant => [
                Variant::BackboneOnly,
                Variant::Full,
                Variant::MinusG,
                Variant::MinusF,
                Variant::MinusD,
            ]
            .into_iter()
            .map(|v| (v.name().to_string(), with(&|c| c.variant = v)))
            .collect(),
            SweepAxis::ParamMode => [ParamMode::Mle, ParamMode::Dynamic]
                .into_iter()
                .map(|m| {
                    let c = with(&|c| {
                        c.param_mode = m;
                        c.dist = DistKind::Gumbel;
                        c.variant = Variant::Full;
                    });
                    (m.name().to_string(), c)
                })
                .collect(),
        }
    }
}

impl FromStr for SweepAxis {
    type Err = GrpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dist" => Ok(SweepAxis::Dist),
            "variant" => Ok(SweepAxis::Variant),
            "param_mode" | "param-mode" => Ok(SweepAxis::ParamMode),
            other => Err(GrpError::config(format!("unknown sweep axis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    /// Axis value, e.g. `weibull` or `minus-g`.
    pub setting: String,
    /// Row label in table style.
    pub method: String,
    pub outcome: std::result::Result<RunOutcome, String>,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub dataset: String,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    /// `method,<dataset>,status` with one row per cell.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| GrpError::Data(e.to_string());
        w.write_record(["method", self.dataset.as_str(), "status"]).map_err(err)?;
        for c in &self.cells {
            let (mae, status) = match &c.outcome {
                Ok(o) => (
                    o.report.overall_mae.map(|m| format!("{m:.4}")).unwrap_or_default(),
                    "ok".to_string(),
                ),
                Err(e) => (String::new(), format!("error: {e}")),
            };
            w.write_record([c.method.as_str(), mae.as_str(), status.as_str()]).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| GrpError::Data(e.to_string()))?;
        Ok(format!(
            "# axis={}\n# values are test MAE\n{}",
            self.axis.name(),
            String::from_utf8_lossy(&bytes)
        ))
    }
}

fn sweep_label(axis: SweepAxis, cfg: &RunConfig) -> String {
    match (axis, cfg.variant) {
        (SweepAxis::Variant, Variant::MinusG) => "-G".into(),
        (SweepAxis::Variant, Variant::MinusF) => "-F".into(),
        (SweepAxis::Variant, Variant::MinusD) => "-D".into(),
        _ => cfg.method_label(),
    }
}

/// Runs every setting of `axis` on one shared dataset. A failing cell is
/// recorded and the sweep continues. Writes `sweep-<axis>.csv` and one
/// sub-directory per cell under `base.out`.
pub fn sweep(base: &RunConfig, axis: SweepAxis, build_id: &str) -> Result<SweepTable> {
    base.validate().or_else(|e| match e {
        // The axis itself may override the offending setting.
        GrpError::Config(_) if axis != SweepAxis::Variant => Ok(()),
        e => Err(e),
    })?;
    let (ds, name) = prepare_dataset(base)?;
    let mut cells = Vec::new();
    for (setting, mut cfg) in axis.cells(base) {
        cfg.out = base.out.join(format!("{}-{setting}", axis.name()));
        let method = sweep_label(axis, &cfg);
        log::info!("sweep {}: {setting}", axis.name());
        let outcome = execute(&cfg, &ds, &name).and_then(|mut o| {
            o.files = write_outputs(&cfg, &o, build_id)?;
            Ok(o)
        });
        if let Err(e) = &outcome {
            log::error!("sweep cell {setting} failed: {e}");
        }
        cells.push(SweepCell { setting, method, outcome: outcome.map_err(|e| e.to_string()) });
    }
    let table = SweepTable { axis, dataset: name, cells };
    std::fs::create_dir_all(&base.out).map_err(|e| GrpError::io(&base.out, e))?;
    let path = base.out.join(format!("sweep-{}.csv", axis.name()));
    std::fs::write(&path, table.to_csv()?).map_err(|e| GrpError::io(&path, e))?;
    Ok(table)
}
