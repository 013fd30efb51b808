//! Run configuration, the on-disk run layout and the stages
//! synth → train-source → init-bank → adapt → eval.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::metrics::{polar_eval, ConfusionMatrix, EvalReport, SECTORS};
use crate::model::{ModelConfig, Trans4Pass};
use crate::mpa::{self, AdaptConfig, PrototypeBank};
use crate::panogeo::{self, Dataset, DatasetManifest, LabeledScene, SceneSpec, SplitSizes};
use crate::trainer::{self, AdaptMode, TrainConfig};

/// Environment variable capping evaluation worker threads.
pub const THREADS_ENV: &str = "PANO_DEFORM_THREADS";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub spec: SceneSpec,
    pub splits: SplitSizes,
}

/// Everything a run needs. `model.classes` always follows `data.spec.classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub adapt: AdaptConfig,
    /// Rows of the ablation ladder: `none` (source only), `ssl`, `mpa`, `mpa+ssl`.
    pub modes: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            trainer: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            modes: ["none", "ssl", "mpa", "mpa+ssl"].map(String::from).to_vec(),
        }
    }
}

impl PipelineConfig {
    /// Defaults, then the optional JSON file, then each `key.path=value` override.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let user: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, user, "")?;
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.classes = cfg.data.spec.classes;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.spec.validate()?;
        if self.model.classes != self.data.spec.classes {
            return Err(Error::Config(format!(
                "model has {} classes, data has {}",
                self.model.classes, self.data.spec.classes
            )));
        }
        self.model.validate()?;
        let [ph, pw] = self.data.spec.pinhole_size;
        self.model.check_input(ph, pw).map_err(|e| Error::Config(format!("pinhole size: {e}")))?;
        let [h, w] = self.data.spec.panorama_size();
        self.model.check_input(h, w).map_err(|e| Error::Config(format!("panorama size: {e}")))?;
        self.trainer.validate()?;
        self.adapt.validate()?;
        self.modes()?;
        Ok(())
    }

    /// Parsed ladder rows; `None` is the source-only model.
    pub fn modes(&self) -> Result<Vec<Option<AdaptMode>>> {
        let mut out = Vec::with_capacity(self.modes.len());
        for m in &self.modes {
            let parsed = match m.as_str() {
                "none" => None,
                s => Some(AdaptMode::parse(s)?),
            };
            if out.contains(&parsed) {
                return Err(Error::Config(format!("mode {m} listed twice")));
            }
            out.push(parsed);
        }
        Ok(out)
    }

    /// Writes the resolved configuration as `config.json` in `dir`.
    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

fn merge(base: &mut Value, user: Value, path: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(Error::Config(format!("unknown config key {here}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Applies one `a.b.c=value` override. The value is read as JSON when it
/// parses, otherwise as a string. The key must already exist.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(m) => m.get_mut(part),
            Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Fails on a non-empty directory unless `force` is set; creates it otherwise.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Config(format!("{} is not a directory", dir.display())));
        }
        if !force && fs::read_dir(dir)?.next().is_some() {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Worker threads for evaluation: `PANO_DEFORM_THREADS` if set, otherwise
/// the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs `f` over `items` on up to [`worker_threads`] threads, keeping order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let n = worker_threads().min(items.len()).max(1);
    if n == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(n);
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Scores `model` on labeled panoramas (with the polar breakdown) and,
/// when given, on held-out pinhole scenes for the domain gap.
pub fn evaluate(model: &Trans4Pass, test: &[LabeledScene], pinhole: &[LabeledScene]) -> Result<EvalReport> {
    let k = model.cfg.classes;
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let per_scene = par_map(test, |s| {
        let gt = s.labels()?;
        let pred = model.predict(&s.image)?;
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&pred, gt)?;
        Ok((cm, polar_eval(&pred, gt, k, SECTORS)?))
    })?;
    let mut cm = ConfusionMatrix::new(k);
    let mut sectors = vec![ConfusionMatrix::new(k); SECTORS];
    for (c, secs) in &per_scene {
        cm.merge(c)?;
        for (a, b) in sectors.iter_mut().zip(secs) {
            a.merge(b)?;
        }
    }
    let pin = if pinhole.is_empty() {
        None
    } else {
        let cms = par_map(pinhole, |s| {
            let mut cm = ConfusionMatrix::new(k);
            cm.accumulate(&model.predict(&s.image)?, s.labels()?)?;
            Ok(cm)
        })?;
        let mut total = ConfusionMatrix::new(k);
        for c in &cms {
            total.merge(c)?;
        }
        Some(total)
    };
    Ok(EvalReport::new(&cm, &sectors, pin.as_ref()))
}

/// Directory name of a ladder row.
pub fn mode_name(mode: Option<AdaptMode>) -> &'static str {
    mode.map(AdaptMode::name).unwrap_or("none")
}

fn log_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Renders every split into `out` (`manifest.json` plus tensor files).
pub fn synth(cfg: &PipelineConfig, out: &Path) -> Result<DatasetManifest> {
    panogeo::build_datasets(&cfg.data.spec, cfg.data.splits, cfg.seed, out)
}

fn check_classes(cfg: &PipelineConfig, data: &Dataset) -> Result<()> {
    if data.classes != cfg.model.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            data.classes, cfg.model.classes
        )));
    }
    Ok(())
}

/// Trains from scratch on the source split; writes `model/` and `train_log.jsonl`.
pub fn train_source(cfg: &PipelineConfig, data: &Dataset, out: &Path) -> Result<Trans4Pass> {
    check_classes(cfg, data)?;
    let mut model = Trans4Pass::new(cfg.model.clone(), cfg.seed)?;
    fs::create_dir_all(out)?;
    let mut log = log_file(&out.join("train_log.jsonl"))?;
    trainer::train_source(&mut model, &data.source, &cfg.trainer, cfg.seed, &mut log)?;
    log.flush()?;
    model.save(&out.join("model"))?;
    Ok(model)
}

/// Builds the initial prototype bank and saves it to `out`.
pub fn init_bank(cfg: &PipelineConfig, model: &Trans4Pass, data: &Dataset, out: &Path) -> Result<PrototypeBank> {
    let bank = mpa::init_bank(model, &data.source, &data.target, &cfg.adapt)?;
    bank.save(out)?;
    Ok(bank)
}

/// Adapts a copy of `model` under `mode`; writes `model/`, `adapt_log.jsonl`
/// and, in the MPA modes, the final `bank/`.
pub fn adapt(
    cfg: &PipelineConfig,
    model: &Trans4Pass,
    bank: Option<&PrototypeBank>,
    data: &Dataset,
    mode: AdaptMode,
    out: &Path,
) -> Result<Trans4Pass> {
    check_classes(cfg, data)?;
    let mut model = model.clone();
    let mut bank = if mode.objective().mpa { bank.cloned() } else { None };
    fs::create_dir_all(out)?;
    let mut log = log_file(&out.join("adapt_log.jsonl"))?;
    trainer::adapt(
        &mut model,
        bank.as_mut(),
        &data.source,
        &data.target,
        &cfg.trainer,
        &cfg.adapt,
        mode,
        cfg.seed,
        &mut log,
    )?;
    log.flush()?;
    model.save(&out.join("model"))?;
    if let Some(b) = &bank {
        b.save(&out.join("bank"))?;
    }
    Ok(model)
}

/// Evaluates and writes `eval.json` and `polar.csv` to `out`.
pub fn eval(model: &Trans4Pass, data: &Dataset, out: &Path) -> Result<EvalReport> {
    if data.classes != model.cfg.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, checkpoint has {}",
            data.classes, model.cfg.classes
        )));
    }
    let report = evaluate(model, &data.test, &data.source_test)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("eval.json"), report.to_json()?)?;
    fs::write(out.join("polar.csv"), report.polar_csv())?;
    Ok(report)
}

/// One row of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub miou: f64,
    pub pinhole_miou: Option<f64>,
    pub gap: Option<f64>,
    pub sector_miou_weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub modes: BTreeMap<String, ModeSummary>,
}

/// Runs every stage into `out`:
///
/// ```text
/// config.json
/// data/                 manifest.json + split tensors
/// source/               model/, train_log.jsonl
/// bank/                 initial prototype bank
/// adapt-<mode>/         model/, adapt_log.jsonl, bank/
/// eval/<mode>/          eval.json, polar.csv
/// summary.json
/// ```
///
/// Errors carry the name of the failing stage.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, force: bool, progress: &mut dyn Write) -> Result<Summary> {
    cfg.validate()?;
    let modes = cfg.modes()?;
    prepare_out_dir(out, force)?;
    cfg.snapshot(out)?;
    let mut say = |msg: String| {
        let _ = writeln!(progress, "{msg}");
    };

    say(format!("[synth] {}", out.join("data").display()));
    synth(cfg, &out.join("data")).map_err(|e| e.in_stage("synth"))?;
    let data = Dataset::load(&out.join("data")).map_err(|e| e.in_stage("synth"))?;

    say(format!("[train-source] {} iters", cfg.trainer.source_iters));
    let source = train_source(cfg, &data, &out.join("source")).map_err(|e| e.in_stage("train-source"))?;

    let bank = if modes.iter().flatten().any(|m| m.objective().mpa) {
        say("[init-bank]".into());
        Some(init_bank(cfg, &source, &data, &out.join("bank")).map_err(|e| e.in_stage("init-bank"))?)
    } else {
        None
    };

    let mut summary = Summary {
        seed: cfg.seed,
        modes: BTreeMap::new(),
    };
    for mode in modes {
        let name = mode_name(mode);
        let model = match mode {
            None => source.clone(),
            Some(m) => {
                say(format!("[adapt {name}] {} iters", cfg.trainer.adapt_iters));
                adapt(cfg, &source, bank.as_ref(), &data, m, &out.join(format!("adapt-{name}")))
                    .map_err(|e| e.in_stage(format!("adapt {name}")))?
            }
        };
        let report = eval(&model, &data, &out.join("eval").join(name)).map_err(|e| e.in_stage(format!("eval {name}")))?;
        say(format!("[eval {name}] mIoU {:.2}", report.miou));
        summary.modes.insert(
            name.to_string(),
            ModeSummary {
                miou: report.miou,
                pinhole_miou: report.pinhole_miou,
                gap: report.gap,
                sector_miou_weighted: report.weighted_sector_miou(),
            },
        );
    }
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}
