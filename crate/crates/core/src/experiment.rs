//! Experiment specs, orchestration and persistence.
//!
//! An [`ExperimentSpec`] expands into a list of [`TrainConfig`]s. Runs are
//! grouped into curves by scheme, modulation, IQ mode and SNR pair, and each
//! curve gets its own hull.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::bounds::ReferenceInfo;
use crate::constellation::{Constellation, Modulation};
use crate::channel::snr_db_to_variance;
use crate::error::{Error, Result};
use crate::trainer::{self, Models, RunRecord, Scheme, TrainConfig};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const RESULTS_CSV: &str = "results.csv";
pub const BOUNDS_CSV: &str = "bounds.csv";
pub const MANIFEST: &str = "manifest.json";
pub const RUNS_DIR: &str = "runs";

/// A λ grid over one config template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGroup {
    /// Any [`TrainConfig`] fields except `lambda` (and `scheme` when
    /// `schemes` is given).
    pub template: Map<String, Value>,
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub schemes: Vec<Scheme>,
}

/// Cut-set query at given link rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSpec {
    pub modulation: Modulation,
    pub snr1_db: f64,
    pub snr2_db: f64,
    #[serde(default = "unit_power")]
    pub power: f64,
    pub rates: Vec<(f64, f64)>,
}

fn unit_power() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotToggles {
    #[serde(default = "yes")]
    pub curves: bool,
    #[serde(default)]
    pub regions: bool,
    /// Region plots only for the completed run whose rate is nearest this value.
    #[serde(default)]
    pub regions_near_rate: Option<f64>,
}

fn yes() -> bool {
    true
}

impl Default for PlotToggles {
    fn default() -> Self {
        Self { curves: true, regions: false, regions_near_rate: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub runs: Vec<TrainConfig>,
    #[serde(default)]
    pub sweeps: Vec<SweepGroup>,
    #[serde(default)]
    pub bounds: Vec<BoundSpec>,
    #[serde(default)]
    pub plots: PlotToggles,
    #[serde(default = "one")]
    pub replicates: usize,
}

fn one() -> usize {
    1
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }

    /// Every config of the experiment, validated, in spec order.
    pub fn expand(&self) -> Result<Vec<TrainConfig>> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("experiment name must be nonempty".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        let mut cfgs = self.runs.clone();
        for (g, group) in self.sweeps.iter().enumerate() {
            if group.lambdas.is_empty() {
                return Err(Error::Config(format!("sweep {g} has an empty lambda list")));
            }
            if group.template.contains_key("lambda") {
                return Err(Error::Config(format!("sweep {g} template must not set lambda")));
            }
            let schemes: Vec<Option<Scheme>> =
                if group.schemes.is_empty() { vec![None] } else { group.schemes.iter().copied().map(Some).collect() };
            for scheme in schemes {
                for &lambda in &group.lambdas {
                    let mut obj = group.template.clone();
                    obj.insert("lambda".into(), serde_json::to_value(lambda)?);
                    if let Some(s) = scheme {
                        obj.insert("scheme".into(), serde_json::to_value(s)?);
                    }
                    cfgs.push(serde_json::from_value(Value::Object(obj))?);
                }
            }
        }
        if cfgs.is_empty() {
            return Err(Error::Config("experiment has no runs".into()));
        }
        for c in &cfgs {
            c.validate()?;
        }
        for b in &self.bounds {
            snr_db_to_variance(b.snr1_db, b.power)?;
            snr_db_to_variance(b.snr2_db, b.power)?;
        }
        Ok(cfgs)
    }

    /// Copy with every config (and sweep template) reseeded.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        for c in &mut s.runs {
            c.seed = seed;
        }
        for g in &mut s.sweeps {
            g.template.insert("seed".into(), Value::from(seed));
        }
        s
    }
}

/// Curve identity: runs sharing it form one rate sweep.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CurveKey {
    pub scheme: String,
    pub modulation: String,
    pub iq_mode: String,
    pub snr1_db: String,
    pub snr2_db: String,
}

impl CurveKey {
    pub fn of(cfg: &TrainConfig) -> Self {
        Self {
            scheme: cfg.scheme.to_string(),
            modulation: cfg.modulation.to_string(),
            iq_mode: cfg.iq_label().to_string(),
            snr1_db: cfg.snr1_db.to_string(),
            snr2_db: cfg.snr2_db.to_string(),
        }
    }

    pub fn label(&self) -> String {
        format!("{} {} {} {}/{} dB", self.scheme, self.modulation, self.iq_mode, self.snr1_db, self.snr2_db)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub stem: String,
    pub curve: CurveKey,
    pub record: PathBuf,
    pub model: Option<PathBuf>,
    pub completed: bool,
    pub on_hull: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub code_version: String,
    /// SHA-256 over the expanded configs, replicate count and code version.
    pub config_hash: String,
    pub replicates: usize,
    pub runs: Vec<ManifestRun>,
    pub incomplete: Vec<String>,
    pub results_csv: PathBuf,
    pub bounds_csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }

    pub fn all_completed(&self) -> bool {
        self.incomplete.is_empty()
    }
}

pub fn config_hash(cfgs: &[TrainConfig], replicates: usize) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&(cfgs, replicates, CODE_VERSION))?);
    Ok(hex::encode(h.finalize()))
}

/// Results CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scheme: String,
    pub modulation: String,
    pub iq_mode: String,
    pub gamma1_db: f64,
    pub gamma2_db: f64,
    pub lambda: f64,
    pub k1: usize,
    pub k2: usize,
    pub rate1: f64,
    pub rate2: f64,
    pub rate: f64,
    pub mi_lower_bound: f64,
    pub mi_exact: f64,
    pub ser_mc: f64,
    pub ser_map_exact: f64,
    pub seed: u64,
}

impl ResultRow {
    pub fn from_record(r: &RunRecord) -> Option<Self> {
        let m = r.metrics.as_ref()?;
        let c = &r.config;
        Some(Self {
            scheme: c.scheme.to_string(),
            modulation: c.modulation.to_string(),
            iq_mode: c.iq_label().to_string(),
            gamma1_db: c.snr1_db,
            gamma2_db: c.snr2_db,
            lambda: c.lambda,
            k1: c.k1,
            k2: c.k2,
            rate1: m.rate1,
            rate2: m.rate2,
            rate: m.rate,
            mi_lower_bound: m.mi_lower_bound,
            mi_exact: m.mi_exact,
            ser_mc: m.ser_mc,
            ser_map_exact: m.ser_map_exact,
            seed: r.seed,
        })
    }
}

/// Bounds CSV row. Infinite link rates give the perfect-relay references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub modulation: String,
    pub gamma1_db: f64,
    pub gamma2_db: f64,
    pub r1: f64,
    pub r2: f64,
    pub cut_set_bits: f64,
    pub mi_one_relay: f64,
    pub mi_two_relays: f64,
}

/// Reference rows for every SNR pair used by a run, followed by the queries.
pub fn bound_rows(cfgs: &[TrainConfig], queries: &[BoundSpec]) -> Result<Vec<BoundRow>> {
    let mut seen: Vec<(Modulation, f64, f64, f64)> = Vec::new();
    let mut rows = Vec::new();
    let mut push = |m: Modulation, g1: f64, g2: f64, p: f64, rates: &[(f64, f64)]| -> Result<()> {
        let c = Constellation::new(m, p)?;
        let refs = ReferenceInfo::new(&c, snr_db_to_variance(g1, p)?, snr_db_to_variance(g2, p)?)?;
        for &(r1, r2) in rates {
            rows.push(BoundRow {
                modulation: m.to_string(),
                gamma1_db: g1,
                gamma2_db: g2,
                r1,
                r2,
                cut_set_bits: refs.cut_set(r1, r2)?,
                mi_one_relay: refs.mi_relay1,
                mi_two_relays: refs.mi_both,
            });
        }
        Ok(())
    };
    for c in cfgs {
        let key = (c.modulation, c.snr1_db, c.snr2_db, c.power);
        if !seen.contains(&key) {
            seen.push(key);
            push(c.modulation, c.snr1_db, c.snr2_db, c.power, &[(f64::INFINITY, f64::INFINITY)])?;
        }
    }
    for q in queries {
        push(q.modulation, q.snr1_db, q.snr2_db, q.power, &q.rates)?;
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Trains every config (best-of-`replicates`) on `workers` threads and
/// returns the records grouped by curve, each sorted by rate with its hull marked.
pub fn run_configs(cfgs: &[TrainConfig], replicates: usize, workers: usize) -> Result<BTreeMap<CurveKey, Vec<RunRecord>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    let records: Vec<RunRecord> = pool.install(|| cfgs.par_iter().map(|c| trainer::best_of(c, replicates)).collect());
    let mut curves: BTreeMap<CurveKey, Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        curves.entry(CurveKey::of(&r.config)).or_default().push(r);
    }
    for recs in curves.values_mut() {
        recs.sort_by(|a, b| {
            let key = |r: &RunRecord| r.metrics.as_ref().map_or(f64::INFINITY, |m| m.rate);
            key(a).total_cmp(&key(b)).then(a.config.lambda.total_cmp(&b.config.lambda))
        });
        trainer::mark_hull(recs);
    }
    Ok(curves)
}

/// Writes the record JSON and, when present, the model bundle. Returns
/// `(record path, model path)`.
pub fn save_run(dir: &Path, record: &RunRecord) -> Result<(PathBuf, Option<PathBuf>)> {
    fs::create_dir_all(dir)?;
    let stem = record.config.file_stem();
    let rec_path = dir.join(format!("{stem}.json"));
    let mut w = BufWriter::new(fs::File::create(&rec_path)?);
    serde_json::to_writer_pretty(&mut w, record)?;
    w.flush()?;
    let model_path = match &record.models {
        Some(m) => {
            let p = dir.join(format!("{stem}.bin"));
            let mut w = BufWriter::new(fs::File::create(&p)?);
            m.write_to(&mut w)?;
            w.flush()?;
            Some(p)
        }
        None => None,
    };
    Ok((rec_path, model_path))
}

/// Reads a record and the model bundle next to it.
pub fn load_run(record_path: &Path) -> Result<RunRecord> {
    let f = fs::File::open(record_path).map_err(|e| Error::NotFound(format!("{}: {e}", record_path.display())))?;
    let mut record: RunRecord = serde_json::from_reader(BufReader::new(f))?;
    let model_path = record_path.with_extension("bin");
    if model_path.exists() {
        let mut r = BufReader::new(fs::File::open(&model_path)?);
        record.models = Some(Models::read_from(&mut r)?);
    }
    Ok(record)
}

/// Outcome of [`run_experiment`].
#[derive(Debug)]
pub struct ExperimentOutput {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub curves: BTreeMap<CurveKey, Vec<RunRecord>>,
}

/// Runs the experiment into `out` (or the spec's output directory).
pub fn run_experiment(spec: &ExperimentSpec, out: Option<&Path>, workers: usize, overlay: Option<&Path>) -> Result<ExperimentOutput> {
    let cfgs = spec.expand()?;
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| spec.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory given".into()))?;
    fs::create_dir_all(&dir)?;
    let bounds = bound_rows(&cfgs, &spec.bounds)?;
    let curves = run_configs(&cfgs, spec.replicates, workers)?;

    let runs_dir = dir.join(RUNS_DIR);
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    let mut incomplete = Vec::new();
    for (key, recs) in &curves {
        for r in recs {
            let (rec_path, model_path) = save_run(&runs_dir, r)?;
            let stem = r.config.file_stem();
            if !r.completed() {
                incomplete.push(stem.clone());
            }
            rows.extend(ResultRow::from_record(r));
            runs.push(ManifestRun {
                stem,
                curve: key.clone(),
                record: relative(&dir, &rec_path),
                model: model_path.map(|p| relative(&dir, &p)),
                completed: r.completed(),
                on_hull: r.flags.on_hull,
            });
        }
    }
    write_csv(&dir.join(RESULTS_CSV), &rows)?;
    write_csv(&dir.join(BOUNDS_CSV), &bounds)?;

    let mut manifest = Manifest {
        name: spec.name.clone(),
        code_version: CODE_VERSION.into(),
        config_hash: config_hash(&cfgs, spec.replicates)?,
        replicates: spec.replicates,
        runs,
        incomplete,
        results_csv: RESULTS_CSV.into(),
        bounds_csv: BOUNDS_CSV.into(),
        plots: Vec::new(),
    };
    if spec.plots.curves && !rows.is_empty() {
        let files = crate::plot::export_curves(&manifest, &dir, overlay)?;
        manifest.plots.extend(files.into_iter().map(|p| relative(&dir, &p)));
    }
    if spec.plots.regions {
        let all: Vec<&RunRecord> = curves.values().flatten().filter(|r| r.completed()).collect();
        let chosen: Vec<&RunRecord> = match spec.plots.regions_near_rate {
            Some(target) => nearest_rate(&all, target).into_iter().collect(),
            None => all,
        };
        for r in chosen {
            let files = crate::plot::write_regions(r, &dir.join("regions"), crate::plot::DEFAULT_RESOLUTION)?;
            manifest.plots.extend(files.into_iter().map(|p| relative(&dir, &p)));
        }
    }
    let manifest_path = dir.join(MANIFEST);
    let mut w = BufWriter::new(fs::File::create(&manifest_path)?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.flush()?;
    Ok(ExperimentOutput { manifest, manifest_path, curves })
}

/// Completed run whose average rate is closest to `target`.
pub fn nearest_rate<'a>(records: &[&'a RunRecord], target: f64) -> Option<&'a RunRecord> {
    records
        .iter()
        .filter_map(|r| r.metrics.as_ref().map(|m| (*r, (m.rate - target).abs())))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(r, _)| r)
}

fn relative(base: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ExperimentSpec {
        serde_json::from_str(
            r#"{
                "name": "tiny",
                "sweeps": [{
                    "template": {"modulation": "bpsk", "snr1_db": 5.0, "snr2_db": 5.0, "k1": 2, "k2": 2,
                                 "hidden": [4], "steps": 20, "batch_size": 32,
                                 "eval": {"mc_samples": 200, "extraction": {"range_scale": 8.0, "resolution_1d": 1000, "resolution_2d": 50}}},
                    "lambdas": [1.0, 4.0],
                    "schemes": ["distributed", "p2p"]
                }],
                "bounds": [{"modulation": "bpsk", "snr1_db": 5.0, "snr2_db": 5.0, "rates": [[0.5, 0.5]]}]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn expansion_covers_grid() {
        let cfgs = tiny_spec().expand().unwrap();
        assert_eq!(cfgs.len(), 4);
        assert_eq!(cfgs.iter().filter(|c| c.scheme == Scheme::P2p).count(), 2);
        assert!(cfgs.iter().any(|c| c.lambda == 4.0));
    }

    #[test]
    fn empty_lambda_list_rejected() {
        let mut s = tiny_spec();
        s.sweeps[0].lambdas.clear();
        assert!(matches!(s.expand(), Err(Error::Config(_))));
    }

    #[test]
    fn bad_specs_rejected() {
        let mut s = tiny_spec();
        s.name = " ".into();
        assert!(s.expand().is_err());
        let mut s = tiny_spec();
        s.sweeps[0].lambdas.push(-1.0);
        assert!(s.expand().is_err());
        let mut s = tiny_spec();
        s.sweeps[0].template.insert("typo".into(), Value::from(1));
        assert!(s.expand().is_err());
        let mut s = tiny_spec();
        s.sweeps[0].template.insert("lambda".into(), Value::from(1.0));
        assert!(s.expand().is_err());
    }

    #[test]
    fn reseeding_changes_hash() {
        let s = tiny_spec();
        let a = config_hash(&s.expand().unwrap(), 1).unwrap();
        let b = config_hash(&s.with_seed(9).expand().unwrap(), 1).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, config_hash(&s.expand().unwrap(), 1).unwrap());
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn bound_rows_include_references() {
        let s = tiny_spec();
        let rows = bound_rows(&s.expand().unwrap(), &s.bounds).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].cut_set_bits, rows[0].mi_two_relays);
        let r = &rows[1];
        let expect = [r.mi_two_relays, r.r1 + r.r2, r.mi_one_relay + r.r2, r.mi_one_relay + r.r1]
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        assert_eq!(r.cut_set_bits, expect);
        assert!(r.cut_set_bits <= 1.0);
    }

    #[test]
    fn experiment_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&tiny_spec(), Some(dir.path()), 1, None).unwrap();
        assert!(out.manifest.all_completed());
        assert_eq!(out.manifest.runs.len(), 4);
        let rows = read_results(&dir.path().join(RESULTS_CSV)).unwrap();
        assert_eq!(rows.len(), 4);
        for run in &out.manifest.runs {
            let rec = load_run(&dir.path().join(&run.record)).unwrap();
            assert!(rec.models.is_some());
        }
        let header = fs::read_to_string(dir.path().join(RESULTS_CSV)).unwrap();
        assert!(header.starts_with(
            "scheme,modulation,iq_mode,gamma1_db,gamma2_db,lambda,k1,k2,rate1,rate2,rate,mi_lower_bound,mi_exact,ser_mc,ser_map_exact,seed\n"
        ));
        let m = Manifest::load(&out.manifest_path).unwrap();
        assert_eq!(m, out.manifest);
    }
}
