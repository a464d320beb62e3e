//! `gen-data`, `baseline`, `train`, `eval`, `sweep` and `commutant`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cellfree_core::aagnn::Model;
use cellfree_core::baselines::{mrt, ratio, wmmse, WmmseOptions};
use cellfree_core::dataset::{digest_bytes, Dataset, ScenarioSidecar};
use cellfree_core::equivariance::{commutant_dimension, orbit_count};
use cellfree_core::io::write_atomic;
use cellfree_core::objective::rate_report;
use cellfree_core::training::{self, init_model, mean, std_dev, CacheEntry, History, WmmseCache};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::parallel::par_map;
use crate::report::{self, BaselineRow, EvalRow, SweepRow};

pub const TRAIN_FILE: &str = "train.cfds";
pub const TEST_FILE: &str = "test.cfds";
pub const MANIFEST_FILE: &str = "scenario.json";
pub const CHECKPOINT_FILE: &str = "model.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const BASELINE_FILE: &str = "baseline.csv";
pub const DIGESTS_FILE: &str = "digests.json";

/// The `scenario.json` written by `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub train: ScenarioSidecar,
    pub test: ScenarioSidecar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Samples,
    Ues,
    Antennas,
    Aps,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Samples => "samples",
            Axis::Ues => "K",
            Axis::Antennas => "N",
            Axis::Aps => "M",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "samples" => Axis::Samples,
            "K" | "k" => Axis::Ues,
            "N" | "n" => Axis::Antennas,
            "M" | "m" => Axis::Aps,
            _ => bail!("unknown sweep axis {s:?} (expected samples, K, N or M)"),
        })
    }
}

pub fn method_name(model: &Model) -> &'static str {
    if model.config.attention {
        "aagnn"
    } else {
        "aagnn_woa"
    }
}

/// `test.cfds` -> `test.wmmse.json`.
pub fn cache_path(data: &Path) -> PathBuf {
    data.with_extension("wmmse.json")
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        bail!(
            "dataset {} does not exist (run gen-data first)",
            path.display()
        );
    }
    Dataset::read(path).with_context(|| format!("reading dataset {}", path.display()))
}

pub fn read_model(path: &Path) -> Result<Model> {
    if !path.exists() {
        bail!(
            "checkpoint {} does not exist (run train first)",
            path.display()
        );
    }
    Model::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

/// WMMSE reference rates, computed on `workers` threads.
pub fn build_cache(dataset: &Dataset, workers: usize) -> Result<WmmseCache> {
    let opts = WmmseOptions::default();
    let rates = par_map(&dataset.samples, workers, |_, s| {
        wmmse(
            &s.channels,
            &s.assoc,
            dataset.power,
            dataset.noise_power,
            &opts,
        )
        .map(|(_, t)| t.final_rate())
    });
    let entries = rates
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            Ok(CacheEntry {
                index,
                sum_rate_nats: r?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WmmseCache {
        digest: dataset.digest()?,
        entries,
    })
}

/// Reuses the cache at `path` when it matches `dataset`, else rebuilds it.
pub fn load_or_build_cache(path: &Path, dataset: &Dataset, workers: usize) -> Result<WmmseCache> {
    if path.exists() {
        if let Ok(cache) = WmmseCache::load(path) {
            if cache.check(dataset).is_ok() && cache.entries.len() == dataset.len() {
                return Ok(cache);
            }
        }
    }
    let cache = build_cache(dataset, workers)?;
    cache.save(path)?;
    Ok(cache)
}

pub fn gen_data(cfg: &RunConfig) -> Result<DataManifest> {
    let dir = &cfg.out_dir;
    let scenario = cfg.scenario();
    let sidecar = |name: &str, seed: u64, count: usize| -> Result<ScenarioSidecar> {
        let ds = Dataset::generate(&scenario, seed, count);
        let digest = ds.write(&dir.join(name))?;
        Ok(ScenarioSidecar {
            scenario: scenario.clone(),
            seed,
            count,
            noise_power: ds.noise_power,
            digest,
        })
    };
    let manifest = DataManifest {
        train: sidecar(TRAIN_FILE, cfg.train_seed(), cfg.train_samples)?,
        test: sidecar(TEST_FILE, cfg.test_seed(), cfg.test_samples)?,
    };
    write_atomic(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    cfg.echo(dir)?;
    Ok(manifest)
}

/// WMMSE and MRT on every sample of `data`; also refreshes its WMMSE cache.
pub fn baseline(cfg: &RunConfig, data: &Path) -> Result<Vec<BaselineRow>> {
    let ds = read_dataset(data)?;
    let opts = WmmseOptions::default();
    let results = par_map(&ds.samples, cfg.workers, |_, s| {
        let w = wmmse(&s.channels, &s.assoc, ds.power, ds.noise_power, &opts);
        let m = rate_report(
            &s.channels,
            &s.assoc,
            &mrt(&s.channels, &s.assoc, ds.power),
            ds.noise_power,
        )
        .sum_rate;
        w.map(|(_, trace)| (trace, m))
    });
    let mut rows = Vec::with_capacity(2 * ds.len());
    let mut entries = Vec::with_capacity(ds.len());
    for (i, r) in results.into_iter().enumerate() {
        let (trace, mrt_rate) = r.with_context(|| format!("WMMSE on sample {i}"))?;
        entries.push(CacheEntry {
            index: i,
            sum_rate_nats: trace.final_rate(),
        });
        rows.push(BaselineRow {
            sample_id: i,
            method: "wmmse".into(),
            sum_rate_nats: trace.final_rate(),
            converged: trace.converged,
            iters: trace.iterations(),
        });
        rows.push(BaselineRow {
            sample_id: i,
            method: "mrt".into(),
            sum_rate_nats: mrt_rate,
            converged: true,
            iters: 0,
        });
    }
    let cache = WmmseCache {
        digest: ds.digest()?,
        entries,
    };
    cache.save(&cache_path(data))?;
    report::write_text(
        &cfg.out_dir.join(BASELINE_FILE),
        &report::baseline_csv(&rows),
    )?;
    cfg.echo(&cfg.out_dir)?;
    Ok(rows)
}

/// Per-sample rows for `model` on `dataset`.
pub fn eval_rows(model: &Model, dataset: &Dataset, cache: &WmmseCache) -> Result<Vec<EvalRow>> {
    cache.check(dataset)?;
    let method = method_name(model);
    dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let v = model.forward(&s.channels, &s.assoc, dataset.power);
            let r = rate_report(&s.channels, &s.assoc, &v, dataset.noise_power).sum_rate;
            Ok(EvalRow {
                sample_id: i,
                method: method.into(),
                sum_rate_nats: r,
                norm_rate: ratio(r, cache.get(i)?)?,
            })
        })
        .collect()
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: History,
    pub eval: Vec<EvalRow>,
}

/// Trains on `<data_dir>/train.cfds`, tracks `<data_dir>/test.cfds`, and
/// writes history, checkpoint, per-sample eval and digests to the output
/// directory.
pub fn train(cfg: &RunConfig, data_dir: &Path, progress: bool) -> Result<TrainOutcome> {
    let train_path = data_dir.join(TRAIN_FILE);
    let test_path = data_dir.join(TEST_FILE);
    let train_set = read_dataset(&train_path)?;
    let test_set = read_dataset(&test_path)?;
    let cache = load_or_build_cache(&cache_path(&test_path), &test_set, cfg.workers)?;
    let mut model = init_model(cfg.model.clone(), &train_set)?;
    let history = training::train_with(
        &mut model,
        &cfg.train,
        &train_set,
        Some((&test_set, &cache)),
        |r| {
            if progress {
                let eval = r
                    .eval_norm_rate
                    .map(|x| format!("{x:.4}"))
                    .unwrap_or_else(|| "-".into());
                eprintln!(
                    "epoch {:>4}  loss {:>10.5}  eval {eval}  {:.1}s",
                    r.epoch, r.train_loss, r.seconds
                );
            }
        },
    )?;
    let out = &cfg.out_dir;
    report::write_text(&out.join(HISTORY_FILE), &history.to_csv())?;
    let ckpt = out.join(CHECKPOINT_FILE);
    model.save(&ckpt)?;
    let eval = eval_rows(&model, &test_set, &cache)?;
    report::write_text(&out.join(EVAL_FILE), &report::eval_csv(&eval))?;
    let mut digests = BTreeMap::new();
    digests.insert("train", train_set.digest()?);
    digests.insert("test", test_set.digest()?);
    digests.insert("checkpoint", digest_bytes(&std::fs::read(&ckpt)?));
    write_atomic(
        &out.join(DIGESTS_FILE),
        serde_json::to_string_pretty(&digests)?.as_bytes(),
    )?;
    cfg.echo(out)?;
    Ok(TrainOutcome {
        model,
        history,
        eval,
    })
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, data: &Path) -> Result<Vec<EvalRow>> {
    let model = read_model(checkpoint)?;
    let ds = read_dataset(data)?;
    let cache = load_or_build_cache(&cache_path(data), &ds, cfg.workers)?;
    let rows = eval_rows(&model, &ds, &cache)?;
    report::write_text(&cfg.out_dir.join(EVAL_FILE), &report::eval_csv(&rows))?;
    cfg.echo(&cfg.out_dir)?;
    Ok(rows)
}

fn summarize(axis: Axis, value: usize, method: &str, ratios: &[f64], seed: u64) -> SweepRow {
    SweepRow {
        axis: axis.name().into(),
        axis_value: value,
        method: method.into(),
        mean_norm_rate: mean(ratios),
        std: std_dev(ratios),
        n: ratios.len(),
        seed,
    }
}

fn mrt_ratios(ds: &Dataset, cache: &WmmseCache) -> Result<Vec<f64>> {
    Ok(training::evaluate_with(ds, cache, |s| mrt(&s.channels, &s.assoc, ds.power))?.ratios)
}

/// Checkpoints evaluated by the shape axes of `sweep`.
#[derive(Clone, Debug, Default)]
pub struct SweepModels {
    pub attention: Option<PathBuf>,
    pub no_attention: Option<PathBuf>,
}

/// One row per (axis value, method). The samples axis trains both model
/// variants on train-set prefixes; the K, N and M axes evaluate the given
/// checkpoints on freshly generated test sets.
pub fn sweep(
    cfg: &RunConfig,
    axis: Axis,
    values: &[usize],
    data_dir: &Path,
    models: &SweepModels,
    progress: bool,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        bail!("no sweep values");
    }
    let mut rows = Vec::new();
    match axis {
        Axis::Samples => {
            let train_set = read_dataset(&data_dir.join(TRAIN_FILE))?;
            let test_path = data_dir.join(TEST_FILE);
            let test_set = read_dataset(&test_path)?;
            let cache = load_or_build_cache(&cache_path(&test_path), &test_set, cfg.workers)?;
            let mrt_r = mrt_ratios(&test_set, &cache)?;
            for &n in values {
                if n == 0 || n > train_set.len() {
                    bail!("sample count {n} outside 1..={}", train_set.len());
                }
                let subset = train_set.subset(&(0..n).collect::<Vec<_>>());
                for attention in [true, false] {
                    let mut mc = cfg.model.clone();
                    mc.attention = attention;
                    let mut model = init_model(mc, &subset)?;
                    training::train(&mut model, &cfg.train, &subset, None)?;
                    let m = training::evaluate(&model, &test_set, &cache)?;
                    let row = summarize(axis, n, method_name(&model), &m.ratios, cfg.seed);
                    if progress {
                        eprintln!("samples {n} {} {:.4}", row.method, row.mean_norm_rate);
                    }
                    rows.push(row);
                }
                rows.push(summarize(axis, n, "mrt", &mrt_r, cfg.seed));
            }
        }
        Axis::Ues | Axis::Antennas | Axis::Aps => {
            let mut loaded = Vec::new();
            for p in [&models.attention, &models.no_attention]
                .into_iter()
                .flatten()
            {
                loaded.push(read_model(p)?);
            }
            if loaded.is_empty() {
                bail!("sweep over {} needs at least one checkpoint", axis.name());
            }
            let cache_dir = cfg.out_dir.join("cache");
            for &v in values {
                if v == 0 {
                    bail!("{} must be at least 1", axis.name());
                }
                let mut scenario = cfg.scenario();
                match axis {
                    Axis::Ues => scenario.n_ues = v,
                    Axis::Antennas => scenario.n_antennas = v,
                    _ => scenario.n_aps = v,
                }
                let ds = Dataset::generate(&scenario, cfg.test_seed(), cfg.test_samples);
                let cache = load_or_build_cache(
                    &cache_dir.join(format!("{}{v}.wmmse.json", axis.name())),
                    &ds,
                    cfg.workers,
                )?;
                for model in &loaded {
                    let m = training::evaluate(model, &ds, &cache)?;
                    let row = summarize(axis, v, method_name(model), &m.ratios, model.config.seed);
                    if progress {
                        eprintln!(
                            "{} {v} {} {:.4}",
                            axis.name(),
                            row.method,
                            row.mean_norm_rate
                        );
                    }
                    rows.push(row);
                }
                rows.push(summarize(
                    axis,
                    v,
                    "mrt",
                    &mrt_ratios(&ds, &cache)?,
                    cfg.seed,
                ));
            }
        }
    }
    let name = format!("sweep_{}.csv", axis.name());
    report::write_text(&cfg.out_dir.join(name), &report::sweep_csv(&rows))?;
    cfg.echo(&cfg.out_dir)?;
    Ok(rows)
}

/// `(dimension, orbit count)` of the equivariant weight space.
pub fn commutant(n_antennas: usize, n_aps: usize, n_ues: usize) -> Result<(usize, usize)> {
    Ok((
        commutant_dimension(n_antennas, n_aps, n_ues)?,
        orbit_count(n_antennas, n_aps, n_ues),
    ))
}
