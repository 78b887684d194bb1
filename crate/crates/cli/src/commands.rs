//! Command implementations.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use fairsite::datagen::{generate, GeneratorConfig};
use fairsite::dataset::{read_all, save_dataset};
use fairsite::model::{Modality, RankingInstance, N_RACE, RACE_GROUPS};
use fairsite::reward::mean_ci;
use fairsite::training::{
    apply_variant, evaluate, split_for, sweep_lambda, train, Checkpoint, ScoreSource, Split, TrainConfig,
};
use fairsite::{DatasetManifest, Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::plot::{load_series, write_plots, RaceTable};
use crate::record::{now, sidecar, version, write_json, RunRecord};
use crate::{Cli, Command, GlobalArgs, ScorerArg, SplitArg, TrainOverrides, CACHE_ENV};

/// Reads a TOML config, or the type's defaults when no file is given.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("cannot read: {e}")))?;
    toml::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.message().to_owned()))
}

fn train_config(global: &GlobalArgs, lambda: Option<f64>, o: &TrainOverrides) -> Result<TrainConfig> {
    let mut c: TrainConfig = load_config(global.config.as_deref())?;
    if let Some(s) = global.seed {
        c.seed = s;
    }
    if let Some(l) = lambda {
        c.lambda = l;
    }
    if let Some(e) = o.epochs {
        c.epochs = e;
    }
    if let Some(lr) = o.learning_rate {
        c.learning_rate = lr;
    }
    if let Some(f) = o.fusion {
        c.network.fusion = f.into();
    }
    if let Some(v) = o.variant {
        c.variant = v.into();
    }
    if let Some(obj) = o.objective {
        c.objective = obj.into();
    }
    c.validate()?;
    Ok(c)
}

/// Directory for intermediate artifacts, if one is configured.
pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Trial ids per split, cached for inspection.
fn cache_split(split: &Split, config: &TrainConfig, manifest: &DatasetManifest) -> Result<Option<PathBuf>> {
    let Some(dir) = cache_dir() else {
        return Ok(None);
    };
    std::fs::create_dir_all(&dir)?;
    fn ids(xs: &[RankingInstance]) -> Vec<&str> {
        let mut v: Vec<&str> = xs.iter().map(|x| x.trial.trial_id.as_str()).collect();
        v.dedup();
        v
    }
    let path = dir.join(format!(
        "split-{}-{}.json",
        &manifest.dims_hash()[..12],
        config.seed
    ));
    write_json(
        &path,
        &serde_json::json!({
            "seed": config.seed,
            "test_fraction": config.test_fraction,
            "val_fraction": config.val_fraction,
            "train": ids(&split.train),
            "val": ids(&split.val),
            "test": ids(&split.test),
        }),
    )?;
    Ok(Some(path))
}

/// Puts the file name into I/O and JSON errors.
fn naming<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Validation(format!("{}: {io}", path.display())),
        Error::Json(j) => Error::Validation(format!("{}: {j}", path.display())),
        other => other,
    })
}

fn read_data(path: &Path) -> Result<(DatasetManifest, Vec<RankingInstance>)> {
    naming(path, read_all(path))
}

fn load_split(data: &Path, config: &TrainConfig) -> Result<(DatasetManifest, Split)> {
    let (manifest, mut xs) = read_data(data)?;
    apply_variant(&mut xs, config.variant);
    let split = split_for(&xs, config)?;
    Ok((manifest, split))
}

struct Recorder<'a> {
    cli: &'a Cli,
    argv: &'a [String],
    started_at: f64,
}

impl Recorder<'_> {
    fn finish(&self, command: &str, config: &impl Serialize, seed: u64, primary: &Path, outputs: Vec<PathBuf>) -> Result<()> {
        let record = RunRecord {
            command: command.into(),
            argv: self.argv.to_vec(),
            config: serde_json::to_value(config)?,
            seed,
            version: version(),
            deterministic: self.cli.global.deterministic,
            threads: self.cli.global.effective_threads(),
            started_at: self.started_at,
            finished_at: now(),
            outputs,
        };
        let path = record.write(primary)?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }
}

/// Prints a line to stdout; a closed pipe is not an error.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

fn out_or(global: &GlobalArgs, default: &str) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

pub fn run(cli: &Cli, argv: &[String]) -> Result<()> {
    let rec = Recorder {
        cli,
        argv,
        started_at: now(),
    };
    let g = &cli.global;
    let threads = g.effective_threads();
    match &cli.command {
        Command::GenData => {
            let mut config: GeneratorConfig = load_config(g.config.as_deref())?;
            if let Some(s) = g.seed {
                config.seed = s;
            }
            let out = out_or(g, "dataset.jsonl");
            let (manifest, instances) = generate(&config)?;
            save_dataset(&manifest, &instances, &out)?;
            eprintln!("wrote {} instances to {}", instances.len(), out.display());
            rec.finish("gen-data", &config, config.seed, &out, vec![out.clone()])
        }
        Command::Train { data, lambda, overrides } => {
            let config = train_config(g, *lambda, overrides)?;
            let (manifest, split) = load_split(data, &config)?;
            let mut outputs = Vec::new();
            outputs.extend(cache_split(&split, &config, &manifest)?);
            let outcome = train(&split.train, &split.val, &manifest, &config)?;
            let out = out_or(g, "checkpoint.json");
            outcome.checkpoint.save(&out)?;
            let log = sidecar(&out, "log.json");
            write_json(&log, &outcome.log)?;
            eprintln!(
                "best epoch {} validation reward {:.6}; wrote {}",
                outcome.checkpoint.epoch,
                outcome.checkpoint.validation_reward,
                out.display()
            );
            outputs.splice(0..0, [out.clone(), log]);
            rec.finish("train", &config, config.seed, &out, outputs)
        }
        Command::Eval {
            data,
            checkpoint,
            scorer,
            split,
            lambda,
            force,
        } => {
            let loaded = match (scorer, checkpoint) {
                (ScorerArg::Model, None) => {
                    return Err(Error::config("checkpoint", "required for the model scorer"));
                }
                (ScorerArg::Model, Some(p)) => Some(naming(p, Checkpoint::load(p))?),
                _ => None,
            };
            let config = match &loaded {
                Some(ck) => ck.config.clone(),
                None => train_config(g, *lambda, &TrainOverrides::none())?,
            };
            let (manifest, mut xs) = read_data(data)?;
            if let Some(ck) = &loaded {
                ck.check_manifest(&manifest, *force)?;
            }
            apply_variant(&mut xs, config.variant);
            let instances = match split {
                SplitArg::All => xs,
                other => {
                    let s = split_for(&xs, &config)?;
                    match other {
                        SplitArg::Train => s.train,
                        SplitArg::Val => s.val,
                        _ => s.test,
                    }
                }
            };
            let net = loaded.as_ref().map(Checkpoint::selector).transpose()?;
            let source = match (scorer, &net) {
                (ScorerArg::Oracle, _) => ScoreSource::Oracle,
                (ScorerArg::Random, _) => ScoreSource::Random { seed: config.seed },
                (ScorerArg::Model, Some(n)) => ScoreSource::Model(n),
                (ScorerArg::Model, None) => unreachable!("checkpoint loaded above"),
            };
            let eval = evaluate(source, &instances, manifest.k, config.lambda, threads)?;
            let out = out_or(g, "report.json");
            write_json(&out, &eval.report)?;
            let race = sidecar(&out, "race.json");
            write_json(&race, &RaceTable::new(eval.selected_race, eval.candidate_race))?;
            emit(&serde_json::to_string(&eval.report)?);
            rec.finish("eval", &config, config.seed, &out, vec![out.clone(), race])
        }
        Command::Sweep { data, lambdas, overrides } => {
            let config = train_config(g, None, overrides)?;
            let (manifest, xs) = read_data(data)?;
            let points = sweep_lambda(&xs, &manifest, &config, lambdas, threads)?;
            let out = out_or(g, "sweep.json");
            write_json(&out, &points)?;
            for p in &points {
                emit(&serde_json::to_string(&p.report)?);
            }
            rec.finish("sweep", &config, config.seed, &out, vec![out.clone()])
        }
        Command::Plot { inputs, labels } => {
            if !labels.is_empty() && labels.len() != inputs.len() {
                return Err(Error::config("label", "give one label per input or none"));
            }
            let series = inputs
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let label = labels.get(i).cloned().unwrap_or_else(|| {
                        p.file_stem().map_or_else(|| format!("series {i}"), |s| s.to_string_lossy().into_owned())
                    });
                    load_series(p, label)
                })
                .collect::<Result<Vec<_>>>()?;
            let out = out_or(g, "tradeoff.svg");
            let written = write_plots(&series, &out)?;
            rec.finish("plot", &serde_json::json!({ "inputs": inputs, "labels": labels }), 0, &out, written)
        }
        Command::Inspect { data } => {
            let (manifest, xs) = read_data(data)?;
            let summary = summarize(&manifest, &xs);
            let text = serde_json::to_string_pretty(&summary)?;
            emit(&text);
            if let Some(out) = &g.out {
                write_json(out, &summary)?;
                rec.finish("inspect", &serde_json::json!({ "data": data }), manifest.seed, out, vec![out.clone()])?;
            }
            Ok(())
        }
    }
}

impl TrainOverrides {
    pub fn none() -> Self {
        Self {
            epochs: None,
            learning_rate: None,
            fusion: None,
            variant: None,
            objective: None,
        }
    }
}

/// Dataset overview printed by `inspect`.
pub fn summarize(manifest: &DatasetManifest, xs: &[RankingInstance]) -> serde_json::Value {
    let trials: std::collections::BTreeSet<&str> = xs.iter().map(|x| x.trial.trial_id.as_str()).collect();
    let sites: Vec<_> = xs.iter().flat_map(|x| &x.sites).collect();
    let n = sites.len().max(1) as f64;
    let presence: serde_json::Map<String, serde_json::Value> = Modality::ALL
        .iter()
        .map(|&m| {
            let rate = sites.iter().filter(|s| s.is_visible(m)).count() as f64 / n;
            (format!("{m:?}").to_lowercase(), rate.into())
        })
        .collect();
    let e: Vec<f64> = sites.iter().map(|s| s.enrollment as f64).collect();
    let (mean, ci) = mean_ci(&e);
    let mut race = [0.0; N_RACE];
    for s in &sites {
        for (acc, v) in race.iter_mut().zip(s.race) {
            *acc += v / n;
        }
    }
    serde_json::json!({
        "manifest": manifest,
        "instances": xs.len(),
        "base_trials": trials.len(),
        "site_rows": sites.len(),
        "modality_presence": presence,
        "enrollment": {
            "mean": if e.is_empty() { 0.0 } else { mean },
            "ci": if e.is_empty() { 0.0 } else { ci },
            "min": e.iter().copied().fold(f64::INFINITY, f64::min),
            "max": e.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            "zero_fraction": e.iter().filter(|&&v| v == 0.0).count() as f64 / n,
        },
        "mean_site_race": RACE_GROUPS.iter().zip(race).map(|(g, v)| ((*g).to_owned(), v)).collect::<std::collections::BTreeMap<_, _>>(),
    })
}
