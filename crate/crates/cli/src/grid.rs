//! Grid execution: every (seed, group) run immunizes the pre-trained model
//! with each configured method, attacks every arm on every group concept, and
//! scores the generations.

use std::path::{Path, PathBuf};

use mima_core::diffusion::checkpoint;
use mima_core::diffusion::{ConceptSpec, Denoiser};
use mima_core::immunize::{run_cp, run_jt, run_mima, run_sequential, ImmunizeTrace, Setup};
use mima_core::metrics::{attack_samples, CheckpointSamples, SampleSettings, Similarity};
use mima_core::rng::{derive_seed, label_id};
use mima_core::{Matrix, ParamSet, Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConceptGroup, ExperimentConfig, Method};
use crate::error::{CliError, Result};
use crate::results::{self, arm, concept_label, round_value, ResultRow, NONE};
use crate::summary::Summary;
use crate::world::World;

pub fn run_id(group: &ConceptGroup, seed: u64) -> String {
    format!("{}-s{seed}", group.name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Done,
    Failed,
}

/// One `(seed, group, method)` job, `method` being `none` for the
/// unprotected arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub run_id: String,
    pub seed: u64,
    pub group: String,
    pub method: String,
    pub status: CellStatus,
    pub rows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmModel {
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    pub params: ParamSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub run_id: String,
    pub method: String,
    pub epoch: usize,
    pub concepts: Vec<usize>,
    pub upper_objective: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Default)]
pub struct GridOutput {
    pub rows: Vec<ResultRow>,
    pub cells: Vec<CellRecord>,
    pub models: Vec<ArmModel>,
    pub traces: Vec<TraceRow>,
    /// Pre-trained model per seed, `None` where the world failed to build.
    pub pretrained: Vec<(u64, Option<Denoiser>)>,
}

impl GridOutput {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.status == CellStatus::Failed).count()
    }
}

/// Generations indexed `[attack][group concept][checkpoint]`.
type ArmSamples = Vec<Vec<Vec<CheckpointSamples>>>;

struct RunContext<'a> {
    cfg: &'a ExperimentConfig,
    world: &'a World,
    group: &'a ConceptGroup,
    concepts: Vec<usize>,
    metrics: &'a [Similarity],
    run_id: String,
}

struct ArmResult {
    rows: Vec<ResultRow>,
    params: ParamSet,
    trace: Option<ImmunizeTrace>,
}

impl RunContext<'_> {
    fn attack_all(&self, params: &ParamSet) -> Result<ArmSamples> {
        let model = self.world.pretrained.with_params(params.clone())?;
        let ev = &self.cfg.evaluation;
        let seed = self.world.seed;
        self.cfg
            .attacks
            .iter()
            .map(|attack| {
                let attack_id = label_id(attack.kind.name());
                self.concepts
                    .iter()
                    .map(|&k| {
                        // Attack minibatches and sampling noise depend only on
                        // (seed, attack, concept), so every arm sees the same draws.
                        let sampling = SampleSettings {
                            count: ev.sample_count,
                            sampler: ev.sampler,
                            seed: derive_seed(seed, &[label_id("sampling"), attack_id, k as u64]),
                        };
                        let mut rng = Rng::derive(seed, &[label_id("attack"), attack_id, k as u64]);
                        Ok(attack_samples(
                            &model,
                            attack,
                            &self.world.pool[k],
                            &self.world.pool_data[k],
                            &self.world.schedule,
                            &ev.checkpoints,
                            &sampling,
                            &mut rng,
                        )?)
                    })
                    .collect()
            })
            .collect()
    }

    /// Rows scoring `samples` against the references and, when `paired_with`
    /// is given, against the unprotected arm's generations.
    fn rows(&self, method: &str, samples: &ArmSamples, paired_with: Option<&ArmSamples>) -> Result<Vec<ResultRow>> {
        let mut rows = Vec::new();
        let n_targets = self.group.targets.len();
        for (a, attack) in self.cfg.attacks.iter().enumerate() {
            for (ci, &k) in self.concepts.iter().enumerate() {
                for (pi, point) in samples[a][ci].iter().enumerate() {
                    for metric in self.metrics {
                        let row = |arm_name: &str, value: f64| ResultRow {
                            run_id: self.run_id.clone(),
                            method: method.to_string(),
                            attack: attack.kind.name().to_string(),
                            concept: concept_label(k, ci >= n_targets),
                            step: point.step,
                            metric: metric.kind().name().to_string(),
                            arm: arm_name.to_string(),
                            value: round_value(value),
                        };
                        let to_ref = metric.similarity(&self.world.references[k], &point.samples)?;
                        match paired_with {
                            None => rows.push(row(arm::NONE, to_ref)),
                            Some(base) => {
                                rows.push(row(arm::IMMUNIZED, to_ref));
                                let other = &base[a][ci][pi].samples;
                                rows.push(row(arm::PAIRED, metric.similarity(&point.samples, other)?));
                            }
                        }
                    }
                }
            }
        }
        Ok(rows)
    }

    fn immunize(&self, method: Method) -> Result<(ParamSet, ImmunizeTrace)> {
        let targets: Vec<ConceptSpec> = self.group.targets.iter().map(|&k| self.world.pool[k].clone()).collect();
        let data: Vec<Matrix> = self.group.targets.iter().map(|&k| self.world.pool_data[k].clone()).collect();
        let c_reg = self.world.c_reg(&self.group.others)?;
        let setup = Setup {
            pretrained: &self.world.pretrained,
            concepts: &targets,
            data: &data,
            reg_embeddings: &c_reg,
            schedule: &self.world.schedule,
        };
        let mut rng = Rng::derive(
            self.world.seed,
            &[label_id("immunize"), label_id(&self.group.name), label_id(method.name())],
        );
        let cfg = &self.cfg.immunize;
        Ok(match method {
            Method::Mima => run_mima(&setup, cfg, &mut rng)?,
            Method::Jt => run_jt(&setup, cfg, &mut rng)?,
            Method::Cp => run_cp(&setup, cfg, &mut rng)?,
            Method::Sequential => run_sequential(&setup, cfg, &mut rng)?,
        })
    }

    fn arm(&self, method: Method, baseline: &ArmSamples) -> Result<ArmResult> {
        let (params, trace) = self.immunize(method)?;
        let samples = self.attack_all(&params)?;
        Ok(ArmResult {
            rows: self.rows(method.name(), &samples, Some(baseline))?,
            params,
            trace: Some(trace),
        })
    }
}

struct RunOutput {
    cells: Vec<CellRecord>,
    rows: Vec<ResultRow>,
    models: Vec<ArmModel>,
    traces: Vec<TraceRow>,
}

fn run_one(cfg: &ExperimentConfig, world: &Result<World>, seed: u64, group: &ConceptGroup) -> RunOutput {
    let id = run_id(group, seed);
    let methods: Vec<String> = std::iter::once(NONE.to_string())
        .chain(cfg.methods.iter().map(|m| m.name().to_string()))
        .collect();
    let cell = |method: &str, outcome: std::result::Result<usize, String>| CellRecord {
        run_id: id.clone(),
        seed,
        group: group.name.clone(),
        method: method.to_string(),
        status: if outcome.is_ok() {
            CellStatus::Done
        } else {
            CellStatus::Failed
        },
        rows: *outcome.as_ref().unwrap_or(&0),
        error: outcome.err(),
    };
    let mut out = RunOutput {
        cells: Vec::new(),
        rows: Vec::new(),
        models: Vec::new(),
        traces: Vec::new(),
    };
    let world = match world {
        Ok(w) => w,
        Err(e) => {
            let msg = format!("building the seed's world failed: {e}");
            out.cells = methods.iter().map(|m| cell(m, Err(msg.clone()))).collect();
            return out;
        }
    };
    let metrics: Vec<Similarity> = cfg
        .evaluation
        .metrics
        .iter()
        .map(|m| m.build(cfg.arch.data_dim).expect("metrics validated with the config"))
        .collect();
    let ctx = RunContext {
        cfg,
        world,
        group,
        concepts: ExperimentConfig::group_concepts(group),
        metrics: &metrics,
        run_id: id.clone(),
    };

    let baseline = ctx
        .attack_all(world.pretrained.params())
        .and_then(|s| Ok((ctx.rows(NONE, &s, None)?, s)));
    let baseline = match baseline {
        Ok((rows, samples)) => {
            out.cells.push(cell(NONE, Ok(rows.len())));
            out.rows.extend(rows);
            out.models.push(ArmModel {
                run_id: id.clone(),
                seed,
                method: NONE.into(),
                params: world.pretrained.params().clone(),
            });
            samples
        }
        Err(e) => {
            out.cells.push(cell(NONE, Err(e.to_string())));
            let msg = format!("unprotected arm failed: {e}");
            out.cells.extend(cfg.methods.iter().map(|m| cell(m.name(), Err(msg.clone()))));
            return out;
        }
    };

    let arms: Vec<Result<ArmResult>> = cfg.methods.par_iter().map(|&m| ctx.arm(m, &baseline)).collect();
    for (method, result) in cfg.methods.iter().zip(arms) {
        match result {
            Ok(arm) => {
                out.cells.push(cell(method.name(), Ok(arm.rows.len())));
                out.rows.extend(arm.rows);
                if let Some(trace) = arm.trace {
                    out.traces.extend(trace.records.iter().enumerate().map(|(epoch, r)| TraceRow {
                        run_id: id.clone(),
                        method: method.name().into(),
                        epoch,
                        concepts: r.concepts.clone(),
                        upper_objective: r.upper_objective,
                        grad_norm: r.grad_norm,
                    }));
                }
                out.models.push(ArmModel {
                    run_id: id.clone(),
                    seed,
                    method: method.name().into(),
                    params: arm.params,
                });
            }
            Err(e) => out.cells.push(cell(method.name(), Err(e.to_string()))),
        }
    }
    out
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Internal(format!("worker pool: {e}")))
}

/// Runs the whole grid in memory. Results do not depend on the worker count.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridOutput> {
    cfg.validate()?;
    thread_pool(cfg.workers)?.install(|| {
        let worlds: Vec<Result<World>> = cfg.seeds.par_iter().map(|&s| World::build(cfg, s)).collect();
        let runs: Vec<(usize, usize)> = (0..cfg.seeds.len())
            .flat_map(|s| (0..cfg.groups.len()).map(move |g| (s, g)))
            .collect();
        let outputs: Vec<RunOutput> = runs
            .par_iter()
            .map(|&(s, g)| run_one(cfg, &worlds[s], cfg.seeds[s], &cfg.groups[g]))
            .collect();
        let mut grid = GridOutput::default();
        for o in outputs {
            grid.cells.extend(o.cells);
            grid.rows.extend(o.rows);
            grid.models.extend(o.models);
            grid.traces.extend(o.traces);
        }
        grid.pretrained = cfg
            .seeds
            .iter()
            .zip(worlds)
            .map(|(&s, w)| (s, w.ok().map(|w| w.pretrained)))
            .collect();
        Ok(grid)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub name: String,
    pub config_sha256: String,
    pub mima_version: String,
    pub seeds: Vec<u64>,
    pub groups: Vec<String>,
    pub methods: Vec<String>,
    pub attacks: Vec<String>,
    pub metrics: Vec<String>,
    pub checkpoints: Vec<usize>,
    pub done: usize,
    pub failed: usize,
    pub cells: Vec<CellRecord>,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub cells: usize,
    pub failed: usize,
    pub rows: usize,
}

impl RunReport {
    /// 0 when every cell completed, 2 when some failed.
    pub fn exit_code(&self) -> u8 {
        if self.failed == 0 {
            0
        } else {
            2
        }
    }
}

/// `output_dir` resolved against `root` when relative.
pub fn resolve_output_dir(cfg: &ExperimentConfig, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if cfg.output_dir.is_relative() => r.join(&cfg.output_dir),
        _ => cfg.output_dir.clone(),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_traces(traces: &[TraceRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(std::io::BufWriter::new(file));
    let err = |e: csv::Error| CliError::Csv(e.to_string());
    w.write_record(["run_id", "method", "epoch", "concepts", "upper_objective", "grad_norm"])
        .map_err(err)?;
    for t in traces {
        let concepts: Vec<String> = t.concepts.iter().map(|c| c.to_string()).collect();
        w.write_record([
            t.run_id.clone(),
            t.method.clone(),
            t.epoch.to_string(),
            concepts.join(";"),
            results::format_value(t.upper_objective),
            results::format_value(t.grad_norm),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Runs the grid and writes `results.csv`, `traces.csv`, the summaries, the
/// manifest, the canonical config and one checkpoint per arm.
pub fn run_experiment(cfg: &ExperimentConfig, output_root: Option<&Path>) -> Result<RunReport> {
    cfg.validate()?;
    let dir = resolve_output_dir(cfg, output_root);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let grid = run_grid(cfg)?;
    let mut files = vec!["config.toml".to_string()];
    write_file(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;

    let results_path = dir.join("results.csv");
    if grid.rows.is_empty() {
        let file = std::fs::File::create(&results_path).map_err(|e| CliError::io(&results_path, e))?;
        results::write_rows(&[], file)?;
    } else {
        results::emit_results(&grid.rows, &results_path)?;
    }
    files.push("results.csv".into());
    write_traces(&grid.traces, &dir.join("traces.csv"))?;
    files.push("traces.csv".into());

    let summary = Summary::from_rows(&grid.rows);
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&dir.join("summary.json"), format!("{json}\n").as_bytes())?;
    write_file(&dir.join("summary.md"), summary.to_markdown().as_bytes())?;
    files.push("summary.json".into());
    files.push("summary.md".into());

    let mut ckpt_names = Vec::new();
    for m in &grid.models {
        let base = grid
            .pretrained
            .iter()
            .find_map(|(s, p)| (*s == m.seed).then_some(p.as_ref()).flatten())
            .expect("arm models exist only for built worlds");
        let sub = dir.join("checkpoints").join(&m.run_id);
        std::fs::create_dir_all(&sub).map_err(|e| CliError::io(&sub, e))?;
        let path = sub.join(format!("{}.ckpt", m.method));
        checkpoint::save(&base.with_params(m.params.clone())?, &path)?;
        ckpt_names.push(format!("checkpoints/{}/{}.ckpt", m.run_id, m.method));
    }
    files.extend(ckpt_names);

    let failed = grid.failed();
    let manifest = Manifest {
        schema_version: cfg.schema_version,
        name: cfg.name.clone(),
        config_sha256: cfg.hash()?,
        mima_version: env!("CARGO_PKG_VERSION").into(),
        seeds: cfg.seeds.clone(),
        groups: cfg.groups.iter().map(|g| g.name.clone()).collect(),
        methods: std::iter::once(NONE.to_string())
            .chain(cfg.methods.iter().map(|m| m.name().to_string()))
            .collect(),
        attacks: cfg.attacks.iter().map(|a| a.kind.name().to_string()).collect(),
        metrics: cfg.evaluation.metrics.iter().map(|m| m.kind.name().to_string()).collect(),
        checkpoints: cfg.evaluation.checkpoints.clone(),
        done: grid.cells.len() - failed,
        failed,
        cells: grid.cells.clone(),
        files,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&dir.join("manifest.json"), format!("{json}\n").as_bytes())?;

    Ok(RunReport {
        output_dir: dir,
        cells: grid.cells.len(),
        failed,
        rows: grid.rows.len(),
    })
}
