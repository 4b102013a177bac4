//! Experiment front end. Each subcommand writes a `report.json`, CSV logs and SVG
//! plots under the configured output directory.

mod config;
pub mod report;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::data::{gen_dataset, Dataset};
use crate::diag::{attention_profiles, collapse_experiment, l2_distance_report};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::models::{build_model, Model};
use crate::nn::{TransformKind, TransformModule};
use crate::train::{eval_metrics, load_checkpoint, pretrain, save_checkpoint, train_run, Distiller, ExperimentReport};

pub use config::{RunConfig, TeacherBudget};
use report::{epoch_csv, line_chart, num, opt_num, table_csv, write, Series};

#[derive(Debug, Parser)]
#[command(
    name = "featkd",
    version,
    about = "Feature distillation experiments on synthetic shape tasks"
)]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set distill.alpha=1e-4`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Shorthand for `--set output=DIR`.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain (or load) the teacher, then train baseline and distilled students.
    Train,
    /// Baseline plus one distilled arm per transform kind, with feature distances.
    Ablate,
    /// One distilled run per loss weight.
    SweepAlpha {
        /// Comma-separated weights; overrides `sweep.alphas`.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
    /// Student-only vs both-sides transforms.
    Collapse,
    /// Feature distances before/after the transform for identity, linear and MLP arms.
    DiagL2,
    /// Print the resolved configuration and exit.
    Config,
}

impl Cli {
    pub fn resolve(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut overrides = Vec::new();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        overrides.extend(self.overrides.iter().cloned());
        if let Some(o) = &self.output {
            overrides.push(format!("output={}", o.display()));
        }
        if let Command::SweepAlpha { alphas: Some(a) } = &self.command {
            let list: Vec<String> = a.iter().map(|x| num(*x)).collect();
            overrides.push(format!("sweep.alphas={}", list.join(",")));
        }
        RunConfig::parse(&text, &overrides)
    }
}

/// Process exit status for an error: 2 for configuration problems, 3 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 3,
    }
}

/// Runs a parsed command line and returns the JSON report that was written.
pub fn run(cli: &Cli) -> Result<Value> {
    let cfg = cli.resolve()?;
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Ablate => cmd_ablate(&cfg),
        Command::SweepAlpha { .. } => cmd_sweep_alpha(&cfg),
        Command::Collapse => cmd_collapse(&cfg),
        Command::DiagL2 => cmd_diag_l2(&cfg),
        Command::Config => {
            print!("{}", cfg.to_text());
            Ok(json!({ "command": "config", "config": cfg }))
        }
    }
}

/// Datasets plus a frozen teacher shared by every arm of a command.
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub teacher: Model,
    pub teacher_metric: f64,
}

fn teacher_cache_key(cfg: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&cfg.teacher).unwrap_or_default());
    h.update(serde_json::to_string(&cfg.teacher_data()).unwrap_or_default());
    h.update(serde_json::to_string(&cfg.teacher_train()).unwrap_or_default());
    h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
}

pub fn teacher_cache_path(cfg: &RunConfig) -> PathBuf {
    cfg.output
        .join("teachers")
        .join(format!("{}.sdkm", teacher_cache_key(cfg)))
}

/// Generates data and loads the cached teacher, pretraining it on first use.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (train, val) = gen_dataset(&cfg.data)?;
    let path = teacher_cache_path(cfg);
    let teacher = match File::open(&path) {
        Ok(f) => {
            let t = load_checkpoint(BufReader::new(f))?;
            if t.spec != cfg.teacher {
                return Err(Error::Format(format!(
                    "cached teacher {} has a different spec",
                    path.display()
                )));
            }
            t
        }
        Err(_) => {
            let (teacher_train, _) = gen_dataset(&cfg.teacher_data())?;
            let (t, _) = pretrain(&cfg.teacher, &teacher_train, &val, &cfg.teacher_train())?;
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let tmp = path.with_extension("tmp");
            save_checkpoint(BufWriter::new(File::create(&tmp)?), &t)?;
            std::fs::rename(&tmp, &path)?;
            t
        }
    };
    let teacher_metric = eval_metrics(&teacher, &val)?;
    Ok(Prepared {
        train,
        val,
        teacher,
        teacher_metric,
    })
}

pub fn run_baseline(cfg: &RunConfig, p: &Prepared) -> Result<(Model, ExperimentReport)> {
    let mut student = build_model(&cfg.student)?;
    let report = train_run(&mut student, None, &p.train, &p.val, &cfg.train)?;
    Ok((student, report))
}

pub fn run_distilled(
    cfg: &RunConfig,
    p: &Prepared,
    dc: &DistillConfig,
) -> Result<(Model, Distiller, ExperimentReport)> {
    let mut student = build_model(&cfg.student)?;
    let mut d = Distiller::new(p.teacher.clone(), &cfg.student, dc, cfg.train.seed)?;
    let report = train_run(
        &mut student,
        Some(&mut d),
        &p.train,
        &p.val,
        &cfg.distill_train(dc.clone()),
    )?;
    Ok((student, d, report))
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output.join(name)
}

fn write_report(cfg: &RunConfig, mut value: Value) -> Result<Value> {
    value["config"] = serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?;
    let text = serde_json::to_string_pretty(&value).map_err(|e| Error::Format(e.to_string()))?;
    write(&out(cfg, "report.json"), &(text + "\n"))?;
    write(&out(cfg, "config.txt"), &cfg.to_text())?;
    Ok(value)
}

fn curve(r: &ExperimentReport, f: impl Fn(&crate::train::EpochRecord) -> f64) -> Vec<(f64, f64)> {
    r.records.iter().map(|e| (e.epoch as f64, f(e))).collect()
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Value> {
    let p = prepare(cfg)?;
    let (_, base) = run_baseline(cfg, &p)?;
    let (_, _, dist) = run_distilled(cfg, &p, &cfg.distill)?;
    write(&out(cfg, "baseline.csv"), &epoch_csv(&base.records, &[]))?;
    write(&out(cfg, "distilled.csv"), &epoch_csv(&dist.records, &[]))?;
    let svg = line_chart(
        "validation metric",
        "epoch",
        "metric",
        &[
            Series {
                name: "baseline",
                points: curve(&base, |e| e.val_metric),
            },
            Series {
                name: "distilled",
                points: curve(&dist, |e| e.val_metric),
            },
        ],
    );
    write(&out(cfg, "train.svg"), &svg)?;
    write_timing(cfg, &[("baseline", &base), ("distilled", &dist)])?;
    write_report(
        cfg,
        json!({
            "command": "train",
            "teacher_metric": p.teacher_metric,
            "baseline_metric": base.final_metric,
            "distilled_metric": dist.final_metric,
        }),
    )
}

/// Wall-clock times go to their own file so reports stay byte-identical across reruns.
fn write_timing(cfg: &RunConfig, runs: &[(&str, &ExperimentReport)]) -> Result<()> {
    let text: String = runs
        .iter()
        .map(|(name, r)| format!("{name} {:.3}s\n", r.wall_time_secs))
        .collect();
    write(&out(cfg, "timing.txt"), &text)
}

fn transform_applicable(kind: TransformKind, cfg: &RunConfig) -> bool {
    let equal = cfg.student.tap_channels() == cfg.teacher.tap_channels();
    equal || !matches!(kind, TransformKind::Identity | TransformKind::NonLocal)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<Value> {
    let p = prepare(cfg)?;
    let (base_model, base) = run_baseline(cfg, &p)?;
    let c = cfg.student.tap_channels();
    let base_before = if c == cfg.teacher.tap_channels() {
        let id = TransformModule::new(TransformKind::Identity, c, c, None, 0)?;
        l2_distance_report(&p.teacher, &base_model, &id, &p.val)?.before
    } else {
        None
    };
    let mut rows = vec![vec![
        "baseline".to_string(),
        num(base.final_metric),
        opt_num(base_before),
        String::new(),
    ]];
    let mut arms =
        vec![json!({ "arm": "baseline", "metric": base.final_metric, "before": base_before, "after": null })];
    let mut timing = vec![("baseline".to_string(), base.clone())];
    write(&out(cfg, "arm_baseline.csv"), &epoch_csv(&base.records, &[]))?;
    let mut series = vec![Series {
        name: "baseline",
        points: curve(&base, |e| e.val_metric),
    }];
    let mut reports = Vec::new();
    for &kind in &cfg.ablate_arms {
        if !transform_applicable(kind, cfg) {
            eprintln!("warning: skipping {kind} arm: student and teacher tap channels differ");
            rows.push(vec![kind.to_string(), String::new(), String::new(), String::new()]);
            arms.push(json!({ "arm": kind.name(), "skipped": true }));
            continue;
        }
        let dc = DistillConfig {
            transform: kind,
            ..cfg.distill.clone()
        };
        let (student, d, r) = run_distilled(cfg, &p, &dc)?;
        let dist = l2_distance_report(&p.teacher, &student, &d.transforms[0], &p.val)?;
        write(&out(cfg, &format!("arm_{kind}.csv")), &epoch_csv(&r.records, &[]))?;
        rows.push(vec![
            kind.to_string(),
            num(r.final_metric),
            opt_num(dist.before),
            num(dist.after),
        ]);
        arms.push(json!({ "arm": kind.name(), "metric": r.final_metric, "before": dist.before, "after": dist.after }));
        timing.push((kind.to_string(), r.clone()));
        reports.push((kind, r));
    }
    for (kind, r) in &reports {
        series.push(Series {
            name: kind.name(),
            points: curve(r, |e| e.val_metric),
        });
    }
    write(
        &out(cfg, "ablation.csv"),
        &table_csv(&["arm", "val_metric", "before", "after"], &rows),
    )?;
    write(
        &out(cfg, "ablation.svg"),
        &line_chart("validation metric per arm", "epoch", "metric", &series),
    )?;
    let timing_refs: Vec<(&str, &ExperimentReport)> = timing.iter().map(|(n, r)| (n.as_str(), r)).collect();
    write_timing(cfg, &timing_refs)?;
    write_report(
        cfg,
        json!({ "command": "ablate", "teacher_metric": p.teacher_metric, "baseline_metric": base.final_metric, "arms": arms }),
    )
}

pub fn cmd_sweep_alpha(cfg: &RunConfig) -> Result<Value> {
    if cfg.sweep_alphas.is_empty() {
        return Err(Error::Config(
            "sweep-alpha requires a non-empty sweep.alphas (or --alphas)".into(),
        ));
    }
    let p = prepare(cfg)?;
    let (_, base) = run_baseline(cfg, &p)?;
    let mut rows = Vec::new();
    let mut points = Vec::new();
    let mut timing = vec![("baseline".to_string(), base.clone())];
    for (i, &alpha) in cfg.sweep_alphas.iter().enumerate() {
        let dc = DistillConfig {
            alpha,
            ..cfg.distill.clone()
        };
        let (_, _, r) = run_distilled(cfg, &p, &dc)?;
        write(&out(cfg, &format!("alpha_{i}.csv")), &epoch_csv(&r.records, &[]))?;
        rows.push(vec![num(alpha), num(r.final_metric), num(base.final_metric)]);
        points.push(json!({ "alpha": alpha, "metric": r.final_metric }));
        timing.push((format!("alpha={alpha:?}"), r));
    }
    let log_x = cfg.sweep_alphas.iter().all(|&a| a > 0.0);
    let x = |a: f64| if log_x { a.log10() } else { a };
    let dist: Vec<(f64, f64)> = cfg
        .sweep_alphas
        .iter()
        .zip(&points)
        .map(|(&a, pt)| (x(a), pt["metric"].as_f64().unwrap_or(f64::NAN)))
        .collect();
    let flat: Vec<(f64, f64)> = dist.iter().map(|&(a, _)| (a, base.final_metric)).collect();
    let svg = line_chart(
        "final metric vs alpha",
        if log_x { "log10(alpha)" } else { "alpha" },
        "metric",
        &[
            Series {
                name: "distilled",
                points: dist,
            },
            Series {
                name: "baseline",
                points: flat,
            },
        ],
    );
    write(
        &out(cfg, "sweep.csv"),
        &table_csv(&["alpha", "val_metric", "baseline_metric"], &rows),
    )?;
    write(&out(cfg, "sweep.svg"), &svg)?;
    let timing_refs: Vec<(&str, &ExperimentReport)> = timing.iter().map(|(n, r)| (n.as_str(), r)).collect();
    write_timing(cfg, &timing_refs)?;
    write_report(
        cfg,
        json!({ "command": "sweep-alpha", "teacher_metric": p.teacher_metric, "baseline_metric": base.final_metric, "points": points }),
    )
}

pub fn cmd_collapse(cfg: &RunConfig) -> Result<Value> {
    let p = prepare(cfg)?;
    let c = collapse_experiment(
        &p.teacher,
        &cfg.student,
        &p.train,
        &p.val,
        &cfg.distill_train(cfg.distill.clone()),
    )?;
    let (so, bs) = c.feat_curves();
    let rows: Vec<Vec<String>> = (0..so.len())
        .map(|e| vec![e.to_string(), num(so[e]), num(bs[e])])
        .collect();
    write(
        &out(cfg, "collapse.csv"),
        &table_csv(&["epoch", "feat_loss_student_only", "feat_loss_both_sides"], &rows),
    )?;
    write(&out(cfg, "student_only.csv"), &epoch_csv(&c.student_only.records, &[]))?;
    write(&out(cfg, "both_sides.csv"), &epoch_csv(&c.both_sides.records, &[]))?;
    let pts = |v: &[f64]| v.iter().enumerate().map(|(e, &y)| (e as f64, y)).collect();
    let svg = line_chart(
        "feature loss",
        "epoch",
        "feat_loss",
        &[
            Series {
                name: "student only",
                points: pts(&so),
            },
            Series {
                name: "both sides",
                points: pts(&bs),
            },
        ],
    );
    write(&out(cfg, "collapse.svg"), &svg)?;
    write_timing(cfg, &[("student_only", &c.student_only), ("both_sides", &c.both_sides)])?;
    write_report(
        cfg,
        json!({
            "command": "collapse",
            "teacher_metric": p.teacher_metric,
            "student_only": { "final_feat_loss": so.last(), "final_metric": c.student_only.final_metric },
            "both_sides": { "final_feat_loss": bs.last(), "final_metric": c.both_sides.final_metric },
        }),
    )
}

pub fn cmd_diag_l2(cfg: &RunConfig) -> Result<Value> {
    let p = prepare(cfg)?;
    let mut rows = Vec::new();
    let mut arms = Vec::new();
    let mut timing = Vec::new();
    for kind in [TransformKind::Identity, TransformKind::Linear, TransformKind::Mlp] {
        if !transform_applicable(kind, cfg) {
            eprintln!("warning: skipping {kind} arm: student and teacher tap channels differ");
            continue;
        }
        let dc = DistillConfig {
            transform: kind,
            ..cfg.distill.clone()
        };
        let (student, d, r) = run_distilled(cfg, &p, &dc)?;
        let dist = l2_distance_report(&p.teacher, &student, &d.transforms[0], &p.val)?;
        rows.push(vec![
            kind.to_string(),
            num(r.final_metric),
            opt_num(dist.before),
            num(dist.after),
        ]);
        arms.push(
            json!({ "transform": kind.name(), "metric": r.final_metric, "before": dist.before, "after": dist.after }),
        );
        if kind == TransformKind::Mlp {
            let prof = attention_profiles(
                &p.teacher,
                &student,
                &d.transforms[0],
                &p.val,
                cfg.attention_temperature,
            )?;
            let n = prof.teacher.len().max(prof.student.len());
            let cell = |v: &[f64], c: usize| v.get(c).map(|x| num(*x)).unwrap_or_default();
            let prof_rows: Vec<Vec<String>> = (0..n)
                .map(|c| {
                    vec![
                        c.to_string(),
                        cell(&prof.teacher, c),
                        cell(&prof.student, c),
                        cell(&prof.transformed, c),
                    ]
                })
                .collect();
            write(
                &out(cfg, "attention.csv"),
                &table_csv(&["channel", "teacher", "student", "transformed"], &prof_rows),
            )?;
        }
        timing.push((kind.to_string(), r));
    }
    write(
        &out(cfg, "distances.csv"),
        &table_csv(&["transform", "val_metric", "before", "after"], &rows),
    )?;
    let timing_refs: Vec<(&str, &ExperimentReport)> = timing.iter().map(|(n, r)| (n.as_str(), r)).collect();
    write_timing(cfg, &timing_refs)?;
    write_report(
        cfg,
        json!({ "command": "diag-l2", "teacher_metric": p.teacher_metric, "arms": arms }),
    )
}

/// Loads the resolved config echoed by a previous run.
pub fn load_echoed_config(dir: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(dir.join("config.txt"))?;
    RunConfig::parse(&text, &[])
}
