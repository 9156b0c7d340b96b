use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use knn_attn::attention::{dense_attention, knn_attention_fast, knn_attention_slow, SelectionMetric};
use knn_attn::diagnostics::diagnose;
use knn_attn::lemmas::{lemma1_experiment, lemma2_experiment, run_lemma3, Lemma1Config, Lemma2Config, Lemma3Config, LemmaResult};
use knn_attn::verify::{run_verify, VerifyConfig};
use knn_attn::vit::{
    capture_trace, epochs_to_target, evaluate, metrics_csv, prepare, synthetic_data, AttentionKind, Checkpoint, Model,
    ModelConfig, MetricsRow, TrainConfig, Trainer,
};
use knn_attn::{Exec, RngStream};

use crate::config::{load_config, now_ms, snapshot, RunManifest};
use crate::{Cli, CliError, Command, Split};

/// Model and optimisation settings for `train`, `eval` and `diagnose`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRun {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSize {
    pub n: usize,
    pub d: usize,
    pub k: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub sizes: Vec<BenchSize>,
    pub reps: usize,
    /// Requires `median(fast) <= bound * median(slow)` at every size.
    pub bound: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let s = |n, d, k| BenchSize { n, d, k };
        Self {
            sizes: vec![s(49, 64, 25), s(98, 64, 25), s(196, 64, 25), s(196, 64, 100)],
            reps: 5,
            bound: 1.0,
            seed: 0,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Invalid(format!("{}: {e}", path.display()))
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(&path, contents).map_err(|e| io_err(&path, e))
}

struct Run<'a> {
    cli: &'a Cli,
    exec: Exec,
}

impl Run<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.cli.out.join(name)
    }

    /// Writes the manifest, runs `body`, then records the finish time and
    /// exit code.
    fn with_manifest(
        &self,
        subcommand: &str,
        config_path: Option<&Path>,
        config: serde_json::Value,
        seed: Option<u64>,
        body: impl FnOnce() -> Result<(), CliError>,
    ) -> Result<(), CliError> {
        let mut m = RunManifest {
            subcommand: subcommand.into(),
            config_path: config_path.map(Path::to_path_buf),
            config,
            seed,
            threads: self.cli.threads,
            out_dir: self.cli.out.clone(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
            exit_code: None,
        };
        m.write()?;
        let result = body();
        m.finished_unix_ms = Some(now_ms());
        m.exit_code = Some(match &result {
            Ok(()) => 0,
            Err(e) => i32::from(e.code()),
        });
        m.write()?;
        result
    }

    fn print(&self, text: &str, value: serde_json::Value) {
        if self.cli.json {
            println!("{}", serde_json::to_string_pretty(&value).expect("json"));
        } else {
            print!("{text}");
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    fs::create_dir_all(&cli.out).map_err(|e| io_err(&cli.out, e))?;
    let r = Run {
        cli,
        exec: Exec::for_threads(cli.threads),
    };
    match &cli.command {
        Command::Verify { config, tolerance } => verify(&r, config.as_deref(), *tolerance),
        Command::Lemma { which, config } => lemma(&r, *which, config.as_deref()),
        Command::Train {
            config,
            compare,
            resume,
            epochs,
        } => train(&r, config.as_deref(), compare.as_deref(), resume.as_deref(), *epochs),
        Command::Eval { checkpoint, config, split } => eval(&r, checkpoint, config.as_deref(), *split),
        Command::Diagnose {
            checkpoint,
            config,
            split,
            index,
        } => diagnose_cmd(&r, checkpoint, config.as_deref(), *split, *index),
        Command::Bench { config, reps } => bench(&r, config.as_deref(), *reps),
    }
}

fn verify(r: &Run, path: Option<&Path>, tolerance: Option<f64>) -> Result<(), CliError> {
    let mut cfg: VerifyConfig = load_config(path, "verify", "verify")?;
    if let Some(s) = r.cli.seed {
        cfg.seed = s;
    }
    if tolerance.is_some() {
        cfg.tolerance = tolerance;
    }
    r.with_manifest("verify", path, snapshot(&cfg, "verify"), Some(cfg.seed), || {
        let report = run_verify(&cfg)?;
        let json = serde_json::to_value(&report).expect("json");
        write(r.out("verify.json"), serde_json::to_string_pretty(&json).expect("json"))?;
        r.print(&report.to_table(), json);
        if report.all_passed() {
            Ok(())
        } else {
            Err(CliError::Check(format!("failing checks: {}", report.failing().join(", "))))
        }
    })
}

fn lemma(r: &Run, which: u8, path: Option<&Path>) -> Result<(), CliError> {
    let sub = format!("lemma{which}");
    type Runner<'a> = Box<dyn FnOnce() -> knn_attn::Result<LemmaResult> + 'a>;
    let exec = r.exec;
    let seeded = |seed: &mut u64| {
        if let Some(s) = r.cli.seed {
            *seed = s;
        }
    };
    let (snap, seed, runner): (_, u64, Runner) = match which {
        1 => {
            let mut cfg: Lemma1Config = load_config(path, &sub, &sub)?;
            seeded(&mut cfg.seed);
            (snapshot(&cfg, &sub), cfg.seed, Box::new(move || lemma1_experiment(&cfg, exec)))
        }
        2 => {
            let mut cfg: Lemma2Config = load_config(path, &sub, &sub)?;
            seeded(&mut cfg.seed);
            (snapshot(&cfg, &sub), cfg.seed, Box::new(move || lemma2_experiment(&cfg, exec)))
        }
        _ => {
            let mut cfg: Lemma3Config = load_config(path, &sub, &sub)?;
            seeded(&mut cfg.seed);
            (snapshot(&cfg, &sub), cfg.seed, Box::new(move || run_lemma3(&cfg, exec).map(|o| o.0)))
        }
    };
    r.with_manifest(&sub, path, snap, Some(seed), || {
        let result = runner()?;
        for t in &result.tables {
            write(r.out(&format!("{}.csv", t.name)), t.to_csv())?;
        }
        let json = serde_json::to_value(&result).expect("json");
        write(r.out(&format!("{sub}.json")), serde_json::to_string_pretty(&json).expect("json"))?;
        let mut text = String::new();
        for line in &result.summary {
            text.push_str(line);
            text.push('\n');
        }
        let verdict = match (result.pass, result.vacuous) {
            (true, true) => "PASS (vacuous)",
            (true, false) => "PASS",
            _ => "FAIL",
        };
        text.push_str(&format!("lemma {which}: {verdict}\n"));
        r.print(&text, json);
        if result.pass {
            Ok(())
        } else {
            Err(CliError::Check(format!("lemma {which} criterion not met")))
        }
    })
}

fn parse_arm(name: &str) -> Result<AttentionKind, CliError> {
    match name.trim() {
        "dense" => Ok(AttentionKind::Dense),
        "knn" => Ok(AttentionKind::Knn),
        other => Err(CliError::Invalid(format!("unknown arm `{other}` (expected dense or knn)"))),
    }
}

fn format_epochs(e: Option<usize>) -> String {
    e.map_or(String::new(), |e| e.to_string())
}

fn train(
    r: &Run,
    path: Option<&Path>,
    compare: Option<&[String]>,
    resume: Option<&Path>,
    epochs: Option<usize>,
) -> Result<(), CliError> {
    let ckpt = resume
        .map(|p| Checkpoint::load(p).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display()))))
        .transpose()?;
    let mut run: TrainRun = match (&ckpt, path) {
        (Some(c), None) => TrainRun {
            model: c.model.config.clone(),
            train: c
                .train
                .clone()
                .ok_or_else(|| CliError::Invalid("checkpoint carries no train config; pass --config".into()))?,
        },
        (Some(c), Some(_)) => TrainRun {
            model: c.model.config.clone(),
            ..load_config(path, "train", "train")?
        },
        (None, _) => load_config(path, "train", "train")?,
    };
    if let Some(s) = r.cli.seed {
        run.train.seed = s;
    }
    if let Some(e) = epochs {
        run.train.epochs = e;
    }
    run.model.validate()?;
    run.train.validate()?;
    run.train.check_model(&run.model)?;
    if resume.is_some() && compare.is_some() {
        return Err(CliError::Invalid("--resume and --compare cannot be combined".into()));
    }
    let arms: Vec<(String, AttentionKind)> = match compare {
        Some(list) => list
            .iter()
            .map(|a| parse_arm(a).map(|k| (a.trim().to_string(), k)))
            .collect::<Result<_, _>>()?,
        None => vec![(String::new(), run.model.kind)],
    };
    r.with_manifest("train", path, snapshot(&run, "train"), Some(run.train.seed), || {
        let data = synthetic_data(&run.train)?;
        let mut summaries = Vec::new();
        for (name, kind) in &arms {
            let trainer = match &ckpt {
                Some(c) => {
                    let adam = c
                        .adam
                        .clone()
                        .ok_or_else(|| CliError::Invalid("checkpoint carries no optimizer state".into()))?;
                    Trainer::resume(c.model.clone(), adam, c.epoch, run.train.clone())?
                }
                None => {
                    let (init, _) = prepare(&run.model, &run.train)?;
                    let model = Model {
                        config: run.model.with_kind(*kind, run.model.k),
                        params: init.params,
                    };
                    model.config.validate()?;
                    Trainer::new(model, run.train.clone())?
                }
            };
            let mut trainer = trainer;
            let rows = trainer.run_until(&data, run.train.epochs, r.exec)?;
            let suffix = if name.is_empty() { String::new() } else { format!("_{name}") };
            write(r.out(&format!("metrics{suffix}.csv")), metrics_csv(&rows))?;
            let ck = Checkpoint {
                model: trainer.model,
                train: Some(run.train.clone()),
                epoch: trainer.epoch,
                adam: Some(trainer.adam),
            };
            ck.save(&r.out(&format!("checkpoint{suffix}.ckpt")))?;
            summaries.push((name.clone(), rows));
        }
        let mut text = String::new();
        let mut arms_json = Vec::new();
        for (name, rows) in &summaries {
            let last: Option<&MetricsRow> = rows.last();
            let to_target = epochs_to_target(rows, run.train.target_acc);
            let label = if name.is_empty() { "run" } else { name };
            if let Some(l) = last {
                text.push_str(&format!(
                    "{label}: epoch {} train_loss {:.4} train_acc {:.4} eval_acc {:.4} epochs_to_target {}\n",
                    l.epoch,
                    l.train_loss,
                    l.train_acc,
                    l.eval_acc,
                    to_target.map_or("never".into(), |e| e.to_string())
                ));
            }
            arms_json.push(json!({"arm": label, "epochs_to_target": to_target, "final": last}));
        }
        if compare.is_some() {
            let mut header = String::from("seed,target_acc");
            let mut row = format!("{},{}", run.train.seed, run.train.target_acc);
            for (name, rows) in &summaries {
                header.push_str(&format!(",{name}_epochs_to_target"));
                row.push_str(&format!(",{}", format_epochs(epochs_to_target(rows, run.train.target_acc))));
            }
            write(r.out("summary.csv"), format!("{header}\n{row}\n"))?;
        }
        r.print(&text, json!({ "arms": arms_json }));
        Ok(())
    })
}

fn load_for_eval(r: &Run, ckpt_path: &Path, path: Option<&Path>, sub: &str) -> Result<(Checkpoint, TrainConfig), CliError> {
    let ckpt = Checkpoint::load(ckpt_path).map_err(|e| CliError::Invalid(format!("{}: {e}", ckpt_path.display())))?;
    let mut train = match path {
        Some(_) => load_config::<TrainRun>(path, "train", sub)?.train,
        None => ckpt
            .train
            .clone()
            .ok_or_else(|| CliError::Invalid("checkpoint carries no dataset spec; pass --config".into()))?,
    };
    if let Some(s) = r.cli.seed {
        train.seed = s;
    }
    train.check_model(&ckpt.model.config)?;
    Ok((ckpt, train))
}

fn eval(r: &Run, ckpt_path: &Path, path: Option<&Path>, split: Split) -> Result<(), CliError> {
    let (ckpt, train) = load_for_eval(r, ckpt_path, path, "eval")?;
    let snap = snapshot(&TrainRun { model: ckpt.model.config.clone(), train: train.clone() }, "train");
    r.with_manifest("eval", path, snap, Some(train.seed), || {
        let data = synthetic_data(&train)?;
        let set = if split == Split::Train { &data.train } else { &data.eval };
        let e = evaluate(&ckpt.model, set, r.exec)?;
        let json = json!({"split": format!("{split:?}").to_lowercase(), "images": set.len(), "accuracy": e.accuracy, "confusion": e.confusion});
        write(r.out("eval.json"), serde_json::to_string_pretty(&json).expect("json"))?;
        r.print(&format!("accuracy {}\n", e.accuracy), json);
        Ok(())
    })
}

fn diagnose_cmd(r: &Run, ckpt_path: &Path, path: Option<&Path>, split: Split, index: usize) -> Result<(), CliError> {
    let (ckpt, train) = load_for_eval(r, ckpt_path, path, "diagnose")?;
    let snap = snapshot(&TrainRun { model: ckpt.model.config.clone(), train: train.clone() }, "train");
    r.with_manifest("diagnose", path, snap, Some(train.seed), || {
        let data = synthetic_data(&train)?;
        let set = if split == Split::Train { &data.train } else { &data.eval };
        if index >= set.len() {
            return Err(CliError::Invalid(format!("image index {index} out of range ({} images)", set.len())));
        }
        let trace = capture_trace(&ckpt.model, &set.images[index..])?;
        let report = diagnose(&trace)?;
        let csv = report.to_csv();
        write(r.out("diagnostics.csv"), &csv)?;
        write(r.out("diagnostics.json"), report.to_json())?;
        r.print(&csv, serde_json::to_value(&report).expect("json"));
        Ok(())
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn bench(r: &Run, path: Option<&Path>, reps: Option<usize>) -> Result<(), CliError> {
    let mut cfg: BenchConfig = load_config(path, "bench", "bench")?;
    if let Some(s) = r.cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = reps {
        cfg.reps = n;
    }
    if cfg.reps == 0 || cfg.sizes.is_empty() || cfg.bound.is_nan() || cfg.bound <= 0.0 {
        return Err(CliError::Invalid("bench needs reps >= 1, at least one size and bound > 0".into()));
    }
    for s in &cfg.sizes {
        if s.n == 0 || s.d == 0 || s.k == 0 || s.k > s.n {
            return Err(CliError::Invalid(format!("bad bench size n={} d={} k={}", s.n, s.d, s.k)));
        }
    }
    r.with_manifest("bench", path, snapshot(&cfg, "bench"), Some(cfg.seed), || {
        let mut csv = String::from("n,d,k,kernel,median_ms,reps\n");
        let mut failures = Vec::new();
        let mut rows = Vec::new();
        for s in &cfg.sizes {
            let mut rng = RngStream::new(cfg.seed).fork((s.n * 1_000_003 + s.d * 1009 + s.k) as u64);
            let q = rng.normal_matrix(s.n, s.d, 1.0);
            let k = rng.normal_matrix(s.n, s.d, 1.0);
            let v = rng.normal_matrix(s.n, s.d, 1.0);
            let time = |f: &dyn Fn()| -> f64 {
                median(
                    (0..cfg.reps)
                        .map(|_| {
                            let t = Instant::now();
                            f();
                            t.elapsed().as_secs_f64() * 1e3
                        })
                        .collect(),
                )
            };
            let dense = time(&|| {
                dense_attention(&q, &k, &v, 1.0).expect("dense");
            });
            let fast = time(&|| {
                knn_attention_fast(&q, &k, &v, s.k, 1.0).expect("fast");
            });
            let slow = time(&|| {
                knn_attention_slow(&q, &k, &v, s.k, SelectionMetric::Euclidean, 1.0).expect("slow");
            });
            for (name, ms) in [("dense", dense), ("knn_fast", fast), ("knn_slow", slow)] {
                csv.push_str(&format!("{},{},{},{name},{ms:.6},{}\n", s.n, s.d, s.k, cfg.reps));
                rows.push(json!({"n": s.n, "d": s.d, "k": s.k, "kernel": name, "median_ms": ms, "reps": cfg.reps}));
            }
            if fast > cfg.bound * slow {
                failures.push(format!("n={} d={} k={}: fast {fast:.3} ms > {} x slow {slow:.3} ms", s.n, s.d, s.k, cfg.bound));
            }
        }
        write(r.out("bench.csv"), &csv)?;
        r.print(&csv, json!({ "rows": rows, "bound": cfg.bound, "failures": failures }));
        if failures.is_empty() {
            Ok(())
        } else {
            Err(CliError::Check(failures.join("; ")))
        }
    })
}
