//! Subcommand implementations.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ssdet::data::{read_corpus, split_dataset, Corpus, DatasetSplit};
use ssdet::error::{Error, Result};
use ssdet::trainer::{
    run_training, MapScores, MetricsHeader, RunEvent, TrainerState, METRICS_SCHEMA_VERSION,
};
use ssdet::verify::{run_all, FaultInjection};

use crate::config::ExperimentConfig;
use crate::presets;

fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let corpus = read_corpus(&cfg.corpus_dir).map_err(|e| {
        Error::Data(format!(
            "no corpus at {} (run `ssdet gen-data` first): {e}",
            cfg.corpus_dir.display()
        ))
    })?;
    if corpus.spec != cfg.scene {
        return Err(Error::Config(format!(
            "corpus archive at {} was generated from a different [scene] section",
            cfg.corpus_dir.display()
        )));
    }
    Ok(corpus)
}

fn make_split(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<DatasetSplit> {
    split_dataset(
        corpus.len(),
        cfg.split.labeled_fraction,
        cfg.split.seed,
        cfg.corpus.eval_scenes,
    )
}

fn write_resolved_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let total = cfg.corpus.total_scenes();
    println!(
        "generating {total} scenes ({} train + {} eval) of {}x{} px, {} classes",
        cfg.corpus.train_scenes,
        cfg.corpus.eval_scenes,
        cfg.scene.image_size,
        cfg.scene.image_size,
        cfg.scene.num_classes
    );
    let corpus = Corpus::generate(&cfg.scene, total, cfg.corpus.gen_seed)?;
    ssdet::data::write_corpus(&cfg.corpus_dir, &corpus, force)?;
    write_resolved_config(&cfg.corpus_dir, cfg)?;
    // read-back check
    let back = read_corpus(&cfg.corpus_dir)?;
    if back.len() != total {
        return Err(Error::Data(format!(
            "read-back found {} scenes, expected {total}",
            back.len()
        )));
    }
    let objects: usize = corpus.annotations.iter().map(|g| g.len()).sum();
    println!(
        "wrote {} ({} scenes, {objects} objects, {} image bytes)",
        cfg.corpus_dir.display(),
        corpus.len(),
        total * cfg.scene.image_size * cfg.scene.image_size * 3,
    );
    Ok(())
}

struct MetricsWriter {
    out: BufWriter<fs::File>,
}

impl MetricsWriter {
    /// Append-only; the schema header is written once per file.
    fn open(path: &Path, run_name: &str, seed: u64) -> Result<MetricsWriter> {
        let existed = path.exists();
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = BufWriter::new(file);
        if !existed {
            let header = MetricsHeader {
                schema_version: METRICS_SCHEMA_VERSION,
                run_name: run_name.to_string(),
                seed,
            };
            writeln!(out, "{}", serde_json::to_string(&header)?)?;
        }
        Ok(MetricsWriter { out })
    }

    fn record(&mut self, rec: &ssdet::trainer::MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", serde_json::to_string(rec)?)?;
        // the stream is flushed at every evaluation point
        if rec.teacher_map.is_some() {
            self.out.flush()?;
        }
        Ok(())
    }

    fn diagnostic(&mut self, message: &str) -> Result<()> {
        let line = serde_json::json!({ "diagnostic": message });
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn save_detector(path: &Path, det: &ssdet::detector::DetectorParams) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    det.save(&mut f)?;
    f.flush()?;
    Ok(())
}

fn save_state(path: &Path, state: &TrainerState) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    state.save(&mut f)?;
    f.flush()?;
    Ok(())
}

/// Outcome of one training run, for summaries.
struct RunSummary {
    teacher: Option<MapScores>,
    student: Option<MapScores>,
}

fn train_into_dir(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    split: &DatasetSplit,
    resume: Option<TrainerState>,
) -> Result<RunSummary> {
    let run_dir = cfg.run_dir();
    write_resolved_config(&run_dir, cfg)?;
    let mut metrics = MetricsWriter::open(
        &run_dir.join("metrics.jsonl"),
        &cfg.run_name,
        cfg.train.seed,
    )?;
    let mut last_teacher = None;
    let mut last_student = None;
    let result = run_training(corpus, split, &cfg.train, &cfg.detector, resume, |ev| {
        match ev {
            RunEvent::Record(rec) => {
                if let Some(m) = &rec.teacher_map {
                    last_teacher = Some(*m);
                }
                if let Some(m) = &rec.student_map {
                    last_student = Some(*m);
                }
                metrics.record(rec)?;
            }
            RunEvent::Checkpoint(state) => {
                save_state(&run_dir.join("state_latest.ckpt"), state)?;
            }
        }
        Ok(())
    });
    match result {
        Ok(out) => {
            if let Some(burn) = &out.burn_in_params {
                save_detector(&run_dir.join("burn_in.ckpt"), burn)?;
            }
            save_detector(&run_dir.join("teacher.ckpt"), &out.state.teacher)?;
            save_detector(&run_dir.join("student.ckpt"), &out.state.student)?;
            save_state(&run_dir.join("state_final.ckpt"), &out.state)?;
            metrics.finish()?;
            Ok(RunSummary {
                teacher: last_teacher,
                student: last_student,
            })
        }
        Err(e) => {
            if matches!(e, Error::NonFinite { .. } | Error::NotNormalized { .. }) {
                metrics.diagnostic(&format!("aborted: {e}"))?;
            }
            metrics.finish()?;
            Err(e)
        }
    }
}

pub fn cmd_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let split = make_split(cfg, &corpus)?;
    println!(
        "run {:?}: {} labeled / {} unlabeled / {} eval scenes, seed {}",
        cfg.run_name,
        split.labeled.len(),
        split.unlabeled.len(),
        split.eval.len(),
        cfg.train.seed
    );
    let resume_state = match resume {
        Some(path) => {
            let mut f = fs::File::open(path)
                .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
            let state = TrainerState::load(&mut f)?;
            println!("resuming from {} at iteration {}", path.display(), state.iter);
            Some(state)
        }
        None => None,
    };
    let summary = train_into_dir(cfg, &corpus, &split, resume_state)?;
    if let (Some(t), Some(s)) = (summary.teacher, summary.student) {
        println!(
            "final teacher mAP(50:95) {:.4} AP50 {:.4} | student mAP(50:95) {:.4} AP50 {:.4}",
            t.map_50_95, t.ap50, s.map_50_95, s.ap50
        );
    }
    println!("outputs in {}", cfg.run_dir().display());
    Ok(())
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let split = make_split(cfg, &corpus)?;
    let mut f = fs::File::open(checkpoint)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", checkpoint.display())))?;
    let det = ssdet::detector::DetectorParams::load(&mut f)?;
    if det.cfg.num_classes != corpus.spec.num_classes {
        return Err(Error::ClassCountMismatch {
            checkpoint: det.cfg.num_classes,
            corpus: corpus.spec.num_classes,
        });
    }
    let result = ssdet::trainer::evaluate_detector(&det, &corpus, &split.eval)?;
    println!(
        "{}: AP50 {:.6} mAP(50:95) {:.6} over {} held-out scenes",
        checkpoint.display(),
        result.ap50,
        result.map_50_95,
        split.eval.len()
    );
    let summary = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "eval_scenes": split.eval.len(),
        "ap50": result.ap50,
        "map_50_95": result.map_50_95,
    });
    let out_path = out
        .map(PathBuf::from)
        .unwrap_or_else(|| checkpoint.with_extension("eval.json"));
    fs::write(&out_path, format!("{summary}\n"))?;
    Ok(())
}

struct AblateRow {
    name: String,
    outcome: std::result::Result<RunSummary, Error>,
}

/// Burn-in can be shared across variants when every field it consumes agrees.
fn burn_in_compatible(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    a.train.seed == b.train.seed
        && a.train.burn_in_iters == b.train.burn_in_iters
        && a.train.lr == b.train.lr
        && a.train.momentum == b.train.momentum
        && a.train.batch_labeled == b.train.batch_labeled
        && a.detector == b.detector
        && a.split == b.split
}

pub fn cmd_ablate(base: &ExperimentConfig, preset: &str, parallel: usize) -> Result<()> {
    let variants = presets::expand(preset, base)?;
    let sweep_dir = base.out_dir.join(preset);
    fs::create_dir_all(&sweep_dir)?;
    let corpus = load_corpus(base)?;
    let split = make_split(base, &corpus)?;
    println!(
        "preset {preset:?}: {} variants, {} labeled / {} unlabeled / {} eval scenes",
        variants.len(),
        split.labeled.len(),
        split.unlabeled.len(),
        split.eval.len()
    );

    // one shared burn-in when every variant trains it identically
    let shared_burn_in = if variants
        .iter()
        .all(|v| burn_in_compatible(&v.config, base))
    {
        println!("burn-in ({} iters, shared across variants)", base.train.burn_in_iters);
        let state = ssdet::trainer::burn_in(
            &corpus,
            &split.labeled,
            &base.train,
            &base.detector,
            |_| Ok(()),
        )?;
        save_detector(&sweep_dir.join("burn_in.ckpt"), &state.teacher)?;
        Some(state)
    } else {
        None
    };

    let queue: Mutex<VecDeque<presets::Variant>> = Mutex::new(
        variants
            .into_iter()
            .map(|mut v| {
                v.config.out_dir = sweep_dir.clone();
                v
            })
            .collect(),
    );
    let rows: Mutex<Vec<AblateRow>> = Mutex::new(Vec::new());
    let workers = parallel.max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let Some(variant) = queue.lock().unwrap().pop_front() else {
                    break;
                };
                println!("variant {} ...", variant.name);
                let outcome = train_into_dir(
                    &variant.config,
                    &corpus,
                    &split,
                    shared_burn_in.clone(),
                );
                rows.lock().unwrap().push(AblateRow {
                    name: variant.name,
                    outcome,
                });
            });
        }
    });
    let mut rows = rows.into_inner().unwrap();
    rows.sort_by(|a, b| a.name.cmp(&b.name));

    let mut table = String::from("variant\tteacher_map\tteacher_ap50\tstudent_map\tstudent_ap50\n");
    println!("\n{:<24} {:>12} {:>12} {:>12} {:>12}", "variant", "teacher mAP", "teacher AP50", "student mAP", "student AP50");
    let mut first_error: Option<Error> = None;
    for row in rows {
        match row.outcome {
            Ok(s) => {
                let t = s.teacher.unwrap_or(MapScores { map_50_95: f64::NAN, ap50: f64::NAN });
                let st = s.student.unwrap_or(MapScores { map_50_95: f64::NAN, ap50: f64::NAN });
                println!(
                    "{:<24} {:>12.4} {:>12.4} {:>12.4} {:>12.4}",
                    row.name, t.map_50_95, t.ap50, st.map_50_95, st.ap50
                );
                table.push_str(&format!(
                    "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                    row.name, t.map_50_95, t.ap50, st.map_50_95, st.ap50
                ));
            }
            Err(e) => {
                println!("{:<24} FAILED: {e}", row.name);
                table.push_str(&format!("{}\tfailed\t{e}\n", row.name));
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
    }
    fs::write(sweep_dir.join("summary.tsv"), table)?;
    println!("\nsummary written to {}", sweep_dir.join("summary.tsv").display());
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn cmd_verify(inject_fault: Option<&str>) -> Result<bool> {
    let fault = match inject_fault {
        None => FaultInjection::None,
        Some("gradient") => FaultInjection::Gradient,
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown fault {other:?}; available: gradient"
            )))
        }
    };
    let results = run_all(fault);
    let mut all_passed = true;
    for r in &results {
        if r.passed {
            println!("PASS {}", r.name);
        } else {
            println!("FAIL {} — {}", r.name, r.detail);
            all_passed = false;
        }
    }
    println!(
        "{} checks, {} failed",
        results.len(),
        results.iter().filter(|r| !r.passed).count()
    );
    Ok(all_passed)
}
