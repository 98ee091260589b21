use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gatenet::checkpoint;
use gatenet::cyto::{EventTable, FittedTransform, HierarchySpec, LabeledSample};
use gatenet::eval::{cross_validate, expert_loo_eval, learning_curve, CvReport, TrainSize};
use gatenet::model::{Model, ModelConfig};
use gatenet::synth::{benchmark_preset, generate_dataset, generate_sample, Preset, SynthDatasetSpec};
use gatenet::train::{train, Prediction, TrainedModel};
use serde::Serialize;

use crate::config::{Architecture, RunConfig};
use crate::data::{data_dir, load_events, load_labeled_dir, write_dataset};
use crate::failure::{Context, Failure};
use crate::output::Run;
use crate::Command;

pub const SWEEP_PARAMS: [&str; 5] = ["gamma", "beta_loss", "beta_sampling", "max_lr", "k"];

/// Copies command-line flags into the configuration, so the manifest holds them.
pub fn fold_flags(cmd: &Command, cfg: &mut RunConfig) {
    match cmd {
        Command::Train { data } | Command::Cv { data } => {
            if let Some(d) = data {
                cfg.data.dir = Some(d.clone());
            }
        }
        Command::LearningCurve { data, sizes } => {
            if let Some(d) = data {
                cfg.data.dir = Some(d.clone());
            }
            if !sizes.is_empty() {
                cfg.learning_curve.sizes = sizes.clone();
            }
        }
        Command::Synth { preset, spec } => {
            if preset.is_some() || spec.is_some() {
                cfg.synth.preset = preset.clone();
                cfg.synth.spec = spec.clone();
            }
        }
        Command::Sweep { data, param, values } => {
            if let Some(d) = data {
                cfg.data.dir = Some(d.clone());
            }
            if let Some(p) = param {
                cfg.sweep.param = p.clone();
            }
            if !values.is_empty() {
                cfg.sweep.values = values.clone();
            }
        }
        Command::Predict { .. } | Command::ExpertEval { .. } | Command::Bench | Command::Replay { .. } => {}
    }
}

pub fn execute(cmd: &Command, cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    cfg.train.validate()?;
    let mut run = Run::new(out)?;
    match cmd {
        Command::Train { .. } => cmd_train(cfg, &mut run)?,
        Command::Predict {
            checkpoint,
            hierarchy,
            samples,
        } => match (checkpoint, hierarchy) {
            (_, Some(dir)) => cmd_predict_hierarchy(cfg, dir, samples, &mut run)?,
            (Some(ckpt), None) => cmd_predict(cfg, ckpt, samples, &mut run)?,
            (None, None) => return Err(Failure::config("predict needs --checkpoint or --hierarchy")),
        },
        Command::Cv { .. } => cmd_cv(cfg, &mut run)?,
        Command::LearningCurve { .. } => cmd_learning_curve(cfg, &mut run)?,
        Command::ExpertEval { experts } => cmd_expert_eval(cfg, experts, &mut run)?,
        Command::Synth { .. } => cmd_synth(cfg, &mut run)?,
        Command::Sweep { .. } => cmd_sweep(cfg, &mut run)?,
        Command::Bench => cmd_bench(cfg, &mut run)?,
        Command::Replay { .. } => return Err(Failure::config("a manifest cannot replay another replay")),
    }
    run.finish(cmd, cfg)?;
    Ok(())
}

fn load_training_data(cfg: &RunConfig, run: &mut Run) -> Result<Vec<LabeledSample>, Failure> {
    let dir = data_dir(&cfg.data, None)?;
    load_labeled_dir(&dir, &cfg.data, run)
}

fn model_config(cfg: &RunConfig, samples: &[LabeledSample]) -> ModelConfig {
    let first = &samples[0];
    cfg.model.build(first.events.n_markers(), first.n_classes())
}

fn cmd_train(cfg: &RunConfig, run: &mut Run) -> Result<(), Failure> {
    let samples = load_training_data(cfg, run)?;
    let refs: Vec<&LabeledSample> = samples.iter().collect();
    let (trained, history) = train(&model_config(cfg, &samples), &refs, &cfg.train)?;
    run.write("model.ckpt", &checkpoint::to_bytes(&trained)?)?;
    run.write_json("history.json", &history)?;
    let first = history.loss.first().copied().unwrap_or(f64::NAN);
    let last = history.loss.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} iterations (batch {}) on {} samples; loss {first:.4} -> {last:.4}",
        history.total_iters,
        history.batch_size,
        samples.len()
    );
    Ok(())
}

fn load_checkpoint(path: &Path, run: &mut Run) -> Result<TrainedModel, Failure> {
    run.input(path)?;
    checkpoint::load(path).at(path)
}

fn labels_csv(class_names: &[String], pred: &Prediction, rows: Option<&[usize]>) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["event_index".to_string(), "predicted_class".to_string()];
    header.extend(class_names.iter().map(|c| format!("probability_{c}")));
    w.write_record(&header).map_err(|e| Failure::data(e.to_string()))?;
    let c = class_names.len();
    for (i, (label, probs)) in pred.labels.iter().zip(pred.probs.data().chunks(c)).enumerate() {
        let index = rows.map_or(i, |r| r[i]);
        let mut rec = vec![index.to_string(), class_names[*label].clone()];
        rec.extend(probs.iter().map(|p| p.to_string()));
        w.write_record(&rec).map_err(|e| Failure::data(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Failure::data(e.to_string()))
}

fn plot_pairs(cfg: &RunConfig, panel: &[String]) -> Vec<(String, String)> {
    if !cfg.predict.plot_pairs.is_empty() {
        return cfg.predict.plot_pairs.clone();
    }
    match panel {
        [x, y, ..] => vec![(x.clone(), y.clone())],
        _ => Vec::new(),
    }
}

/// Per-event `(x, y, predicted_class)` rows in raw intensities.
fn plot_csv(events: &EventTable, x: &str, y: &str, classes: &[String]) -> Result<Vec<u8>, Failure> {
    let panel = events.panel();
    let missing: Vec<String> = [x, y]
        .into_iter()
        .filter(|m| panel.position(m).is_none())
        .map(String::from)
        .collect();
    if !missing.is_empty() {
        return Err(gatenet::Error::PanelMismatch { missing }.into());
    }
    let (xi, yi) = (panel.position(x).unwrap(), panel.position(y).unwrap());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([x, y, "predicted_class"]).map_err(|e| Failure::data(e.to_string()))?;
    for (i, class) in classes.iter().enumerate() {
        let e = events.event(i);
        w.write_record([e[xi].to_string(), e[yi].to_string(), class.clone()])
            .map_err(|e| Failure::data(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Failure::data(e.to_string()))
}

fn cmd_predict(cfg: &RunConfig, ckpt: &Path, samples: &[PathBuf], run: &mut Run) -> Result<(), Failure> {
    let model = load_checkpoint(ckpt, run)?;
    let pairs = plot_pairs(cfg, model.panel.names());
    for path in samples {
        let events = load_events(path, run)?;
        let pred = model
            .predict(&events, cfg.predict.n_context_draws, cfg.predict.seed)
            .at(path)?;
        let id = events.sample_id().to_string();
        run.write(&format!("{id}.labels.csv"), &labels_csv(&model.class_names, &pred, None)?)?;
        let names: Vec<String> = pred.labels.iter().map(|&l| model.class_names[l].clone()).collect();
        for (x, y) in &pairs {
            let bytes = plot_csv(&events, x, y, &names).at(path)?;
            run.write(&format!("{id}.plot.{x}.{y}.csv"), &bytes)?;
        }
        println!("{id}: {} events labeled", events.n_events());
    }
    Ok(())
}

fn load_hierarchy(dir: &Path, run: &mut Run) -> Result<HierarchySpec, Failure> {
    let path = dir.join("hierarchy.toml");
    if !path.exists() {
        return Ok(HierarchySpec::rheumaflow());
    }
    run.input(&path)?;
    let text = std::fs::read_to_string(&path).at(&path)?;
    let spec: HierarchySpec = toml::from_str(&text).map_err(|e| Failure::config(e.to_string()).at(&path))?;
    // re-check the ordering rules that deserialization skips
    HierarchySpec::new(spec.stages().to_vec()).at(&path)
}

/// Runs every stage that has a checkpoint, feeding each stage the events its parent
/// population received at an earlier stage.
fn cmd_predict_hierarchy(cfg: &RunConfig, dir: &Path, samples: &[PathBuf], run: &mut Run) -> Result<(), Failure> {
    let hierarchy = load_hierarchy(dir, run)?;
    let mut models = Vec::new();
    for stage in hierarchy.stages() {
        let path = dir.join(format!("{}.ckpt", stage.name));
        if !path.exists() {
            models.push(None);
            continue;
        }
        let model = load_checkpoint(&path, run)?;
        if model.class_names != stage.class_names() {
            return Err(Failure::config(format!(
                "classes {:?} do not match stage `{}` ({:?})",
                model.class_names,
                stage.name,
                stage.class_names()
            ))
            .at(&path));
        }
        models.push(Some(model));
    }
    if models.iter().all(Option::is_none) {
        return Err(Failure::config(format!("{}: no stage checkpoints", dir.display())));
    }
    for path in samples {
        let events = load_events(path, run)?;
        let n = events.n_events();
        // events assigned to each population so far
        let mut members: HashMap<String, Vec<usize>> = HashMap::new();
        let mut columns: Vec<(String, Vec<String>)> = Vec::new();
        let mut specific = vec![String::new(); n];
        for (stage, model) in hierarchy.stages().iter().zip(&models) {
            let Some(model) = model else { continue };
            let rows: Vec<usize> = match &stage.parent {
                None => (0..n).collect(),
                Some(p) => members.get(p).cloned().unwrap_or_default(),
            };
            let mut column = vec![String::new(); n];
            if !rows.is_empty() {
                let subset = events.select(&rows);
                let pred = model
                    .predict(&subset, cfg.predict.n_context_draws, cfg.predict.seed)
                    .at(path)?;
                let names = stage.class_names();
                for (&row, &l) in rows.iter().zip(&pred.labels) {
                    let name = &names[l];
                    column[row] = name.clone();
                    if stage.subpopulations.contains(name) {
                        members.entry(name.clone()).or_default().push(row);
                        specific[row] = name.clone();
                    }
                }
                let id = events.sample_id();
                run.write(
                    &format!("{id}.{}.labels.csv", stage.name),
                    &labels_csv(&names, &pred, Some(&rows))?,
                )?;
            }
            columns.push((stage.name.clone(), column));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["event_index".to_string(), "population".to_string()];
        header.extend(columns.iter().map(|(s, _)| s.clone()));
        w.write_record(&header).map_err(|e| Failure::data(e.to_string()))?;
        for i in 0..n {
            let mut rec = vec![i.to_string(), specific[i].clone()];
            rec.extend(columns.iter().map(|(_, c)| c[i].clone()));
            w.write_record(&rec).map_err(|e| Failure::data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Failure::data(e.to_string()))?;
        run.write(&format!("{}.hierarchy.csv", events.sample_id()), &bytes)?;
        println!("{}: {n} events through {} stages", events.sample_id(), columns.len());
    }
    Ok(())
}

fn per_sample_csv(reports: &[(String, &CvReport)]) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["setting", "fold", "sample_id", "n_events", "weighted_f1", "unweighted_f1"])
        .map_err(|e| Failure::data(e.to_string()))?;
    for (setting, cv) in reports {
        for f in &cv.folds {
            for s in &f.per_sample {
                w.write_record([
                    setting.clone(),
                    f.fold.to_string(),
                    s.sample_id.clone(),
                    s.confusion.total().to_string(),
                    s.report.weighted_f1.to_string(),
                    s.report.unweighted_f1.to_string(),
                ])
                .map_err(|e| Failure::data(e.to_string()))?;
            }
        }
    }
    w.into_inner().map_err(|e| Failure::data(e.to_string()))
}

fn cmd_cv(cfg: &RunConfig, run: &mut Run) -> Result<(), Failure> {
    let samples = load_training_data(cfg, run)?;
    let report = cross_validate(&samples, &model_config(cfg, &samples), &cfg.train, &cfg.eval)?;
    run.write_json("cv.json", &report)?;
    run.write("per_sample.csv", &per_sample_csv(&[("cv".into(), &report)])?)?;
    println!(
        "{}-fold CV: weighted F1 {:.4} ± {:.4}, unweighted F1 {:.4} ± {:.4}",
        cfg.eval.k, report.weighted_mean, report.weighted_std, report.unweighted_mean, report.unweighted_std
    );
    Ok(())
}

fn size_label(size: TrainSize) -> String {
    match size {
        TrainSize::Count(n) => n.to_string(),
        TrainSize::All => "all".into(),
    }
}

fn cmd_learning_curve(cfg: &RunConfig, run: &mut Run) -> Result<(), Failure> {
    let sizes = cfg.learning_curve.parse_sizes()?;
    let samples = load_training_data(cfg, run)?;
    let points = learning_curve(&samples, &sizes, &model_config(cfg, &samples), &cfg.train, &cfg.eval)?;
    run.write_json("learning_curve.json", &points)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "size",
        "median_unweighted_f1",
        "q25_unweighted_f1",
        "q75_unweighted_f1",
        "median_weighted_f1",
        "q25_weighted_f1",
        "q75_weighted_f1",
        "cv_unweighted_mean",
        "cv_unweighted_std",
    ])
    .map_err(|e| Failure::data(e.to_string()))?;
    for p in &points {
        let u = &p.unweighted;
        let wt = &p.weighted;
        w.write_record([
            size_label(p.size),
            u.median.to_string(),
            u.q25.to_string(),
            u.q75.to_string(),
            wt.median.to_string(),
            wt.q25.to_string(),
            wt.q75.to_string(),
            p.cv.unweighted_mean.to_string(),
            p.cv.unweighted_std.to_string(),
        ])
        .map_err(|e| Failure::data(e.to_string()))?;
        println!("n_train {:>4}: median unweighted F1 {:.4}", size_label(p.size), u.median);
    }
    run.write("learning_curve.csv", &w.into_inner().map_err(|e| Failure::data(e.to_string()))?)?;
    let rows: Vec<(String, &CvReport)> = points.iter().map(|p| (size_label(p.size), &p.cv)).collect();
    run.write("per_sample.csv", &per_sample_csv(&rows)?)?;
    Ok(())
}

fn dir_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn cmd_expert_eval(cfg: &RunConfig, experts: &[PathBuf], run: &mut Run) -> Result<(), Failure> {
    let mut gatings: Vec<Vec<LabeledSample>> = Vec::new();
    for dir in experts {
        let name = dir_name(dir);
        let samples = load_labeled_dir(dir, &cfg.data, run)?;
        gatings.push(samples.into_iter().map(|s| s.with_expert(name.clone())).collect());
    }
    let ids = |g: &Vec<LabeledSample>| g.iter().map(|s| s.sample_id().to_string()).collect::<Vec<_>>();
    let reference = ids(&gatings[0]);
    for (dir, g) in experts.iter().zip(&gatings).skip(1) {
        if ids(g) != reference {
            return Err(Failure::data(format!(
                "{}: sample files differ from those of {}",
                dir.display(),
                experts[0].display()
            )));
        }
    }
    let scores = expert_loo_eval(&gatings)?;
    run.write_json("experts.json", &scores)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "expert",
        "median_unweighted_f1",
        "q25_unweighted_f1",
        "q75_unweighted_f1",
        "median_weighted_f1",
        "q25_weighted_f1",
        "q75_weighted_f1",
    ])
    .map_err(|e| Failure::data(e.to_string()))?;
    for (dir, s) in experts.iter().zip(&scores) {
        let u = &s.consensus_unweighted;
        let wt = &s.consensus_weighted;
        w.write_record([
            dir_name(dir),
            u.median.to_string(),
            u.q25.to_string(),
            u.q75.to_string(),
            wt.median.to_string(),
            wt.q25.to_string(),
            wt.q75.to_string(),
        ])
        .map_err(|e| Failure::data(e.to_string()))?;
        println!("{}: median unweighted F1 {:.4} against the others' consensus", dir_name(dir), u.median);
    }
    run.write("experts.csv", &w.into_inner().map_err(|e| Failure::data(e.to_string()))?)?;
    Ok(())
}

fn synth_spec(cfg: &RunConfig, run: &mut Run) -> Result<SynthDatasetSpec, Failure> {
    let s = &cfg.synth;
    let mut spec = match (&s.preset, &s.spec) {
        (Some(name), None) => benchmark_preset(name.parse::<Preset>()?),
        (None, Some(path)) => {
            run.input(path)?;
            let text = std::fs::read_to_string(path).at(path)?;
            SynthDatasetSpec::from_toml(&text).at(path)?
        }
        (None, None) => return Err(Failure::config("synth needs a preset or a spec file")),
        (Some(_), Some(_)) => return Err(Failure::config("synth takes a preset or a spec file, not both")),
    };
    if let Some(n) = s.n_samples {
        spec.n_samples = n;
    }
    if let Some(e) = s.events_per_sample {
        spec.events_per_sample.median = e;
    }
    if let Some(seed) = s.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}

fn cmd_synth(cfg: &RunConfig, run: &mut Run) -> Result<(), Failure> {
    let spec = synth_spec(cfg, run)?;
    let ds = generate_dataset(&spec)?;
    write_dataset(run, "samples", &ds.samples)?;
    run.write("spec.toml", spec.to_toml()?.as_bytes())?;
    run.write_json("truth.json", &ds.diagnostics())?;
    println!("wrote {} samples to {}", ds.samples.len(), run.out.join("samples").display());
    Ok(())
}

#[derive(Serialize)]
struct SweepPoint {
    param: String,
    value: f64,
    cv: CvReport,
}

fn with_param(cfg: &RunConfig, param: &str, value: f64) -> Result<RunConfig, Failure> {
    let mut c = cfg.clone();
    match param {
        "gamma" => c.train.gamma = value,
        "beta_loss" => c.train.beta_loss = value,
        "beta_sampling" => c.train.beta_sampling = value,
        "max_lr" => c.train.max_lr = value,
        "k" => {
            if c.model.architecture != Architecture::Gatenet {
                return Err(Failure::config("sweeping k needs the gatenet architecture"));
            }
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Failure::config(format!("k must be a positive integer, got {value}")));
            }
            c.model.n_context = value as usize;
        }
        other => {
            return Err(Failure::config(format!(
                "unknown sweep parameter `{other}` (expected one of {})",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    c.train.validate()?;
    Ok(c)
}

fn cmd_sweep(cfg: &RunConfig, run: &mut Run) -> Result<(), Failure> {
    let param = cfg.sweep.param.to_ascii_lowercase();
    if cfg.sweep.values.is_empty() {
        return Err(Failure::config("sweep needs at least one value"));
    }
    // reject bad settings before any training starts
    let settings: Vec<RunConfig> = cfg
        .sweep
        .values
        .iter()
        .map(|&v| with_param(cfg, &param, v))
        .collect::<Result<_, _>>()?;
    let samples = load_training_data(cfg, run)?;
    let mut points = Vec::new();
    for (c, &value) in settings.iter().zip(&cfg.sweep.values) {
        let cv = cross_validate(&samples, &model_config(c, &samples), &c.train, &c.eval)?;
        println!("{param} = {value}: unweighted F1 {:.4} ± {:.4}", cv.unweighted_mean, cv.unweighted_std);
        points.push(SweepPoint {
            param: param.clone(),
            value,
            cv,
        });
    }
    run.write_json("sweep.json", &points)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "param",
        "value",
        "unweighted_mean",
        "unweighted_std",
        "weighted_mean",
        "weighted_std",
    ])
    .map_err(|e| Failure::data(e.to_string()))?;
    for p in &points {
        w.write_record([
            p.param.clone(),
            p.value.to_string(),
            p.cv.unweighted_mean.to_string(),
            p.cv.unweighted_std.to_string(),
            p.cv.weighted_mean.to_string(),
            p.cv.weighted_std.to_string(),
        ])
        .map_err(|e| Failure::data(e.to_string()))?;
    }
    run.write("sweep.csv", &w.into_inner().map_err(|e| Failure::data(e.to_string()))?)?;
    let rows: Vec<(String, &CvReport)> = points.iter().map(|p| (p.value.to_string(), &p.cv)).collect();
    run.write("per_sample.csv", &per_sample_csv(&rows)?)?;
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    architecture: Architecture,
    n_events: usize,
    n_markers: usize,
    n_context: Option<usize>,
    seconds: Vec<f64>,
    events_per_second: f64,
    microseconds_per_event: f64,
}

/// Times inference of an untrained model; the cost does not depend on the weights.
fn cmd_bench(cfg: &RunConfig, run: &mut Run) -> Result<(), Failure> {
    if cfg.bench.repeats == 0 || cfg.bench.events == 0 {
        return Err(Failure::config("bench.events and bench.repeats must be positive"));
    }
    let mut spec = benchmark_preset(Preset::Separable);
    spec.events_per_sample.median = cfg.bench.events as f64;
    spec.seed = cfg.synth.seed.unwrap_or(cfg.train.seed);
    let (sample, _) = generate_sample(&spec, 0)?;
    let mut model_cfg = cfg.model.build(sample.events.n_markers(), sample.n_classes());
    model_cfg.set_seed(cfg.train.seed);
    let transform = FittedTransform::fit(&cfg.train.transform, [&sample.events])?;
    let trained = TrainedModel {
        model: Model::init(model_cfg.clone())?,
        panel: sample.events.panel().clone(),
        class_names: sample.class_names().to_vec(),
        transform,
    };
    let mut seconds = Vec::new();
    for r in 0..cfg.bench.repeats {
        let t = Instant::now();
        trained.predict(&sample.events, cfg.predict.n_context_draws, r as u64)?;
        seconds.push(t.elapsed().as_secs_f64());
    }
    let best = seconds.iter().copied().fold(f64::INFINITY, f64::min);
    let n = sample.n_events();
    let report = BenchReport {
        architecture: cfg.model.architecture,
        n_events: n,
        n_markers: sample.events.n_markers(),
        n_context: model_cfg.n_context(),
        seconds,
        events_per_second: n as f64 / best,
        microseconds_per_event: best * 1e6 / n as f64,
    };
    println!(
        "{n} events in {best:.3} s (best of {}): {:.0} events/s, {:.2} µs/event",
        cfg.bench.repeats, report.events_per_second, report.microseconds_per_event
    );
    run.write_json("bench.json", &report)?;
    Ok(())
}
