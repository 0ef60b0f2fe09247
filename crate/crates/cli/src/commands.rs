//! Subcommand implementations. Each returns the run directory it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use image::GrayImage;
use landmark_attack::attack::{self, TargetFile, TargetSpec};
use landmark_attack::codec::{Frame, LandmarkSet};
use landmark_attack::data::{self, DatasetRecord, PreprocessSpec, Split};
use landmark_attack::detector::{self, DetectorModel, InputSpec, Sample};
use landmark_attack::metrics::{self, Aggregate, Cohort, EvalReport, IsolationCohort, RunMeta};
use landmark_attack::sweep::{self, EvalImage, SweepCell, SweepConfig};
use serde::{Deserialize, Serialize};

use crate::config::{cell_name, parse_cells, DataSource, RunConfig};
use crate::{plots, AttackArgs, BenchmarkArgs, CliError, DataArgs, DetectArgs, IsolationArgs, TrainArgs, VisualizeArgs};

type CmdResult = Result<PathBuf, CliError>;

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn save_png(img: &GrayImage, path: &Path) -> anyhow::Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn load_gray(path: &Path) -> anyhow::Result<GrayImage> {
    Ok(image::open(path)
        .with_context(|| format!("reading image {}", path.display()))?
        .into_luma8())
}

/// Create `out_dir/<command>-<hash>` and persist the resolved configuration.
fn run_dir(config: &RunConfig, command: &str, args: &impl Serialize) -> anyhow::Result<PathBuf> {
    let dir = config.out_dir.join(format!("{command}-{}", config.hash(command, args)));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), config.to_toml())?;
    write_json(&dir.join("args.json"), args)?;
    eprintln!("run directory: {}", dir.display());
    Ok(dir)
}

fn apply_data_args(config: &mut RunConfig, a: &DataArgs) {
    if let Some(root) = &a.data_root {
        config.data.source = DataSource::Isbi;
        config.data.root = Some(root.clone());
    }
    if let Some(n) = a.train_images {
        config.data.train_images = n;
    }
    if let Some(n) = a.test_images {
        config.data.test_images = n;
    }
}

/// Training and evaluation records for the configured source.
fn load_records(config: &RunConfig) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>), CliError> {
    match config.data.source {
        DataSource::Synthetic => {
            let d = &config.data;
            let mut rng = config.stream("dataset");
            let mut all = data::synth_dataset(&mut rng, d.train_images + d.test_images, &d.synth)
                .map_err(|e| CliError::Usage(format!("synthetic data: {e}")))?;
            let test = all.split_off(d.train_images);
            let test = test
                .into_iter()
                .map(|r| DatasetRecord { split: Split::Test1, ..r })
                .collect();
            Ok((all, test))
        }
        DataSource::Isbi => {
            let root = config
                .data
                .root
                .as_ref()
                .ok_or_else(|| CliError::Usage("ISBI data needs --data-root or data.root".into()))?;
            let records = data::load_isbi(root, &config.data.isbi)?;
            let (train, rest): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.split == Split::Train);
            let eval = rest.into_iter().filter(|r| r.split == config.data.eval_split).collect();
            Ok((train, eval))
        }
    }
}

fn model_spec(model: &DetectorModel) -> PreprocessSpec {
    PreprocessSpec {
        width: model.input.width,
        height: model.input.height,
        channels: model.input.channels,
    }
}

fn print_aggregate(label: &str, a: &Aggregate, unit: &str) {
    let sdr: Vec<String> = a.sdr.iter().map(|s| format!("SDR@{}={:.2}%", s.radius_mm, s.percent)).collect();
    println!(
        "{label}: n={} MRE={:.4}{unit} MedRE={:.4}{unit} {}",
        a.count,
        a.mre,
        a.medre,
        sdr.join(" ")
    );
}

fn unit(config: &RunConfig) -> &'static str {
    if config.data.spacing_mm == 1.0 {
        "px"
    } else {
        "mm"
    }
}

fn load_model(path: &Path) -> anyhow::Result<DetectorModel> {
    DetectorModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn train(mut config: RunConfig, args: &TrainArgs) -> CmdResult {
    apply_data_args(&mut config, &args.data);
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        config.train.batch_size = b;
    }
    if let Some(lr) = args.learning_rate {
        config.train.learning_rate = lr;
    }
    config.validate()?;
    if config.codec.sigma != config.train.sigma {
        return Err(CliError::Usage(format!(
            "codec.sigma ({}) and train.sigma ({}) differ",
            config.codec.sigma, config.train.sigma
        )));
    }
    let (train_records, eval_records) = load_records(&config)?;
    let k = train_records
        .first()
        .map(|r| r.landmarks.len())
        .ok_or_else(|| CliError::Usage("no training images".into()))?;
    let dir = run_dir(&config, "train", args)?;

    let spec = config.preprocess;
    let samples: Vec<Sample> = train_records
        .iter()
        .map(|r| {
            let (image, landmarks) = data::preprocess(r, &spec);
            Sample { image, landmarks }
        })
        .collect();
    let mut rng = config.stream("training");
    let arch = config.preset.architecture(spec.channels, k);
    let input = InputSpec {
        channels: spec.channels,
        height: spec.height,
        width: spec.width,
    };
    let mut model = DetectorModel::init(arch, input, config.codec, config.train.alpha, &mut rng)?;
    if let Some(path) = &args.init {
        let start = load_model(path)?;
        if start.net.arch != model.net.arch || start.input != model.input {
            return Err(CliError::Usage(format!(
                "{} has a different architecture or input size than the configured model",
                path.display()
            )));
        }
        model.net = start.net;
    }
    eprintln!("training {} parameters on {} images", model.net.num_params(), samples.len());
    let stats = detector::train(&mut model, &samples, &config.train, &mut rng, |e| {
        eprintln!("epoch {:4}  lr {:.2e}  loss {:.5}", e.epoch + 1, e.learning_rate, e.mean_loss);
    })?;
    model.save(&dir.join("model.json"))?;
    let mut w = String::from("epoch,learning_rate,mean_loss\n");
    for s in &stats {
        w.push_str(&format!("{},{},{}\n", s.epoch + 1, s.learning_rate, s.mean_loss));
    }
    fs::write(dir.join("training.csv"), w).map_err(anyhow::Error::from)?;
    let curve = vec![("loss".to_string(), stats.iter().map(|s| ((s.epoch + 1) as f64, s.mean_loss)).collect())];
    plots::line_chart(&dir.join("training.svg"), "Training loss", "epoch", "mean loss", &curve)?;

    let report = evaluate(&model, &eval_records, &config)?;
    report.write_csv(&dir.join("eval.csv"))?;
    report.write_summary(&dir.join("summary.json"))?;
    if let Some(a) = report.cohort(Cohort::Clean) {
        print_aggregate("held-out", &a, unit(&config));
    }
    println!("{}", dir.display());
    Ok(dir)
}

fn evaluate(model: &DetectorModel, records: &[DatasetRecord], config: &RunConfig) -> anyhow::Result<EvalReport> {
    let spec = model_spec(model);
    let mut report = EvalReport::new(RunMeta {
        label: "detection".into(),
        seed: config.seed,
        ..RunMeta::default()
    });
    for r in records {
        let (image, truth) = data::preprocess(r, &spec);
        let pred = model.predict_landmarks(&image)?;
        let errors = metrics::radial_error(&pred, &truth, config.data.spacing_mm, r.frame())?;
        report.push_image(&r.image_id, 0, &errors, &vec![Cohort::Clean; errors.len()]);
    }
    Ok(report)
}

#[derive(Debug, Serialize, Deserialize)]
struct Prediction {
    image: PathBuf,
    resized: LandmarkSet,
    original: LandmarkSet,
}

pub fn detect(config: RunConfig, args: &DetectArgs) -> CmdResult {
    let model = load_model(&args.checkpoint)?;
    let dir = run_dir(&config, "detect", args)?;
    let spec = model_spec(&model);
    let mut out = Vec::with_capacity(args.images.len());
    for path in &args.images {
        let gray = load_gray(path)?;
        let x = data::preprocess_image(&gray, &spec);
        let resized = model.predict_landmarks(&x)?;
        let original = resized.rescale(Frame::original(gray.width() as usize, gray.height() as usize));
        for (i, p) in original.points().iter().enumerate() {
            println!("{}\t{}\t{:.2}\t{:.2}", path.display(), i + 1, p.x, p.y);
        }
        out.push(Prediction {
            image: path.clone(),
            resized,
            original,
        });
    }
    write_json(&dir.join("predictions.json"), &out)?;
    Ok(dir)
}

/// Owned view of the trace file written by `attack`.
#[derive(Debug, Deserialize)]
struct AttackRecord {
    targets: TargetSpec,
    clean_landmarks: LandmarkSet,
    final_landmarks: LandmarkSet,
}

pub fn attack(mut config: RunConfig, args: &AttackArgs) -> CmdResult {
    let o = &args.attack;
    let a = &mut config.attack;
    if let Some(v) = o.epsilon {
        a.epsilon = v;
    }
    if let Some(v) = o.eta {
        a.eta = v;
    }
    if let Some(v) = o.iterations {
        a.iterations = v;
    }
    if let Some(v) = o.adaptive {
        a.adaptive = v;
    }
    if let Some(v) = o.trace_every {
        a.trace_every = v;
    }
    config.validate()?;
    let model = load_model(&args.checkpoint)?;
    let file = TargetFile::load(&args.targets)?;
    let frame = Frame::resized(model.input.width, model.input.height);
    let spec = TargetSpec::from_file(&file, model.landmarks(), frame)
        .with_context(|| format!("target file {}", args.targets.display()))?;
    let gray = load_gray(&args.image)?;
    let x = data::preprocess_image(&gray, &model_spec(&model));
    let dir = run_dir(&config, "attack", args)?;

    let cfg = &config.attack;
    let result = attack::run_attack_with(&model, &x, &spec, cfg, |t| {
        let mean = t.targeted_errors.iter().sum::<f64>() / t.targeted_errors.len().max(1) as f64;
        eprintln!("iteration {:4}  loss {:.5}  mean targeted error {:.3}px", t.iteration, t.total_loss, mean);
    })?;
    let violations = sweep::constraint_violations(&x, &result.adversarial, cfg.epsilon_normalized());
    if violations > 0 {
        return Err(anyhow!("{violations} pixels violate the epsilon ball or the valid range").into());
    }

    save_png(&data::image_to_gray(&x), &dir.join("input.png"))?;
    save_png(&data::image_to_gray(&result.adversarial), &dir.join("adversarial.png"))?;
    data::export_visualization(
        &dir.join("visualization.png"),
        &x,
        &result.adversarial,
        &result.clean_landmarks,
        &result.final_landmarks,
        &spec,
        args.magnification,
    )?;
    write_json(&dir.join("trace.json"), &result.trace_record(&spec, cfg))?;
    file.save(&dir.join("targets.json"))?;
    let original = Frame::original(gray.width() as usize, gray.height() as usize);
    write_json(
        &dir.join("landmarks.json"),
        &serde_json::json!({
            "clean": result.clean_landmarks.rescale(original),
            "adversarial": result.final_landmarks.rescale(original),
            "max_abs_perturbation_levels": result.max_abs_perturbation() * 127.5,
        }),
    )?;
    for t in &spec.targeted {
        let p = result.final_landmarks.points()[t.index];
        println!(
            "landmark {:2} targeted: desired ({:.1}, {:.1}) reached ({:.1}, {:.1}) error {:.3}px",
            t.index + 1,
            t.position.x,
            t.position.y,
            p.x,
            p.y,
            p.distance(&t.position)
        );
    }
    println!("{}", dir.display());
    Ok(dir)
}

#[derive(Debug, Serialize, Deserialize)]
struct BenchmarkManifest {
    landmarks: usize,
    spacing_mm: f64,
    iteration_grid: Vec<usize>,
    cells: Vec<SweepCell>,
}

#[derive(Debug, Serialize)]
struct GridSummary {
    iterations: usize,
    targeted: Option<Aggregate>,
    stationary: Option<Aggregate>,
}

#[derive(Debug, Serialize)]
struct CellSummary {
    cell: SweepCell,
    grid: Vec<GridSummary>,
}

fn report_name(cell: &SweepCell, iterations: usize) -> String {
    format!("{}_it{iterations}.csv", cell_name(cell))
}

pub fn benchmark(mut config: RunConfig, args: &BenchmarkArgs) -> CmdResult {
    apply_data_args(&mut config, &args.data);
    let b = &mut config.benchmark;
    if let Some(v) = args.attempts {
        b.attempts_per_image = v;
    }
    if let Some(v) = args.max_images {
        b.max_images = Some(v);
    }
    if let Some(v) = &args.iteration_grid {
        b.iteration_grid = v.clone();
    }
    if let Some(v) = &args.cells {
        b.cells = v.0.clone();
    }
    if let Some(v) = args.eta {
        config.attack.eta = v;
    }
    config.validate()?;
    let model = load_model(&args.checkpoint)?;
    let (_, mut eval_records) = load_records(&config)?;
    if let Some(n) = config.benchmark.max_images {
        eval_records.truncate(n);
    }
    let original = eval_records
        .first()
        .map(|r| r.frame())
        .ok_or_else(|| CliError::Usage("no evaluation images".into()))?;
    if eval_records.iter().any(|r| r.frame() != original) {
        return Err(anyhow!("benchmark images must share one original size").into());
    }
    let dir = run_dir(&config, "benchmark", args)?;

    let spec = model_spec(&model);
    let images: Vec<EvalImage> = eval_records
        .iter()
        .map(|r| {
            let (image, truth) = data::preprocess(r, &spec);
            EvalImage {
                image_id: r.image_id.clone(),
                image,
                truth,
            }
        })
        .collect();
    let bc = &config.benchmark;
    let sweep_config = SweepConfig {
        attempts_per_image: bc.attempts_per_image,
        iteration_grid: bc.iteration_grid.clone(),
        cells: bc.cells.clone(),
        attack: config.attack.clone(),
        rect: bc.rect,
        spacing_mm: config.data.spacing_mm,
    };
    eprintln!(
        "benchmark: {} images x {} attempts x {} cells, {} iterations each",
        images.len(),
        bc.attempts_per_image,
        bc.cells.len(),
        sweep_config.max_iterations()
    );
    let meta = RunMeta {
        label: "benchmark".into(),
        seed: config.seed,
        ..RunMeta::default()
    };
    let result = sweep::run_sweep(&model, &images, &sweep_config, original, &mut config.stream("targets"), meta)?;
    if result.checks.constraint_violations > 0 {
        return Err(anyhow!("{} pixels violated the attack constraints", result.checks.constraint_violations).into());
    }

    let reports = dir.join("reports");
    fs::create_dir_all(&reports).map_err(anyhow::Error::from)?;
    result.clean.write_csv(&reports.join("clean.csv"))?;
    let u = unit(&config);
    let clean = result.clean.cohort(Cohort::Clean);
    if let Some(a) = &clean {
        print_aggregate("clean", a, u);
    }
    let mut table = String::from(
        "mode,epsilon,iterations,targeted_mre,targeted_medre,targeted_sdr2,targeted_sdr2.5,targeted_sdr3,targeted_sdr4,stationary_mre,stationary_medre,stationary_sdr4\n",
    );
    let fmt = |a: &Option<Aggregate>, f: &dyn Fn(&Aggregate) -> f64| a.as_ref().map(|a| format!("{:.6}", f(a))).unwrap_or_default();
    let mut summaries = Vec::new();
    for cell in &result.cells {
        let mut grid = Vec::new();
        for (it, report) in &cell.by_iteration {
            report.write_csv(&reports.join(report_name(&cell.cell, *it)))?;
            let t = report.cohort(Cohort::Targeted);
            let s = report.cohort(Cohort::Stationary);
            table.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                if cell.cell.adaptive { "ati" } else { "ti" },
                cell.cell.epsilon,
                it,
                fmt(&t, &|a| a.mre),
                fmt(&t, &|a| a.medre),
                fmt(&t, &|a| a.sdr[0].percent),
                fmt(&t, &|a| a.sdr[1].percent),
                fmt(&t, &|a| a.sdr[2].percent),
                fmt(&t, &|a| a.sdr[3].percent),
                fmt(&s, &|a| a.mre),
                fmt(&s, &|a| a.medre),
                fmt(&s, &|a| a.sdr[3].percent),
            ));
            if let Some(t) = &t {
                print_aggregate(&format!("{} it={it} targeted", cell_name(&cell.cell)), t, u);
            }
            if let Some(s) = &s {
                print_aggregate(&format!("{} it={it} stationary", cell_name(&cell.cell)), s, u);
            }
            grid.push(GridSummary {
                iterations: *it,
                targeted: t,
                stationary: s,
            });
        }
        summaries.push(CellSummary { cell: cell.cell, grid });
    }
    fs::write(dir.join("sweep.csv"), table).map_err(anyhow::Error::from)?;
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({ "clean": clean, "cells": summaries, "checks": result.checks }),
    )?;

    let series: Vec<(String, Vec<(f64, f64)>)> = result
        .cells
        .iter()
        .map(|c| (cell_name(&c.cell), c.curve.iter().map(|&(i, e)| (i as f64, e)).collect()))
        .collect();
    let mut curves = String::from("cell,iteration,mean_targeted_error\n");
    for (name, pts) in &series {
        for (i, e) in pts {
            curves.push_str(&format!("{name},{i},{e}\n"));
        }
    }
    fs::write(dir.join("curves.csv"), curves).map_err(anyhow::Error::from)?;
    plots::line_chart(
        &dir.join("curves.svg"),
        "Mean targeted radial error",
        "iteration",
        &format!("error ({u})"),
        &series,
    )?;
    let medre: Vec<(String, Vec<(f64, f64)>)> = result
        .cells
        .iter()
        .map(|c| {
            let pts = c
                .by_iteration
                .iter()
                .filter_map(|(it, r)| r.cohort(Cohort::Targeted).map(|a| (*it as f64, a.medre)))
                .collect();
            (cell_name(&c.cell), pts)
        })
        .collect();
    plots::line_chart(&dir.join("medre.svg"), "Targeted MedRE", "iterations", &format!("MedRE ({u})"), &medre)?;

    let truth: Vec<LandmarkSet> = eval_records.iter().map(|r| r.landmarks.clone()).collect();
    write_json(&dir.join("ground_truth.json"), &truth)?;
    write_json(&dir.join("specs.json"), &result.specs)?;
    write_json(
        &dir.join("benchmark.json"),
        &BenchmarkManifest {
            landmarks: model.landmarks(),
            spacing_mm: config.data.spacing_mm,
            iteration_grid: sweep_config.iteration_grid.clone(),
            cells: sweep_config.cells.clone(),
        },
    )?;
    println!(
        "checks: attacks={} violations={} loss_decreased={} max|mean(weights)-1|={:.3e} parameters_unchanged={}",
        result.checks.attacks,
        result.checks.constraint_violations,
        result.checks.loss_decreased,
        result.checks.max_weight_mean_error,
        result.checks.parameters_unchanged
    );
    println!("{}", dir.display());
    Ok(dir)
}

fn default_isolation_cell(cells: &[SweepCell]) -> Option<SweepCell> {
    let pick = |adaptive: bool| {
        cells
            .iter()
            .filter(|c| c.adaptive == adaptive)
            .copied()
            .max_by(|a, b| a.epsilon.total_cmp(&b.epsilon))
    };
    pick(true).or_else(|| pick(false))
}

pub fn isolation(config: RunConfig, args: &IsolationArgs) -> CmdResult {
    let manifest: BenchmarkManifest = read_json(&args.benchmark.join("benchmark.json"))?;
    let cell = match &args.cell {
        Some(text) => {
            let cells = parse_cells(text).map_err(CliError::Usage)?;
            match cells.as_slice() {
                [c] => *c,
                _ => return Err(CliError::Usage("--cell takes exactly one MODE:EPSILON".into())),
            }
        }
        None => default_isolation_cell(&manifest.cells).ok_or_else(|| anyhow!("benchmark has no cells"))?,
    };
    if !manifest.cells.contains(&cell) {
        return Err(CliError::Usage(format!("cell {} was not part of the benchmark", cell_name(&cell))));
    }
    let cohort = if args.all_attempts {
        IsolationCohort::AllAttempts
    } else {
        config.benchmark.isolation_cohort
    };
    let last = *manifest.iteration_grid.iter().max().ok_or_else(|| anyhow!("empty iteration grid"))?;
    let report = EvalReport::read_csv(&args.benchmark.join("reports").join(report_name(&cell, last)), RunMeta::default())?;
    let truth: Vec<LandmarkSet> = read_json(&args.benchmark.join("ground_truth.json"))?;
    let k = manifest.landmarks;
    let isolation: Vec<f64> = metrics::isolation_degree(&truth)?
        .into_iter()
        .map(|v| v * manifest.spacing_mm)
        .collect();
    let mre = report.per_landmark_mre(k, cohort);
    let analysis = metrics::isolation_vs_error(&isolation, &mre)?;
    let dir = run_dir(&config, "isolation", args)?;

    let mut table = String::from("landmark,isolation,mre\n");
    for i in 0..k {
        let m = mre[i].map(|v| v.to_string()).unwrap_or_default();
        table.push_str(&format!("{},{},{}\n", i + 1, isolation[i], m));
    }
    fs::write(dir.join("isolation.csv"), table).map_err(anyhow::Error::from)?;
    let correlation = match analysis.correlation {
        Some(r) => serde_json::json!(r),
        None => serde_json::json!("undefined"),
    };
    write_json(
        &dir.join("isolation.json"),
        &serde_json::json!({
            "cell": cell,
            "iterations": last,
            "cohort": cohort,
            "correlation": correlation,
            "rows": analysis.rows,
        }),
    )?;
    let pts: Vec<(f64, f64, String)> = analysis
        .rows
        .iter()
        .map(|r| (r.isolation, r.mre, r.landmark.to_string()))
        .collect();
    let u = if manifest.spacing_mm == 1.0 { "px" } else { "mm" };
    plots::scatter(
        &dir.join("isolation.svg"),
        "Isolation vs targeted error",
        &format!("degree of isolation ({u})"),
        &format!("MRE ({u})"),
        &pts,
    )?;
    match analysis.correlation {
        Some(r) => println!("pearson r = {r:.4} over {} landmarks", analysis.rows.len()),
        None => println!("pearson r undefined (zero variance)"),
    }
    println!("{}", dir.display());
    Ok(dir)
}

pub fn visualize(config: RunConfig, args: &VisualizeArgs) -> CmdResult {
    let record: AttackRecord = read_json(&args.attack_dir.join("trace.json"))?;
    let input = load_gray(&args.attack_dir.join("input.png"))?;
    let adversarial = load_gray(&args.attack_dir.join("adversarial.png"))?;
    let spec = PreprocessSpec {
        width: input.width() as usize,
        height: input.height() as usize,
        channels: 1,
    };
    let x = data::preprocess_image(&input, &spec);
    let adv = data::preprocess_image(&adversarial, &spec);
    let dir = run_dir(&config, "visualize", args)?;
    let path = dir.join("visualization.png");
    data::export_visualization(
        &path,
        &x,
        &adv,
        &record.clean_landmarks,
        &record.final_landmarks,
        &record.targets,
        args.magnification,
    )?;
    println!("{}", path.display());
    Ok(dir)
}
