use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use gafield::aero::{drag_from_prediction, FieldModel};
use gafield::checkpoint::{Checkpoint, TaskInfo};
use gafield::data::io::{list_samples, read_sample, write_sample, Dtype};
use gafield::data::synth::synth_corpus;
use gafield::data::{sample_points, Normalizer, Sample, Task, TaskSpec};
use gafield::metrics::{sample_metrics, MetricReport, Metrics, VectorMode};
use gafield::model::{GaField, Injection};
use gafield::pointcloud::PointCloud;
use gafield::tensor::Real;
use gafield::training::{Dataset, Example, LogRow, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::{CliError, ConfigArgs, Precision};

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Converts a library error, naming the file it concerns.
fn at<T>(path: &Path, r: gafield::Result<T>) -> Result<T> {
    r.map_err(|e| {
        let mut c = CliError::from(e);
        c.message = format!("{}: {}", path.display(), c.message);
        c
    })
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.toml")
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    Ok(RunConfig::load(args.config.as_deref(), &args.set)?)
}

fn config_inputs(args: &ConfigArgs) -> Vec<PathBuf> {
    args.config.iter().cloned().collect()
}

pub fn synth(out: &Path, args: &ConfigArgs, csv: bool, precision: Precision) -> Result<()> {
    let config = load_config(args)?;
    let samples = synth_corpus(&config.data.corpus)?;
    create_dir(out)?;
    let dtype = match precision {
        Precision::F32 => Dtype::F32,
        Precision::F64 => Dtype::F64,
    };
    let ext = if csv { "csv" } else { "gpc" };
    for s in &samples {
        let path = out.join(format!("{}.{ext}", s.meta.name));
        at(&path, write_sample(&path, s, dtype))?;
    }
    let mut m = Manifest::new("synth", &config_inputs(args), Some(config.clone()))?;
    m.seeds.insert("corpus".into(), config.data.corpus.seed);
    m.write(&out.join("manifest.toml"))?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn load_samples(dir: &Path) -> Result<Vec<(PathBuf, Sample)>> {
    let files = at(dir, list_samples(dir))?;
    if files.is_empty() {
        return Err(CliError::data(format!("no sample files in {}", dir.display())));
    }
    files
        .into_iter()
        .map(|p| {
            let s = at(&p, read_sample(&p))?;
            Ok((p, s))
        })
        .collect()
}

fn split(config: &RunConfig, samples: Vec<Sample>) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    let data = &config.data;
    for (i, s) in samples.into_iter().enumerate() {
        let held = if !data.val_categories.is_empty() {
            data.val_categories.contains(&s.meta.category)
        } else {
            data.holdout_every > 0 && i % data.holdout_every == data.holdout_every - 1
        };
        if held {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    if train.is_empty() {
        return Err(CliError::data("the split leaves no training samples"));
    }
    Ok((train, val))
}

fn task_clouds(samples: &[Sample], spec: &TaskSpec, points: usize, seed: u64) -> Result<Vec<PointCloud>> {
    Ok(samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let pc = s.task_cloud(spec)?;
            if points > 0 && pc.len() > points {
                Ok(sample_points(&pc, points, seed.wrapping_add(i as u64))?.0)
            } else {
                Ok(pc)
            }
        })
        .collect::<gafield::Result<Vec<_>>>()?)
}

/// Per-channel mean and population standard deviation of the targets.
fn fit_normalizer(clouds: &[PointCloud]) -> Result<Normalizer> {
    let width = clouds[0].targets().map_or(0, |t| t.cols());
    let mut sum = vec![0.0; width];
    let mut sq = vec![0.0; width];
    let mut n = 0usize;
    for pc in clouds {
        let t = pc.targets().expect("task clouds carry targets");
        for i in 0..t.rows() {
            for (k, v) in t.row(i).iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        n += t.rows();
    }
    let mean: Vec<Real> = sum.iter().map(|s| s / n as Real).collect();
    let std: Vec<Real> = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n as Real - m * m).max(0.0).sqrt())
        .collect();
    Normalizer::new(mean, std).map_err(|e| CliError::data(format!("cannot fit a normalizer: {e}")))
}

fn examples(model: &GaField, samples: &[Sample], clouds: Vec<PointCloud>, norm: &Normalizer) -> Result<Vec<Example>> {
    Ok(samples
        .par_iter()
        .zip(clouds.into_par_iter())
        .map(|(s, pc)| {
            Ok(Example {
                name: s.meta.name.clone(),
                input: model.prepare(&pc, &s.meta.condition)?,
                target: norm.normalize(pc.targets().expect("task clouds carry targets"))?,
            })
        })
        .collect::<gafield::Result<Vec<_>>>()?)
}

pub fn train(args: &ConfigArgs, out: &Path, resume: Option<&Path>, max_epochs: Option<usize>) -> Result<()> {
    let config = load_config(args)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    // kept below 2⁶³ so manifests stay valid TOML integers
    let model_seed = rng.random::<u64>() >> 1;
    let sample_seed = rng.random::<u64>() >> 1;
    let spec = config.task.spec()?;

    let loaded = load_samples(&config.data.dir)?;
    let mut inputs = config_inputs(args);
    inputs.extend(loaded.iter().map(|(p, _)| p.clone()));
    let (train_set, val_set) = split(&config, loaded.into_iter().map(|(_, s)| s).collect())?;
    let total = config.train.epochs * config.train.steps_per_epoch(train_set.len());
    gafield::training::lr_at(0, &config.train, total)?;
    let train_clouds = task_clouds(&train_set, &spec, config.data.points, sample_seed)?;
    let val_clouds = task_clouds(&val_set, &spec, config.data.points, sample_seed.wrapping_add(1 << 32))?;
    let normalizer = match config.task.normalizer()? {
        Some(n) => n,
        None => fit_normalizer(&train_clouds)?,
    };
    let task = TaskInfo {
        spec: spec.clone(),
        normalizer: normalizer.clone(),
    };

    let mut trainer = match resume {
        Some(path) => {
            inputs.push(path.to_path_buf());
            let ck = at(path, Checkpoint::load(path))?;
            if ck.model.config != config.model {
                return Err(CliError::config(
                    "the checkpoint's model section differs from the configuration",
                ));
            }
            if ck.task.as_ref().is_some_and(|t| *t != task) {
                return Err(CliError::config(
                    "the checkpoint was trained for a different task or normalization",
                ));
            }
            ck.into_trainer(Some(config.train.clone()))?
        }
        None => Trainer::new(GaField::new(config.model.clone(), model_seed)?, config.train.clone())?,
    };
    let data = Dataset {
        train: examples(&trainer.model, &train_set, train_clouds, &normalizer)?,
        val: examples(&trainer.model, &val_set, val_clouds, &normalizer)?,
    };

    create_dir(out)?;
    let mut manifest = Manifest::new("train", &inputs, Some(config.clone()))?;
    manifest.seeds.insert("master".into(), config.train.seed);
    manifest.seeds.insert("model_init".into(), model_seed);
    manifest.seeds.insert("point_sampling".into(), sample_seed);
    manifest.write(&out.join("manifest.toml"))?;

    let log_path = out.join("loss_log.csv");
    let mut log_text = format!("{}\n", LogRow::HEADER);
    if resume.is_some() {
        if let Ok(old) = fs::read_to_string(&log_path) {
            for line in old.lines().skip(1) {
                let epoch: Option<usize> = line.split(',').next().and_then(|e| e.parse().ok());
                if epoch.is_some_and(|e| e <= trainer.epoch) {
                    log_text.push_str(line);
                    log_text.push('\n');
                }
            }
        }
    }
    write_text(&log_path, &log_text)?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;

    eprintln!(
        "training on {} samples ({} held out), {} parameters",
        data.train.len(),
        data.val.len(),
        trainer.model.parameter_count()
    );
    trainer.fit_for(&data, max_epochs.unwrap_or(usize::MAX), |t, row, best| {
        let ck = Checkpoint::from_trainer(t, Some(task.clone()));
        ck.save(&out.join("last.ckpt"))?;
        if best {
            ck.save(&out.join("best.ckpt"))?;
        }
        writeln!(log, "{}", row.csv_line())?;
        let val = row.val_loss.map_or(String::new(), |v| format!(" val {v:.5}"));
        eprintln!(
            "epoch {:>4} step {:>6} lr {:.3e} train {:.5}{val}",
            row.epoch, row.step, row.lr, row.train_loss
        );
        Ok(())
    })?;
    println!("checkpoints in {}", out.display());
    Ok(())
}

pub enum EvalSource {
    Model {
        checkpoint: PathBuf,
        data: PathBuf,
        injection: Injection,
    },
    Predictions {
        dir: PathBuf,
        task: Task,
    },
}

fn model_prediction(
    ck: &Checkpoint,
    task: &TaskInfo,
    s: &Sample,
    pc: &PointCloud,
    mode: Injection,
) -> gafield::Result<gafield::tensor::Array> {
    let input = ck.model.prepare(pc, &s.meta.condition)?;
    task.normalizer.denormalize(&ck.model.predict(&input, mode)?)
}

pub fn eval(source: &EvalSource, mode: VectorMode, out: &Path) -> Result<()> {
    let (rows, inputs) = match source {
        EvalSource::Model {
            checkpoint,
            data,
            injection,
        } => {
            let ck = at(checkpoint, Checkpoint::load(checkpoint))?;
            let task = ck.task()?.clone();
            let samples = load_samples(data)?;
            let rows = samples
                .par_iter()
                .map(|(_, s)| {
                    let pc = s.task_cloud(&task.spec)?;
                    let pred = model_prediction(&ck, &task, s, &pc, *injection)?;
                    Ok((
                        s.meta.name.clone(),
                        sample_metrics(&pred, pc.targets().expect("targets"), mode)?,
                    ))
                })
                .collect::<gafield::Result<Vec<_>>>()?;
            let mut inputs: Vec<PathBuf> = samples.into_iter().map(|(p, _)| p).collect();
            inputs.push(checkpoint.clone());
            (rows, inputs)
        }
        EvalSource::Predictions { dir, task } => {
            let samples = load_samples(dir)?;
            let rows = samples
                .par_iter()
                .map(|(_, s)| {
                    let sub = s.select(&s.task_points(*task))?;
                    let pred = sub.field("prediction")?;
                    let truth = sub.field(task.field())?;
                    Ok((s.meta.name.clone(), sample_metrics(pred, truth, mode)?))
                })
                .collect::<gafield::Result<Vec<_>>>()?;
            (rows, samples.into_iter().map(|(p, _)| p).collect())
        }
    };
    let per_sample: Vec<Vec<(String, Metrics)>> = rows.iter().map(|(_, r)| r.clone()).collect();
    let report = MetricReport::average(&per_sample)?;

    create_dir(out)?;
    write_text(&out.join("metrics.csv"), &report.to_csv()?)?;
    let mut text = String::from("sample,field,mse,mae,maxae,r2,rel_l2,rel_l1\n");
    for (name, labelled) in &rows {
        for (label, m) in labelled {
            text.push_str(&format!(
                "{name},{label},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                m.mse, m.mae, m.maxae, m.r2, m.rel_l2, m.rel_l1
            ));
        }
    }
    write_text(&out.join("per_sample.csv"), &text)?;
    Manifest::new("eval", &inputs, None)?.write(&out.join("manifest.toml"))?;
    println!("{report}");
    Ok(())
}

pub fn predict(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let ck = at(checkpoint, Checkpoint::load(checkpoint))?;
    let task = ck.task()?.clone();
    let s = at(input, read_sample(input))?;
    let pc = s.task_inputs(&task.spec)?;
    let pred = model_prediction(&ck, &task, &s, &pc, Injection::Full)?;
    let mut sub = s.select(&s.task_points(task.spec.task))?;
    sub.fields.insert("prediction".into(), pred);
    create_parent(out)?;
    at(out, write_sample(out, &sub, Dtype::F64))?;
    Manifest::new("predict", &[checkpoint.to_path_buf(), input.to_path_buf()], None)?.write(&manifest_path(out))?;
    println!("wrote {} predicted points to {}", sub.cloud.len(), out.display());
    Ok(())
}

pub fn drag(
    pressure: &Path,
    wss: &Path,
    input: &Path,
    rho: Real,
    total_area: Option<Real>,
    out: &Path,
    chart: Option<&Path>,
) -> Result<()> {
    let p = at(pressure, Checkpoint::load(pressure))?;
    let w = at(wss, Checkpoint::load(wss))?;
    let (pt, wt) = (p.task()?, w.task()?);
    let s = at(input, read_sample(input))?;
    let report = drag_from_prediction(
        FieldModel {
            model: &p.model,
            normalizer: &pt.normalizer,
            spec: &pt.spec,
        },
        FieldModel {
            model: &w.model,
            normalizer: &wt.normalizer,
            spec: &wt.spec,
        },
        &s,
        rho,
        total_area,
    )?;
    let csv = report.to_csv()?;
    write_text(out, &csv)?;
    if let Some(c) = chart {
        write_text(c, &report.chart_json())?;
    }
    let inputs = [pressure.to_path_buf(), wss.to_path_buf(), input.to_path_buf()];
    Manifest::new("drag", &inputs, None)?.write(&manifest_path(out))?;
    print!("{csv}");
    Ok(())
}
