//! Implementations of the five `nogap` subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nogap_core::container::NgpdFile;
use nogap_core::datagen::{self, Dataset};
use nogap_core::gp::{ci_band, GpTrainer, TrainOutcome, TrainedModel};
use nogap_core::metrics::EvalReport;
use nogap_core::{NogapError, Result};

use crate::config::ExperimentConfig;

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn echo_config(config: &ExperimentConfig) -> Result<()> {
    write_text(&config.out_dir.join("config.toml"), &config.echo_toml()?)
}

pub fn generate(config: &ExperimentConfig, force: bool) -> Result<()> {
    let train_path = config.train_path();
    let test_path = config.test_path();
    for p in [&train_path, &test_path] {
        if p.exists() && !force {
            return Err(NogapError::Config(format!(
                "refusing to overwrite existing dataset {} (pass --force to regenerate)",
                p.display()
            )));
        }
    }
    let gen = config.gen_config()?;
    let started = Instant::now();
    let (train, test) = datagen::generate(&gen)?;
    fs::create_dir_all(config.data_dir())?;
    train.write(&train_path)?;
    test.write(&test_path)?;
    let train_hash = train.to_ngpd()?.content_hash()?;
    let test_hash = test.to_ngpd()?.content_hash()?;
    let manifest = format!(
        "problem = {}\nfamily_hash = {}\nn_train = {}\nn_test = {}\nresolution = {}\nseed = {}\nnu = {:e}\ntrain_file = train.ngpd\ntrain_sha256 = {}\ntest_file = test.ngpd\ntest_sha256 = {}\n",
        gen.problem.as_str(),
        gen.family_hash(),
        gen.n_train,
        gen.n_test,
        gen.resolution,
        gen.seed,
        gen.nu,
        train_hash,
        test_hash,
    );
    write_text(&config.data_dir().join("manifest.txt"), &manifest)?;
    echo_config(config)?;
    println!(
        "generated {} train={} test={} in {:.1}s",
        gen.problem.as_str(),
        gen.n_train,
        gen.n_test,
        started.elapsed().as_secs_f64()
    );
    println!("  train sha256 {train_hash}");
    println!("  test  sha256 {test_hash}");
    Ok(())
}

fn load_dataset(config: &ExperimentConfig, path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(NogapError::Config(format!(
            "dataset {} not found (run `nogap generate` first)",
            path.display()
        )));
    }
    let ds = Dataset::read(path)?;
    let expected = config.gen_config()?.family_hash();
    if ds.family_hash != expected {
        return Err(NogapError::Contract(format!(
            "dataset {} belongs to a different generation family ({} != {})",
            path.display(),
            ds.family_hash,
            expected
        )));
    }
    Ok(ds)
}

fn training_log_csv(outcome: &TrainOutcome) -> String {
    let ls_count = outcome.log.first().map_or(0, |r| r.lengthscales.len());
    let mut header = String::from("iteration,objective,noise_std");
    if ls_count > 0 {
        header.push_str(",lengthscale_x");
        for a in 0..ls_count - 1 {
            header.push_str(&format!(",lengthscale_f{a}"));
        }
    }
    let mut csv = header;
    csv.push('\n');
    for row in &outcome.log {
        csv.push_str(&format!("{},{:e},{:e}", row.iteration, row.objective, row.noise_std));
        for l in &row.lengthscales {
            csv.push_str(&format!(",{l:e}"));
        }
        csv.push('\n');
    }
    csv
}

pub fn train(config: &ExperimentConfig) -> Result<()> {
    let dataset = load_dataset(config, &config.train_path())?;
    let trainer = GpTrainer::with_normalizer(
        config.model_config()?,
        &dataset.input_fields()?,
        &dataset.outputs,
        dataset.normalizer,
    )?;
    let started = Instant::now();
    let outcome = trainer.train(&config.train_config())?;
    let elapsed = started.elapsed().as_secs_f64();

    fs::create_dir_all(config.variant_dir())?;
    write_text(
        &config.variant_dir().join("training_log.csv"),
        &training_log_csv(&outcome),
    )?;
    let mut ckpt = outcome.model.to_ngpd()?;
    ckpt.insert_meta("dataset.family_hash", dataset.family_hash.clone());
    ckpt.insert_meta("dataset.n_train", dataset.len().to_string());
    ckpt.insert_meta("training.seed", config.seed.to_string());
    ckpt.insert_meta("training.iterations", config.training.iterations.to_string());
    ckpt.insert_meta("training.best_iteration", outcome.best_iteration.to_string());
    ckpt.insert_meta("training.initial_objective", format!("{:.17e}", outcome.initial_objective));
    ckpt.insert_meta("training.best_objective", format!("{:.17e}", outcome.best_objective));
    ckpt.insert_meta("training.diverged", outcome.diverged.to_string());
    ckpt.write_to(config.checkpoint_path())?;
    echo_config(config)?;

    println!(
        "trained {}/{} on {} samples: objective {:.6} -> {:.6} (best at iteration {}) in {:.1}s",
        config.problem,
        config.variant,
        dataset.len(),
        outcome.initial_objective,
        outcome.best_objective,
        outcome.best_iteration,
        elapsed
    );
    println!("  checkpoint {}", config.checkpoint_path().display());
    if outcome.diverged {
        return Err(NogapError::numeric(
            "train",
            "optimization diverged; the best finite checkpoint was saved",
        ));
    }
    Ok(())
}

fn load_checkpoint(config: &ExperimentConfig) -> Result<(TrainedModel, NgpdFile)> {
    let path = config.checkpoint_path();
    if !path.exists() {
        return Err(NogapError::Config(format!(
            "checkpoint {} not found (run `nogap train` first)",
            path.display()
        )));
    }
    let file = NgpdFile::read_from(&path)?;
    let model = TrainedModel::from_ngpd(&file)?;
    Ok((model, file))
}

fn validate_pair(config: &ExperimentConfig, ckpt: &NgpdFile, dataset: &Dataset) -> Result<()> {
    let ckpt_family = ckpt.require_meta("dataset.family_hash")?;
    if ckpt_family != dataset.family_hash {
        return Err(NogapError::Contract(format!(
            "checkpoint was trained on family {} but the dataset has family {}",
            ckpt_family, dataset.family_hash
        )));
    }
    if ckpt.meta("variant") != Some(config.variant.as_str()) {
        return Err(NogapError::Contract(format!(
            "checkpoint holds variant {:?}, config asks for {}",
            ckpt.meta("variant"),
            config.variant
        )));
    }
    Ok(())
}

pub fn predict(config: &ExperimentConfig, include_noise: bool) -> Result<()> {
    let dataset = load_dataset(config, &config.test_path())?;
    let (model, ckpt) = load_checkpoint(config)?;
    validate_pair(config, &ckpt, &dataset)?;
    let posterior = model.predict(&dataset.input_fields()?, include_noise)?;
    let mut out = NgpdFile::new();
    out.insert_meta("kind", "predictions");
    out.insert_meta("problem", config.problem.clone());
    out.insert_meta("variant", config.variant.clone());
    out.insert_meta("include_noise", include_noise.to_string());
    out.insert_meta("family_hash", dataset.family_hash.clone());
    out.push_tensor("mean", posterior.mean.clone());
    out.push_tensor("std", posterior.std.clone());
    let path = config.variant_dir().join("predictions.ngpd");
    fs::create_dir_all(config.variant_dir())?;
    out.write_to(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn evaluate(config: &ExperimentConfig, include_noise: bool) -> Result<()> {
    let dataset = load_dataset(config, &config.test_path())?;
    let (model, ckpt) = load_checkpoint(config)?;
    validate_pair(config, &ckpt, &dataset)?;
    let n_train: usize = ckpt
        .require_meta("dataset.n_train")?
        .parse()
        .map_err(|_| NogapError::format("evaluate", "bad dataset.n_train in checkpoint"))?;

    let started = Instant::now();
    let posterior = model.predict(&dataset.input_fields()?, include_noise)?;
    let runtime = started.elapsed().as_secs_f64();
    let report = EvalReport::from_posterior(
        &config.problem,
        &config.variant,
        config.seed,
        n_train,
        &posterior,
        &dataset.outputs,
        runtime,
    )?;

    let dir = config.variant_dir();
    fs::create_dir_all(&dir)?;
    write_text(&dir.join("eval.kv"), &report.to_text())?;
    let mut per_sample = String::from("sample,relative_error_percent\n");
    for (i, e) in report.per_sample_error.iter().enumerate() {
        per_sample.push_str(&format!("{i},{e:e}\n"));
    }
    write_text(&dir.join("per_sample_errors.csv"), &per_sample)?;

    let (lower, upper) = ci_band(&posterior, 0.95)?;
    let m = dataset.len();
    let o: usize = dataset.grid_shape().iter().product();
    if dataset.grid.len() == 1 {
        let plots = dir.join("plots");
        fs::create_dir_all(&plots)?;
        let xs = &dataset.grid[0];
        for s in 0..m {
            let mut csv = String::from("x,truth,mean,lower95,upper95\n");
            for j in 0..o {
                csv.push_str(&format!(
                    "{:e},{:e},{:e},{:e},{:e}\n",
                    xs[j],
                    dataset.outputs.data()[s * o + j],
                    posterior.mean.data()[s * o + j],
                    lower.data()[s * o + j],
                    upper.data()[s * o + j],
                ));
            }
            write_text(&plots.join(format!("sample_{s:03}.csv")), &csv)?;
        }
    } else {
        let mut fields = NgpdFile::new();
        fields.insert_meta("kind", "evaluation_fields");
        fields.insert_meta("problem", config.problem.clone());
        fields.insert_meta("variant", config.variant.clone());
        let abs_error = posterior
            .mean
            .zip_map(&dataset.outputs, |p, t| (p - t).abs())?;
        fields.push_tensor("truth", dataset.outputs.clone());
        fields.push_tensor("mean", posterior.mean.clone());
        fields.push_tensor("std", posterior.std.clone());
        fields.push_tensor("abs_error", abs_error);
        fields.write_to(dir.join("fields.ngpd"))?;
    }

    print!("{}", report.to_text());
    Ok(())
}

fn collect_reports(dir: &Path, acc: &mut Vec<(PathBuf, EvalReport)>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_reports(&path, acc)?;
        } else if path.file_name().and_then(|n| n.to_str()) == Some("eval.kv") {
            let text = fs::read_to_string(&path)?;
            acc.push((path, EvalReport::parse_text(&text)?));
        }
    }
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn report(root: &Path) -> Result<()> {
    let mut found = Vec::new();
    collect_reports(root, &mut found)?;
    if found.is_empty() {
        return Err(NogapError::Config(format!(
            "no evaluation reports (eval.kv) found under {}",
            root.display()
        )));
    }

    let mut csv = String::from(EvalReport::csv_header());
    csv.push('\n');
    for (_, r) in &found {
        csv.push_str(&r.to_csv_row());
        csv.push('\n');
    }

    // Main table: (problem, variant) aggregated over runs.
    let mut groups: BTreeMap<(String, String), Vec<&EvalReport>> = BTreeMap::new();
    for (_, r) in &found {
        groups
            .entry((r.problem.clone(), r.variant.clone()))
            .or_default()
            .push(r);
    }
    let mut text = String::from("== results by problem and variant ==\n");
    text.push_str(&format!(
        "{:<10} {:<13} {:>4}  {:>18}  {:>10}  {:>14}\n",
        "problem", "variant", "runs", "rel_error_%", "coverage95", "mean_pred_std"
    ));
    for ((problem, variant), rs) in &groups {
        let (em, es) = mean_std(&rs.iter().map(|r| r.mean_error).collect::<Vec<_>>());
        let (cm, _) = mean_std(&rs.iter().map(|r| r.coverage95).collect::<Vec<_>>());
        let (sm, _) = mean_std(&rs.iter().map(|r| r.mean_predictive_std).collect::<Vec<_>>());
        text.push_str(&format!(
            "{:<10} {:<13} {:>4}  {:>8.3} ± {:>7.3}  {:>10.3}  {:>14.5}\n",
            problem,
            variant,
            rs.len(),
            em,
            es,
            cm,
            sm
        ));
    }

    // Sweep table: groups that were evaluated at several training sizes.
    let mut sweep: BTreeMap<(String, String), BTreeMap<usize, Vec<&EvalReport>>> = BTreeMap::new();
    for (_, r) in &found {
        sweep
            .entry((r.problem.clone(), r.variant.clone()))
            .or_default()
            .entry(r.n_train)
            .or_default()
            .push(r);
    }
    let mut sweep_text = String::new();
    for ((problem, variant), by_n) in &sweep {
        if by_n.len() < 2 {
            continue;
        }
        if sweep_text.is_empty() {
            sweep_text.push_str("\n== training-size sweep ==\n");
            sweep_text.push_str(&format!(
                "{:<10} {:<13} {:>8}  {:>18}  {:>22}\n",
                "problem", "variant", "n_train", "rel_error_%", "mean_pred_std"
            ));
        }
        for (n, rs) in by_n {
            let (em, es) = mean_std(&rs.iter().map(|r| r.mean_error).collect::<Vec<_>>());
            let (sm, ss) = mean_std(&rs.iter().map(|r| r.mean_predictive_std).collect::<Vec<_>>());
            sweep_text.push_str(&format!(
                "{:<10} {:<13} {:>8}  {:>8.3} ± {:>7.3}  {:>12.6} ± {:>7.6}\n",
                problem,
                variant,
                n,
                em,
                es,
                sm,
                ss
            ));
        }
    }
    text.push_str(&sweep_text);

    write_text(&root.join("report.csv"), &csv)?;
    write_text(&root.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
