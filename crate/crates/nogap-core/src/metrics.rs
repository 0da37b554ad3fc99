//! Evaluation metrics and the per-run report record.

use crate::error::{NogapError, Result};
use crate::gp::{z_for_level, Posterior};
use crate::tensor::Tensor;

/// Relative L2 error in percent: 100·‖pred − truth‖₂ / ‖truth‖₂.
pub fn relative_error(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(NogapError::shape(
            "relative_error",
            format!("{:?}", truth.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, t) in pred.data().iter().zip(truth.data()) {
        num += (p - t) * (p - t);
        den += t * t;
    }
    if den == 0.0 {
        return Err(NogapError::domain(
            "relative_error",
            "reference field has zero norm",
        ));
    }
    Ok(100.0 * (num / den).sqrt())
}

/// Pooled empirical coverage: the fraction of grid points (across all
/// samples) whose true value falls inside the central credible interval of
/// the given level.
pub fn coverage(posterior: &Posterior, truth: &Tensor, level: f64) -> Result<f64> {
    if posterior.mean.shape() != truth.shape() {
        return Err(NogapError::shape(
            "coverage",
            format!("{:?}", posterior.mean.shape()),
            format!("{:?}", truth.shape()),
        ));
    }
    let z = z_for_level(level)?;
    let mut inside = 0usize;
    for ((m, s), t) in posterior
        .mean
        .data()
        .iter()
        .zip(posterior.std.data())
        .zip(truth.data())
    {
        if (t - m).abs() <= z * s {
            inside += 1;
        }
    }
    Ok(inside as f64 / truth.data().len() as f64)
}

/// Summary of one evaluation run, serializable as a key–value text file and
/// as a CSV row for aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub problem: String,
    pub variant: String,
    pub seed: u64,
    pub n_train: usize,
    pub per_sample_error: Vec<f64>,
    pub mean_error: f64,
    pub std_error: f64,
    pub mean_predictive_std: f64,
    pub coverage95: f64,
    pub runtime_seconds: f64,
}

impl EvalReport {
    /// Build a report from a batched posterior (`[M, grid…]` fields) against
    /// the matching truth tensor.
    pub fn from_posterior(
        problem: &str,
        variant: &str,
        seed: u64,
        n_train: usize,
        posterior: &Posterior,
        truth: &Tensor,
        runtime_seconds: f64,
    ) -> Result<Self> {
        if posterior.mean.shape() != truth.shape() || truth.rank() < 2 {
            return Err(NogapError::shape(
                "EvalReport",
                "matching [M, grid…] posterior and truth",
                format!("{:?} vs {:?}", posterior.mean.shape(), truth.shape()),
            ));
        }
        let m = truth.shape()[0];
        let o: usize = truth.shape()[1..].iter().product();
        let field_shape: Vec<usize> = truth.shape()[1..].to_vec();
        let mut per_sample_error = Vec::with_capacity(m);
        for s in 0..m {
            let pred = Tensor::new(
                field_shape.clone(),
                posterior.mean.data()[s * o..(s + 1) * o].to_vec(),
            )?;
            let tru = Tensor::new(field_shape.clone(), truth.data()[s * o..(s + 1) * o].to_vec())?;
            per_sample_error.push(relative_error(&pred, &tru)?);
        }
        let mean_error = per_sample_error.iter().sum::<f64>() / m as f64;
        let std_error = (per_sample_error
            .iter()
            .map(|e| (e - mean_error) * (e - mean_error))
            .sum::<f64>()
            / m as f64)
            .sqrt();
        let mean_predictive_std =
            posterior.std.data().iter().sum::<f64>() / posterior.std.data().len() as f64;
        let coverage95 = coverage(posterior, truth, 0.95)?;
        Ok(EvalReport {
            problem: problem.to_string(),
            variant: variant.to_string(),
            seed,
            n_train,
            per_sample_error,
            mean_error,
            std_error,
            mean_predictive_std,
            coverage95,
            runtime_seconds,
        })
    }

    /// Key–value text form (one `key = value` per line).
    pub fn to_text(&self) -> String {
        let errors: Vec<String> = self.per_sample_error.iter().map(|e| format!("{e:e}")).collect();
        format!(
            "problem = {}\nvariant = {}\nseed = {}\nn_train = {}\nmean_error = {:e}\nstd_error = {:e}\nmean_predictive_std = {:e}\ncoverage95 = {:e}\nruntime_seconds = {:e}\nper_sample_error = {}\n",
            self.problem,
            self.variant,
            self.seed,
            self.n_train,
            self.mean_error,
            self.std_error,
            self.mean_predictive_std,
            self.coverage95,
            self.runtime_seconds,
            errors.join(",")
        )
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                fields.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| -> Result<String> {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| NogapError::format("EvalReport", format!("missing field '{k}'")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| NogapError::format("EvalReport", format!("bad number in '{k}'")))
        };
        let per_sample_error = get("per_sample_error")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| NogapError::format("EvalReport", "bad per-sample error"))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(EvalReport {
            problem: get("problem")?,
            variant: get("variant")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| NogapError::format("EvalReport", "bad seed"))?,
            n_train: get("n_train")?
                .parse()
                .map_err(|_| NogapError::format("EvalReport", "bad n_train"))?,
            per_sample_error,
            mean_error: num("mean_error")?,
            std_error: num("std_error")?,
            mean_predictive_std: num("mean_predictive_std")?,
            coverage95: num("coverage95")?,
            runtime_seconds: num("runtime_seconds")?,
        })
    }

    pub fn csv_header() -> &'static str {
        "problem,variant,seed,n_train,mean_error,std_error,mean_predictive_std,coverage95,runtime_seconds"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:e},{:e},{:e},{:e},{:e}",
            self.problem,
            self.variant,
            self.seed,
            self.n_train,
            self.mean_error,
            self.std_error,
            self.mean_predictive_std,
            self.coverage95,
            self.runtime_seconds
        )
    }
}
