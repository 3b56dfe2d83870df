//! Accuracy reporting, attention aggregation over a dataset, and the
//! CSV / graymap heatmap export of the mean affinity.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::{write_pgm_p2, Dataset};
use crate::layers::Mode;
use crate::model::{argmax_labels, AttributeModel, Variant};
use crate::tensor::Tensor;
use crate::{Error, Result};

const EVAL_BATCH: usize = 64;

/// Per-attribute and mean accuracies for both heads where present.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_attribute_acc_f: Vec<f64>,
    pub per_attribute_acc_c: Option<Vec<f64>>,
    pub mean_acc_f: f64,
    pub mean_acc_c: Option<f64>,
    pub n_samples: usize,
}

/// Mean row-stochastic attention over a dataset.
#[derive(Clone, Debug)]
pub struct AffinitySummary {
    /// `[M × M]` row-major
    pub mean_attention: Vec<f64>,
    pub attribute_names: Vec<String>,
}

impl AffinitySummary {
    pub fn m(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.mean_attention[i * self.m() + j]
    }
}

fn check_dataset(model: &AttributeModel, dataset: &Dataset) -> Result<()> {
    if dataset.n() == 0 {
        return Err(Error::Contract("evaluate: empty dataset".into()));
    }
    if dataset.m() != model.m() {
        return Err(Error::Config(format!(
            "dataset has {} attributes, model expects {}",
            dataset.m(),
            model.m()
        )));
    }
    Ok(())
}

fn batch_tensor(dataset: &Dataset, start: usize, len: usize) -> Result<Tensor> {
    let (h, w, c) = dataset.image_dims();
    let stride = h * w * c;
    let v = dataset.images.values();
    Tensor::new(&[len, h, w, c], v[start * stride..(start + len) * stride].to_vec())
}

/// Per-attribute accuracy of both heads on the dataset, inference mode.
pub fn evaluate(model: &AttributeModel, dataset: &Dataset) -> Result<EvalReport> {
    check_dataset(model, dataset)?;
    let n = dataset.n();
    let m = model.m();
    let mut correct_f = vec![0usize; m];
    let mut correct_c = vec![0usize; m];
    let has_c = model.config.variant.has_correlation_net();
    let mut start = 0;
    while start < n {
        let len = EVAL_BATCH.min(n - start);
        let batch = batch_tensor(dataset, start, len)?;
        let out = model.forward(&batch, Mode::Infer)?;
        let pred_f = argmax_labels(&out.logits_f);
        let pred_c = out.logits_c.as_ref().map(argmax_labels);
        for i in 0..len {
            let truth = dataset.labels.row(start + i);
            for j in 0..m {
                if pred_f.get(i, j) == truth[j] {
                    correct_f[j] += 1;
                }
                if let Some(pc) = &pred_c {
                    if pc.get(i, j) == truth[j] {
                        correct_c[j] += 1;
                    }
                }
            }
        }
        start += len;
    }
    let acc = |c: &[usize]| -> Vec<f64> { c.iter().map(|&k| k as f64 / n as f64).collect() };
    let per_f = acc(&correct_f);
    let mean_f = per_f.iter().sum::<f64>() / m as f64;
    let (per_c, mean_c) = if has_c {
        let p = acc(&correct_c);
        let mu = p.iter().sum::<f64>() / m as f64;
        (Some(p), Some(mu))
    } else {
        (None, None)
    };
    Ok(EvalReport {
        per_attribute_acc_f: per_f,
        per_attribute_acc_c: per_c,
        mean_acc_f: mean_f,
        mean_acc_c: mean_c,
        n_samples: n,
    })
}

/// Mean of the attention weights the model actually used, sample by
/// sample over the dataset. Correlation variants only.
pub fn aggregate_affinity(model: &AttributeModel, dataset: &Dataset) -> Result<AffinitySummary> {
    if model.config.variant == Variant::Baseline {
        return Err(Error::UnsupportedVariant(
            "aggregate_affinity: the baseline variant has no attention weights".into(),
        ));
    }
    check_dataset(model, dataset)?;
    let n = dataset.n();
    let m = model.m();
    let mut acc = vec![0.0; m * m];
    let mut start = 0;
    while start < n {
        let len = EVAL_BATCH.min(n - start);
        let batch = batch_tensor(dataset, start, len)?;
        let out = model.forward(&batch, Mode::Infer)?;
        let w = out
            .attention
            .ok_or_else(|| Error::Contract("forward returned no attention".into()))?;
        let wv = w.values();
        for b in 0..len {
            for k in 0..m * m {
                acc[k] += wv[b * m * m + k];
            }
        }
        start += len;
    }
    for v in acc.iter_mut() {
        *v /= n as f64;
    }
    Ok(AffinitySummary {
        mean_attention: acc,
        attribute_names: dataset.attribute_names.clone(),
    })
}

/// CSV: header of attribute names, then M rows of M values at 9
/// significant digits. PGM: P2 graymap, values mapped linearly from
/// [0, matrix max] to [0, 255].
pub fn export_heatmap(
    summary: &AffinitySummary,
    path_csv: impl AsRef<Path>,
    path_pgm: impl AsRef<Path>,
) -> Result<()> {
    let m = summary.m();
    let csv_path = path_csv.as_ref();
    let file = File::create(csv_path).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let werr = |e| Error::io(csv_path.display().to_string(), e);
    writeln!(out, "{}", summary.attribute_names.join(",")).map_err(werr)?;
    for i in 0..m {
        let row: Vec<String> = (0..m).map(|j| format!("{:.8e}", summary.at(i, j))).collect();
        writeln!(out, "{}", row.join(",")).map_err(werr)?;
    }
    drop(out);

    let max = summary
        .mean_attention
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let pixels: Vec<u8> = summary
        .mean_attention
        .iter()
        .map(|&v| {
            if max > 0.0 {
                (v / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    write_pgm_p2(path_pgm, m, m, &pixels)
}

/// Reads the CSV layout written by `export_heatmap`.
pub fn read_affinity_csv(path: impl AsRef<Path>) -> Result<AffinitySummary> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(Ok(l)) => l,
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "missing header row".into(),
            })
        }
    };
    let names: Vec<String> = header.split(',').map(str::to_string).collect();
    let m = names.len();
    let mut values = Vec::with_capacity(m * m);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 2,
            msg: e.to_string(),
        })?;
        if line.is_empty() {
            continue;
        }
        let row: Vec<&str> = line.split(',').collect();
        if row.len() != m {
            return Err(Error::Parse {
                line: i + 2,
                msg: format!("expected {m} columns, found {}", row.len()),
            });
        }
        for tok in row {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: i + 2,
                msg: format!("bad value '{tok}'"),
            })?;
            values.push(v);
        }
    }
    if values.len() != m * m {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected {m}x{m} matrix, found {} values", values.len()),
        });
    }
    Ok(AffinitySummary {
        mean_attention: values,
        attribute_names: names,
    })
}

/// Aligned per-attribute accuracy table with a trailing average row.
pub fn format_report_table(report: &EvalReport, names: &[String]) -> String {
    let name_w = names.iter().map(|n| n.len()).max().unwrap_or(9).max(9);
    let mut s = String::new();
    let has_c = report.per_attribute_acc_c.is_some();
    s.push_str(&format!("{:<name_w$}  {:>8}", "Attribute", "Acc-F"));
    if has_c {
        s.push_str(&format!("  {:>8}", "Acc-C"));
    }
    s.push('\n');
    for (j, name) in names.iter().enumerate() {
        s.push_str(&format!(
            "{:<name_w$}  {:>8.4}",
            name, report.per_attribute_acc_f[j]
        ));
        if let Some(c) = &report.per_attribute_acc_c {
            s.push_str(&format!("  {:>8.4}", c[j]));
        }
        s.push('\n');
    }
    s.push_str(&format!("{:<name_w$}  {:>8.4}", "Average", report.mean_acc_f));
    if let Some(c) = report.mean_acc_c {
        s.push_str(&format!("  {:>8.4}", c));
    }
    s.push('\n');
    s
}
