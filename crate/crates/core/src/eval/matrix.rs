use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{padded_range, DiceAccumulator, Histogram};
use crate::config::ExperimentConfig;
use crate::error::{ensure, Error, Result};
use crate::nn::{Generator, Segmenter};
use crate::phantom::CLASS_NAMES;
use crate::pipeline::{Partition, Patch, PatchSet, PipelineConfig};
use crate::trainer::{metrics_ndjson, Mode, Trainer};
use crate::volume::DomainSample;

/// One row of the seven-experiment protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSpec {
    pub id: u8,
    pub name: String,
    pub mode: Mode,
    pub train_domains: Vec<usize>,
    pub test_domains: Vec<usize>,
    pub standardized: bool,
    /// Row whose trained model is evaluated instead of training anew.
    pub reuse: Option<u8>,
}

/// The seven rows for two domains.
pub fn matrix_rows() -> Vec<RowSpec> {
    let row = |id, name: &str, mode, train: &[usize], test: &[usize], standardized, reuse| RowSpec {
        id,
        name: name.to_string(),
        mode,
        train_domains: train.to_vec(),
        test_domains: test.to_vec(),
        standardized,
        reuse,
    };
    use Mode::*;
    vec![
        row(1, "No adaptation", SegmenterOnly, &[1], &[1], false, None),
        row(2, "No adaptation", SegmenterOnly, &[2], &[2], false, None),
        row(3, "Cross-testing", SegmenterOnly, &[1], &[2], false, Some(1)),
        row(4, "Cross-testing", SegmenterOnly, &[2], &[1], false, Some(2)),
        row(5, "Standardized", SegmenterOnly, &[1, 2], &[1, 2], true, None),
        row(6, "Without constraint", NoDiscriminator, &[1, 2], &[1, 2], false, None),
        row(7, "Adversarially normalized", Adversarial, &[1, 2], &[1, 2], false, None),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub id: u8,
    pub name: String,
    pub mode: Mode,
    pub train_domains: Vec<usize>,
    pub test_domains: Vec<usize>,
    pub standardized: bool,
    /// Hard Dice of CSF, GM and WM on the test patches.
    pub dice: Vec<f64>,
    pub mean_dice: f64,
    /// Some class was absent from both prediction and truth.
    pub dice_empty: bool,
    /// Validation-patch JSD of inputs and of generator outputs.
    pub jsd_inputs: Option<f64>,
    pub jsd_outputs: Option<f64>,
    pub epochs: usize,
    pub config_hash: String,
    pub runtime_seconds: f64,
    pub status: RowStatus,
}

impl ExperimentReport {
    pub fn is_ok(&self) -> bool {
        self.status == RowStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin_center: f64,
    pub input_mass: f64,
    pub normalized_mass: f64,
    pub class: String,
}

/// Per-class intensity histograms of validation inputs and generator outputs
/// for one row and one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramTable {
    pub row: u8,
    pub domain: usize,
    pub rows: Vec<HistogramRow>,
}

impl HistogramTable {
    pub fn file_name(&self) -> String {
        format!("histograms_exp{}_domain{}.csv", self.row, self.domain)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_center,input_mass,normalized_mass,class\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.bin_center, r.input_mass, r.normalized_mass, r.class);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowDelta {
    pub from: u8,
    pub to: u8,
    /// Mean Dice of `to` minus mean Dice of `from`.
    pub mean_dice_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub reports: Vec<ExperimentReport>,
    pub histograms: Vec<HistogramTable>,
    pub deltas: Vec<RowDelta>,
}

impl MatrixResult {
    pub fn report(&self, id: u8) -> Option<&ExperimentReport> {
        self.reports.iter().find(|r| r.id == id)
    }
}

/// Hard Dice of the foreground classes of `S(G(x))` over all voxels of
/// `patches`.
pub fn evaluate_patches(g: Option<&Generator>, s: &Segmenter, patches: &[Patch]) -> Result<(Vec<f64>, bool)> {
    ensure!(!patches.is_empty(), Validation, "no patches to evaluate");
    let preds: Vec<Vec<u8>> = patches
        .par_iter()
        .map(|p| {
            let x = p.image_tensor();
            let xhat = match g {
                Some(g) => g.forward(&x)?,
                None => x,
            };
            Ok(s.forward(&xhat)?.argmax())
        })
        .collect::<Result<_>>()?;
    let mut acc = DiceAccumulator::new(s.classes());
    for (pred, p) in preds.iter().zip(patches) {
        acc.add(pred, &p.mask);
    }
    Ok(acc.foreground_scores())
}

/// Class histograms of inputs and generator outputs over the validation
/// patches of each domain, on a shared binning per row.
pub fn normalization_histograms(row: u8, g: &Generator, val: &[Patch], classes: usize, bins: usize) -> Result<Vec<HistogramTable>> {
    let outputs: Vec<Vec<f64>> = val.par_iter().map(|p| Ok(g.forward(&p.image_tensor())?.into_data())).collect::<Result<_>>()?;
    let fg = val.iter().zip(&outputs).flat_map(|(p, o)| {
        p.mask.iter().zip(p.image.iter().zip(o)).filter(|(&l, _)| l != 0).flat_map(|(_, (&i, &o))| [i as f64, o])
    });
    let (lo, hi) = padded_range(fg);
    let mut domains: Vec<usize> = val.iter().map(|p| p.domain).collect();
    domains.sort_unstable();
    domains.dedup();
    let mut tables = Vec::new();
    for domain in domains {
        let mut rows = Vec::new();
        for class in 1..classes as u8 {
            let mut hin = Histogram::new(lo, hi, bins)?;
            let mut hout = Histogram::new(lo, hi, bins)?;
            for (p, o) in val.iter().zip(&outputs).filter(|(p, _)| p.domain == domain) {
                for ((&l, &i), &y) in p.mask.iter().zip(&p.image).zip(o) {
                    if l == class {
                        hin.add(i as f64);
                        hout.add(y);
                    }
                }
            }
            let name = CLASS_NAMES.get(class as usize).map_or_else(|| format!("class{class}"), |s| s.to_string());
            for ((c, a), b) in hin.centers().into_iter().zip(hin.mass()).zip(hout.mass()) {
                rows.push(HistogramRow { bin_center: c, input_mass: a, normalized_mass: b, class: name.clone() });
            }
        }
        tables.push(HistogramTable { row, domain, rows });
    }
    Ok(tables)
}

fn row_hash(config: &ExperimentConfig, row: &RowSpec) -> String {
    let doc = serde_json::json!({ "config": config, "row": row });
    Sha256::digest(doc.to_string().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn class_counts(patches: &[Patch], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for p in patches {
        for &l in &p.mask {
            counts[l as usize] += 1;
        }
    }
    counts
}

struct Trained {
    trainer: Trainer,
}

fn train_row(config: &ExperimentConfig, set: &PatchSet, row: &RowSpec, out: Option<&Path>) -> Result<Trained> {
    let train = set.select(Partition::Train, &row.train_domains);
    let val = set.select(Partition::Validation, &row.train_domains);
    ensure!(!train.is_empty() && !val.is_empty(), Validation, "row {} has no training or validation patches", row.id);
    let loss = config.loss.resolve(&class_counts(&train, config.networks.segmenter.classes))?;
    let mut trainer = Trainer::new(row.mode, config.train.clone(), config.networks.clone(), loss)?;
    let result = trainer.fit(&train, &val);
    if let Some(dir) = out {
        let dir = dir.join(format!("exp{}", row.id));
        std::fs::create_dir_all(&dir)?;
        trainer.checkpoint().save(&dir.join("checkpoint.mvol"))?;
        std::fs::write(dir.join("metrics.ndjson"), metrics_ndjson(trainer.log())?)?;
    }
    result?;
    Ok(Trained { trainer })
}

/// Runs all seven rows. Rows that fail are reported as failed and the rest
/// continue. With `out`, every row writes its checkpoint and metrics log
/// under `out/exp<id>/`, and the reports, tables and histograms go to `out`.
pub fn run_experiment_matrix(config: &ExperimentConfig, samples: &[DomainSample], out: Option<&Path>) -> Result<MatrixResult> {
    config.validate()?;
    ensure!(config.phantom.domains.len() == 2, Validation, "the experiment matrix needs exactly two domains");
    let raw = PatchSet::build(samples, &pipeline_with(config, false))?;
    let standardized = PatchSet::build(samples, &pipeline_with(config, true))?;
    let mut trained: Vec<(u8, Trainer)> = Vec::new();
    let mut reports = Vec::new();
    let mut histograms = Vec::new();
    for row in matrix_rows() {
        let start = Instant::now();
        let set = if row.standardized { &standardized } else { &raw };
        let outcome = (|| -> Result<ExperimentReport> {
            let trainer = match row.reuse {
                Some(src) => match trained.iter().find(|(id, _)| *id == src) {
                    Some((_, t)) => t.clone(),
                    None => return Err(Error::Validation(format!("row {src} did not produce a model"))),
                },
                None => {
                    let t = train_row(config, set, &row, out)?.trainer;
                    trained.push((row.id, t.clone()));
                    t
                }
            };
            let test = set.select(Partition::Test, &row.test_domains);
            let (dice, dice_empty) = evaluate_patches(trainer.generator(), trainer.segmenter(), &test)?;
            let (mut jsd_inputs, mut jsd_outputs) = (None, None);
            if let Some(g) = trainer.generator() {
                let val = set.select(Partition::Validation, &row.train_domains);
                let last = trainer.validate(&val)?;
                jsd_inputs = last.jsd_inputs;
                jsd_outputs = last.jsd_outputs;
                histograms.extend(normalization_histograms(row.id, g, &val, trainer.segmenter().classes(), config.eval.histogram_bins)?);
            }
            Ok(ExperimentReport {
                id: row.id,
                name: row.name.clone(),
                mode: row.mode,
                train_domains: row.train_domains.clone(),
                test_domains: row.test_domains.clone(),
                standardized: row.standardized,
                mean_dice: dice.iter().sum::<f64>() / dice.len() as f64,
                dice,
                dice_empty,
                jsd_inputs,
                jsd_outputs,
                epochs: trainer.epoch(),
                config_hash: row_hash(config, &row),
                runtime_seconds: 0.0,
                status: RowStatus::Ok,
            })
        })();
        let mut report = outcome.unwrap_or_else(|e| {
            log::error!("experiment {} failed: {e}", row.id);
            ExperimentReport {
                id: row.id,
                name: row.name.clone(),
                mode: row.mode,
                train_domains: row.train_domains.clone(),
                test_domains: row.test_domains.clone(),
                standardized: row.standardized,
                dice: Vec::new(),
                mean_dice: f64::NAN,
                dice_empty: false,
                jsd_inputs: None,
                jsd_outputs: None,
                epochs: 0,
                config_hash: row_hash(config, &row),
                runtime_seconds: 0.0,
                status: RowStatus::Failed { error: e.to_string() },
            }
        });
        report.runtime_seconds = start.elapsed().as_secs_f64();
        log::info!("experiment {}: mean Dice {:.4} in {:.1}s", report.id, report.mean_dice, report.runtime_seconds);
        if let Some(dir) = out {
            let d = dir.join(format!("exp{}", row.id));
            std::fs::create_dir_all(&d)?;
            std::fs::write(d.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        }
        reports.push(report);
    }
    let deltas = pairwise_deltas(&reports);
    let result = MatrixResult { reports, histograms, deltas };
    if let Some(dir) = out {
        write_matrix(&result, dir)?;
    }
    Ok(result)
}

fn pipeline_with(config: &ExperimentConfig, standardize: bool) -> PipelineConfig {
    PipelineConfig { standardize, ..config.pipeline.clone() }
}

/// Mean-Dice difference for every ordered pair of successful rows.
pub fn pairwise_deltas(reports: &[ExperimentReport]) -> Vec<RowDelta> {
    let ok: Vec<&ExperimentReport> = reports.iter().filter(|r| r.is_ok()).collect();
    let mut out = Vec::new();
    for a in &ok {
        for b in &ok {
            if a.id != b.id {
                out.push(RowDelta { from: a.id, to: b.id, mean_dice_delta: b.mean_dice - a.mean_dice });
            }
        }
    }
    out
}

fn domains(d: &[usize]) -> String {
    d.iter().map(usize::to_string).collect::<Vec<_>>().join("+")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Aligned text table of the reports.
pub fn render_table(reports: &[ExperimentReport]) -> String {
    let header = ["Exp", "Method", "Train", "Test", "CSF", "GM", "WM", "Mean", "JSD in", "JSD out", "Status"];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in reports {
        let mut cells = vec![r.id.to_string(), r.name.clone(), domains(&r.train_domains), domains(&r.test_domains)];
        for i in 0..3 {
            cells.push(r.dice.get(i).map_or_else(|| "-".to_string(), |d| format!("{d:.3}")));
        }
        cells.push(if r.mean_dice.is_finite() { format!("{:.3}", r.mean_dice) } else { "-".into() });
        cells.push(opt(r.jsd_inputs));
        cells.push(opt(r.jsd_outputs));
        cells.push(match &r.status {
            RowStatus::Ok if r.dice_empty => "ok (empty class)".into(),
            RowStatus::Ok => "ok".into(),
            RowStatus::Failed { error } => format!("failed: {error}"),
        });
        rows.push(cells);
    }
    let widths: Vec<usize> = (0..header.len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| if c == 1 || c == 10 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}

pub fn table_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from("id,method,mode,train_domains,test_domains,standardized,dice_csf,dice_gm,dice_wm,mean_dice,jsd_inputs,jsd_outputs,epochs,runtime_seconds,status\n");
    for r in reports {
        let d = |i: usize| r.dice.get(i).map_or_else(String::new, f64::to_string);
        let o = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let status = match &r.status {
            RowStatus::Ok => "ok".to_string(),
            RowStatus::Failed { error } => format!("\"failed: {}\"", error.replace('"', "'")),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3},{}",
            r.id,
            r.name,
            r.mode,
            domains(&r.train_domains),
            domains(&r.test_domains),
            r.standardized,
            d(0),
            d(1),
            d(2),
            if r.mean_dice.is_finite() { r.mean_dice.to_string() } else { String::new() },
            o(r.jsd_inputs),
            o(r.jsd_outputs),
            r.epochs,
            r.runtime_seconds,
            status
        );
    }
    out
}

pub fn deltas_csv(deltas: &[RowDelta]) -> String {
    let mut out = String::from("from,to,mean_dice_delta\n");
    for d in deltas {
        let _ = writeln!(out, "{},{},{}", d.from, d.to, d.mean_dice_delta);
    }
    out
}

/// Writes `reports.json`, `table.txt`, `table.csv`, `deltas.csv` and the
/// histogram files into `dir`.
pub fn write_matrix(result: &MatrixResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("reports.json"), serde_json::to_string_pretty(&result.reports)? + "\n")?;
    std::fs::write(dir.join("table.txt"), render_table(&result.reports))?;
    std::fs::write(dir.join("table.csv"), table_csv(&result.reports))?;
    std::fs::write(dir.join("deltas.csv"), deltas_csv(&result.deltas))?;
    for h in &result.histograms {
        std::fs::write(dir.join(h.file_name()), h.to_csv())?;
    }
    Ok(())
}

/// Reads the reports a matrix or evaluate run left in `dir`: `reports.json`
/// when present, otherwise every `exp*/report.json`.
pub fn load_reports(dir: &Path) -> Result<Vec<ExperimentReport>> {
    let all = dir.join("reports.json");
    if all.exists() {
        return Ok(serde_json::from_str(&std::fs::read_to_string(all)?)?);
    }
    let mut reports = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path().join("report.json");
        if p.exists() {
            reports.push(serde_json::from_str(&std::fs::read_to_string(p)?)?);
        }
    }
    ensure!(!reports.is_empty(), Validation, "no reports found under {}", dir.display());
    reports.sort_by_key(|r: &ExperimentReport| r.id);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(id: u8, mean: f64) -> ExperimentReport {
        ExperimentReport {
            id,
            name: "x".into(),
            mode: Mode::SegmenterOnly,
            train_domains: vec![1],
            test_domains: vec![2],
            standardized: false,
            dice: vec![mean; 3],
            mean_dice: mean,
            dice_empty: false,
            jsd_inputs: None,
            jsd_outputs: Some(0.5),
            epochs: 1,
            config_hash: String::new(),
            runtime_seconds: 0.0,
            status: RowStatus::Ok,
        }
    }

    #[test]
    fn protocol_has_seven_rows() {
        let rows = matrix_rows();
        assert_eq!(rows.iter().map(|r| r.id).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6, 7]);
        assert_eq!((rows[2].train_domains.clone(), rows[2].test_domains.clone()), (vec![1], vec![2]));
        assert_eq!((rows[3].train_domains.clone(), rows[3].test_domains.clone()), (vec![2], vec![1]));
        assert!(rows[4].standardized && rows[4].mode == Mode::SegmenterOnly);
        assert_eq!(rows[5].mode, Mode::NoDiscriminator);
        assert_eq!(rows[6].mode, Mode::Adversarial);
    }

    #[test]
    fn deltas_cover_ordered_pairs() {
        let d = pairwise_deltas(&[report(1, 0.5), report(2, 0.8), report(3, 0.6)]);
        assert_eq!(d.len(), 6);
        let one_two = d.iter().find(|d| d.from == 1 && d.to == 2).unwrap();
        assert!((one_two.mean_dice_delta - 0.3).abs() < 1e-12);
    }

    #[test]
    fn table_lines_align() {
        let t = render_table(&[report(1, 0.5), report(7, 0.91)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(t.contains("0.910"));
        assert_eq!(table_csv(&[report(1, 0.5)]).lines().count(), 2);
    }
}
