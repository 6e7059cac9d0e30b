use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use freqdrop_core::dilution::{apply_dropout, sample_site_mask};
use freqdrop_core::mc::{
    aggregate, sweep, Aggregate, ConfigOutcome, EvalSample, SweepGrid, SweepOptions,
};
use freqdrop_core::metrics::{gradient_impact_map, mean_foreground_dsc, CalibrationBins};
use freqdrop_core::nn::{load_model, save_model, train, unet_forward};
use freqdrop_core::rng::{derive_seed, RngStream};
use freqdrop_core::synth::pgm::{map_to_pgm8, write_pgm};
use freqdrop_core::synth::{load_dataset, make_dataset, save_dataset, Dataset};
use freqdrop_core::{DilutionConfig, DropoutKind, Placement, SiteId, Tensor, UNetModel};
use serde::Serialize;

use crate::config::{config_error, ExperimentConfig};
use crate::fmt::{num, opt_num};

/// Version of every CSV layout written by this tool.
pub const SCHEMA_VERSION: u32 = 1;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateSummary {
    pub directory: PathBuf,
    pub count: usize,
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<GenerateSummary> {
    let g = &cfg.generate;
    if g.count == 0 {
        return Err(config_error("generate.count must be at least 1"));
    }
    let dataset = make_dataset(cfg.seed, g.count, &g.params)?;
    save_dataset(&dataset, &cfg.dataset)?;
    Ok(GenerateSummary {
        directory: cfg.dataset.clone(),
        count: g.count,
    })
}

/// Leading samples train, the rest evaluate. Fractions below 1 hold out at
/// least one sample when there are two or more; otherwise evaluation reuses
/// the training samples.
pub fn split(dataset: &Dataset, train_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(config_error(format!(
            "train_fraction {train_fraction} outside (0, 1]"
        )));
    }
    let n = dataset.samples.len();
    let most = if train_fraction < 1.0 { n.saturating_sub(1).max(1) } else { n };
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, most);
    let train: Vec<usize> = (0..n_train).collect();
    let eval: Vec<usize> = if n_train < n { (n_train..n).collect() } else { train.clone() };
    Ok((train, eval))
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    if !path.is_dir() {
        return Err(config_error(format!("dataset {} does not exist", path.display())));
    }
    Ok(load_dataset(path)?)
}

fn check_compatible(model: &UNetModel, dataset: &Dataset) -> Result<()> {
    let arch = model.architecture();
    for (i, s) in dataset.samples.iter().enumerate() {
        let label = usize::from(s.mask.max_label());
        if label >= arch.class_count {
            return Err(config_error(format!(
                "sample {i} has label {label} but the model has {} classes",
                arch.class_count
            )));
        }
        let (h, w) = s.mask.dims();
        let m = arch.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(config_error(format!(
                "sample {i} is {h}×{w}, not divisible by {m}; pad the images or reduce the depth"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub schema_version: u32,
    pub model: PathBuf,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub eval_dsc: f64,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let dataset = open_dataset(&cfg.dataset)?;
    let (train_idx, eval_idx) = split(&dataset, cfg.train.train_fraction)?;
    let arch = cfg.train.architecture;
    let mut model = UNetModel::new(arch, cfg.seed).map_err(|e| config_error(e.to_string()))?;
    check_compatible(&model, &dataset)?;
    let pairs: Vec<_> = train_idx
        .iter()
        .map(|&i| (dataset.samples[i].image.clone(), dataset.samples[i].mask.clone()))
        .collect();
    let mut options = cfg.train.options;
    options.seed = cfg.seed;
    let report = train(&mut model, &pairs, &options)?;

    let scores = eval_idx
        .iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            let pred = unet_forward(&model, &s.image, None, RngStream::new(0, 0))?.class_map();
            Ok(mean_foreground_dsc(&pred, &s.mask, arch.class_count)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let eval_dsc = scores.iter().sum::<f64>() / scores.len() as f64;

    let dir = cfg.model.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(dir)?;
    save_model(&model, &cfg.model)?;
    let mut curve = create_file(&dir.join("loss_curve.csv"))?;
    writeln!(curve, "epoch,loss")?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        writeln!(curve, "{},{}", e + 1, num(*l))?;
    }
    curve.flush()?;
    let summary = TrainSummary {
        schema_version: SCHEMA_VERSION,
        model: cfg.model.clone(),
        train_samples: train_idx.len(),
        eval_samples: eval_idx.len(),
        epochs: options.epochs,
        final_loss: report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        eval_dsc,
    };
    write_json(&dir.join("train_summary.json"), &summary)?;
    Ok(summary)
}

/// Cohort aggregates of one configuration; `None` when it failed.
#[derive(Debug, Clone)]
pub struct ConfigRow {
    pub index: usize,
    pub config: DilutionConfig,
    pub result: std::result::Result<Vec<Aggregate>, String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BestConfig {
    pub kind: DropoutKind,
    pub placement: Placement,
    pub rate: f64,
    pub repetitions: usize,
    pub uce: f64,
    pub dsc_diluted: f64,
    pub divergence_pct: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub best_frequency: Option<BestConfig>,
    pub best_signal: Option<BestConfig>,
    /// Best frequency configuration is at least as well calibrated as the
    /// best signal configuration.
    pub frequency_uce_le_signal: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct McSummary {
    pub output: PathBuf,
    pub configs: usize,
    pub failed: usize,
    pub samples: usize,
    pub baseline_dsc: f64,
    pub comparison: Comparison,
}

const SAMPLE_HEADER: &str =
    "sample_id,kind,rate,placement,R,dsc_diluted,dsc_baseline,dsc_divergence_pct,uce,mean_uncertainty";

fn write_sample_rows<W: Write>(out: &mut W, outcome: &ConfigOutcome) -> Result<()> {
    let c = &outcome.config;
    if let Ok(samples) = &outcome.samples {
        for s in samples {
            for r in &s.by_repetitions {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    s.sample_id,
                    c.kind,
                    num(c.rate),
                    c.placement,
                    r.repetitions,
                    num(r.dsc_diluted),
                    num(r.dsc_baseline),
                    opt_num(r.divergence_pct),
                    num(r.uce),
                    num(r.mean_uncertainty),
                )?;
            }
        }
    }
    Ok(())
}

fn emit_maps(
    dir: &Path,
    model: &UNetModel,
    samples: &[EvalSample],
    outcome: &ConfigOutcome,
    seed: u64,
) -> Result<()> {
    let Ok(results) = &outcome.samples else {
        return Ok(());
    };
    for (sample, result) in samples.iter().zip(results) {
        let stem = format!("c{:02}_s{:04}", outcome.index, sample.id);
        for r in &result.by_repetitions {
            if let Some(u) = &r.uncertainty {
                let pgm = map_to_pgm8(u, 0.0, 1.0)?;
                write_pgm(&dir.join(format!("{stem}_R{}_uncertainty.pgm", r.repetitions)), &pgm)?;
            }
        }
        // structural impact of one realization on the first feature map
        let features = model.site_features(&sample.image)?;
        let (_, first) = features
            .iter()
            .find(|(site, _)| *site == SiteId::Encoder(0))
            .expect("encoder level 0 always exists");
        let (_, h, w) = first.chw()?;
        let channel = Tensor::from_vec(&[1, h, w], first.plane(0).to_vec())?;
        let stream = RngStream::new(derive_seed(seed, &[sample.id as u64]), u64::MAX);
        let mask = sample_site_mask(&outcome.config, &channel, &stream, 0)?;
        let diluted = apply_dropout(outcome.config.kind, &channel, &mask, outcome.config.rescale)?;
        let impact = gradient_impact_map(&channel, &diluted)?;
        let peak = impact.data().iter().fold(0.0f32, |m, v| m.max(v.abs())).max(f32::MIN_POSITIVE);
        write_pgm(&dir.join(format!("{stem}_impact.pgm")), &map_to_pgm8(&impact, -peak, peak)?)?;
    }
    Ok(())
}

fn best_for(rows: &[ConfigRow], kind: DropoutKind, r_index: usize) -> Option<(usize, BestConfig)> {
    rows.iter()
        .filter(|row| row.config.kind == kind)
        .filter_map(|row| row.result.as_ref().ok().map(|a| (row, &a[r_index])))
        .min_by(|a, b| a.1.uce_mean.total_cmp(&b.1.uce_mean))
        .map(|(row, a)| {
            (
                row.index,
                BestConfig {
                    kind,
                    placement: row.config.placement,
                    rate: row.config.rate,
                    repetitions: a.repetitions,
                    uce: a.uce_mean,
                    dsc_diluted: a.dsc_diluted_mean,
                    divergence_pct: a.divergence_mean,
                },
            )
        })
}

pub fn cmd_mc(cfg: &ExperimentConfig) -> Result<McSummary> {
    let grid = SweepGrid {
        kinds: cfg.kinds.clone(),
        rates: cfg.rates.clone(),
        placements: cfg.placements.clone(),
        hermitian: cfg.hermitian,
        rescale: cfg.rescale,
    };
    grid.configs()?;
    let repetitions = cfg.repetitions.to_vec();
    if repetitions.is_empty() || repetitions.contains(&0) {
        return Err(config_error("repetitions must be a non-empty list of positive counts"));
    }
    if cfg.bins == 0 {
        return Err(config_error("bins must be at least 1"));
    }
    if !cfg.model.is_file() {
        return Err(config_error(format!("model {} does not exist", cfg.model.display())));
    }
    let dataset = open_dataset(&cfg.dataset)?;
    let model = load_model(&cfg.model)?;
    check_compatible(&model, &dataset)?;
    let (_, eval_idx) = split(&dataset, cfg.train.train_fraction)?;
    let samples: Vec<EvalSample> = eval_idx
        .iter()
        .map(|&i| EvalSample {
            id: i,
            image: dataset.samples[i].image.clone(),
            truth: dataset.samples[i].mask.clone(),
        })
        .collect();

    let out = &cfg.output;
    create_dir(out)?;
    let maps_dir = out.join("maps");
    if cfg.emit_maps {
        create_dir(&maps_dir)?;
    }
    let options = SweepOptions {
        repetitions: repetitions.clone(),
        seed: cfg.seed,
        bins: cfg.bins,
        summary: cfg.uncertainty,
        keep_maps: cfg.emit_maps,
    };

    let mut sample_csv = create_file(&out.join("samples.csv"))?;
    writeln!(sample_csv, "{SAMPLE_HEADER}")?;
    let mut rows: Vec<ConfigRow> = Vec::new();
    let baselines = sweep(&model, &samples, &grid, &options, |outcome| {
        write_sample_rows(&mut sample_csv, &outcome)
            .and_then(|_| {
                if cfg.emit_maps {
                    emit_maps(&maps_dir, &model, &samples, &outcome, cfg.seed)
                } else {
                    Ok(())
                }
            })
            .map_err(|e| freqdrop_core::Error::Data(format!("{e:#}")))?;
        let result = match &outcome.samples {
            Ok(s) => aggregate(s).map_err(|e| e.to_string()),
            Err(e) => Err(e.clone()),
        };
        rows.push(ConfigRow {
            index: outcome.index,
            config: outcome.config,
            result,
        });
        Ok(())
    })?;
    sample_csv.flush()?;
    let baseline_dsc = baselines.iter().map(|b| b.dsc).sum::<f64>() / baselines.len() as f64;

    write_aggregate(&out.join("aggregate.csv"), &rows, &repetitions)?;
    write_calibration(&out.join("calibration.csv"), &rows)?;
    write_figure_columns(out, &rows, cfg)?;

    // best configurations are ranked at the largest requested R
    let r_index = repetitions
        .iter()
        .enumerate()
        .max_by_key(|(_, r)| **r)
        .map(|(i, _)| i)
        .expect("non-empty");
    let mut best = BTreeMap::new();
    for kind in DropoutKind::ALL {
        if let Some((index, b)) = best_for(&rows, kind, r_index) {
            let row = rows.iter().find(|r| r.index == index).expect("index from rows");
            let bins: &CalibrationBins = &row.result.as_ref().expect("best is ok")[r_index].pooled_bins;
            let mut f = create_file(&out.join(format!("reliability_{kind}.csv")))?;
            bins.write_csv(&mut f)?;
            f.flush()?;
            best.insert(kind.as_str(), b);
        }
    }
    let best_frequency = best.remove("frequency");
    let best_signal = best.remove("signal");
    let frequency_uce_le_signal = match (&best_frequency, &best_signal) {
        (Some(f), Some(s)) => Some(f.uce <= s.uce),
        _ => None,
    };
    let comparison = Comparison {
        best_frequency,
        best_signal,
        frequency_uce_le_signal,
    };
    write_json(&out.join("comparison.json"), &comparison)?;

    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    write_json(
        &out.join("manifest.json"),
        &serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "files": {
                "samples.csv": SAMPLE_HEADER,
                "aggregate.csv": "one row per configuration",
                "calibration.csv": "UCE per kind, placement, rate and R",
                "reliability_<kind>.csv": "calibration bins of the best configuration per kind",
                "fig_uce_<kind>_R<r>.dat": "gnuplot columns: rate then UCE per placement",
            },
            "config": cfg,
            "dataset_seeds": dataset.manifest.seeds,
            "eval_samples": eval_idx,
            "configs": rows.len(),
            "failed": failed,
        }),
    )?;

    Ok(McSummary {
        output: out.clone(),
        configs: rows.len(),
        failed,
        samples: samples.len(),
        baseline_dsc,
        comparison,
    })
}

fn write_aggregate(path: &Path, rows: &[ConfigRow], repetitions: &[usize]) -> Result<()> {
    let mut f = create_file(path)?;
    let mut header = String::from("config_id,kind,placement,rate,status,samples,dsc_baseline");
    for r in repetitions {
        header += &format!(
            ",dsc_diluted_R{r},divergence_pct_R{r},divergence_sd_R{r},uce_R{r},uce_sd_R{r},mean_uncertainty_R{r}"
        );
    }
    header += ",error";
    writeln!(f, "{header}")?;
    for row in rows {
        let c = &row.config;
        let mut line = format!("{},{},{},{}", row.index, c.kind, c.placement, num(c.rate));
        match &row.result {
            Ok(aggs) => {
                line += &format!(",ok,{},{}", aggs[0].samples, num(aggs[0].dsc_baseline_mean));
                for a in aggs {
                    line += &format!(
                        ",{},{},{},{},{},{}",
                        num(a.dsc_diluted_mean),
                        opt_num(a.divergence_mean),
                        opt_num(a.divergence_sd),
                        num(a.uce_mean),
                        num(a.uce_sd),
                        num(a.mean_uncertainty)
                    );
                }
                line += ",";
            }
            Err(e) => {
                line += ",failed,0,NA";
                for _ in repetitions {
                    line += ",NA,NA,NA,NA,NA,NA";
                }
                line += &format!(",{}", e.replace([',', '\n'], ";"));
            }
        }
        writeln!(f, "{line}")?;
    }
    Ok(f.flush()?)
}

fn write_calibration(path: &Path, rows: &[ConfigRow]) -> Result<()> {
    let mut f = create_file(path)?;
    writeln!(f, "kind,placement,rate,R,uce,uce_sd,mean_uncertainty")?;
    for row in rows {
        let c = &row.config;
        if let Ok(aggs) = &row.result {
            for a in aggs {
                writeln!(
                    f,
                    "{},{},{},{},{},{},{}",
                    c.kind,
                    c.placement,
                    num(c.rate),
                    a.repetitions,
                    num(a.uce_mean),
                    num(a.uce_sd),
                    num(a.mean_uncertainty)
                )?;
            }
        }
    }
    Ok(f.flush()?)
}

/// Whitespace-separated columns for plotting UCE against rate, one file per
/// kind and repetition count.
fn write_figure_columns(dir: &Path, rows: &[ConfigRow], cfg: &ExperimentConfig) -> Result<()> {
    for kind in &cfg.kinds {
        for (ri, r) in cfg.repetitions.to_vec().iter().enumerate() {
            let mut f = create_file(&dir.join(format!("fig_uce_{kind}_R{r}.dat")))?;
            let names: Vec<&str> = cfg.placements.iter().map(|p| p.as_str()).collect();
            writeln!(f, "# rate {}", names.join(" "))?;
            for &rate in &cfg.rates {
                let mut line = num(rate);
                for &placement in &cfg.placements {
                    let value = rows
                        .iter()
                        .find(|row| {
                            row.config.kind == *kind
                                && row.config.placement == placement
                                && row.config.rate == rate
                        })
                        .and_then(|row| row.result.as_ref().ok())
                        .map(|a| num(a[ri].uce_mean))
                        .unwrap_or_else(|| "NaN".into());
                    line += " ";
                    line += &value;
                }
                writeln!(f, "{line}")?;
            }
            f.flush()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use freqdrop_core::synth::{make_dataset, GenParams};

    fn sizes(n: usize, frac: f64) -> (usize, usize) {
        let params = GenParams {
            height: 8,
            width: 8,
            ..GenParams::default()
        };
        let ds = make_dataset(1, n, &params).unwrap();
        let (a, b) = split(&ds, frac).unwrap();
        (a.len(), b.len())
    }

    #[test]
    fn split_keeps_a_held_out_sample() {
        assert_eq!(sizes(40, 0.75), (30, 10));
        assert_eq!(sizes(2, 0.75), (1, 1));
        assert_eq!(sizes(2, 1.0), (2, 2));
        assert_eq!(sizes(1, 0.5), (1, 1));
        assert!(split(&make_dataset(1, 2, &GenParams { height: 8, width: 8, ..GenParams::default() }).unwrap(), 0.0).is_err());
    }
}
