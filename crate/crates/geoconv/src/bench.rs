//! Benchmark harness: the centre-of-mass ablation grid, the positional-bias
//! depth sweep, and CSV report emission.
//!
//! Jobs (one trained model each) run on a rayon pool; every job is internally
//! single-threaded and derives its seeds from the config, so reports are
//! byte-stable for a fixed config regardless of thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::datasets::{gen_greek_numerals, gen_mass_centre, Dataset, GlyphMetrics, GreekSplit};
use crate::error::{GeoError, Result};
use crate::layers::LayerVariant;
use crate::model::{build_model, evaluate, train, FilterPlan, Head, ModelSpec, TrainConfig};
use crate::nn::OptimizerConfig;

/// Point densities d = 0.001 * 3^k for 0 <= k <= 6.
pub const DENSITIES: [f32; 7] = [0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 0.9];

pub const ALL_VARIANTS: [LayerVariant; 3] = [LayerVariant::Conv, LayerVariant::CoordConv, LayerVariant::GeoConv];

impl LayerVariant {
    pub fn from_name(name: &str) -> Result<LayerVariant> {
        match name {
            "conv" => Ok(LayerVariant::Conv),
            "coordconv" => Ok(LayerVariant::CoordConv),
            "geoconv" => Ok(LayerVariant::GeoConv),
            other => Err(GeoError::Config(format!("unknown layer variant '{other}'"))),
        }
    }
}

/// Mix a base seed with job coordinates; splitmix64-style finalizer.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x = x.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationConfig {
    pub variants: Vec<LayerVariant>,
    /// (layers, filters per layer) pairs.
    pub shapes: Vec<(usize, usize)>,
    pub densities: Vec<f32>,
    pub seeds: Vec<u64>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub input_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub data_seed: u64,
}

impl Default for AblationConfig {
    /// Desk-scale grid: 3 variants x 4 shapes x 7 densities x 3 seeds at
    /// 10k/2k samples, 30 epochs, Adam 1e-3, batch 64.
    fn default() -> AblationConfig {
        AblationConfig {
            variants: ALL_VARIANTS.to_vec(),
            shapes: vec![(1, 1), (1, 2), (2, 1), (2, 2)],
            densities: DENSITIES.to_vec(),
            seeds: vec![0, 1, 2],
            train_samples: 10_000,
            test_samples: 2_000,
            input_size: 32,
            epochs: 30,
            batch_size: 64,
            optimizer: OptimizerConfig::adam(1e-3),
            data_seed: 42,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.shapes.is_empty() || self.densities.is_empty() || self.seeds.is_empty() {
            return Err(GeoError::Config("ablation grid must be non-empty on every axis".into()));
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return Err(GeoError::Config("ablation needs non-empty train and test sets".into()));
        }
        Ok(())
    }

    pub fn job_count(&self) -> usize {
        self.variants.len() * self.shapes.len() * self.densities.len() * self.seeds.len()
    }
}

/// Seed-averaged loss for one (train density, test density, model) cell.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MatrixCell {
    pub train_density: f32,
    pub test_density: f32,
    pub variant: LayerVariant,
    pub layers: usize,
    pub filters: usize,
    pub loss: f32,
    /// Loss divided by the summed loss of all variants in the same
    /// (shape, train density, test density) group.
    pub norm_loss: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VariantAggregate {
    pub variant: LayerVariant,
    pub avg_loss: f32,
    pub norm_avg_loss: f32,
    /// Number of normalization groups this variant wins outright.
    pub best_count: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchReport {
    pub cells: Vec<MatrixCell>,
    pub aggregates: Vec<VariantAggregate>,
    /// Sample counts actually used (desk scale, not the original 100k/20k).
    pub train_samples: usize,
    pub test_samples: usize,
}

fn f32_key(v: f32) -> u32 {
    v.to_bits()
}

pub fn run_mass_centre_ablation(cfg: &AblationConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let train_sets: Vec<Dataset> = cfg
        .densities
        .par_iter()
        .enumerate()
        .map(|(i, &d)| gen_mass_centre(cfg.train_samples, cfg.input_size, d, derive_seed(cfg.data_seed, &[1, i as u64])))
        .collect::<Result<_>>()?;
    let test_sets: Vec<Dataset> = cfg
        .densities
        .par_iter()
        .enumerate()
        .map(|(i, &d)| gen_mass_centre(cfg.test_samples, cfg.input_size, d, derive_seed(cfg.data_seed, &[2, i as u64])))
        .collect::<Result<_>>()?;

    // One job per (variant, shape, train density, seed); each evaluates on
    // every test density.
    let mut jobs = Vec::new();
    for (vi, &variant) in cfg.variants.iter().enumerate() {
        for (si, &shape) in cfg.shapes.iter().enumerate() {
            for ti in 0..cfg.densities.len() {
                for (ki, &seed) in cfg.seeds.iter().enumerate() {
                    jobs.push((vi, variant, si, shape, ti, ki, seed));
                }
            }
        }
    }
    let results: Vec<(usize, usize, usize, Vec<f32>)> = jobs
        .par_iter()
        .map(|&(vi, variant, si, (layers, filters), ti, _ki, seed)| {
            let spec = ModelSpec {
                variant,
                n_layers: layers,
                filters: FilterPlan::Constant(filters),
                head: Head::Centroid,
                input_size: cfg.input_size,
            };
            let model_seed = derive_seed(seed, &[3, vi as u64, si as u64, ti as u64]);
            let mut model = build_model(&spec, model_seed)?;
            let tc = TrainConfig {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                optimizer: cfg.optimizer,
                seed: derive_seed(seed, &[4, vi as u64, si as u64, ti as u64]),
            };
            train(&mut model, &train_sets[ti], &tc)?;
            let losses = test_sets
                .iter()
                .map(|ds| evaluate(&model, ds).map(|m| m.mean_loss))
                .collect::<Result<Vec<f32>>>()?;
            Ok((vi, si, ti, losses))
        })
        .collect::<Result<_>>()?;

    // Seed-average into cells keyed by (variant, shape, train, test).
    let n_seeds = cfg.seeds.len() as f64;
    let mut acc: BTreeMap<(usize, usize, usize, usize), f64> = BTreeMap::new();
    for (vi, si, ti, losses) in results {
        for (ei, &l) in losses.iter().enumerate() {
            *acc.entry((vi, si, ti, ei)).or_insert(0.0) += l as f64;
        }
    }

    let mut cells = Vec::new();
    for (si, &(layers, filters)) in cfg.shapes.iter().enumerate() {
        for ti in 0..cfg.densities.len() {
            for ei in 0..cfg.densities.len() {
                let group: Vec<f32> = cfg
                    .variants
                    .iter()
                    .enumerate()
                    .map(|(vi, _)| (acc[&(vi, si, ti, ei)] / n_seeds) as f32)
                    .collect();
                let total: f64 = group.iter().map(|&v| v as f64).sum();
                for (vi, &variant) in cfg.variants.iter().enumerate() {
                    cells.push(MatrixCell {
                        train_density: cfg.densities[ti],
                        test_density: cfg.densities[ei],
                        variant,
                        layers,
                        filters,
                        loss: group[vi],
                        norm_loss: if total > 0.0 { (group[vi] as f64 / total) as f32 } else { 0.0 },
                    });
                }
            }
        }
    }
    let aggregates = aggregate_cells(&cells, &cfg.variants);
    Ok(BenchReport { cells, aggregates, train_samples: cfg.train_samples, test_samples: cfg.test_samples })
}

/// Recompute per-variant aggregates from the cell matrix. Groups are the
/// (shape, train density, test density) triples; a variant is "best" in a
/// group when its loss is strictly the smallest.
pub fn aggregate_cells(cells: &[MatrixCell], variants: &[LayerVariant]) -> Vec<VariantAggregate> {
    let mut groups: BTreeMap<(usize, usize, u32, u32), Vec<(LayerVariant, f32)>> = BTreeMap::new();
    for c in cells {
        groups
            .entry((c.layers, c.filters, f32_key(c.train_density), f32_key(c.test_density)))
            .or_default()
            .push((c.variant, c.loss));
    }
    variants
        .iter()
        .map(|&variant| {
            let mut loss_sum = 0.0f64;
            let mut norm_sum = 0.0f64;
            let mut count = 0usize;
            for c in cells.iter().filter(|c| c.variant == variant) {
                loss_sum += c.loss as f64;
                norm_sum += c.norm_loss as f64;
                count += 1;
            }
            let best_count = groups
                .values()
                .filter(|g| {
                    g.iter()
                        .find(|(v, _)| *v == variant)
                        .map(|&(_, mine)| g.iter().all(|&(v, l)| v == variant || mine < l))
                        .unwrap_or(false)
                })
                .count();
            VariantAggregate {
                variant,
                avg_loss: if count > 0 { (loss_sum / count as f64) as f32 } else { 0.0 },
                norm_avg_loss: if count > 0 { (norm_sum / count as f64) as f32 } else { 0.0 },
                best_count,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GreekConfig {
    pub variants: Vec<LayerVariant>,
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub train_samples: usize,
    pub input_size: usize,
    pub train_spread: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub data_seed: u64,
}

impl Default for GreekConfig {
    fn default() -> GreekConfig {
        GreekConfig {
            variants: ALL_VARIANTS.to_vec(),
            depths: vec![1, 2, 3, 4, 5],
            seeds: vec![0, 1, 2],
            train_samples: 10_000,
            input_size: 64,
            train_spread: 4,
            epochs: 30,
            batch_size: 64,
            optimizer: OptimizerConfig::adam(1e-3),
            data_seed: 42,
        }
    }
}

/// Seed-averaged metrics for one (variant, depth) on the
/// exhaustive-translation test set.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GreekRow {
    pub variant: LayerVariant,
    pub depth: usize,
    pub loss: f32,
    pub accuracy: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GreekAggregate {
    pub variant: LayerVariant,
    pub avg_loss: f32,
    pub avg_accuracy: f32,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GreekReport {
    pub rows: Vec<GreekRow>,
    pub aggregates: Vec<GreekAggregate>,
    pub test_samples: usize,
}

pub fn run_positional_bias_sweep(cfg: &GreekConfig) -> Result<GreekReport> {
    if cfg.variants.is_empty() || cfg.depths.is_empty() || cfg.seeds.is_empty() {
        return Err(GeoError::Config("sweep grid must be non-empty on every axis".into()));
    }
    let metrics = GlyphMetrics::default();
    let train_set = gen_greek_numerals(
        cfg.train_samples,
        cfg.input_size,
        GreekSplit::Shifted { spread: cfg.train_spread },
        &metrics,
        derive_seed(cfg.data_seed, &[5]),
    )?;
    let test_set = gen_greek_numerals(0, cfg.input_size, GreekSplit::Exhaustive, &metrics, derive_seed(cfg.data_seed, &[6]))?;

    let mut jobs = Vec::new();
    for (vi, &variant) in cfg.variants.iter().enumerate() {
        for (di, &depth) in cfg.depths.iter().enumerate() {
            for &seed in &cfg.seeds {
                jobs.push((vi, variant, di, depth, seed));
            }
        }
    }
    let results: Vec<(usize, usize, f32, f32)> = jobs
        .par_iter()
        .map(|&(vi, variant, di, depth, seed)| {
            let spec = ModelSpec {
                variant,
                n_layers: depth,
                filters: FilterPlan::Doubling,
                head: Head::Classifier(3),
                input_size: cfg.input_size,
            };
            let mut model = build_model(&spec, derive_seed(seed, &[7, vi as u64, di as u64]))?;
            let tc = TrainConfig {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                optimizer: cfg.optimizer,
                seed: derive_seed(seed, &[8, vi as u64, di as u64]),
            };
            train(&mut model, &train_set, &tc)?;
            let m = evaluate(&model, &test_set)?;
            Ok((vi, di, m.mean_loss, m.accuracy.expect("classifier head")))
        })
        .collect::<Result<_>>()?;

    let n_seeds = cfg.seeds.len() as f64;
    let mut acc: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for (vi, di, loss, accu) in results {
        let e = acc.entry((vi, di)).or_insert((0.0, 0.0));
        e.0 += loss as f64;
        e.1 += accu as f64;
    }
    let mut rows = Vec::new();
    for (vi, &variant) in cfg.variants.iter().enumerate() {
        for (di, &depth) in cfg.depths.iter().enumerate() {
            let (l, a) = acc[&(vi, di)];
            rows.push(GreekRow { variant, depth, loss: (l / n_seeds) as f32, accuracy: (a / n_seeds) as f32 });
        }
    }
    let aggregates = cfg
        .variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&GreekRow> = rows.iter().filter(|r| r.variant == variant).collect();
            GreekAggregate {
                variant,
                avg_loss: (mine.iter().map(|r| r.loss as f64).sum::<f64>() / mine.len() as f64) as f32,
                avg_accuracy: (mine.iter().map(|r| r.accuracy as f64).sum::<f64>() / mine.len() as f64) as f32,
            }
        })
        .collect();
    Ok(GreekReport { rows, aggregates, test_samples: test_set.len() })
}

/// 9 significant digits: enough for exact f32 round trip through parse.
pub fn format_f32(v: f32) -> String {
    format!("{v:.8e}")
}

fn parse_f32(s: &str, file: &str, line: usize) -> Result<f32> {
    s.parse::<f32>().map_err(|_| GeoError::Config(format!("{file}:{line}: bad float '{s}'")))
}

fn parse_usize(s: &str, file: &str, line: usize) -> Result<usize> {
    s.parse::<usize>().map_err(|_| GeoError::Config(format!("{file}:{line}: bad integer '{s}'")))
}

/// Writes `matrix.csv`, `norm_matrix.csv`, and `aggregates.csv` into `dir`.
pub fn emit_report(report: &BenchReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut matrix = String::from("train_density,test_density,variant,layers,filters,loss\n");
    let mut norm = String::from("train_density,test_density,variant,layers,filters,norm_loss\n");
    for c in &report.cells {
        let prefix = format!(
            "{},{},{},{},{}",
            format_f32(c.train_density),
            format_f32(c.test_density),
            c.variant.name(),
            c.layers,
            c.filters
        );
        writeln!(matrix, "{prefix},{}", format_f32(c.loss)).unwrap();
        writeln!(norm, "{prefix},{}", format_f32(c.norm_loss)).unwrap();
    }
    let mut agg = String::from("variant,avg_loss,norm_avg_loss,best_count\n");
    for a in &report.aggregates {
        writeln!(
            agg,
            "{},{},{},{}",
            a.variant.name(),
            format_f32(a.avg_loss),
            format_f32(a.norm_avg_loss),
            a.best_count
        )
        .unwrap();
    }
    std::fs::write(dir.join("matrix.csv"), matrix)?;
    std::fs::write(dir.join("norm_matrix.csv"), norm)?;
    std::fs::write(dir.join("aggregates.csv"), agg)?;
    Ok(())
}

/// Writes `greek.csv` and `greek_aggregates.csv` into `dir`.
pub fn emit_greek_report(report: &GreekReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rows = String::from("variant,depth,loss,accuracy\n");
    for r in &report.rows {
        writeln!(rows, "{},{},{},{}", r.variant.name(), r.depth, format_f32(r.loss), format_f32(r.accuracy)).unwrap();
    }
    let mut agg = String::from("variant,avg_loss,avg_accuracy\n");
    for a in &report.aggregates {
        writeln!(agg, "{},{},{}", a.variant.name(), format_f32(a.avg_loss), format_f32(a.avg_accuracy)).unwrap();
    }
    std::fs::write(dir.join("greek.csv"), rows)?;
    std::fs::write(dir.join("greek_aggregates.csv"), agg)?;
    Ok(())
}

fn split_csv_line<'a>(line: &'a str, want: usize, file: &str, idx: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != want {
        return Err(GeoError::Config(format!("{file}:{idx}: expected {want} fields, found {}", fields.len())));
    }
    Ok(fields)
}

/// Re-parses `matrix.csv` + `norm_matrix.csv` back into cells.
pub fn parse_matrix_csv(dir: &Path) -> Result<Vec<MatrixCell>> {
    let read = |name: &str| -> Result<Vec<String>> {
        let text = std::fs::read_to_string(dir.join(name))?;
        Ok(text.lines().map(str::to_owned).collect())
    };
    let matrix = read("matrix.csv")?;
    let norm = read("norm_matrix.csv")?;
    if matrix.first().map(String::as_str) != Some("train_density,test_density,variant,layers,filters,loss") {
        return Err(GeoError::Config("matrix.csv: unexpected header".into()));
    }
    if matrix.len() != norm.len() {
        return Err(GeoError::Config("matrix.csv and norm_matrix.csv disagree on row count".into()));
    }
    let mut cells = Vec::new();
    for (i, (m, n)) in matrix.iter().zip(&norm).enumerate().skip(1) {
        let mf = split_csv_line(m, 6, "matrix.csv", i)?;
        let nf = split_csv_line(n, 6, "norm_matrix.csv", i)?;
        cells.push(MatrixCell {
            train_density: parse_f32(mf[0], "matrix.csv", i)?,
            test_density: parse_f32(mf[1], "matrix.csv", i)?,
            variant: LayerVariant::from_name(mf[2])?,
            layers: parse_usize(mf[3], "matrix.csv", i)?,
            filters: parse_usize(mf[4], "matrix.csv", i)?,
            loss: parse_f32(mf[5], "matrix.csv", i)?,
            norm_loss: parse_f32(nf[5], "norm_matrix.csv", i)?,
        });
    }
    Ok(cells)
}

/// Re-parses `aggregates.csv`.
pub fn parse_aggregates_csv(dir: &Path) -> Result<Vec<VariantAggregate>> {
    let text = std::fs::read_to_string(dir.join("aggregates.csv"))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f = split_csv_line(line, 4, "aggregates.csv", i)?;
        out.push(VariantAggregate {
            variant: LayerVariant::from_name(f[0])?,
            avg_loss: parse_f32(f[1], "aggregates.csv", i)?,
            norm_avg_loss: parse_f32(f[2], "aggregates.csv", i)?,
            best_count: parse_usize(f[3], "aggregates.csv", i)?,
        });
    }
    Ok(out)
}
