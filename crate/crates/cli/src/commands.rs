//! Pipeline stages.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::{info, warn};
use phasepos::channel::ChannelOptions;
use phasepos::dataset::{derive_seed, generate, Dataset, DatasetHeader};
use phasepos::eval::{compare, write_ecdf_csv, write_rmse_csv, Comparison, EvalReport, MleMethod};
use phasepos::mle::{grid_for_budget, mle_flops, RefineConfig};
use phasepos::models::{build, fit_scaling, method_flops, training_data, ModelBundle, ModelKind};
use phasepos::scenario::{generate_seeded, Scenario};
use phasepos_nn::io::{load_checkpoint, save_checkpoint, WeightsHeader};
use phasepos_nn::{layer_sparsities, train, EpochRecord, Network, TrainerState};
use serde::Serialize;

use crate::config::RunConfig;
use crate::layout::{freq_tag, power_tag, Layout, SPLITS};
use crate::{CliError, Result};

/// Subset of the experiment grid a command works on.
#[derive(Clone, Debug, Default)]
pub struct Selection {
    pub frequency: Option<f64>,
    pub power_dbm: Option<f64>,
    /// Empty selects every model.
    pub models: Vec<ModelKind>,
}

impl Selection {
    pub fn frequencies(&self, cfg: &RunConfig) -> Vec<f64> {
        self.frequency.map_or_else(|| cfg.frequencies.clone(), |f| vec![f])
    }

    pub fn powers(&self, cfg: &RunConfig) -> Vec<f64> {
        self.power_dbm.map_or_else(|| cfg.powers_dbm.clone(), |p| vec![p])
    }

    /// Requested models in training order: the ambiguity estimator precedes
    /// the CNN that depends on it.
    pub fn models(&self) -> Vec<ModelKind> {
        let mut m = if self.models.is_empty() {
            vec![ModelKind::Ae, ModelKind::Cnn, ModelKind::Mlp]
        } else {
            self.models.clone()
        };
        m.sort_by_key(|k| match k {
            ModelKind::Ae => 0,
            ModelKind::Cnn => 1,
            ModelKind::Mlp => 2,
        });
        m.dedup();
        m
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(())
}

/// Writes (or verifies) the scenario file of every selected frequency.
pub fn cmd_scenario(cfg: &RunConfig, sel: &Selection) -> Result<Vec<Scenario>> {
    let layout = Layout::new(&cfg.output_dir);
    let mut out = Vec::new();
    for f in sel.frequencies(cfg) {
        let s = generate_seeded(&cfg.scenario_config(f))?;
        let path = layout.scenario(f);
        if path.exists() {
            let existing = Scenario::load(&path)?;
            if existing.hash() != s.hash() {
                return Err(CliError::Data(format!(
                    "{}: scenario on disk differs from the configured one (hash {} vs {}); use a fresh output directory",
                    path.display(),
                    existing.hash(),
                    s.hash()
                )));
            }
        } else {
            create_parent(&path)?;
            s.save(&path)?;
        }
        info!(
            "scenario {}: {} APs, lambda {:.6} m, Q = {}, hash {}",
            freq_tag(f),
            s.ap_count(),
            s.wavelength,
            s.label_count,
            &s.hash()[..12]
        );
        out.push(s);
    }
    Ok(out)
}

pub fn load_scenario(cfg: &RunConfig, f: f64) -> Result<Scenario> {
    let path = Layout::new(&cfg.output_dir).scenario(f);
    if !path.exists() {
        return Err(CliError::Data(format!(
            "{}: scenario missing; run the `scenario` stage first",
            path.display()
        )));
    }
    Ok(Scenario::load(&path)?)
}

fn split_size(cfg: &RunConfig, split: &str) -> usize {
    match split {
        "train" => cfg.sizes.train,
        "val" => cfg.sizes.val,
        _ => cfg.sizes.test,
    }
}

pub fn dataset_seed(cfg: &RunConfig, f: f64, p: f64, split: &str) -> u64 {
    derive_seed(cfg.seed, &format!("data/{}/{}/{split}", freq_tag(f), power_tag(p)))
}

fn read_header(path: &Path) -> Option<DatasetHeader> {
    let mut line = String::new();
    BufReader::new(File::open(path).ok()?).read_line(&mut line).ok()?;
    serde_json::from_str(line.trim_end()).ok()
}

/// Simulates every missing split. Existing files whose header matches the
/// configuration are kept, so an interrupted run resumes where it stopped.
pub fn cmd_simulate(cfg: &RunConfig, sel: &Selection) -> Result<()> {
    let layout = Layout::new(&cfg.output_dir);
    let channel = ChannelOptions::default();
    for f in sel.frequencies(cfg) {
        let scenario = load_scenario(cfg, f)?;
        for p in sel.powers(cfg) {
            for split in SPLITS {
                let path = layout.dataset(f, p, split);
                let seed = dataset_seed(cfg, f, p, split);
                let count = split_size(cfg, split);
                if let Some(h) = read_header(&path) {
                    if h.scenario_hash == scenario.hash()
                        && h.seed == seed
                        && h.count == count
                        && h.power_dbm == p
                        && h.channel == channel
                    {
                        info!("{}: up to date", path.display());
                        continue;
                    }
                    warn!("{}: stale, regenerating", path.display());
                }
                create_parent(&path)?;
                let ds = generate(&scenario, p, count, seed, split, &channel)?;
                ds.save(&path)?;
                info!(
                    "{}: {} samples, {} clamped labels",
                    path.display(),
                    count,
                    ds.header.clamped_labels
                );
            }
        }
    }
    Ok(())
}

pub fn load_dataset(cfg: &RunConfig, scenario: &Scenario, p: f64, split: &str) -> Result<Dataset> {
    let path = Layout::new(&cfg.output_dir).dataset(scenario.carrier_frequency, p, split);
    if !path.exists() {
        return Err(CliError::Data(format!(
            "{}: dataset missing for {} at {p} dBm; run the `simulate` stage first",
            path.display(),
            freq_tag(scenario.carrier_frequency)
        )));
    }
    let ds = Dataset::load(&path)?;
    ds.check_scenario(scenario)?;
    Ok(ds)
}

/// Hooks used to interrupt training deliberately.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Stop with [`CliError::Interrupted`] after this many completed epochs.
    pub stop_after_epochs: Option<usize>,
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    train_loss: f64,
    val_loss: Option<f64>,
    sparsity: f64,
}

fn write_loss_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in history {
        w.serialize(LossRow {
            epoch: r.epoch + 1,
            train_loss: r.train_loss,
            val_loss: r.val_loss,
            sparsity: r.sparsity,
        })
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Trains every selected model that its bundle does not hold yet.
pub fn cmd_train(cfg: &RunConfig, sel: &Selection, opts: TrainOptions) -> Result<()> {
    let layout = Layout::new(&cfg.output_dir);
    for f in sel.frequencies(cfg) {
        let scenario = load_scenario(cfg, f)?;
        for p in sel.powers(cfg) {
            let mut bundle =
                ModelBundle::open_or_create(&layout.bundle(f, p), &scenario, p, cfg.hyperparams, cfg.features)?;
            let mut data = None;
            for kind in sel.models() {
                if bundle.has(kind) {
                    info!("{} {} {}: already trained", kind.name(), freq_tag(f), power_tag(p));
                    continue;
                }
                if kind == ModelKind::Cnn && !bundle.has(ModelKind::Ae) {
                    return Err(CliError::Data(format!(
                        "cnn at {} {} needs the ambiguity estimator; train `ae` first",
                        freq_tag(f),
                        power_tag(p)
                    )));
                }
                if data.is_none() {
                    data = Some((
                        load_dataset(cfg, &scenario, p, "train")?,
                        load_dataset(cfg, &scenario, p, "val")?,
                    ));
                }
                let (train_set, val_set) = data.as_ref().expect("loaded");
                train_one(cfg, &layout, &scenario, p, kind, train_set, val_set, &mut bundle, opts)?;
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_one(
    cfg: &RunConfig,
    layout: &Layout,
    scenario: &Scenario,
    p: f64,
    kind: ModelKind,
    train_set: &Dataset,
    val_set: &Dataset,
    bundle: &mut ModelBundle,
    opts: TrainOptions,
) -> Result<()> {
    let f = scenario.carrier_frequency;
    let tag = format!("{}/{}/{}", freq_tag(f), power_tag(p), kind.name());
    let init_seed = derive_seed(cfg.seed, &format!("init/{tag}"));
    let tc = cfg.train_config(kind, f, derive_seed(cfg.seed, &format!("shuffle/{tag}")));
    let scaling = fit_scaling(kind, train_set, scenario, &cfg.features);
    let train_data = training_data(kind, train_set, scenario, &cfg.features, scaling.as_ref())?;
    let val_data = training_data(kind, val_set, scenario, &cfg.features, scaling.as_ref())?;
    let spec = build(kind, &cfg.hyperparams, scenario);
    let ckpt = layout.checkpoint(f, p, kind);
    let meta = serde_json::json!({
        "model": kind.name(),
        "scenario_hash": scenario.hash(),
        "power_dbm": p,
    });

    let (mut header, mut state) = match ckpt.exists() {
        true => {
            let (h, s) = load_checkpoint::<f32>(&ckpt)?;
            if h.spec != spec || h.train_config.as_ref() != Some(&tc) || h.meta != meta || h.seed != init_seed {
                return Err(CliError::Data(format!(
                    "{}: checkpoint belongs to a different configuration; delete it to start over",
                    ckpt.display()
                )));
            }
            info!("{tag}: resuming at epoch {}", s.next_epoch);
            (h, s)
        }
        false => {
            let net = Network::<f32>::init(spec, init_seed)?;
            let mut h = WeightsHeader::new(&net, init_seed);
            h.train_config = Some(tc.clone());
            h.meta = meta;
            (h, TrainerState::new(net, &tc))
        }
    };
    create_parent(&ckpt)?;
    let every = cfg.train.checkpoint_every;
    let started = std::time::Instant::now();
    let first_epoch = state.next_epoch;
    let mut observer = |s: &TrainerState<f32>| -> phasepos_nn::Result<()> {
        let done = s.next_epoch;
        let last = s.history.last().expect("epoch recorded");
        if done % every == 0 || done == tc.epochs || done == first_epoch + 1 {
            let per = started.elapsed().as_secs_f64() / (done - first_epoch) as f64;
            info!(
                "{tag}: epoch {done}/{} loss {:.5} val {:.5} sparsity {:.3} ({per:.1} s/epoch)",
                tc.epochs,
                last.train_loss,
                last.val_loss.unwrap_or(f64::NAN),
                last.sparsity
            );
        }
        if done % every == 0 && done < tc.epochs {
            save_checkpoint(&ckpt, &header, s)?;
        }
        if opts.stop_after_epochs == Some(done) && done < tc.epochs {
            save_checkpoint(&ckpt, &header, s)?;
            return Err(phasepos_nn::NnError::Observer(format!("stopped after epoch {done}")));
        }
        Ok(())
    };
    match train(&mut state, &train_data, Some(&val_data), &tc, &mut observer) {
        Ok(()) => {}
        Err(phasepos_nn::NnError::Observer(_)) => return Err(CliError::Interrupted(state.next_epoch)),
        Err(phasepos_nn::NnError::Diverged { epoch, batch }) => {
            return Err(CliError::Numeric(format!(
                "{tag}: non-finite loss at epoch {epoch}, batch {batch} (learning rate {}, batch size {}); \
                 last checkpoint kept at {}",
                tc.learning_rate,
                tc.batch_size,
                ckpt.display()
            )))
        }
        Err(e) => return Err(e.into()),
    }
    header.epoch = state.next_epoch;
    header.history = state.history.clone();
    let sparsities = layer_sparsities(&state.network);
    info!(
        "{tag}: done, layer sparsities {:?}",
        sparsities.iter().map(|s| (s * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    write_loss_csv(&layout.loss_history(f, p, kind), &state.history)?;
    bundle.put(kind, &header, &state.network, tc.target_sparsity, scaling)?;
    if ckpt.exists() {
        fs::remove_file(&ckpt).map_err(|e| io_err(&ckpt, e))?;
    }
    Ok(())
}

/// Inference cost of each trained method at one frequency.
pub fn method_costs(cfg: &RunConfig, scenario: &Scenario) -> Result<BTreeMap<ModelKind, u64>> {
    let f = scenario.carrier_frequency;
    let sparsity: BTreeMap<ModelKind, f64> = ModelKind::ALL
        .iter()
        .map(|&k| (k, cfg.sparsity.resolve(k, f)))
        .collect();
    let mut out = BTreeMap::new();
    for kind in [ModelKind::Mlp, ModelKind::Cnn] {
        out.insert(kind, method_flops(kind, &cfg.hyperparams, scenario, &sparsity)?);
    }
    Ok(out)
}

/// Evaluates every trained method and the MLE baselines on the test sets.
pub fn cmd_bench(cfg: &RunConfig, sel: &Selection) -> Result<Vec<EvalReport>> {
    let layout = Layout::new(&cfg.output_dir);
    let models = sel.models();
    let want_direct = models.contains(&ModelKind::Mlp);
    let want_aided = models.contains(&ModelKind::Cnn) || models.contains(&ModelKind::Ae);
    let refine = RefineConfig {
        steps: cfg.bench.refine_steps,
        ..RefineConfig::default()
    };
    let mut all = Vec::new();
    for f in sel.frequencies(cfg) {
        let scenario = load_scenario(cfg, f)?;
        let costs = method_costs(cfg, &scenario)?;
        let i = scenario.ap_count();
        let mut mle = Vec::new();
        if want_direct {
            mle.push(MleMethod {
                name: "mle_mlp_matched".into(),
                n_grid: grid_for_budget(costs[&ModelKind::Mlp], i)?,
            });
        }
        if want_aided {
            mle.push(MleMethod {
                name: "mle_cnn_matched".into(),
                n_grid: grid_for_budget(costs[&ModelKind::Cnn], i)?,
            });
        }
        let reference = cfg.reference_grid(f);
        if let (true, Some(n)) = (cfg.bench.run_reference_mle, reference) {
            mle.push(MleMethod {
                name: "mle_reference".into(),
                n_grid: n,
            });
        }
        let mut per_freq = Vec::new();
        for p in sel.powers(cfg) {
            let bundle_dir = layout.bundle(f, p);
            let missing = |what: &str| {
                CliError::Data(format!(
                    "no trained {what} for {} at {p} dBm (expected in {}); run `train` first",
                    freq_tag(f),
                    bundle_dir.display()
                ))
            };
            if !bundle_dir.join(phasepos::models::MANIFEST_FILE).exists() {
                return Err(missing("models"));
            }
            let bundle = ModelBundle::open(&bundle_dir)?;
            bundle.check_scenario(&scenario)?;
            let direct = match want_direct {
                true if !bundle.has(ModelKind::Mlp) => return Err(missing("mlp")),
                true => Some(bundle.direct()?),
                false => None,
            };
            let aided = match want_aided {
                true if !bundle.has(ModelKind::Ae) => return Err(missing("ae")),
                true if !bundle.has(ModelKind::Cnn) => return Err(missing("cnn")),
                true => Some(bundle.aided(&scenario)?),
                false => None,
            };
            let test = load_dataset(cfg, &scenario, p, "test")?;
            let reports = compare(&Comparison {
                scenario: &scenario,
                test: &test,
                direct: direct.as_ref().map(|d| (d, costs[&ModelKind::Mlp])),
                aided: aided.as_ref().map(|a| (a, costs[&ModelKind::Cnn])),
                mle: mle.clone(),
                mle_samples: cfg.bench.mle_samples,
                residual: cfg.bench.residual,
                refine,
                reference_n_grid: reference,
            })?;
            for r in &reports {
                info!(
                    "{} {}: {:<16} rmse {:.4} m  p95 {:.4} m  flops {}{}",
                    freq_tag(f),
                    power_tag(p),
                    r.method,
                    r.rmse,
                    r.p95,
                    r.flops,
                    r.acc_element
                        .map(|a| format!("  acc_e {a:.2}% acc_o {:.2}%", r.acc_overall.unwrap_or(f64::NAN)))
                        .unwrap_or_default()
                );
            }
            per_freq.extend(reports);
        }
        let dir = layout.reports();
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        write_rmse_csv(&dir.join(format!("rmse_vs_power_{}.csv", freq_tag(f))), &per_freq)?;
        all.extend(per_freq);
    }
    let dir = layout.reports();
    let at_zero: Vec<EvalReport> = all.iter().filter(|r| r.power_dbm == 0.0).cloned().collect();
    if !at_zero.is_empty() {
        write_ecdf_csv(&dir.join("ecdf_0dBm.csv"), &at_zero)?;
    }
    let path = dir.join("reports.json");
    let text = serde_json::to_string_pretty(&all).expect("reports serialize") + "\n";
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(all)
}

#[derive(Serialize)]
struct ComplexityRow {
    frequency: f64,
    method: String,
    flops: u64,
    n_grid: Option<usize>,
    reduction_factor: Option<f64>,
}

/// Writes the complexity table and CSV copies of the selected test sets.
pub fn cmd_export(cfg: &RunConfig, sel: &Selection) -> Result<()> {
    let layout = Layout::new(&cfg.output_dir);
    let dir = layout.reports();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let path = dir.join("complexity.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
    for f in sel.frequencies(cfg) {
        let scenario = load_scenario(cfg, f)?;
        let i = scenario.ap_count();
        let reference = cfg.reference_grid(f).map(|n| mle_flops(n, i));
        for (kind, flops) in method_costs(cfg, &scenario)? {
            let n_grid = grid_for_budget(flops, i)?;
            for (method, cost, grid) in [
                (kind.name().to_string(), flops, None),
                (format!("mle_{}_matched", kind.name()), mle_flops(n_grid, i), Some(n_grid)),
            ] {
                w.serialize(ComplexityRow {
                    frequency: f,
                    method,
                    flops: cost,
                    n_grid: grid,
                    reduction_factor: reference.filter(|_| grid.is_none()).map(|m| m as f64 / cost as f64),
                })
                .map_err(|e| io_err(&path, e))?;
            }
        }
        for p in sel.powers(cfg) {
            let src = layout.dataset(f, p, "test");
            if src.exists() {
                let ds = Dataset::load(&src)?;
                ds.check_scenario(&scenario)?;
                let out = dir.join(format!("test_{}_{}.csv", freq_tag(f), power_tag(p)));
                ds.write_csv(&out)?;
                info!("{}: exported", out.display());
            }
        }
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(())
}

/// Scenario, simulation, training and benchmark in one pass.
pub fn cmd_run(cfg: &RunConfig, sel: &Selection) -> Result<Vec<EvalReport>> {
    cmd_scenario(cfg, sel)?;
    cmd_simulate(cfg, sel)?;
    cmd_train(cfg, sel, TrainOptions::default())?;
    cmd_bench(cfg, sel)
}
