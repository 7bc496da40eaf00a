use std::fs;
use std::path::Path;
use std::time::Instant;

use log::info;

use gradguard::bounds::{fisher_trace_audit, reconstruction_bound};
use gradguard::data::config::ExperimentConfig;
use gradguard::data::image::write_grid;
use gradguard::data::metrics::{format_float, write_metrics, write_table, MetricRow, COLUMNS};
use gradguard::fl::{self, bound_row_norms, client_step};
use gradguard::nn::{Batch, Model, ParamVector};
use gradguard::{attack, rng, Error, Result};

use crate::fixtures;
use crate::RunArgs;

const TAG_CLI_DEFENSE: u64 = 100;
const TAG_CLI_ATTACK: u64 = 101;

struct Setup {
    cfg: ExperimentConfig,
    model: Model,
    seeds: Vec<u64>,
}

fn setup(args: &RunArgs) -> Result<Setup> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let model = cfg.build_model()?;
    let seeds = match args.seed {
        Some(s) => vec![s],
        None => cfg.experiment.seeds.clone(),
    };
    info!(
        "{}: {} parameters, seeds {seeds:?}",
        cfg.experiment.id,
        model.param_count()
    );
    Ok(Setup { cfg, model, seeds })
}

/// Writes every output only after the whole computation succeeded.
fn write_outputs(out: &Path, files: Vec<(&str, Output)>) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (name, o) in files {
        let path = out.join(name);
        match o {
            Output::Metrics(rows) => write_metrics(&rows, &path)?,
            Output::Table(header, rows) => write_table(&path, &header, &rows)?,
            Output::Image(t) => write_grid(&path, &t)?,
        }
        info!("wrote {}", path.display());
    }
    Ok(())
}

enum Output {
    Metrics(Vec<MetricRow>),
    Table(Vec<String>, Vec<Vec<String>>),
    Image(gradguard::nn::Tensor),
}

fn print_table(rows: &[MetricRow]) {
    let body: Vec<[String; 12]> = rows.iter().map(MetricRow::fields).collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| {
            body.iter()
                .map(|r| r[c].len())
                .chain([COLUMNS[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    println!("{}", line(COLUMNS.to_vec()));
    for r in &body {
        println!("{}", line(r.iter().map(String::as_str).collect()));
    }
}

fn elapsed(cfg: &ExperimentConfig, t: Instant) -> Option<f64> {
    cfg.experiment
        .record_wall_time
        .then(|| t.elapsed().as_secs_f64())
}

fn image_shaped(batch: &Batch) -> bool {
    let s = batch.inputs.shape();
    s.len() == 4 && (s[1] == 1 || s[1] == 3)
}

struct Observed {
    params: ParamVector,
    batch: Batch,
    step: fl::ClientStep,
    trace: f64,
    bound: f64,
}

/// Gradient, defense and bound of the configured batch at `seed`.
fn observe(s: &Setup, seed: u64) -> Result<Observed> {
    let params = s.cfg.param_source(&s.model)?.resolve(&s.model, seed)?;
    let ds = s.cfg.load_dataset()?;
    let batch = s.cfg.select_batch(&ds)?;
    let rows = bound_row_norms(&s.model, &params, &batch, s.cfg.bound.rows, seed, 0)?;
    let mut r = rng::stream(seed, &[TAG_CLI_DEFENSE]);
    let step = client_step(
        &s.model,
        &params,
        &batch,
        &s.cfg.defense,
        Some(&rows),
        &mut r,
    )?;
    let trace = fisher_trace_audit(&rows, &step.defended.audit)?;
    let report = reconstruction_bound(trace, batch.input_dim(), &s.cfg.bound.prior)?;
    Ok(Observed {
        params,
        batch,
        step,
        trace,
        bound: report.bound_value,
    })
}

fn prune_ratio(step: &fl::ClientStep) -> f64 {
    step.defended.audit.pruned_set.len() as f64 / step.gradient.len() as f64
}

pub fn bound(args: &RunArgs) -> Result<()> {
    let s = setup(args)?;
    let mut rows = Vec::new();
    for &seed in &s.seeds {
        let t = Instant::now();
        let o = observe(&s, seed)?;
        rows.push(MetricRow {
            experiment_id: s.cfg.experiment.id.clone(),
            defense: s.cfg.defense.descriptor(),
            seed,
            fisher_trace: Some(o.trace),
            bound_value: Some(o.bound),
            noise_frobenius: Some(o.step.defended.audit.noise_frobenius()),
            prune_ratio: Some(prune_ratio(&o.step)),
            wall_time: elapsed(&s.cfg, t),
            ..MetricRow::default()
        });
    }
    print_table(&rows);
    write_outputs(&args.out, vec![("bound.csv", Output::Metrics(rows))])
}

pub fn attack(args: &RunArgs) -> Result<()> {
    let s = setup(args)?;
    let mut rows = Vec::new();
    let mut files = Vec::new();
    let mut truth = None;
    for &seed in &s.seeds {
        let t = Instant::now();
        let o = observe(&s, seed)?;
        let mut r = rng::stream(seed, &[TAG_CLI_ATTACK]);
        let res = attack::invert(
            &s.model,
            &o.params,
            &o.step.defended.values,
            &o.batch,
            &s.cfg.attack,
            &mut r,
        )?;
        for w in &res.warnings {
            log::warn!("seed {seed}: {w}");
        }
        info!(
            "seed {seed}: match loss {:.3e}, mse {:.3e}",
            res.final_match_loss, res.mse
        );
        rows.push(MetricRow {
            experiment_id: s.cfg.experiment.id.clone(),
            defense: s.cfg.defense.descriptor(),
            seed,
            mse: Some(res.mse),
            psnr: Some(res.psnr),
            fisher_trace: Some(o.trace),
            bound_value: Some(o.bound),
            noise_frobenius: Some(o.step.defended.audit.noise_frobenius()),
            prune_ratio: Some(prune_ratio(&o.step)),
            wall_time: elapsed(&s.cfg, t),
            ..MetricRow::default()
        });
        if image_shaped(&o.batch) {
            files.push((seed, res.reconstruction));
            truth.get_or_insert(o.batch.inputs);
        }
    }
    print_table(&rows);
    let names: Vec<String> = files
        .iter()
        .map(|(seed, _)| format!("recon-seed{seed}.pgm"))
        .collect();
    let mut outputs: Vec<(&str, Output)> = vec![("attack.csv", Output::Metrics(rows))];
    if let Some(t) = truth {
        outputs.push(("truth.pgm", Output::Image(t)));
    }
    for (name, (_, rec)) in names.iter().zip(files) {
        outputs.push((name.as_str(), Output::Image(rec)));
    }
    write_outputs(&args.out, outputs)
}

pub fn train(args: &RunArgs) -> Result<()> {
    let s = setup(args)?;
    let ds = s.cfg.load_dataset()?;
    let source = s.cfg.param_source(&s.model)?;
    let mut metrics = Vec::new();
    let mut log_rows = Vec::new();
    let mut layers = Vec::new();
    let defense_name = match &s.cfg.client_defenses {
        Some(list) => list
            .iter()
            .map(|d| d.descriptor())
            .collect::<Vec<_>>()
            .join("|"),
        None => s.cfg.defense.descriptor(),
    };
    for &seed in &s.seeds {
        let t = Instant::now();
        let init = source.resolve(&s.model, seed)?;
        let out = fl::train(&s.model, &init, &ds, &s.cfg.fl_config(seed)?)?;
        let wall = elapsed(&s.cfg, t);
        layers = out.log.sigma_layers.clone();
        for r in &out.log.rounds {
            info!("seed {seed} round {}: loss {:.6}", r.round, r.train_loss);
            let mut row = vec![
                seed.to_string(),
                r.round.to_string(),
                format_float(r.train_loss),
                format_float(r.eval_loss),
                format_float(r.smoothed_loss),
                format_float(r.u1),
                format_float(r.u2),
                format_float(r.noise_frobenius),
                format_float(r.prune_ratio),
                r.fisher_trace.map(format_float).unwrap_or_default(),
            ];
            if r.layer_sigma.is_empty() {
                row.extend(layers.iter().map(|_| String::new()));
            } else {
                row.extend(r.layer_sigma.iter().map(|v| format_float(*v)));
            }
            log_rows.push(row);
            metrics.push(MetricRow {
                experiment_id: s.cfg.experiment.id.clone(),
                defense: defense_name.clone(),
                seed,
                round: Some(r.round),
                train_loss: Some(r.train_loss),
                fisher_trace: r.fisher_trace,
                noise_frobenius: Some(r.noise_frobenius),
                prune_ratio: Some(r.prune_ratio),
                wall_time: wall,
                ..MetricRow::default()
            });
        }
    }
    let mut header: Vec<String> = [
        "seed",
        "round",
        "train_loss",
        "eval_loss",
        "smoothed_loss",
        "u1",
        "u2",
        "noise_frobenius",
        "prune_ratio",
        "fisher_trace",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(layers.iter().map(|l| format!("sigma_layer_{l}")));
    print_table(&metrics);
    write_outputs(
        &args.out,
        vec![
            ("train_log.csv", Output::Table(header, log_rows)),
            ("metrics.csv", Output::Metrics(metrics)),
        ],
    )
}

pub fn sweep(args: &RunArgs) -> Result<()> {
    let s = setup(args)?;
    if s.cfg.grid.is_empty() {
        return Err(Error::config("sweep needs a non-empty [[grid]]"));
    }
    let ds = s.cfg.load_dataset()?;
    let source = s.cfg.param_source(&s.model)?;
    let mut sc = s.cfg.sweep_config();
    sc.seeds = s.seeds.clone();
    let t = Instant::now();
    let mut rows = fl::sweep(
        &s.model,
        &source,
        &ds,
        &s.cfg.grid,
        &s.cfg.fl_config(0)?,
        &s.cfg.attack,
        &sc,
    )?;
    if let Some(w) = elapsed(&s.cfg, t) {
        for r in &mut rows {
            r.wall_time = Some(w);
        }
    }
    print_table(&rows);
    write_outputs(&args.out, vec![("sweep.csv", Output::Metrics(rows))])
}

pub fn gen_fixtures(out: &Path) -> Result<()> {
    for f in fixtures::write_all(out)? {
        println!("{}", out.join(f).display());
    }
    Ok(())
}
