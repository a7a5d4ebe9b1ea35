use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{
    client_smoothness, estimate_sigma_g, estimate_sigma_l, generate_synthetic, manifest_text, partition, ClientShard,
    Dataset,
};
use crate::error::{Error, Result};
use crate::federation::{
    fedavg_baseline, mean_model, metrics_csv, run_training_observed, timing_csv, ClientState, MetricsRecord,
};
use crate::rng::{derive_seed, domain};
use crate::split::{pretrain_encoder, Checkpoint, ClientModel, Encoder};
use crate::transcript::{MessageKind, Transcript};

use super::config::{ExperimentConfig, PartitionChoice};

/// Data, shards and starting encoder for one configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Rows available to clients; shard indices refer to this set.
    pub private: Dataset,
    pub public: Option<Dataset>,
    pub shards: Vec<ClientShard>,
    pub encoder: Encoder,
    pub pretrain_accuracy: Option<f64>,
}

/// Generates the dataset, holds out the public split, partitions the rest
/// and builds the starting encoder (pre-trained or random).
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let data = generate_synthetic(cfg.samples, cfg.classes, cfg.separation, cfg.seed)?;
    let (public, private) = if cfg.public_fraction > 0.0 {
        let (p, rest) = data.split_stratified(cfg.public_fraction, cfg.seed)?;
        (Some(p), rest)
    } else {
        (None, data)
    };
    let shards = partition(&private, &cfg.partition_spec())?;
    let dims = cfg.model_dims();
    let (encoder, pretrain_accuracy) = match (&public, cfg.pretrain) {
        (Some(p), true) => {
            let out = pretrain_encoder(dims, p, &cfg.pretrain_config(), cfg.seed)?;
            (out.encoder, Some(out.train_accuracy))
        }
        _ => (Encoder::init(dims, cfg.seed)?, None),
    };
    Ok(Prepared {
        private,
        public,
        shards,
        encoder,
        pretrain_accuracy,
    })
}

fn header(cfg: &ExperimentConfig) -> String {
    format!("fedsplit config={} seed={}", cfg.hash(), cfg.seed)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_csv(dir: &Path, name: &str, cfg: &ExperimentConfig, body: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    write(&path, &format!("# {}\n{body}", header(cfg)))?;
    Ok(path)
}

/// Writes the partition manifest unless an identical one is already there.
/// A differing existing manifest is never replaced.
fn write_manifest(dir: &Path, cfg: &ExperimentConfig, shards: &[ClientShard]) -> Result<PathBuf> {
    let path = dir.join("partition.txt");
    let text = manifest_text(&cfg.partition_spec(), shards, &[header(cfg)]);
    match fs::read_to_string(&path) {
        Ok(existing) if existing == text => Ok(path),
        Ok(_) => Err(Error::Config(format!(
            "{} holds a different partition; use a fresh output directory",
            path.display()
        ))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            write(&path, &text)?;
            Ok(path)
        }
        Err(e) => Err(Error::io(path, e)),
    }
}

fn transcript_summary(t: &Transcript) -> String {
    let mut totals: BTreeMap<(usize, MessageKind), (usize, usize)> = BTreeMap::new();
    for e in &t.events {
        let slot = totals.entry((e.round, e.kind)).or_default();
        slot.0 += 1;
        slot.1 += e.bytes();
    }
    let mut out = String::from("round,kind,messages,bytes\n");
    for ((round, kind), (n, bytes)) in totals {
        let _ = writeln!(out, "{round},{},{n},{bytes}", kind.name());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub round: usize,
    pub sigma_g2_mean: f64,
    pub sigma_g2_max: f64,
    pub sigma_l2_mean: f64,
    pub smoothness_max: f64,
}

pub const PROBE_HEADER: &str = "round,sigma_g2_mean,sigma_g2_max,sigma_l2_mean,smoothness_max";

fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut out = format!("{PROBE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.round, r.sigma_g2_mean, r.sigma_g2_max, r.sigma_l2_mean, r.smoothness_max
        );
    }
    out
}

/// σ_g², σ_l² and smoothness of `model` with `encoder` over every shard.
pub fn probe_state(
    cfg: &ExperimentConfig,
    model: &ClientModel,
    encoder: &Encoder,
    data: &Dataset,
    shards: &[ClientShard],
    round: usize,
) -> Result<ProbeRow> {
    let gv = estimate_sigma_g(model, encoder, data, shards)?;
    let seed = derive_seed(cfg.seed, domain::PROBE, &[round as u64]);
    let per_client = shards
        .par_iter()
        .map(|s| {
            let batch = cfg.batch_size.min(s.train.len() / 2).max(1);
            let sl = estimate_sigma_l(model, encoder, data, s, batch, cfg.probe_batches, seed)?;
            let sm = if cfg.probe_pairs > 0 {
                client_smoothness(model, encoder, data, s, cfg.probe_pairs, cfg.probe_radius, seed)?.estimate
            } else {
                0.0
            };
            Ok((sl, sm))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeRow {
        round,
        sigma_g2_mean: gv.mean,
        sigma_g2_max: gv.max,
        sigma_l2_mean: per_client.iter().map(|p| p.0).sum::<f64>() / per_client.len() as f64,
        smoothness_max: per_client.iter().map(|p| p.1).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub metrics: Vec<MetricsRecord>,
    pub probes: Vec<ProbeRow>,
    pub fedavg: Option<Vec<MetricsRecord>>,
    pub pretrain_accuracy: Option<f64>,
    pub files: Vec<PathBuf>,
}

impl RunSummary {
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |r| r.mean_test_accuracy)
    }
}

/// Runs one configuration and writes its artifacts into `cfg.output_dir`:
/// `config.txt`, `partition.txt`, `metrics.csv`, `timing.csv`,
/// `transcript_summary.csv`, `checkpoint.txt`, and when enabled
/// `probes.csv`, `transcript.txt` and `fedavg_metrics.csv`. Every file but
/// `timing.csv` is a deterministic function of the configuration.
pub fn run_experiment(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<RunSummary> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let prep = prepare(cfg)?;
    if let Some(acc) = prep.pretrain_accuracy {
        progress(&format!("pre-trained encoder, public train accuracy {acc:.4}"));
    }
    let mut files = vec![
        write_csv(&dir, "config.txt", cfg, &cfg.to_text())?,
        write_manifest(&dir, cfg, &prep.shards)?,
    ];

    let round_cfg = cfg.round_config();
    let mut probes = Vec::new();
    let every = cfg.probe_every;
    let run = run_training_observed(&round_cfg, &prep.private, &prep.shards, prep.encoder.clone(), 0, |view| {
        let r = view.record;
        if every > 0 && (view.round + 1) % every == 0 {
            let model = mean_model(view.clients);
            probes.push(probe_state(cfg, &model, &view.server.encoder, &prep.private, &prep.shards, view.round)?);
        }
        progress(&format!(
            "round {:>4}  loss {:.4}  acc {:.4}",
            r.round + 1,
            r.mean_train_loss,
            r.mean_test_accuracy
        ));
        Ok(())
    })?;
    // fold the probe into the metrics rows
    let mut metrics = run.metrics;
    for p in &probes {
        metrics[p.round].sigma_g2 = Some((p.sigma_g2_mean, p.sigma_g2_max));
    }

    files.push(write_csv(&dir, "metrics.csv", cfg, &metrics_csv(&metrics))?);
    files.push(write_csv(&dir, "timing.csv", cfg, &timing_csv(&metrics))?);
    files.push(write_csv(&dir, "transcript_summary.csv", cfg, &transcript_summary(&run.transcript))?);
    if cfg.full_transcript {
        files.push(write_csv(&dir, "transcript.txt", cfg, &run.transcript.to_text())?);
    }
    if every > 0 {
        files.push(write_csv(&dir, "probes.csv", cfg, &probe_csv(&probes))?);
    }
    let models: Vec<ClientModel> = run.clients.iter().map(|c: &ClientState| c.model.clone()).collect();
    let mut ck = Checkpoint::from_models(&run.server.encoder, &models);
    ck.header.push(header(cfg));
    let ck_path = dir.join("checkpoint.txt");
    write(&ck_path, &ck.to_text())?;
    files.push(ck_path);

    let fedavg = if cfg.fedavg_baseline {
        progress("running FedAvg baseline");
        let fa = fedavg_baseline(&round_cfg, &prep.private, &prep.shards, prep.encoder.clone())?;
        files.push(write_csv(&dir, "fedavg_metrics.csv", cfg, &metrics_csv(&fa.metrics))?);
        Some(fa.metrics)
    } else {
        None
    };

    Ok(RunSummary {
        out_dir: dir,
        metrics,
        probes,
        fedavg,
        pretrain_accuracy: prep.pretrain_accuracy,
        files,
    })
}

/// Partitions and probes the starting model without training. Writes
/// `config.txt`, `partition.txt` and `probes.csv` (one summary row) plus
/// `clients.csv` with per-client shard statistics.
pub fn probe(cfg: &ExperimentConfig) -> Result<ProbeRow> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let prep = prepare(cfg)?;
    write_csv(&dir, "config.txt", cfg, &cfg.to_text())?;
    write_manifest(&dir, cfg, &prep.shards)?;
    let model = ClientModel::init(cfg.model_dims(), cfg.seed, 0)?;
    let row = probe_state(cfg, &model, &prep.encoder, &prep.private, &prep.shards, 0)?;
    write_csv(&dir, "probes.csv", cfg, &probe_csv(std::slice::from_ref(&row)))?;

    let gv = estimate_sigma_g(&model, &prep.encoder, &prep.private, &prep.shards)?;
    let mut clients = String::from("client,train,test,classes,sigma_g2\n");
    for (s, dev) in prep.shards.iter().zip(&gv.deviations) {
        let mut present = vec![false; cfg.classes];
        s.train.iter().for_each(|&i| present[prep.private.labels[i]] = true);
        let _ = writeln!(
            clients,
            "{},{},{},{},{}",
            s.client_id,
            s.train.len(),
            s.test.len(),
            present.iter().filter(|p| **p).count(),
            dev
        );
    }
    write_csv(&dir, "clients.csv", cfg, &clients)?;
    Ok(row)
}

/// Hyperparameters a sweep may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    LocalSteps,
    Clients,
    SampleRatio,
    Fedround,
    Alpha,
    ClassesPerClient,
    Option,
}

impl SweepAxis {
    pub const NAMES: [&'static str; 7] = ["K", "M", "q", "fedround", "alpha", "c", "option"];

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "K" => SweepAxis::LocalSteps,
            "M" => SweepAxis::Clients,
            "q" => SweepAxis::SampleRatio,
            "fedround" => SweepAxis::Fedround,
            "alpha" | "α" => SweepAxis::Alpha,
            "c" => SweepAxis::ClassesPerClient,
            "option" => SweepAxis::Option,
            _ => {
                return Err(Error::Config(format!(
                    "unknown sweep axis `{name}`; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self as usize]
    }

    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::LocalSteps => "federation.local_steps",
            SweepAxis::Clients => "federation.clients",
            SweepAxis::SampleRatio => "federation.sample_ratio",
            SweepAxis::Fedround => "federation.fedround",
            SweepAxis::Alpha => "partition.alpha",
            SweepAxis::ClassesPerClient => "partition.classes_per_client",
            SweepAxis::Option => "federation.option",
        }
    }
}

/// Applies each value to the template and runs it in `<out>/<axis>=<value>`.
/// Values are validated before any run starts; a failing run stops the
/// sweep and leaves earlier outputs in place.
pub fn sweep(
    template: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    progress: &mut dyn FnMut(&str),
) -> Result<Vec<(String, RunSummary)>> {
    match (axis, template.partition) {
        (SweepAxis::Alpha, p) if p != PartitionChoice::Dirichlet => {
            return Err(Error::Config("sweeping alpha needs partition.kind = dirichlet".into()))
        }
        (SweepAxis::ClassesPerClient, p) if p != PartitionChoice::Pathological => {
            return Err(Error::Config("sweeping c needs partition.kind = pathological".into()))
        }
        _ => {}
    }
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut cfg = template.clone();
            cfg.set_value(axis.key(), v)
                .map_err(|e| e.in_context(format_args!("sweep {}={v}", axis.name())))?;
            cfg.output_dir = template.output_dir.join(format!("{}={v}", axis.name()));
            Ok((v.clone(), cfg))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut table = String::from("value,final_accuracy,best_accuracy,final_train_loss\n");
    let mut done = Vec::new();
    for (v, cfg) in configs {
        progress(&format!("sweep {}={v}", axis.name()));
        let summary = run_experiment(&cfg, progress)?;
        let best = summary.metrics.iter().map(|r| r.mean_test_accuracy).fold(0.0, f64::max);
        let loss = summary.metrics.last().map_or(f64::NAN, |r| r.mean_train_loss);
        let _ = writeln!(table, "{v},{},{best},{loss}", summary.final_accuracy());
        done.push((v, summary));
        fs::create_dir_all(&template.output_dir).map_err(|e| Error::io(&template.output_dir, e))?;
        write_csv(&template.output_dir, &format!("sweep_{}.csv", axis.name()), template, &table)?;
    }
    Ok(done)
}
