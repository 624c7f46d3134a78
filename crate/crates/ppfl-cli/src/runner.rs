//! Subcommand drivers: data generation, training, sweeps, evaluation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use ppfl_core::autodiff::Tape;
use ppfl_core::data::{prepare_client, ClientDataset, LoadSeries};
use ppfl_core::federation::{
    evaluate, run_experiment, ClientModel, EvalVariant, Mode, RunResult,
};
use ppfl_core::metrics::{ape_series, EvalReport};
use ppfl_core::model::forecast_batch;

use crate::checkpoint;
use crate::configfile::RunSettings;
use crate::csvio;
use crate::exec::ThreadPoolExecutor;
use crate::manifest::RunManifest;
use crate::report::{self, ApeBlock};

/// Load a data directory and window/normalize it for the configured
/// model dimensions.
pub fn load_datasets(settings: &RunSettings, data_dir: &Path) -> Result<Vec<ClientDataset>> {
    let series = csvio::load_data_dir(data_dir)?;
    prepare_datasets(settings, &series)
}

pub fn prepare_datasets(
    settings: &RunSettings,
    series: &[LoadSeries],
) -> Result<Vec<ClientDataset>> {
    series
        .iter()
        .map(|s| {
            prepare_client(s, settings.cfg.dims.window, settings.cfg.dims.horizon, &settings.split)
                .map_err(|e| anyhow::anyhow!("client {}: {e}", s.client_id))
        })
        .collect()
}

pub struct TrainOutcome {
    pub run: RunResult,
    pub report_own: EvalReport,
    /// Server-φ evaluation variant, for federated runs.
    pub report_server: Option<EvalReport>,
}

/// Train per the settings and evaluate on every client's test split.
pub fn train_and_evaluate(
    settings: &RunSettings,
    datasets: Vec<ClientDataset>,
) -> Result<TrainOutcome> {
    settings.cfg.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    settings.split.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    let executor = ThreadPoolExecutor::new(settings.workers);
    let run = run_experiment(&settings.cfg, datasets.clone(), &executor)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let report_own =
        evaluate(&run, &datasets, EvalVariant::ClientOwn).map_err(|e| anyhow::anyhow!("{e}"))?;
    let report_server = if settings.cfg.mode.is_federated() {
        Some(
            evaluate(&run, &datasets, EvalVariant::ServerShared)
                .map_err(|e| anyhow::anyhow!("{e}"))?,
        )
    } else {
        None
    };
    Ok(TrainOutcome { run, report_own, report_server })
}

/// Write the full artifact set for a training run into `out_dir`.
pub fn write_train_outputs(
    out_dir: &Path,
    settings: &RunSettings,
    outcome: &TrainOutcome,
    data_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let mut manifest = RunManifest::new(
        "train",
        settings.cfg.seed,
        settings.workers,
        settings.to_entries(),
    );
    for series_path in data_files(data_dir)? {
        manifest.fingerprint_file(&series_path)?;
    }
    let mut artifact = |name: &str| -> PathBuf {
        manifest.artifacts.push(name.to_string());
        out_dir.join(name)
    };

    report::write_metrics_table(
        &artifact("metrics.csv"),
        &[(
            settings.cfg.mode.to_string(),
            settings.cfg.dp.epsilon,
            outcome.report_own.aggregate_mase,
            outcome.report_own.aggregate_mape,
        )],
    )?;
    report::write_eval_report(&artifact("eval_report.csv"), &outcome.report_own)?;
    if let Some(server_report) = &outcome.report_server {
        report::write_eval_report(&artifact("eval_report_server_phi.csv"), server_report)?;
    }
    report::write_telemetry(&artifact("telemetry.csv"), &outcome.run.telemetry)?;
    report::write_val_records(&artifact("val.csv"), &outcome.run.val_records)?;
    checkpoint::write_checkpoint(&artifact("checkpoint.bin"), &outcome.run)?;
    let spec = outcome.run.spec();
    for snapshot in &outcome.run.snapshots {
        let name = format!("checkpoint_round_{}.bin", snapshot.round);
        checkpoint::write_models(
            &artifact(&name),
            &spec,
            &snapshot.server_phi,
            &snapshot.models,
        )?;
    }
    manifest.artifacts.push("manifest.json".to_string());
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(())
}

fn data_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<(u32, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            if let Some(idx) =
                name.strip_prefix("client_").and_then(|r| r.strip_suffix(".csv"))
            {
                if let Ok(id) = idx.parse::<u32>() {
                    found.push((id, path));
                }
            }
        }
    }
    found.sort_by_key(|(id, _)| *id);
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Evaluate checkpointed models against a data directory; emits the
/// report plus pointwise APE rows.
pub struct EvalOutcome {
    pub report: EvalReport,
    pub ape: Vec<ApeBlock>,
}

pub fn evaluate_checkpoint(
    settings: &RunSettings,
    checkpoint_path: &Path,
    data_dir: &Path,
    server_phi: bool,
) -> Result<EvalOutcome> {
    let ck = checkpoint::read_checkpoint(checkpoint_path)?;
    let mut settings = settings.clone();
    settings.cfg.dims = ck.spec.dims;
    let datasets = load_datasets(&settings, data_dir)?;
    if datasets.len() != ck.models.len() {
        bail!(
            "checkpoint has {} client models, data directory has {} clients",
            ck.models.len(),
            datasets.len()
        );
    }
    for (model, ds) in ck.models.iter().zip(&datasets) {
        if model.client_id != ds.client_id {
            bail!("checkpoint client {} does not match data client {}", model.client_id, ds.client_id);
        }
    }

    let models: Vec<ClientModel> = if server_phi && !ck.server_phi.is_empty() {
        ck.models
            .iter()
            .map(|m| {
                let (_, psi) = ck.spec.partition(&m.theta).map_err(|e| anyhow::anyhow!("{e}"))?;
                let theta =
                    ck.spec.merge(&ck.server_phi, &psi).map_err(|e| anyhow::anyhow!("{e}"))?;
                Ok(ClientModel { client_id: m.client_id, theta })
            })
            .collect::<Result<_>>()?
    } else {
        ck.models.clone()
    };

    let mut tape = Tape::new();
    let mut ape_blocks = Vec::with_capacity(models.len());
    let mut rows = Vec::with_capacity(models.len());
    for (model, ds) in models.iter().zip(&datasets) {
        let mut forecasts_kwh = Vec::with_capacity(ds.test.len());
        let indices: Vec<usize> = (0..ds.test.len()).collect();
        for chunk in indices.chunks(256) {
            let batch = ds.test.gather(chunk);
            for f in forecast_batch(&mut tape, &ck.spec, &model.theta, &batch)
                .map_err(|e| anyhow::anyhow!("{e}"))?
            {
                forecasts_kwh.push(ds.scaler.denorm_load(f));
            }
        }
        let mase = ppfl_core::federation::mase_against_reference(
            &ds.test_actual_kwh,
            &forecasts_kwh,
            &ds.test_persistence_kwh,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        let mape = ppfl_core::metrics::mape(&ds.test_actual_kwh, &forecasts_kwh)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let ape = ape_series(&ds.test_actual_kwh, &forecasts_kwh)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        rows.push(ppfl_core::metrics::ClientEval {
            client: model.client_id,
            mase: mase.value,
            mase_zero_denominator: mase.zero_denominator,
            mape: mape.percent,
            n_points: ds.test.len(),
            n_excluded: mape.excluded,
        });
        ape_blocks.push(ApeBlock {
            client: model.client_id,
            actual_kwh: ds.test_actual_kwh.clone(),
            forecast_kwh: forecasts_kwh,
            ape,
        });
    }
    Ok(EvalOutcome { report: EvalReport::from_rows(rows), ape: ape_blocks })
}

/// Train for every ε in the grid with shared seed and data.
pub fn sweep(
    settings: &RunSettings,
    epsilons: &[f64],
    datasets: &[ClientDataset],
) -> Result<Vec<(f64, EvalReport)>> {
    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        if eps <= 0.0 {
            bail!("privacy budget must be positive, got {eps}");
        }
        let mut run_settings = settings.clone();
        run_settings.cfg.mode = Mode::Ppfl;
        run_settings.cfg.dp.epsilon = ppfl_core::privacy::Epsilon::Budget(eps);
        let outcome = train_and_evaluate(&run_settings, datasets.to_vec())?;
        rows.push((eps, outcome.report_own));
    }
    Ok(rows)
}
