//! Saving and restoring models, full training state and VAEs.

use std::path::Path;

use calm_core::model::Model;
use calm_core::source::rvq::RvqCodebooks;
use calm_core::source::vae::Vae;
use calm_core::source::NormStats;
use calm_core::tensor::Scalar;
use calm_core::training::{RunningStats, TrainState};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::formats::{
    decode_checkpoint, encode_checkpoint, has_prefix, lookup, read_file, store_records,
    tensors_records, write_file, Record,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebooks {
    pub dim: usize,
    pub books: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub precision: String,
    pub config: ExperimentConfig,
    pub step: u64,
    pub adam_t: u64,
    pub skipped: u64,
    pub loss_count: u64,
    pub loss_mean: f64,
    pub loss_m2: f64,
    pub init_head_checksum: u64,
    pub codebooks: Option<Codebooks>,
    pub norm: Option<Norm>,
}

fn precision_of<T: Scalar>() -> &'static str {
    match T::DTYPE {
        calm_core::DType::F32 => "f32",
        calm_core::DType::F64 => "f64",
    }
}

/// Everything needed to resume training exactly.
pub fn save_train_state<T: Scalar>(
    path: &Path,
    config: &ExperimentConfig,
    state: &TrainState<T>,
    norm: Option<&NormStats>,
) -> Result<(), CliError> {
    let m = &state.model;
    let header = CheckpointHeader {
        kind: "model".into(),
        precision: precision_of::<T>().into(),
        config: config.clone(),
        step: state.step,
        adam_t: state.opt.t,
        skipped: state.skipped,
        loss_count: state.stats.count,
        loss_mean: state.stats.mean,
        loss_m2: state.stats.m2,
        init_head_checksum: m.initial_head_checksum(),
        codebooks: m.codebooks.as_ref().map(|c| Codebooks {
            dim: c.dim,
            books: c.books.clone(),
        }),
        norm: norm.map(|n| Norm {
            mean: n.mean.clone(),
            std: n.std.clone(),
        }),
    };
    let mut records: Vec<Record> = store_records("param", &m.store);
    records.extend(tensors_records("adam.m", &m.store, &state.opt.m));
    records.extend(tensors_records("adam.v", &m.store, &state.opt.v));
    if let Some(ema) = &state.ema {
        records.extend(store_records("ema", ema));
    }
    write_file(path, &encode_checkpoint(&header, &records))
}

pub struct Loaded<T: Scalar> {
    pub header: CheckpointHeader,
    pub state: TrainState<T>,
    pub norm: Option<NormStats>,
}

impl<T: Scalar> Loaded<T> {
    pub fn model(&self) -> &Model<T> {
        &self.state.model
    }
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader, CliError> {
    let (h, _): (CheckpointHeader, Vec<Record>) = decode_checkpoint(&read_file(path)?, path)?;
    Ok(h)
}

pub fn load_train_state<T: Scalar>(path: &Path) -> Result<Loaded<T>, CliError> {
    let (header, records): (CheckpointHeader, Vec<Record>) =
        decode_checkpoint(&read_file(path)?, path)?;
    if header.kind != "model" {
        return Err(CliError::format(
            path,
            format!("expected a model checkpoint, found {}", header.kind),
        ));
    }
    let cfg = &header.config;
    let mut model = Model::<T>::new(cfg.model_config()?, cfg.seed)?;
    let params = lookup(&records, "param", &model.store, path)?;
    for (dst, src) in model.store.tensors_mut().iter_mut().zip(params) {
        *dst = src;
    }
    model.set_initial_head_checksum(header.init_head_checksum);
    if let Some(c) = &header.codebooks {
        model.codebooks = Some(RvqCodebooks::new(c.dim, c.books.clone())?);
    }
    let tcfg = cfg.train_config();
    let mut state = TrainState::new(model, &tcfg);
    state.step = header.step;
    state.skipped = header.skipped;
    state.opt.t = header.adam_t;
    state.opt.m = lookup(&records, "adam.m", &state.model.store, path)?;
    state.opt.v = lookup(&records, "adam.v", &state.model.store, path)?;
    state.stats = RunningStats {
        count: header.loss_count,
        mean: header.loss_mean,
        m2: header.loss_m2,
    };
    if has_prefix(&records, "ema") {
        let mut ema = state.model.store.clone();
        let vals = lookup(&records, "ema", &ema, path)?;
        for (dst, src) in ema.tensors_mut().iter_mut().zip(vals) {
            *dst = src;
        }
        state.ema = Some(ema);
    }
    let norm = header.norm.as_ref().map(|n| NormStats {
        mean: n.mean.clone(),
        std: n.std.clone(),
    });
    Ok(Loaded {
        header,
        state,
        norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeHeader {
    pub kind: String,
    pub precision: String,
    pub config: ExperimentConfig,
    pub steps: u64,
    pub final_loss: f64,
}

pub fn save_vae<T: Scalar>(
    path: &Path,
    config: &ExperimentConfig,
    vae: &Vae<T>,
    steps: u64,
    final_loss: f64,
) -> Result<(), CliError> {
    let header = VaeHeader {
        kind: "vae".into(),
        precision: precision_of::<T>().into(),
        config: config.clone(),
        steps,
        final_loss,
    };
    write_file(
        path,
        &encode_checkpoint(&header, &store_records("param", &vae.store)),
    )
}

pub fn load_vae<T: Scalar>(path: &Path) -> Result<(VaeHeader, Vae<T>), CliError> {
    let (header, records): (VaeHeader, Vec<Record>) = decode_checkpoint(&read_file(path)?, path)?;
    if header.kind != "vae" {
        return Err(CliError::format(
            path,
            format!("expected a vae checkpoint, found {}", header.kind),
        ));
    }
    let mut vae = Vae::<T>::new(header.config.vae_config(), header.config.seed)?;
    let params = lookup(&records, "param", &vae.store, path)?;
    for (dst, src) in vae.store.tensors_mut().iter_mut().zip(params) {
        *dst = src;
    }
    Ok((header, vae))
}
