//! Training loop: SGD over shuffled annotated key slices with the quoted
//! learning-rate schedule and minibatch sizing, per-iteration loss traces,
//! and a checkpoint at every epoch end.

use super::checkpoint::save_checkpoint;
use super::net::{combine_losses, forward_train_sample, leaf_params, Model};
use crate::ct::{group_slices, read_annotations, read_volume, AnnotationRow, ImageVolume};
use crate::det::BBox;
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::tape::Tape;
use crate::tensor::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// One training sample: a key slice of a preprocessed volume plus its
/// ground-truth boxes.
#[derive(Clone, Debug)]
pub struct DatasetSample {
    pub volume: usize,
    pub key_slice: usize,
    pub boxes: Vec<BBox>,
}

/// Preprocessed volumes plus annotated key slices.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub volumes: Vec<ImageVolume>,
    pub samples: Vec<DatasetSample>,
}

impl Dataset {
    /// Load from a volume-list CSV (volume_id, path) and an annotation CSV.
    /// Volumes are preprocessed and padded so the backbone stride divides
    /// their dims; only rows with boxes become training samples.
    pub fn load(list_path: &Path, gt_path: &Path, stride: usize) -> Result<Dataset> {
        let show = list_path.display().to_string();
        let mut rd = csv::Reader::from_path(list_path).map_err(|e| Error::Format { path: show.clone(), detail: e.to_string() })?;
        let mut ids: Vec<(String, PathBuf)> = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::Format { path: show.clone(), detail: e.to_string() })?;
            ids.push((rec.get(0).unwrap_or("").to_string(), PathBuf::from(rec.get(1).unwrap_or(""))));
        }
        let rows = read_annotations(gt_path)?;
        Self::assemble(&ids, &rows, stride)
    }

    fn assemble(ids: &[(String, PathBuf)], rows: &[AnnotationRow], stride: usize) -> Result<Dataset> {
        let mut volumes = Vec::with_capacity(ids.len());
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for (id, path) in ids {
            let raw = read_volume(path)?;
            let (pre, _) = crate::ct::preprocess(&raw, crate::ct::DEFAULT_BORDER_THRESHOLD)?;
            index.insert(id.clone(), volumes.len());
            volumes.push(pad_to_stride(pre, stride));
        }
        let mut grouped: BTreeMap<(usize, usize), Vec<BBox>> = BTreeMap::new();
        for row in rows {
            let Some(&vi) = index.get(&row.volume_id) else {
                continue; // annotation for a volume outside this split list
            };
            if let Some(e) = &row.entry {
                grouped.entry((vi, row.key_slice)).or_default().push(e.bbox);
            }
        }
        let samples = grouped
            .into_iter()
            .map(|((volume, key_slice), boxes)| DatasetSample { volume, key_slice, boxes })
            .collect();
        Ok(Dataset { volumes, samples })
    }
}

/// Pad the bottom/right of every slice with zeros so H and W are multiples
/// of the backbone stride. Box coordinates are unaffected.
pub fn pad_to_stride(vol: ImageVolume, stride: usize) -> ImageVolume {
    let (nz, ny, nx) = vol.dims;
    let ony = ny.div_ceil(stride) * stride;
    let onx = nx.div_ceil(stride) * stride;
    if (ony, onx) == (ny, nx) {
        return vol;
    }
    let mut data = vec![0.0f32; nz * ony * onx];
    for z in 0..nz {
        let src = vol.slice(z);
        for y in 0..ny {
            data[z * ony * onx + y * onx..z * ony * onx + y * onx + nx]
                .copy_from_slice(&src[y * nx..(y + 1) * nx]);
        }
    }
    ImageVolume { id: vol.id, dims: (nz, ony, onx), spacing: vol.spacing, data }
}

/// One row of the loss trace CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub rpn_cls: f32,
    pub rpn_reg: f32,
    pub head_cls: f32,
    pub head_reg: f32,
    pub total: f32,
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let show = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&show, e))?;
    writeln!(f, "iter,epoch,lr,rpn_cls,rpn_reg,head_cls,head_reg,total").map_err(|e| Error::io(&show, e))?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.iter, r.epoch, r.lr, r.rpn_cls, r.rpn_reg, r.head_cls, r.head_reg, r.total
        )
        .map_err(|e| Error::io(&show, e))?;
    }
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let show = path.display().to_string();
    let fmt = |detail: String| Error::Format { path: show.clone(), detail };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&show, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("iter,epoch,lr,rpn_cls,rpn_reg,head_cls,head_reg,total") => {}
        other => return Err(fmt(format!("unexpected trace header {other:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(fmt(format!("row {}: expected 8 fields", i + 2)));
        }
        let pf = |j: usize| -> Result<f32> { parts[j].parse().map_err(|_| fmt(format!("row {}: bad field {j}", i + 2))) };
        rows.push(TraceRow {
            iter: parts[0].parse().map_err(|_| fmt(format!("row {}: bad iter", i + 2)))?,
            epoch: parts[1].parse().map_err(|_| fmt(format!("row {}: bad epoch", i + 2)))?,
            lr: parts[2].parse().map_err(|_| fmt(format!("row {}: bad lr", i + 2)))?,
            rpn_cls: pf(3)?,
            rpn_reg: pf(4)?,
            head_cls: pf(5)?,
            head_reg: pf(6)?,
            total: pf(7)?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub seed: u64,
    /// write a checkpoint at each epoch end when set
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Run the full schedule: epochs x shuffled minibatches of the configured
/// size, with per-iteration losses and an epoch-end checkpoint. A
/// non-finite loss or gradient aborts with the failing iteration in the
/// diagnostic.
pub fn train(model: &mut Model, data: &Dataset, opts: &TrainOptions) -> Result<TrainReport> {
    if data.samples.is_empty() {
        return Err(Error::invalid("train", "dataset has no annotated samples"));
    }
    let cfg = model.cfg.clone();
    let plan = model.plan();
    let mb = cfg.samples_per_minibatch();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut sgd: Sgd<f32> = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut report = TrainReport::default();
    let mut iter = 0usize;

    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_for_epoch(epoch);
        let mut order: Vec<usize> = (0..data.samples.len()).collect();
        for i in 0..order.len() {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        for chunk in order.chunks(mb) {
            iter += 1;
            let mut tape: Tape<f32> = Tape::new();
            let p = leaf_params(&mut tape, &model.params, true);
            let mut losses = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let sample = &data.samples[si];
                let group = group_slices(&data.volumes[sample.volume], sample.key_slice, cfg.m)?;
                let (l, _) = forward_train_sample(&mut tape, &p, &plan, &cfg, &group, &sample.boxes, &mut rng)?;
                losses.push(l);
            }
            let (total, values) = combine_losses(&mut tape, &losses, s::<f32>(cfg.bbox_reg_loss_weight as f64))?;
            if !values.total.is_finite() {
                return Err(Error::non_finite("train", format!("loss at iteration {iter} (epoch {epoch})")));
            }
            tape.backward(total)?;

            let mut grads: Vec<Vec<f32>> = Vec::with_capacity(model.params.len());
            for (name, tensor) in model.params.iter() {
                let g = tape
                    .grad(p.id(name))
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tensor.numel()]);
                grads.push(g);
            }
            step_params(model, &mut sgd, &grads, lr).map_err(|e| match e {
                Error::NonFinite { detail, .. } => {
                    Error::non_finite("train", format!("{detail} at iteration {iter} (epoch {epoch})"))
                }
                other => other,
            })?;

            report.trace.push(TraceRow {
                iter,
                epoch,
                lr,
                rpn_cls: values.rpn_cls,
                rpn_reg: values.rpn_reg,
                head_cls: values.head_cls,
                head_reg: values.head_reg,
                total: values.total,
            });
        }
        model.epoch = epoch as u32;
        if let Some(dir) = &opts.checkpoint_dir {
            let path = dir.join(format!("epoch{epoch}.ckpt"));
            save_checkpoint(model, &path)?;
            report.checkpoints.push(path);
        }
    }
    Ok(report)
}

fn step_params(model: &mut Model, sgd: &mut Sgd<f32>, grads: &[Vec<f32>], lr: f64) -> Result<()> {
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let mut tensors: Vec<&mut [f32]> = Vec::with_capacity(names.len());
    for (_, t) in model.params.iter_mut() {
        tensors.push(t.data_mut());
    }
    let mut pairs: Vec<(&str, &mut [f32])> = names.iter().map(String::as_str).zip(tensors).collect();
    sgd.step(&mut pairs, grads, lr as f32)
}
