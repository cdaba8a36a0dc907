use std::path::{Path, PathBuf};
use std::time::Instant;

use tissueseg::autodiff::standard_suite;
use tissueseg::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
use tissueseg::metrics::{evaluate_volume, MetricsRecord, METRICS_CSV_HEADER};
use tissueseg::phantom::phantom_generate;
use tissueseg::predict::predict_volume;
use tissueseg::seed::derive_seed;
use tissueseg::selection::{bootstrap_select, suggest_annotations, Candidates, SelectionReport, UnlabeledVolume};
use tissueseg::split::{make_split, SplitManifest};
use tissueseg::train::{fit_volumes, train, volume_patches, TrainHistory};
use tissueseg::unet::build;
use tissueseg::volume::{load_volume, AnyVolume, LabelVolume, LabeledVolume, Volume};
use tissueseg::{Error, Result};

use crate::config::{CandidateSpec, DatasetManifest, Resolved, VolumeEntry};
use crate::output::OutputDir;

pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const MANIFEST_NAME: &str = "manifest.json";

fn out_dir(r: &Resolved, flag: Option<&Path>) -> Result<OutputDir> {
    let dir = match (flag, &r.config.output_dir) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(d)) => r.path(d),
        (None, None) => return Err(Error::Config("no output directory: pass --out or set output_dir".into())),
    };
    OutputDir::open(&dir)
}

fn json_bytes(v: &serde_json::Value) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

pub fn phantom_gen(r: &Resolved, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let families = &r.config.data.phantoms;
    if families.is_empty() {
        return Err(Error::Config("`data.phantoms` lists no phantom families".into()));
    }
    for f in families {
        f.spec.validate().map_err(|e| Error::Config(format!("phantom family {:?}: {e}", f.prefix)))?;
    }
    let mut dir = out_dir(r, out)?;
    let mut entries = Vec::new();
    for f in families {
        let specs = f.spec.cohort(f.count, derive_seed(r.seed, &format!("phantom/{}", f.prefix)));
        for (i, spec) in specs.iter().enumerate() {
            let id = format!("{}{:02}", f.prefix, i);
            let (img, lab) = phantom_generate(spec)?;
            let image = format!("{id}.img.ntv");
            let labels = format!("{id}.lbl.ntv");
            img.save_tagged(&dir.stage(&image)?, Some(&r.hash))?;
            lab.save_tagged(&dir.stage(&labels)?, Some(&r.hash))?;
            entries.push(VolumeEntry {
                id,
                image: image.into(),
                labels: Some(labels.into()),
            });
        }
    }
    let ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
    let split = match r.config.data.split_sizes {
        Some(sizes) => make_split(&ids, sizes, derive_seed(r.seed, "split"))?,
        None => SplitManifest {
            train: ids.clone(),
            ..Default::default()
        },
    };
    let manifest = DatasetManifest {
        config_hash: r.hash.clone(),
        volumes: entries,
        split,
    };
    dir.write(MANIFEST_NAME, &json_bytes(&serde_json::to_value(&manifest)?)?)?;
    log::info!("wrote {} phantom volumes", ids.len());
    dir.commit()
}

fn load_labeled(entry: &VolumeEntry) -> Result<LabeledVolume> {
    let labels = entry
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config(format!("volume {} has no label file", entry.id)))?;
    LabeledVolume::new(entry.id.clone(), Volume::load(&entry.image)?, LabelVolume::load(labels)?)
}

fn find<'a>(volumes: &'a [VolumeEntry], id: &str) -> Result<&'a VolumeEntry> {
    volumes
        .iter()
        .find(|v| v.id == id)
        .ok_or_else(|| Error::UnknownId(id.to_owned()))
}

fn load_ids(volumes: &[VolumeEntry], ids: &[String]) -> Result<Vec<LabeledVolume>> {
    ids.iter().map(|id| load_labeled(find(volumes, id)?)).collect()
}

fn labeled_ids(volumes: &[VolumeEntry]) -> Vec<String> {
    volumes.iter().filter(|v| v.labels.is_some()).map(|v| v.id.clone()).collect()
}

fn history_csv(h: &TrainHistory, hash: &str, timing: bool) -> String {
    format!("# config_hash={hash}\n{}", h.to_csv(timing))
}

pub fn cmd_train(r: &Resolved, out: Option<&Path>, timing: bool) -> Result<Vec<PathBuf>> {
    let cfg = r.train()?;
    let model_cfg = r.model()?;
    let (volumes, split) = r.dataset()?;
    let train_ids = if split.train.is_empty() { labeled_ids(&volumes) } else { split.train.clone() };
    if train_ids.is_empty() {
        return Err(Error::Config("no labeled training volumes".into()));
    }
    let mut dir = out_dir(r, out)?;
    let train_set = load_ids(&volumes, &train_ids)?;
    let train_refs: Vec<&LabeledVolume> = train_set.iter().collect();
    let (model, history) = if !cfg.fixed_epochs && !split.validation.is_empty() {
        let val_set = load_ids(&volumes, &split.validation)?;
        let val_refs: Vec<&LabeledVolume> = val_set.iter().collect();
        let tp = volume_patches(&train_refs, &cfg.preprocess)?;
        let vp = volume_patches(&val_refs, &cfg.preprocess)?;
        train(build(&model_cfg)?, &tp, &vp, &cfg)?
    } else {
        fit_volumes(&model_cfg, &cfg, &train_refs)?
    };
    log::info!(
        "trained {} epochs, returned epoch {:?}",
        history.epochs.len(),
        history.best_epoch
    );
    save_checkpoint(&model, None, &dir.stage(CHECKPOINT_NAME)?, Some(&r.hash))?;
    dir.write("history.csv", history_csv(&history, &r.hash, timing).as_bytes())?;
    let mut summary = serde_json::json!({
        "config_hash": r.hash,
        "epochs": history.epochs.len(),
        "best_epoch": history.best_epoch,
        "stopped_early": history.stopped_early,
        "train_ids": train_ids,
    });
    if !timing {
        summary["history"] = serde_json::to_value(history.without_timing())?;
    } else {
        summary["history"] = serde_json::to_value(&history)?;
    }
    dir.write("history.json", &json_bytes(&summary)?)?;
    dir.commit()
}

pub struct EvalArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub predictions: Option<&'a Path>,
    pub ids: &'a [String],
    pub save_predictions: bool,
}

pub fn cmd_eval(r: &Resolved, out: Option<&Path>, args: &EvalArgs) -> Result<Vec<PathBuf>> {
    let (volumes, split) = r.dataset()?;
    let ids: Vec<String> = if !args.ids.is_empty() {
        args.ids.to_vec()
    } else if !split.test.is_empty() {
        split.test.clone()
    } else {
        labeled_ids(&volumes)
    };
    if ids.is_empty() {
        return Err(Error::Config("no volumes to evaluate".into()));
    }
    let model = match (args.checkpoint, args.predictions) {
        (Some(c), None) => Some(match &r.config.model {
            Some(m) => load_checkpoint_for(c, m)?.model,
            None => load_checkpoint(c)?.model,
        }),
        (None, Some(_)) => None,
        _ => return Err(Error::Config("eval needs exactly one of --checkpoint or --predictions".into())),
    };
    let pre = r.config.train.clone().unwrap_or_default().preprocess;
    let mut dir = out_dir(r, out)?;
    let mut csv = format!("# config_hash={}\n{METRICS_CSV_HEADER}\n", r.hash);
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for id in &ids {
        let entry = find(&volumes, id)?;
        let gt = load_labeled(entry)?;
        let started = Instant::now();
        let pred = match (&model, args.predictions) {
            (Some(m), _) => predict_volume(m, &gt.image, &pre)?,
            (None, Some(p)) => LabelVolume::load(&p.join(format!("{id}.lbl.ntv")))?,
            (None, None) => unreachable!(),
        };
        let rec = evaluate_volume(&pred, &gt.labels, gt.labels.spacing())?;
        let dims = gt.image.dims();
        log::info!(
            "{id}: {}x{}x{} volume processed in {:.2} s, mean DSC {:.4}",
            dims[0],
            dims[1],
            dims[2],
            started.elapsed().as_secs_f64(),
            rec.mean_dsc
        );
        if args.save_predictions && model.is_some() {
            pred.save_tagged(&dir.stage(&format!("pred/{id}.lbl.ntv"))?, Some(&r.hash))?;
        }
        csv.push_str(&rec.csv_row(id));
        csv.push('\n');
        rows.push(rec.json_row(id));
        records.push(rec);
    }
    let mean = MetricsRecord::mean(&records).expect("nonempty");
    csv.push_str(&mean.csv_row("mean"));
    csv.push('\n');
    rows.push(mean.json_row("mean"));
    dir.write("metrics.csv", csv.as_bytes())?;
    dir.write(
        "metrics.json",
        &json_bytes(&serde_json::json!({ "config_hash": r.hash, "rows": rows }))?,
    )?;
    dir.commit()
}

fn write_report(dir: &mut OutputDir, stem: &str, report: &SelectionReport) -> Result<()> {
    dir.write(&format!("{stem}.csv"), report.to_csv().as_bytes())?;
    let mut json = report.to_json()?;
    json.push('\n');
    dir.write(&format!("{stem}.json"), json.as_bytes())
}

pub fn cmd_select(r: &Resolved, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let sel = r.selection()?;
    let cfg = r.train()?;
    let model_cfg = r.model()?;
    let (volumes, split) = r.dataset()?;
    let candidates = match sel.candidates {
        Some(CandidateSpec::Explicit(c)) => Candidates::Explicit(c),
        Some(CandidateSpec::Sampled { count, size }) => Candidates::Sampled {
            count,
            size,
            seed: derive_seed(r.seed, "candidates"),
        },
        None => return Err(Error::Config("`selection.candidates` is required for select".into())),
    };
    let eval_ids = if sel.eval_ids.is_empty() { split.test.clone() } else { sel.eval_ids.clone() };
    if eval_ids.is_empty() {
        return Err(Error::Config("select needs `selection.eval_ids` or test ids in the split".into()));
    }
    let mut dir = out_dir(r, out)?;
    let eval_set = load_ids(&volumes, &eval_ids)?;
    let pool_ids: Vec<String> = labeled_ids(&volumes).into_iter().filter(|id| !eval_ids.contains(id)).collect();
    let pool = load_ids(&volumes, &pool_ids)?;
    let pool_refs: Vec<&LabeledVolume> = pool.iter().collect();
    let eval_refs: Vec<&LabeledVolume> = eval_set.iter().collect();
    if let Candidates::Explicit(list) = &candidates {
        for c in list {
            let overlap: Vec<String> = c.volume_ids.iter().filter(|id| eval_ids.contains(id)).cloned().collect();
            if !overlap.is_empty() {
                return Err(Error::EvalOverlap {
                    candidate: c.id.clone(),
                    ids: overlap,
                });
            }
        }
    }
    let mut report = bootstrap_select(&pool_refs, &candidates, &eval_refs, &model_cfg, &cfg)?;
    report.config_hash = Some(r.hash.clone());
    if let Some(w) = report.winner() {
        log::info!("winning subset {} with mean DSC {:.4}", w.id, w.mean_dsc);
    }
    write_report(&mut dir, "selection", &report)?;
    dir.commit()
}

pub fn cmd_suggest(r: &Resolved, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let sel = r.selection()?;
    let cfg = r.train()?;
    let model_cfg = r.model()?;
    let k = sel
        .k
        .ok_or_else(|| Error::Config("`selection.k` is required for suggest".into()))?;
    if sel.unlabeled_ids.is_empty() {
        return Err(Error::Config("`selection.unlabeled_ids` is empty".into()));
    }
    if k > sel.unlabeled_ids.len() {
        return Err(Error::Selection(format!(
            "k = {k} exceeds the {} unlabeled volumes",
            sel.unlabeled_ids.len()
        )));
    }
    let (volumes, split) = r.dataset()?;
    let base_ids = if sel.base_ids.is_empty() { split.train.clone() } else { sel.base_ids.clone() };
    let probe_ids = if sel.probe_ids.is_empty() { split.test.clone() } else { sel.probe_ids.clone() };
    if base_ids.is_empty() || probe_ids.is_empty() {
        return Err(Error::Config("suggest needs base and probe volumes".into()));
    }
    let mut dir = out_dir(r, out)?;
    let base = load_ids(&volumes, &base_ids)?;
    let probe = load_ids(&volumes, &probe_ids)?;
    let unlabeled = sel
        .unlabeled_ids
        .iter()
        .map(|id| {
            Ok(UnlabeledVolume {
                id: id.clone(),
                image: Volume::load(&find(&volumes, id)?.image)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let base_refs: Vec<&LabeledVolume> = base.iter().collect();
    let probe_refs: Vec<&LabeledVolume> = probe.iter().collect();
    let mut outcome = suggest_annotations(&base_refs, &unlabeled, &probe_refs, &model_cfg, &cfg, sel.fixed_epochs, k)?;
    outcome.report.config_hash = Some(r.hash.clone());
    log::info!("suggested for annotation: {:?}", outcome.report.selected());
    write_report(&mut dir, "suggest", &outcome.report)?;
    dir.write("suggest_base_history.csv", history_csv(&outcome.base_history, &r.hash, false).as_bytes())?;
    dir.commit()
}

/// Returns the report text and whether every check passed.
pub fn cmd_gradcheck(seed: u64, fault: Option<f64>, out: Option<&Path>) -> Result<(String, bool)> {
    let reports = standard_suite(seed, fault)?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&r.to_string());
        text.push('\n');
    }
    let passed = reports.iter().all(|r| r.passed);
    text.push_str(&format!(
        "{} of {} checks passed\n",
        reports.iter().filter(|r| r.passed).count(),
        reports.len()
    ));
    if let Some(d) = out {
        let mut dir = OutputDir::open(d)?;
        dir.write("gradcheck.txt", text.as_bytes())?;
        dir.write("gradcheck.json", &json_bytes(&serde_json::to_value(&reports)?)?)?;
        dir.commit()?;
    }
    Ok((text, passed))
}

pub fn cmd_info(r: &Resolved, file: Option<&Path>) -> Result<String> {
    let mut s = format!("tissueseg {}\n", env!("CARGO_PKG_VERSION"));
    if let Some(f) = file {
        let is_ckpt = std::fs::read(f)?.starts_with(tissueseg::checkpoint::CHECKPOINT_MAGIC);
        if is_ckpt {
            let ck = load_checkpoint(f)?;
            s.push_str(&format!(
                "checkpoint {}: {} parameters, {:?}, adam state: {}, config hash {}\n",
                f.display(),
                ck.model.params.param_count(),
                ck.model.config,
                ck.adam.is_some(),
                ck.config_hash.as_deref().unwrap_or("NA")
            ));
        } else {
            match load_volume(f)? {
                AnyVolume::Image(v) => s.push_str(&format!(
                    "image volume {}: dims {:?}, spacing {:?}\n",
                    f.display(),
                    v.dims(),
                    v.spacing()
                )),
                AnyVolume::Labels(v) => {
                    let counts: Vec<usize> = (0..4).map(|c| v.count(c)).collect();
                    s.push_str(&format!(
                        "label volume {}: dims {:?}, spacing {:?}, class counts {counts:?}\n",
                        f.display(),
                        v.dims(),
                        v.spacing()
                    ))
                }
            }
        }
        return Ok(s);
    }
    let model = r.model()?;
    s.push_str(&format!("config hash {}\nseed {}\n", r.hash, r.seed));
    s.push_str(&format!(
        "model: in {} classes {} base {} depth {}, input sides must be multiples of {}\n",
        model.in_channels,
        model.num_classes,
        model.base_channels,
        model.depth,
        model.required_multiple()
    ));
    let mut total = 0;
    for layer in model.layers() {
        let n = layer.weight_shape().iter().product::<usize>() + layer.out_channels;
        total += n;
        s.push_str(&format!("  {:<16} {:?} {:>10}\n", layer.name, layer.weight_shape(), n));
    }
    s.push_str(&format!("total parameters {total}\n"));
    Ok(s)
}
