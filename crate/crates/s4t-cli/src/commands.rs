//! The pipeline commands: benchmark generation, source training,
//! adaptation, evaluation, reliability analysis, and configuration sweeps.
//! Each writes its outputs (checkpoint, CSV logs, config echo) under one
//! output directory; nothing here depends on wall-clock time, so reruns are
//! bitwise identical.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use anyhow::Result;
use s4t_core::adapt::{aligned_gt_view, build_view_inputs, self_supervised_maps, AdaptEngine};
use s4t_core::config::{AdaptConfig, LossChoice, OracleMode};
use s4t_core::formats;
use s4t_core::metrics::{
    iou_report, multiscale_probs, pearson, ConfusionMatrix, IouReport, PseudolabelCounts,
    ReliabilityPrecision,
};
use s4t_core::model::{train_source, SegNet};
use s4t_core::pseudolabel::interpolate;
use s4t_core::rng::{streams, Rng};
use s4t_core::synth::{self, Domain, SceneSpec};
use s4t_core::tensor::{LabelMap, Tensor};

use crate::io;
use crate::usage;

fn require<'a>(field: &'a Option<String>, key: &str, cmd: &str) -> Result<&'a Path> {
    match field {
        Some(v) => Ok(Path::new(v)),
        None => Err(usage(format!(
            "config key `{key}` is required for {cmd}; set it in the config file or with --set {key}=PATH"
        ))),
    }
}

fn check_labels_in_range(labels: &[LabelMap], num_classes: usize) -> Result<()> {
    for (idx, map) in labels.iter().enumerate() {
        if let Some(&bad) = map.data().iter().find(|&&v| v as usize >= num_classes) {
            return Err(usage(format!(
                "label map {idx} contains class {bad}, but num_classes = {num_classes}"
            )));
        }
    }
    Ok(())
}

// ── benchmark generation ──

pub fn cmd_gen_data(
    out: &Path,
    seed: u64,
    n_source: usize,
    n_target: usize,
    size: usize,
) -> Result<()> {
    if n_source == 0 || n_target == 0 {
        return Err(usage("need at least one image per domain"));
    }
    if size < 32 {
        return Err(usage(format!("image size must be at least 32, got {size}")));
    }
    let spec = SceneSpec { h: size, w: size, ..SceneSpec::default() };
    io::ensure_dir(out)?;
    let mut manifests: Vec<(String, String)> = Vec::new();
    for (domain, n, dir) in
        [(Domain::Source, n_source, "source"), (Domain::Target, n_target, "target")]
    {
        let data = synth::generate(&spec, n, seed, domain);
        io::ensure_dir(&out.join(dir))?;
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        for i in 0..n {
            let img_rel = format!("{dir}/img_{i:04}.ppm");
            let lab_rel = format!("{dir}/lab_{i:04}.pgm");
            io::write_bytes(&out.join(&img_rel), &formats::encode_ppm(&data.images[i]))?;
            io::write_bytes(
                &out.join(&lab_rel),
                &formats::encode_pgm(&data.labels[i], (synth::NUM_CLASSES - 1) as u8),
            )?;
            labeled.push(formats::ManifestEntry { image: img_rel.clone(), label: Some(lab_rel) });
            unlabeled.push(formats::ManifestEntry { image: img_rel, label: None });
        }
        match domain {
            Domain::Source => {
                manifests.push(("source.manifest".into(), formats::write_manifest(&labeled)));
            }
            Domain::Target => {
                manifests.push(("target.manifest".into(), formats::write_manifest(&unlabeled)));
                manifests
                    .push(("target_labeled.manifest".into(), formats::write_manifest(&labeled)));
            }
        }
    }
    for (name, text) in &manifests {
        io::write_text(&out.join(name), text)?;
    }
    println!(
        "wrote {n_source} source + {n_target} target images ({size}x{size}, {} classes) under {}",
        synth::NUM_CLASSES,
        out.display()
    );
    Ok(())
}

// ── source training ──

pub fn cmd_train_source(cfg: &AdaptConfig, out: &Path) -> Result<()> {
    let manifest = require(&cfg.source_manifest, "source_manifest", "train-source")?;
    let entries = io::load_manifest(manifest)?;
    let images = io::load_images(&entries)?;
    let labels = io::load_labels(&entries)?;
    check_labels_in_range(&labels, cfg.num_classes)?;

    let mut model = SegNet::new(cfg.num_classes, cfg.seed);
    let log = train_source(
        &mut model,
        &images,
        &labels,
        cfg.source_epochs,
        cfg.batch_size,
        cfg.source_lr,
        cfg.weight_decay,
        cfg.seed,
    );

    io::echo_config(out, cfg)?;
    io::save_checkpoint(&out.join("checkpoint.s4tt"), &model)?;
    let mut csv = String::from("epoch,mean_loss,pixel_acc\n");
    for (e, row) in log.epochs.iter().enumerate() {
        writeln!(csv, "{e},{},{}", row.mean_loss, row.pixel_acc).unwrap();
    }
    io::write_text(&out.join("train_log.csv"), &csv)?;
    let last = log.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} images: loss {:.4}, pixel acc {:.4}",
        log.epochs.len(),
        images.len(),
        last.mean_loss,
        last.pixel_acc
    );
    Ok(())
}

// ── adaptation ──

/// Adaptation core shared by `cmd_adapt` and the ablation rows: runs the
/// engine over the images and returns the adapted model plus the CSV log.
fn adapt_model(
    cfg: &AdaptConfig,
    model: SegNet,
    images: &[Tensor],
    gt_labels: Option<&[LabelMap]>,
) -> (SegNet, String) {
    let mut csv = String::from(
        "step,epoch,total,sst_reliable,sst_interp,sst_entmax,ie,\
         px_reliable,px_interp,px_entmax,px_excluded,\
         frac_reliable,frac_interp,frac_entmax,frac_excluded\n",
    );
    let mut engine = AdaptEngine::new(model, cfg);
    engine.run(images, gt_labels, |step| {
        let b = &step.breakdown;
        let f = step.type_fractions();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            step.step,
            step.epoch,
            b.total,
            b.sst_reliable,
            b.sst_interp,
            b.sst_entmax,
            b.ie,
            b.px_reliable,
            b.px_interp,
            b.px_entmax,
            b.px_excluded,
            f[0],
            f[1],
            f[2],
            f[3]
        )
        .unwrap();
    });
    (engine.into_model(), csv)
}

pub fn cmd_adapt(cfg: &AdaptConfig, out: &Path) -> Result<()> {
    let checkpoint = require(&cfg.checkpoint, "checkpoint", "adapt")?;
    let manifest = require(&cfg.target_manifest, "target_manifest", "adapt")?;
    let model = io::load_checkpoint(checkpoint)?;
    if model.num_classes != cfg.num_classes {
        return Err(usage(format!(
            "checkpoint has {} classes but config says {}; set num_classes = {}",
            model.num_classes, cfg.num_classes, model.num_classes
        )));
    }
    let entries = io::load_manifest(manifest)?;
    let images = io::load_images(&entries)?;
    // Source-free discipline: label files are opened only for the oracle.
    let gt_labels = match cfg.oracle_mode() {
        OracleMode::Off => None,
        _ => {
            let labels = io::load_labels(&entries)?;
            check_labels_in_range(&labels, cfg.num_classes)?;
            Some(labels)
        }
    };

    let (model, csv) = adapt_model(cfg, model, &images, gt_labels.as_deref());

    io::echo_config(out, cfg)?;
    io::save_checkpoint(&out.join("checkpoint.s4tt"), &model)?;
    io::write_text(&out.join("adapt_log.csv"), &csv)?;
    let steps = csv.lines().count() - 1;
    println!(
        "adapted on {} images over {} steps; outputs in {}",
        images.len(),
        steps,
        out.display()
    );
    Ok(())
}

// ── evaluation ──

fn scale_dims(native_h: usize, native_w: usize, scales: &[f64]) -> Vec<(usize, usize)> {
    scales
        .iter()
        .map(|&s| {
            let h = (native_h as f64 * s).round() as usize;
            let w = (native_w as f64 * s).round() as usize;
            (h.max(1), w.max(1))
        })
        .collect()
}

/// Multi-scale evaluation over batches formed in sorted-manifest order, so
/// batch-statistic normalization sees a reproducible composition.
fn eval_model(
    cfg: &AdaptConfig,
    model: &SegNet,
    images: &[Tensor],
    labels: &[LabelMap],
) -> IouReport {
    assert_eq!(images.len(), labels.len());
    let (h, w) = (images[0].dim(1), images[0].dim(2));
    let scales = scale_dims(h, w, &cfg.eval_scales);
    let mut conf = ConfusionMatrix::new(model.num_classes);
    for chunk_start in (0..images.len()).step_by(cfg.batch_size) {
        let chunk_end = (chunk_start + cfg.batch_size).min(images.len());
        let batch = &images[chunk_start..chunk_end];
        let probs = multiscale_probs(|b| model.predict_probs(b), batch, &scales);
        for (slot, p) in probs.iter().enumerate() {
            conf.add(&labels[chunk_start + slot], &p.argmax_channels());
        }
    }
    iou_report(&conf, synth::FIRST_THING_CLASS as usize)
}

fn format_iou_csv(report: &IouReport) -> String {
    let mut csv = String::from("class,iou\n");
    for (c, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => writeln!(csv, "{c},{v}").unwrap(),
            None => writeln!(csv, "{c},absent").unwrap(),
        }
    }
    writeln!(csv, "miou,{}", report.miou).unwrap();
    writeln!(csv, "thing_miou,{}", report.thing_miou).unwrap();
    writeln!(csv, "stuff_miou,{}", report.stuff_miou).unwrap();
    writeln!(csv, "pixel_accuracy,{}", report.pixel_accuracy).unwrap();
    csv
}

fn print_iou(report: &IouReport) {
    for (c, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("class {c}: IoU {v:.4}"),
            None => println!("class {c}: absent"),
        }
    }
    println!(
        "mIoU {:.4} | thing {:.4} | stuff {:.4} | pixel acc {:.4}",
        report.miou, report.thing_miou, report.stuff_miou, report.pixel_accuracy
    );
}

/// Loads (images, labels) from a labeled manifest in sorted order.
fn load_eval_set(manifest: &Path, num_classes: usize) -> Result<(Vec<Tensor>, Vec<LabelMap>)> {
    let mut entries = io::load_manifest(manifest)?;
    entries.sort_by(|a, b| a.image.cmp(&b.image));
    if entries.is_empty() {
        return Err(usage(format!("manifest {} lists no images", manifest.display())));
    }
    let images = io::load_images(&entries)?;
    let labels = io::load_labels(&entries)?;
    check_labels_in_range(&labels, num_classes)?;
    Ok((images, labels))
}

pub fn cmd_eval(cfg: &AdaptConfig, out: &Path) -> Result<()> {
    let checkpoint = require(&cfg.checkpoint, "checkpoint", "eval")?;
    let manifest = require(&cfg.eval_manifest, "eval_manifest", "eval")?;
    let model = io::load_checkpoint(checkpoint)?;
    let (images, labels) = load_eval_set(manifest, model.num_classes)?;
    let report = eval_model(cfg, &model, &images, &labels);
    io::echo_config(out, cfg)?;
    io::write_text(&out.join("eval.csv"), &format_iou_csv(&report))?;
    print_iou(&report);
    Ok(())
}

// ── reliability analysis ──

pub fn cmd_analyze(cfg: &AdaptConfig, out: &Path) -> Result<()> {
    let checkpoint = require(&cfg.checkpoint, "checkpoint", "analyze")?;
    let manifest = require(&cfg.eval_manifest, "eval_manifest", "analyze")?;
    let model = io::load_checkpoint(checkpoint)?;
    if model.num_classes != cfg.num_classes {
        return Err(usage(format!(
            "checkpoint has {} classes but config says {}; set num_classes = {}",
            model.num_classes, cfg.num_classes, model.num_classes
        )));
    }
    let (images, labels) = load_eval_set(manifest, model.num_classes)?;

    let c = model.num_classes;
    let mut counts = PseudolabelCounts::default();
    let mut precision = ReliabilityPrecision::new(c);
    let mut view_conf = ConfusionMatrix::new(c);
    let mut crop_rng = Rng::stream(cfg.seed, &[streams::CROP, 0]);
    let mut vis_written = 0usize;
    io::ensure_dir(out)?;

    for chunk_start in (0..images.len()).step_by(cfg.batch_size) {
        let chunk_end = (chunk_start + cfg.batch_size).min(images.len());
        let batch: Vec<Tensor> = images[chunk_start..chunk_end].to_vec();
        let views = build_view_inputs(&model, &batch, &mut crop_rng);
        let probs2 = model.predict_probs(&Tensor::stack(&views.inputs2));
        let view2: Vec<LabelMap> =
            (0..batch.len()).map(|s| probs2.batch_entry(s).argmax_channels()).collect();
        let rels = self_supervised_maps(cfg, c, &views.view1, &view2, &probs2);
        for s in 0..batch.len() {
            let (h, w) = (view2[s].h(), view2[s].w());
            let interp = interpolate(&rels[s].r, &probs2.batch_entry(s), cfg.neighborhood);
            let gt_view = aligned_gt_view(&labels[chunk_start + s], views.bboxes[s], h, w);
            counts.add(&view2[s], &rels[s], &interp, &gt_view);
            precision.add(&rels[s].r, &view2[s], &gt_view);
            view_conf.add(&gt_view, &view2[s]);

            if vis_written < 4 {
                let palette = SceneSpec::default().palette;
                if c <= palette.len() {
                    let stem = out.join(format!("vis/image_{vis_written:02}"));
                    io::write_bytes(
                        &PathBuf::from(format!("{}_view2_input.ppm", stem.display())),
                        &formats::encode_ppm(&views.inputs2[s]),
                    )?;
                    for (tag, map) in [
                        ("view1", &views.view1[s]),
                        ("view2", &view2[s]),
                        ("interpolated", &interp.y_int),
                        ("gt", &gt_view),
                    ] {
                        io::write_bytes(
                            &PathBuf::from(format!("{}_{tag}.ppm", stem.display())),
                            &formats::encode_label_ppm(map, &palette),
                        )?;
                    }
                    let mut rmap = LabelMap::zeros(h, w);
                    for i in 0..h {
                        for j in 0..w {
                            rmap.set(i, j, rels[s].r.get(i, j) as u8);
                        }
                    }
                    io::write_bytes(
                        &PathBuf::from(format!("{}_reliability.pgm", stem.display())),
                        &formats::encode_pgm(&rmap, 1),
                    )?;
                    vis_written += 1;
                }
            }
        }
    }

    let report = counts.report();
    let view_iou = iou_report(&view_conf, synth::FIRST_THING_CLASS as usize);
    let rel_prec = precision.reliable_precision();
    let unrel_prec = precision.unreliable_precision();

    // Correlation between per-class reliability precision and per-class IoU,
    // over classes where both are defined.
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (p, i) in rel_prec.iter().zip(&view_iou.per_class) {
        if let (Some(p), Some(i)) = (p, i) {
            xs.push(*p);
            ys.push(*i);
        }
    }
    let corr = pearson(&xs, &ys);

    let opt = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |x| x.to_string());
    let mut csv = String::from("metric,value\n");
    writeln!(csv, "acc_reliable,{}", opt(report.acc_reliable)).unwrap();
    writeln!(csv, "acc_unreliable,{}", opt(report.acc_unreliable)).unwrap();
    writeln!(csv, "acc_nbhd_before,{}", opt(report.acc_nbhd_before)).unwrap();
    writeln!(csv, "acc_nbhd_after,{}", opt(report.acc_nbhd_after)).unwrap();
    writeln!(csv, "acc_isolated,{}", opt(report.acc_isolated)).unwrap();
    writeln!(csv, "frac_reliable,{}", report.frac_reliable).unwrap();
    writeln!(csv, "frac_nbhd,{}", report.frac_nbhd).unwrap();
    writeln!(csv, "frac_isolated,{}", report.frac_isolated).unwrap();
    writeln!(csv, "precision_iou_pearson,{}", opt(corr)).unwrap();
    io::write_text(&out.join("pseudolabel_report.csv"), &csv)?;

    let mut pcsv =
        String::from("class,p_correct_given_reliable,p_incorrect_given_unreliable,view_iou\n");
    for cls in 0..c {
        writeln!(
            pcsv,
            "{cls},{},{},{}",
            opt(rel_prec[cls]),
            opt(unrel_prec[cls]),
            opt(view_iou.per_class[cls])
        )
        .unwrap();
    }
    io::write_text(&out.join("reliability_precision.csv"), &pcsv)?;
    io::echo_config(out, cfg)?;

    println!(
        "pseudolabel accuracy: reliable {} vs unreliable {}; interpolation {} -> {}",
        opt(report.acc_reliable),
        opt(report.acc_unreliable),
        opt(report.acc_nbhd_before),
        opt(report.acc_nbhd_after)
    );
    println!(
        "pixel types: reliable {:.3}, reliable-neighborhood {:.3}, isolated {:.3}",
        report.frac_reliable, report.frac_nbhd, report.frac_isolated
    );
    println!("per-class precision vs IoU Pearson: {}", opt(corr));
    Ok(())
}

// ── ablation suites ──

fn table4_rows(base: &AdaptConfig) -> Vec<(String, AdaptConfig)> {
    let mut rows = Vec::new();
    let mut push = |label: &str, f: &dyn Fn(&mut AdaptConfig)| {
        let mut cfg = base.clone();
        cfg.ie_reg = false;
        cfg.confidence = false;
        cfg.consistency = false;
        cfg.loss_weights = false;
        cfg.interpolation = false;
        f(&mut cfg);
        rows.push((label.to_string(), cfg));
    };
    push("entmin", &|c| c.loss = LossChoice::EntMin);
    push("ce_all", &|c| c.loss = LossChoice::CeAll);
    push("ie_only", &|c| c.ie_reg = true);
    push("ie_confidence", &|c| {
        c.ie_reg = true;
        c.confidence = true;
    });
    push("ie_consistency", &|c| {
        c.ie_reg = true;
        c.consistency = true;
    });
    push("ie_conf_cons", &|c| {
        c.ie_reg = true;
        c.confidence = true;
        c.consistency = true;
    });
    push("ie_conf_cons_weights", &|c| {
        c.ie_reg = true;
        c.confidence = true;
        c.consistency = true;
        c.loss_weights = true;
    });
    push("full_s4t", &|c| {
        c.ie_reg = true;
        c.confidence = true;
        c.consistency = true;
        c.loss_weights = true;
        c.interpolation = true;
    });
    rows
}

fn suite_rows(suite: &str, base: &AdaptConfig) -> Result<Vec<(String, AdaptConfig)>> {
    let rows = match suite {
        "table4" => table4_rows(base),
        "noisy_oracle" => [0u32, 20, 40, 60, 80]
            .iter()
            .map(|&p| {
                let mut cfg = base.clone();
                cfg.set_oracle(OracleMode::Noisy(p));
                (format!("noisy_p{p:02}"), cfg)
            })
            .collect(),
        "k_sweep" => [3usize, 5, 7, 9]
            .iter()
            .map(|&k| {
                let mut cfg = base.clone();
                cfg.neighborhood = k;
                (format!("k{k}"), cfg)
            })
            .collect(),
        "selection_modes" => ["or", "and_vs_rest", "and_vs_and"]
            .iter()
            .map(|&mode| {
                let mut cfg = base.clone();
                cfg.set("selection_mode", mode).expect("known mode");
                (format!("mode_{mode}"), cfg)
            })
            .collect(),
        "all_params" => ["bn_only", "all_params"]
            .iter()
            .map(|&scope| {
                let mut cfg = base.clone();
                cfg.set("scope", scope).expect("known scope");
                (format!("scope_{scope}"), cfg)
            })
            .collect(),
        other => {
            return Err(usage(format!(
                "unknown suite `{other}`; expected table4, noisy_oracle, k_sweep, selection_modes, or all_params"
            )))
        }
    };
    Ok(rows)
}

pub fn cmd_ablate(cfg: &AdaptConfig, out: &Path, suite: &str) -> Result<()> {
    let rows = suite_rows(suite, cfg)?;
    let checkpoint = require(&cfg.checkpoint, "checkpoint", "ablate")?;
    let target_manifest = require(&cfg.target_manifest, "target_manifest", "ablate")?;
    let eval_manifest = require(&cfg.eval_manifest, "eval_manifest", "ablate")?;

    let source_model = io::load_checkpoint(checkpoint)?;
    if source_model.num_classes != cfg.num_classes {
        return Err(usage(format!(
            "checkpoint has {} classes but config says {}; set num_classes = {}",
            source_model.num_classes, cfg.num_classes, source_model.num_classes
        )));
    }
    let entries = io::load_manifest(target_manifest)?;
    let images = io::load_images(&entries)?;
    let needs_labels = rows.iter().any(|(_, c)| c.oracle_mode() != OracleMode::Off);
    let gt_labels = if needs_labels {
        let labels = io::load_labels(&entries)?;
        check_labels_in_range(&labels, cfg.num_classes)?;
        Some(labels)
    } else {
        None
    };
    let (eval_images, eval_labels) = load_eval_set(eval_manifest, cfg.num_classes)?;

    io::echo_config(out, cfg)?;
    let mut csv = String::from("row,status,miou,thing_miou,stuff_miou,pixel_accuracy\n");
    for (label, row_cfg) in &rows {
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            let (model, log) =
                adapt_model(row_cfg, source_model.clone(), &images, gt_labels.as_deref());
            let report = eval_model(row_cfg, &model, &eval_images, &eval_labels);
            (log, report)
        }));
        match outcome {
            Ok((log, report)) => {
                io::write_text(&out.join(format!("rows/{label}/adapt_log.csv")), &log)?;
                io::write_text(
                    &out.join(format!("rows/{label}/eval.csv")),
                    &format_iou_csv(&report),
                )?;
                io::write_text(&out.join(format!("rows/{label}/config.txt")), &row_cfg.to_text())?;
                writeln!(
                    csv,
                    "{label},ok,{},{},{},{}",
                    report.miou, report.thing_miou, report.stuff_miou, report.pixel_accuracy
                )
                .unwrap();
                println!("{label}: mIoU {:.4}", report.miou);
            }
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .map(String::as_str)
                    .or_else(|| panic.downcast_ref::<&str>().copied())
                    .unwrap_or("unknown panic");
                eprintln!("row {label} failed: {msg}");
                writeln!(csv, "{label},failed,,,,").unwrap();
            }
        }
    }
    io::write_text(&out.join(format!("ablate_{suite}.csv")), &csv)?;
    println!("suite {suite}: {} rows written to {}", rows.len(), out.display());
    Ok(())
}
