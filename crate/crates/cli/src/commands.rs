use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::path::{Path, PathBuf};

use cofor_core::dataset::{
    class_names, leave_one_out_plan, read_manifest, records_in, split_manifest, synth_generate, write_manifest,
    JpegPolicy, ManifestRecord, PreprocPolicy, Split, SynthSpec,
};
use cofor_core::embed::{extract_embeddings, pca_reduce, plot_embedding, tsne, write_layout_csv, write_legend, TsneConfig};
use cofor_core::imagecore::{decode_image, extract_patches};
use cofor_core::localize::{heatmap, render, DetectorScorer};
use cofor_core::persist::{write_atomic, write_feature_dump, FeatureRecord};
use cofor_core::pipeline::{
    decide, evaluate, predict, sweep_grid, target_index, train, write_history_csv, ConfusionMatrix, EvalReport,
    SweepAxis, TrainConfig,
};
use cofor_core::{feature_tensor, ArchConfig, Head, MiniXception, ModelCheckpoint, PatchSpec};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::{
    ArchKind, Cli, Command, EmbedArgs, EvalArgs, ExtractArgs, GridKind, HeadKind, LocalizeArgs, PredictArgs,
    SplitArgs, SplitChoice, SweepArgs, SynthArgs, TrainArgs, TrainingArgs,
};

type CliResult<T = ()> = Result<T, Box<dyn StdError>>;

pub fn run(cli: Cli) -> CliResult {
    let threads = cli.threads;
    match cli.command {
        Command::Synth(a) => synth(a, threads),
        Command::Split(a) => split(a, threads),
        Command::Extract(a) => extract(a, threads),
        Command::Train(a) => train_cmd(a, threads),
        Command::Detect(a) => predict_cmd(a, threads, HeadKind::Detection),
        Command::Attribute(a) => predict_cmd(a, threads, HeadKind::Attribution),
        Command::Localize(a) => localize(a, threads),
        Command::Embed(a) => embed(a, threads),
        Command::Sweep(a) => sweep(a, threads),
        Command::Eval(a) => eval(a, threads),
    }
}

fn print_config(command: &str, threads: Option<usize>, mut fields: Value) {
    fields["command"] = json!(command);
    fields["threads"] = json!(threads.unwrap_or_else(rayon::current_num_threads));
    println!("config {fields}");
}

fn invalid(msg: impl Into<String>) -> Box<dyn StdError> {
    Box::new(cofor_core::Error::InvalidArgument(msg.into()))
}

fn select(records: Vec<ManifestRecord>, split: SplitChoice) -> Vec<ManifestRecord> {
    let wanted = match split {
        SplitChoice::All => return records,
        SplitChoice::Train => Split::Train,
        SplitChoice::Val => Split::Val,
        SplitChoice::Test => Split::Test,
    };
    records_in(&records, wanted)
}

fn parse_fractions(s: &str) -> CliResult<(f64, f64, f64)> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| invalid(format!("fractions `{s}`: {e}")))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(invalid(format!("fractions `{s}` must have three values"))),
    }
}

fn synth(a: SynthArgs, threads: Option<usize>) -> CliResult {
    let mut spec = match a.classes {
        2 => SynthSpec::detection(),
        n @ 3..=6 => {
            let mut s = SynthSpec::attribution();
            s.classes.truncate(n);
            s
        }
        n => return Err(invalid(format!("--classes must be between 2 and 6, got {n}"))),
    };
    spec.images_per_class = a.images_per_class;
    spec.image_size = a.size;
    spec.rng_seed = a.seed;
    print_config(
        "synth",
        threads,
        json!({"seed": a.seed, "out": a.out, "spec": spec}),
    );
    let records = synth_generate(&spec, &a.out)?;
    println!(
        "wrote {} images in {} classes; manifest {}",
        records.len(),
        spec.classes.len(),
        a.out.join("manifest.jsonl").display()
    );
    Ok(())
}

fn split_counts(records: &[ManifestRecord]) -> String {
    let mut counts: BTreeMap<(String, Split), usize> = BTreeMap::new();
    for r in records {
        *counts.entry((r.label.clone(), r.split)).or_default() += 1;
    }
    let mut out = String::new();
    for class in class_names(records) {
        let n = |s| counts.get(&(class.clone(), s)).copied().unwrap_or(0);
        out.push_str(&format!(
            "{class:>12}  train {:>6}  val {:>6}  test {:>6}\n",
            n(Split::Train),
            n(Split::Val),
            n(Split::Test)
        ));
    }
    out
}

fn split(a: SplitArgs, threads: Option<usize>) -> CliResult {
    let fractions = parse_fractions(&a.fractions)?;
    print_config(
        "split",
        threads,
        json!({"seed": a.seed, "manifest": a.manifest, "fractions": [fractions.0, fractions.1, fractions.2],
               "hold_out": a.hold_out, "real_label": a.real_label}),
    );
    let records = read_manifest(&a.manifest)?;
    let assigned = match &a.hold_out {
        None => split_manifest(&records, fractions, a.seed)?,
        Some(held) => {
            let plan = leave_one_out_plan(&records, held, &a.real_label, a.seed)?;
            println!("training classes: {}", plan.train_classes.join(", "));
            let tag = |recs: Vec<ManifestRecord>, s| {
                recs.into_iter().map(move |mut r| {
                    r.split = s;
                    r
                })
            };
            tag(plan.train, Split::Train)
                .chain(tag(plan.val, Split::Val))
                .chain(tag(plan.test, Split::Test))
                .collect()
        }
    };
    write_manifest(&a.out, &assigned)?;
    print!("{}", split_counts(&assigned));
    println!("wrote {}", a.out.display());
    Ok(())
}

fn input_records(manifest: &Option<PathBuf>, images: &[PathBuf]) -> CliResult<Vec<ManifestRecord>> {
    let mut records = match manifest {
        Some(m) => read_manifest(m)?,
        None => Vec::new(),
    };
    records.extend(images.iter().map(|p| {
        let key = p.display().to_string();
        ManifestRecord::new(p.clone(), "", key)
    }));
    if records.is_empty() {
        return Err(invalid("no input images"));
    }
    Ok(records)
}

fn extract(a: ExtractArgs, threads: Option<usize>) -> CliResult {
    let window = match a.patch_size {
        Some(size) => Some(PatchSpec::new(size, a.stride.unwrap_or(size))?),
        None if a.stride.is_some() => return Err(invalid("--stride needs --patch-size")),
        None => None,
    };
    let mut policy = PreprocPolicy::whole_image(a.pairs.clone());
    policy.jpeg = a.jpeg.clone();
    policy.rng_seed = a.seed;
    policy.validate()?;
    print_config(
        "extract",
        threads,
        json!({"seed": a.seed, "pairs": a.pairs.to_string(), "jpeg": a.jpeg.to_string(),
               "patch": window, "out": a.out}),
    );
    let records = input_records(&a.manifest, &a.images)?;
    let dumps = records
        .par_iter()
        .map(|r| -> cofor_core::Result<Vec<FeatureRecord>> {
            let img = policy.prepare(&decode_image(&r.path)?, &r.key(), 0)?;
            let source = r.key();
            match window {
                None => Ok(vec![FeatureRecord {
                    source,
                    origin: (0, 0),
                    tensor: feature_tensor(&img, &policy.subset),
                }]),
                Some(w) => Ok(extract_patches(&img, w)?
                    .into_iter()
                    .map(|p| FeatureRecord {
                        source: source.clone(),
                        origin: p.origin,
                        tensor: feature_tensor(&p.image, &policy.subset),
                    })
                    .collect()),
            }
        })
        .collect::<cofor_core::Result<Vec<_>>>()?;
    let dumps: Vec<FeatureRecord> = dumps.into_iter().flatten().collect();
    write_feature_dump(&a.out, &dumps)?;
    println!("wrote {} feature tensors from {} images to {}", dumps.len(), records.len(), a.out.display());
    Ok(())
}

/// Class list for the checkpoint. Detection uses `[real, other]`, with a generic name when
/// several generated labels are pooled.
fn training_classes(head: HeadKind, records: &[ManifestRecord], real_label: &str) -> CliResult<Vec<String>> {
    let names = class_names(records);
    match head {
        HeadKind::Attribution => {
            if names.len() < 2 {
                return Err(invalid(format!("attribution needs at least 2 classes, found {names:?}")));
            }
            Ok(names)
        }
        HeadKind::Detection => {
            if !names.iter().any(|n| n == real_label) {
                return Err(invalid(format!("no records labelled `{real_label}` (set --real-label); found {names:?}")));
            }
            let others: Vec<&String> = names.iter().filter(|n| *n != real_label).collect();
            match others[..] {
                [] => Err(invalid("detection needs at least one generated class")),
                [one] => Ok(vec![real_label.to_string(), one.clone()]),
                _ => Ok(vec![real_label.to_string(), "generated".to_string()]),
            }
        }
    }
}

fn build_model(t: &TrainingArgs, depth: usize, classes: usize) -> CliResult<MiniXception<f32>> {
    let head = match t.head {
        HeadKind::Detection => Head::Detection,
        HeadKind::Attribution => Head::Attribution(classes),
    };
    let arch = match t.arch {
        ArchKind::Mini => ArchConfig::mini(depth, head),
        ArchKind::Full => ArchConfig::full(depth, head),
    };
    Ok(MiniXception::build(arch, t.seed)?)
}

fn train_config(t: &TrainingArgs, classes: usize) -> TrainConfig {
    let base = match t.head {
        HeadKind::Detection => TrainConfig::default(),
        HeadKind::Attribution => TrainConfig::attribution(classes),
    };
    let mut cfg = TrainConfig {
        epochs: t.epochs,
        batches_per_epoch: t.batches_per_epoch,
        val_batches: t.val_batches,
        batch_size: t.batch_size.unwrap_or(base.batch_size),
        seed: t.seed,
        target_val_accuracy: t.target_val_accuracy,
        ..base
    };
    cfg.adam.lr = t.lr;
    cfg
}

fn patched(mut policy: PreprocPolicy, patch_size: Option<usize>) -> CliResult<PreprocPolicy> {
    if let Some(size) = patch_size {
        policy.patch = Some(PatchSpec::tiled(size)?);
    }
    Ok(policy)
}

fn history_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_history.csv"))
}

fn train_cmd(a: TrainArgs, threads: Option<usize>) -> CliResult {
    let records = read_manifest(&a.manifest)?;
    let t = &a.training;
    let classes = training_classes(t.head, &records, &t.real_label)?;
    let mut policy = PreprocPolicy::whole_image(a.features.pairs.clone());
    policy.jpeg = a.features.jpeg.clone();
    policy.rng_seed = t.seed;
    let policy = patched(policy, a.features.patch_size)?;
    let cfg = train_config(t, classes.len());
    let model = build_model(t, policy.subset.depth(3), classes.len())?;
    print_config(
        "train",
        threads,
        json!({"seed": t.seed, "pairs": policy.subset.to_string(), "jpeg": policy.jpeg.to_string(),
               "patch": policy.patch, "classes": classes, "arch": model.config(),
               "parameters": model.summary().parameter_count, "train": cfg, "out": a.out}),
    );
    let ckpt = train(model, &classes, &records, &policy, &cfg)?;
    ckpt.save(&a.out)?;
    let history = history_path(&a.out);
    write_history_csv(&history, &ckpt.meta.history)?;
    println!(
        "best val accuracy {} at epoch {} after {} epochs",
        ckpt.meta.best_val_accuracy.map_or("n/a".into(), |v| format!("{v:.4}")),
        ckpt.meta.best_epoch.map_or("n/a".into(), |e| e.to_string()),
        ckpt.meta.epochs_run
    );
    println!("checkpoint {} fingerprint {}", a.out.display(), ckpt.fingerprint()?);
    println!("history {}", history.display());
    Ok(())
}

/// Checkpoint policy with command-line overrides applied.
fn eval_policy(
    ckpt: &ModelCheckpoint,
    jpeg: &Option<JpegPolicy>,
    patch_size: Option<usize>,
    seed: Option<u64>,
) -> CliResult<PreprocPolicy> {
    let mut policy = ckpt.policy.clone();
    if let Some(j) = jpeg {
        policy.jpeg = j.clone();
    }
    if let Some(s) = seed {
        policy.rng_seed = s;
    }
    let policy = patched(policy, patch_size)?;
    policy.validate()?;
    Ok(policy)
}

fn model_config(ckpt: &ModelCheckpoint, path: &Path, policy: &PreprocPolicy) -> CliResult<Value> {
    Ok(json!({"model": path, "fingerprint": ckpt.fingerprint()?, "classes": ckpt.classes,
              "seed": policy.rng_seed, "pairs": policy.subset.to_string(), "jpeg": policy.jpeg.to_string(),
              "patch": policy.patch}))
}

fn predict_cmd(a: PredictArgs, threads: Option<usize>, expected: HeadKind) -> CliResult {
    let ckpt = ModelCheckpoint::load(&a.model)?;
    let head = ckpt.head();
    match (expected, head) {
        (HeadKind::Detection, Head::Attribution(_)) => {
            return Err(invalid("`detect` needs a detection checkpoint; use `attribute`"))
        }
        (HeadKind::Attribution, Head::Detection) => {
            return Err(invalid("`attribute` needs an attribution checkpoint; use `detect`"))
        }
        _ => {}
    }
    let policy = eval_policy(&ckpt, &a.jpeg, a.patch_size, a.seed)?;
    let mut config = model_config(&ckpt, &a.model, &policy)?;
    config["split"] = json!(format!("{:?}", a.split).to_lowercase());
    let name = if expected == HeadKind::Detection { "detect" } else { "attribute" };
    print_config(name, threads, config);

    let mut records = match &a.manifest {
        Some(m) => select(read_manifest(m)?, a.split),
        None => Vec::new(),
    };
    records.extend(input_records(&None, &a.images).unwrap_or_default());
    if records.is_empty() {
        return Err(invalid("no input images"));
    }
    let model = ckpt.to_model()?;
    let probs = predict(&model, &records, &policy)?;

    let mut rows = Vec::with_capacity(records.len());
    let mut truths = Vec::new();
    for (r, p) in records.iter().zip(&probs) {
        let verdict = decide(head, p);
        match head {
            Head::Detection => println!(
                "{}  p(generated)={:.4}  {}",
                r.key(),
                p[0],
                if verdict == 1 { "generated" } else { "authentic" }
            ),
            Head::Attribution(_) => {
                let listed: Vec<String> = ckpt.classes.iter().zip(p).map(|(c, v)| format!("{c}={v:.4}")).collect();
                println!("{}  {}  -> {}", r.key(), listed.join(" "), ckpt.classes[verdict]);
            }
        }
        let truth = if r.label.is_empty() { None } else { target_index(head, &ckpt.classes, &r.label).ok() };
        if let Some(t) = truth {
            truths.push((t, verdict));
        }
        rows.push(json!({"id": r.key(), "label": r.label, "probabilities": p, "prediction": match head {
            Head::Detection => json!(verdict == 1),
            Head::Attribution(_) => json!(ckpt.classes[verdict]),
        }}));
    }
    let mut summary = json!({"results": rows});
    if !truths.is_empty() {
        let n = truths.len();
        let confusion = ConfusionMatrix::from_pairs(ckpt.classes.clone(), truths)?;
        println!("accuracy {:.4} ({} labelled images)", confusion.accuracy(), n);
        if let Head::Attribution(_) = head {
            println!("equal-prior accuracy {:.4}", confusion.equal_prior_accuracy());
        }
        summary["accuracy"] = json!(confusion.accuracy());
        summary["equal_prior_accuracy"] = json!(confusion.equal_prior_accuracy());
    }
    if let Some(out) = &a.out {
        write_atomic(out, &serde_json::to_vec_pretty(&summary)?)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn heatmap_path(image: &Path, out_dir: &Option<PathBuf>) -> PathBuf {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = format!("{stem}_heatmap.png");
    match out_dir {
        Some(d) => d.join(name),
        None => image.with_file_name(name),
    }
}

fn localize(a: LocalizeArgs, threads: Option<usize>) -> CliResult {
    let ckpt = ModelCheckpoint::load(&a.model)?;
    let window = PatchSpec::new(a.patch_size, a.stride)?;
    let mut policy = ckpt.policy.clone();
    policy.rng_seed = a.seed;
    let mut config = model_config(&ckpt, &a.model, &policy)?;
    config["window"] = json!(window);
    print_config("localize", threads, config);
    if let Some(d) = &a.out {
        std::fs::create_dir_all(d)?;
    }
    let model = ckpt.to_model()?;
    let scorer = DetectorScorer::new(&model, ckpt.subset().clone())?;
    for image in &a.images {
        let img = decode_image(image)?;
        let hm = heatmap(&img, &scorer, window)?;
        let png = heatmap_path(image, &a.out);
        let sidecar = render(&hm, &png)?;
        let mean = hm.scores.iter().map(|&v| v as f64).sum::<f64>() / hm.scores.len().max(1) as f64;
        println!(
            "{}  mean score {mean:.4}  heatmap {}  scores {}",
            image.display(),
            png.display(),
            sidecar.display()
        );
    }
    Ok(())
}

fn embed(a: EmbedArgs, threads: Option<usize>) -> CliResult {
    let ckpt = ModelCheckpoint::load(&a.model)?;
    let mut config = model_config(&ckpt, &a.model, &ckpt.policy)?;
    config["seed"] = json!(a.seed);
    config["cap"] = json!(a.cap);
    config["pca_dim"] = json!(a.pca_dim);
    config["perplexity"] = json!(a.perplexity);
    config["iterations"] = json!(a.iterations);
    print_config("embed", threads, config);
    std::fs::create_dir_all(&a.out)?;
    let records = select(read_manifest(&a.manifest)?, a.split);
    let model = ckpt.to_model()?;
    let set = extract_embeddings(&model, &records, &ckpt.policy, a.cap, a.seed)?;
    set.write_jsonl(a.out.join("embeddings.jsonl"))?;
    let (reduced, pca) = pca_reduce(&set, a.pca_dim)?;
    let cfg = TsneConfig {
        perplexity: a.perplexity,
        iterations: a.iterations,
        seed: a.seed,
        ..TsneConfig::default()
    };
    let out = tsne(&reduced.vectors, &cfg)?;
    write_layout_csv(a.out.join("layout.csv"), &reduced, &out.layout)?;
    let legend = plot_embedding(&out.layout, &reduced.labels, a.out.join("tsne.png"))?;
    write_legend(a.out.join("legend.json"), &legend)?;
    let kl: String = out.kl_history.iter().enumerate().map(|(i, v)| format!("{i},{v}\n")).collect();
    write_atomic(&a.out.join("kl.csv"), format!("iteration,kl\n{kl}").as_bytes())?;
    println!(
        "{} embeddings of width {}, PCA to {}, final KL {:.4}",
        set.len(),
        set.dim(),
        pca.components.ncols(),
        out.kl_history.last().copied().unwrap_or(f64::NAN)
    );
    for e in &legend {
        println!("  {} rgb{:?}", e.label, e.colour);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn sweep_axis(grid: GridKind, values: &Option<String>) -> CliResult<SweepAxis> {
    let raw = values.clone().unwrap_or_else(|| match grid {
        GridKind::Patch => "64,128,256".into(),
        GridKind::Jpeg => "75,85,90,none".into(),
    });
    let items: Vec<&str> = raw.split(',').map(str::trim).collect();
    Ok(match grid {
        GridKind::Patch => SweepAxis::Patch(
            items
                .iter()
                .map(|s| s.parse::<usize>().map_err(|e| invalid(format!("patch size `{s}`: {e}"))))
                .collect::<CliResult<_>>()?,
        ),
        GridKind::Jpeg => SweepAxis::Jpeg(
            items
                .iter()
                .map(|s| s.parse::<JpegPolicy>().map_err(|e| invalid(format!("jpeg `{s}`: {e}"))))
                .collect::<CliResult<_>>()?,
        ),
    })
}

fn sweep(a: SweepArgs, threads: Option<usize>) -> CliResult {
    let axis = sweep_axis(a.grid, &a.values)?;
    let records = read_manifest(&a.manifest)?;
    let t = &a.training;
    let classes = training_classes(t.head, &records, &t.real_label)?;
    let mut policy = PreprocPolicy::whole_image(a.pairs.clone());
    policy.rng_seed = t.seed;
    let cfg = train_config(t, classes.len());
    let arch = build_model(t, policy.subset.depth(3), classes.len())?.config().clone();
    print_config(
        "sweep",
        threads,
        json!({"seed": t.seed, "pairs": policy.subset.to_string(), "axis": axis, "classes": classes,
               "arch": arch, "train": cfg, "out": a.out}),
    );
    let result = sweep_grid(&axis, &records, &policy, &arch, &classes, &cfg)?;
    print!("{}", result.to_text());
    write_atomic(&a.out, &serde_json::to_vec_pretty(&result)?)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs, threads: Option<usize>) -> CliResult {
    let ckpt = ModelCheckpoint::load(&a.model)?;
    let policy = eval_policy(&ckpt, &a.jpeg, a.patch_size, a.seed)?;
    let mut config = model_config(&ckpt, &a.model, &policy)?;
    config["split"] = json!(format!("{:?}", a.split).to_lowercase());
    config["cap"] = json!(a.test_batches * a.batch_size);
    print_config("eval", threads, config);
    let records = select(read_manifest(&a.manifest)?, a.split);
    let report: EvalReport = evaluate(&ckpt, &records, &policy, a.batch_size, a.test_batches)?;
    println!("accuracy {:.4} ({} images)", report.accuracy, report.evaluated);
    println!("equal-prior accuracy {:.4}", report.equal_prior_accuracy);
    print!("{}", report.confusion.to_text());
    if let Some(out) = &a.out {
        report.save_json(out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
