use std::fs;
use std::path::{Path, PathBuf};

use hallucinator_core::checkpoint::load_checkpoint;
use hallucinator_core::feature_store::{
    normalize_set, read_feature_file, read_manifest, write_feature_file, FeatureSet, Manifest,
};
use hallucinator_core::hallucinator::{HallucinatorConfig, HallucinatorModel, Variant};
use hallucinator_core::knn::{build_index, convert_sequence, convert_with_index, KnnConfig};
use hallucinator_core::synth::{
    ablation_rows, content_error, coverage, evaluate_counts, export_projection, fidelity_metric, gen_corpus,
    hallucinate_raw, run_ablation_suite, write_ablation_csv, EvalProtocol, EvalSplit, SynthConfig,
    SyntheticCorpus,
};
use hallucinator_core::trainer::{train as train_model, TrainConfig, TrainOutcome, Trainer};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::{
    AblateArgs, ConvertArgs, EvalArgs, HallucinateArgs, ModelSize, ProjectArgs, SynthArgs, TrainArgs,
    TrainOptions,
};

/// Written by `synth`; enough to regenerate the corpus with its hidden maps.
pub const CORPUS_META: &str = "corpus.json";
const HELD_OUT_KEY: &str = "held_out";

#[derive(Debug, Serialize, Deserialize)]
struct CorpusMeta {
    seed: u64,
    config: SynthConfig,
}

fn prepare_out_dir(dir: &Path) -> CliResult<()> {
    if dir.exists() && !dir.is_dir() {
        return Err(CliError::Usage(format!("{} exists and is not a directory", dir.display())));
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn check_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(CliError::Usage(format!(
            "output directory {} does not exist",
            p.display()
        ))),
        _ => Ok(()),
    }
}

fn check_exists(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} does not exist", path.display())))
    }
}

fn load_model(path: &Path) -> CliResult<HallucinatorModel<f32>> {
    check_exists(path)?;
    Ok(load_checkpoint(path)?.model)
}

fn read_set(path: &Path) -> CliResult<FeatureSet> {
    check_exists(path)?;
    Ok(read_feature_file(path)?.into_set()?)
}

fn load_corpus(dir: &Path) -> CliResult<SyntheticCorpus> {
    let path = dir.join(CORPUS_META);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let meta: CorpusMeta =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(gen_corpus(meta.seed, &meta.config)?)
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> CliResult<()> {
    check_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn synth(args: &SynthArgs, seed: u64) -> CliResult<()> {
    let config = SynthConfig {
        num_speakers: args.speakers,
        held_out_speakers: args.held_out,
        num_phonemes: args.phonemes,
        dim: args.dim,
        frames_per_utterance: args.frames,
        utterances_per_speaker: args.utterances,
        ..SynthConfig::default()
    };
    config.validate()?;
    prepare_out_dir(&args.out)?;
    let corpus = gen_corpus(seed, &config)?;
    let mut per_speaker = vec![0usize; corpus.speakers.len()];
    for u in &corpus.utterances {
        let spk = &corpus.speakers[u.speaker];
        let idx = per_speaker[u.speaker];
        per_speaker[u.speaker] += 1;
        let stem = format!("{}_u{idx:02}", spk.name());
        let labels_name = format!("{stem}.labels.csv");
        let mut manifest = Manifest {
            speaker_tag: Some(spk.name()),
            ..Manifest::default()
        };
        manifest.extra.insert(HELD_OUT_KEY.into(), spk.held_out.into());
        manifest.extra.insert("labels".into(), labels_name.clone().into());
        write_feature_file(&args.out.join(format!("{stem}.fsf")), &u.frames.clone().into(), Some(&manifest))?;

        let lpath = args.out.join(labels_name);
        let mut w = csv::Writer::from_path(&lpath).map_err(|e| CliError::csv(&lpath, e))?;
        w.write_record(["label"]).map_err(|e| CliError::csv(&lpath, e))?;
        for l in &u.labels {
            w.write_record([l.to_string()]).map_err(|e| CliError::csv(&lpath, e))?;
        }
        w.flush().map_err(|e| CliError::io(&lpath, e))?;
    }
    let meta = serde_json::to_string_pretty(&CorpusMeta { seed, config }).expect("config serializes");
    let mpath = args.out.join(CORPUS_META);
    fs::write(&mpath, meta).map_err(|e| CliError::io(&mpath, e))?;
    log::info!(
        "wrote {} utterances from {} speakers to {}",
        corpus.utterances.len(),
        corpus.speakers.len(),
        args.out.display()
    );
    Ok(())
}

fn feature_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "fsf"))
        .collect();
    files.sort();
    Ok(files)
}

/// Normalized training sets, skipping files whose manifest marks them held out.
fn training_sets(dir: &Path) -> CliResult<Vec<FeatureSet>> {
    let mut sets = Vec::new();
    for path in feature_files(dir)? {
        let held_out = read_manifest(&path)?
            .and_then(|m| m.extra.get(HELD_OUT_KEY).and_then(|v| v.as_bool()))
            .unwrap_or(false);
        if held_out {
            continue;
        }
        sets.push(normalize_set(&read_feature_file(&path)?.into_set()?));
    }
    Ok(sets)
}

fn configs(options: &TrainOptions, dim: usize, seed: u64) -> (HallucinatorConfig, TrainConfig) {
    let (model, mut train) = match options.size {
        ModelSize::Desk => (HallucinatorConfig::desk(dim), TrainConfig::desk()),
        ModelSize::Paper => (HallucinatorConfig::paper(dim), TrainConfig::paper()),
    };
    if let Some(e) = options.epochs {
        train.epochs = e;
    }
    if let Some(b) = options.batch_size {
        train.batch_size = b;
    }
    if let Some(lr) = options.lr {
        train.adam.lr = lr;
    }
    if let Some(p) = options.patience {
        train.patience = (p > 0).then_some(p);
    }
    train.seed = seed;
    (model, train)
}

fn report(outcome: &TrainOutcome) {
    if let Some(last) = outcome.history.last() {
        log::info!(
            "epoch {}: validation bound {:.4} (initial {:.4}){}",
            last.epoch,
            last.val_elbo,
            outcome.initial_val.total,
            if outcome.stopped_early { ", stopped early" } else { "" }
        );
    }
}

pub fn train(args: &TrainArgs, seed: u64) -> CliResult<()> {
    let variant: Variant = args.variant.parse()?;
    let data = training_sets(&args.data)?;
    let Some(first) = data.first() else {
        return Err(CliError::Usage(format!("no FSF files in {}", args.data.display())));
    };
    let (model, mut config) = configs(&args.options, first.dim(), seed);
    prepare_out_dir(&args.out)?;
    config.out_dir = Some(args.out.clone());
    let outcome = match &args.resume {
        Some(path) => {
            check_exists(path)?;
            Trainer::resume(path, config)?.run(&data)?
        }
        None => train_model(&data, model.with_flags(variant.flags()), config)?,
    };
    report(&outcome);
    Ok(())
}

pub fn hallucinate(args: &HallucinateArgs, seed: u64) -> CliResult<()> {
    let model = load_model(&args.checkpoint)?;
    let target = read_set(&args.target)?;
    check_parent(&args.out)?;
    let out = hallucinate_raw(&model, &target, args.count, seed)?;
    let manifest = Manifest {
        source: Some(args.target.display().to_string()),
        speaker_tag: target.speaker_tag.clone(),
        ..Manifest::default()
    };
    write_feature_file(&args.out, &out.into(), Some(&manifest))?;
    Ok(())
}

pub fn convert(args: &ConvertArgs, seed: u64) -> CliResult<()> {
    let knn = KnnConfig { k: args.k };
    knn.validate()?;
    check_exists(&args.source)?;
    let source = read_feature_file(&args.source)?.into_sequence();
    let mut target = read_set(&args.target)?;
    check_parent(&args.out)?;
    if args.count > 0 {
        let path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliError::Usage("--count > 0 needs --checkpoint".into()))?;
        let model = load_model(path)?;
        target = target.union(&hallucinate_raw(&model, &target, args.count, seed)?)?;
    }
    let converted = convert_sequence(&source, &target, &knn)?;
    write_feature_file(&args.out, &converted.into(), None)?;
    Ok(())
}

#[derive(Serialize)]
struct GroundTruthRow {
    speaker: usize,
    coverage: f64,
    fidelity: f64,
    content_error: f64,
}

pub fn eval(args: &EvalArgs, seed: u64) -> CliResult<()> {
    let corpus = load_corpus(&args.corpus)?;
    let protocol = EvalProtocol {
        knn: KnnConfig { k: args.k },
        seed,
        ..EvalProtocol::default()
    };
    protocol.knn.validate()?;
    let split = EvalSplit::new(&corpus, &protocol)?;
    match &args.checkpoint {
        Some(path) => {
            let model = load_model(path)?;
            let metrics = evaluate_counts(&model, &corpus, &split, &args.counts, &protocol)?;
            write_rows(&args.out, &metrics)
        }
        None => {
            let mut rows = Vec::new();
            for (speaker, frames, labels) in &split.sources {
                let spk = &corpus.speakers[*speaker];
                let (_, refs) = split
                    .references
                    .iter()
                    .find(|(s, _)| s == speaker)
                    .expect("every speaker has references");
                let converted = convert_with_index(frames, &build_index(refs)?, &protocol.knn)?;
                rows.push(GroundTruthRow {
                    speaker: *speaker,
                    coverage: coverage(refs, spk, &corpus.codebook)?,
                    fidelity: fidelity_metric(&frames.to_set()?, *speaker, &split.references)?,
                    content_error: content_error(labels, &converted, spk, &corpus.codebook)?,
                });
            }
            write_rows(&args.out, &rows)
        }
    }
}

pub fn ablate(args: &AblateArgs, seed: u64) -> CliResult<()> {
    let variants = args
        .variants
        .iter()
        .map(|v| v.parse::<Variant>().map(Variant::flags))
        .collect::<Result<Vec<_>, _>>()?;
    check_parent(&args.out)?;
    let corpus = load_corpus(&args.corpus)?;
    let (model, training) = configs(&args.options, corpus.config.dim, seed);
    let protocol = EvalProtocol {
        seed,
        ..EvalProtocol::default()
    };
    let results = run_ablation_suite(&corpus, &variants, &args.counts, &model, &training, &protocol)?;
    write_ablation_csv(&args.out, &ablation_rows(&results))?;
    Ok(())
}

pub fn project(args: &ProjectArgs, seed: u64) -> CliResult<()> {
    let model = match &args.checkpoint {
        Some(p) if args.count > 0 => Some(load_model(p)?),
        None if args.count > 0 => return Err(CliError::Usage("--count > 0 needs --checkpoint".into())),
        _ => None,
    };
    check_parent(&args.out)?;
    let mut groups = Vec::new();
    for (i, path) in args.inputs.iter().enumerate() {
        let set = read_set(path)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(m) = &model {
            let extra = hallucinate_raw(m, &set, args.count, seed.wrapping_add(i as u64))?;
            groups.push((stem.clone(), set));
            groups.push((format!("{stem}+hallucinated"), extra));
        } else {
            groups.push((stem, set));
        }
    }
    export_projection(&groups, &args.out)?;
    Ok(())
}
