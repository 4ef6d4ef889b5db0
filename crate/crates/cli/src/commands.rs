use std::fs::{self, OpenOptions};
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use cmota::checkpoint::{self, Checkpoint, CheckpointError};
use cmota::config::{seeds, RunConfig};
use cmota::eval::{append_ledger, MetricReport};
use cmota::experiment::{self, ablation_table, arm, caption_story, generate_story, prepare, run_arm, Arm, ArmSummary, ExperimentError, Prepared, ARMS, OFFLINE_CAPTIONER};
use cmota::fsio::atomic_write;
use cmota::image::Image;
use cmota::model::{MemoryChain, Model};
use cmota::numerics::{Graph, Var};
use cmota::storyworld::{make_splits, read_dataset, write_dataset, Dataset};
use cmota::tokenizer::{encode_text, Codebook};
use cmota::trainer::{offline_augment, Augmentation, TrainError, Trainer};
use serde::Serialize;

use crate::layout::Layout;
use crate::{Failure, Global};

type Result<T> = std::result::Result<T, Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Usage(format!("{}: {e}", path.display()))
}

fn experiment_err(e: ExperimentError) -> Failure {
    if e.is_numerical() {
        Failure::Numerical(format!("{e}; try a lower learning rate or enable clip_norm"))
    } else {
        Failure::Usage(e.to_string())
    }
}

fn train_err(e: TrainError) -> Failure {
    experiment_err(ExperimentError::Train(e))
}

/// Config from `--config` or `--preset` (desk by default) with `--seed`
/// applied, validated.
fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::from_toml(&fs::read_to_string(path).map_err(io_err(path))?).map_err(usage)?,
        None => RunConfig::preset(g.preset.as_deref().unwrap_or("desk")).map_err(usage)?,
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// At most one `--arm`, applied to the config.
fn single_arm(g: &Global, cfg: RunConfig) -> Result<(RunConfig, Option<Arm>)> {
    match g.arm.as_slice() {
        [] => Ok((cfg, None)),
        [name] => {
            let a = arm(name).ok_or_else(|| Failure::Usage(format!("unknown arm {name}; known: {}", arm_names())))?;
            Ok((a.apply(&cfg), Some(a)))
        }
        _ => Err(Failure::Usage("only `ablate` accepts more than one --arm".into())),
    }
}

fn arm_names() -> String {
    ARMS.iter().map(|a| a.name).collect::<Vec<_>>().join(", ")
}

fn write_toml(path: &Path, cfg: &RunConfig) -> Result<()> {
    atomic_write(path, cfg.to_toml().map_err(usage)?.as_bytes()).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(usage)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes).map_err(io_err(path))
}

fn load_dataset(layout: &Layout, cfg: &RunConfig, force: bool) -> Result<Dataset> {
    let dir = layout.data();
    if !dir.join("index.json").exists() {
        return Err(Failure::Missing(format!("no dataset in {}; run `cmota gen-data` first", dir.display())));
    }
    let data = read_dataset(&dir).map_err(usage)?;
    if !force && (data.config != cfg.world || data.seed != cfg.seed_for(seeds::DATA)) {
        return Err(Failure::Usage(format!(
            "dataset in {} was generated with a different world config or seed; regenerate it or pass --force",
            dir.display()
        )));
    }
    Ok(data)
}

fn load_codebook(layout: &Layout) -> Result<Codebook> {
    let path = layout.codebook();
    if !path.exists() {
        return Err(Failure::Missing(format!("no codebook at {}; run `cmota fit-codebook` first", path.display())));
    }
    serde_json::from_slice(&fs::read(&path).map_err(io_err(&path))?).map_err(usage)
}

fn load_prepared(layout: &Layout, cfg: &RunConfig, force: bool) -> Result<(Dataset, Prepared)> {
    let data = load_dataset(layout, cfg, force)?;
    let codebook = load_codebook(layout)?;
    let prepared = prepare(&data, cfg, codebook).map_err(experiment_err)?;
    Ok((data, prepared))
}

/// Loads a checkpoint, refusing one trained under a different config
/// unless `--force` is given.
fn load_checkpoint(path: &Path, cfg: &RunConfig, force: bool) -> Result<Checkpoint<f32>> {
    if !path.exists() {
        return Err(Failure::Missing(format!("no checkpoint at {}; run `cmota train` first", path.display())));
    }
    let ck = checkpoint::load::<f32>(path).map_err(|e| match e {
        CheckpointError::Io(e) => Failure::Missing(format!("{}: {e}", path.display())),
        e => usage(e),
    })?;
    check_hash(&ck.meta.config_hash, cfg, path, force)?;
    Ok(ck)
}

fn check_hash(found: &str, cfg: &RunConfig, path: &Path, force: bool) -> Result<()> {
    let want = cfg.hash();
    if found != want && !force {
        return Err(Failure::Usage(format!(
            "{} was produced by config {}, but the requested config hashes to {}; pass the same config and --arm, or --force",
            path.display(),
            &found[..12.min(found.len())],
            &want[..12]
        )));
    }
    Ok(())
}

pub fn gen_data(g: &Global) -> Result<()> {
    let cfg = load_config(g)?;
    let layout = Layout::new(&g.out);
    let d = &cfg.data;
    let data = make_splits(d.n_train, d.n_val, d.n_test, cfg.seed_for(seeds::DATA), &cfg.world).map_err(usage)?;
    write_dataset(&data, &layout.data()).map_err(usage)?;
    write_toml(&layout.data().join("config.toml"), &cfg)?;
    println!("wrote {} train, {} val, {} test stories to {}", data.train.len(), data.val.len(), data.test.len(), layout.data().display());
    Ok(())
}

pub fn fit_codebook(g: &Global) -> Result<()> {
    let cfg = load_config(g)?;
    let layout = Layout::new(&g.out);
    let data = load_dataset(&layout, &cfg, g.force)?;
    let codebook = experiment::fit_world_codebook(&data, &cfg).map_err(experiment_err)?;
    let images: Vec<Image> = data.train.iter().flat_map(|s| s.images.iter().cloned()).collect();
    let mse = cmota::tokenizer::quantization_mse(&images, &codebook);
    write_json(&layout.codebook(), &codebook)?;
    println!("codebook with {} entries, train reconstruction MSE {mse:.4}, written to {}", codebook.len(), layout.codebook().display());
    Ok(())
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut line = serde_json::to_vec(value).map_err(usage)?;
    line.push(b'\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    f.write_all(&line).map_err(io_err(path))
}

fn save_checkpoint(path: &Path, cfg: &RunConfig, prepared: &Prepared, trainer: &Trainer<f32>) -> Result<()> {
    checkpoint::save(path, cfg, &prepared.vocab, &prepared.codebook, trainer).map_err(usage)
}

pub fn train(g: &Global, max_steps: Option<u64>, captioner: Option<&Path>) -> Result<()> {
    let (cfg, chosen) = single_arm(g, load_config(g)?)?;
    let layout = Layout::new(&g.out);
    let (_, prepared) = load_prepared(&layout, &cfg, g.force)?;
    let latest = layout.latest();

    let resumed = if latest.exists() {
        let meta = checkpoint::decode_meta(&fs::read(&latest).map_err(io_err(&latest))?).map_err(usage)?;
        if meta.config_hash == cfg.hash() {
            true
        } else if g.force {
            log::warn!("config changed; starting a fresh run over {}", latest.display());
            false
        } else {
            check_hash(&meta.config_hash, &cfg, &latest, false)?;
            unreachable!("hash mismatch is refused above");
        }
    } else {
        false
    };
    let mut trainer = if resumed {
        checkpoint::load::<f32>(&latest).map_err(usage)?.trainer
    } else {
        if layout.metrics().exists() {
            fs::remove_file(layout.metrics()).map_err(io_err(&layout.metrics()))?;
        }
        let mut t = experiment::new_trainer::<f32>(&cfg).map_err(experiment_err)?;
        if chosen.is_some_and(|a| a.augmentation == Augmentation::Offline) || cfg.train.augmentation == Augmentation::Offline {
            let path = captioner.ok_or_else(|| Failure::Missing(format!("the offline arm needs --captioner (a {OFFLINE_CAPTIONER} checkpoint)")))?;
            let cap_cfg = arm(OFFLINE_CAPTIONER).expect("known arm").apply(&cfg);
            let cap = load_checkpoint(path, &cap_cfg, g.force)?;
            let texts = offline_augment(&prepared.train, &cap.trainer.model, &t.model).map_err(train_err)?;
            t.set_offline_texts(texts);
        }
        t
    };
    write_toml(&layout.config(), &cfg)?;
    fs::create_dir_all(layout.checkpoints()).map_err(io_err(&layout.checkpoints()))?;

    let mut taken = 0;
    while trainer.epoch < trainer.config.epochs && max_steps.is_none_or(|m| taken < m) {
        let epoch = trainer.epoch;
        let rec = trainer.step(&prepared.train).map_err(train_err)?;
        append_line(&layout.metrics(), &rec)?;
        taken += 1;
        if trainer.epoch > epoch {
            save_checkpoint(&layout.epoch_checkpoint(trainer.epoch), &cfg, &prepared, &trainer)?;
            log::info!("epoch {} done, loss {:.4}", trainer.epoch, rec.l_total);
        }
    }
    save_checkpoint(&latest, &cfg, &prepared, &trainer)?;
    println!(
        "{} step(s) this run; epoch {}/{} step {}; checkpoint {}",
        taken,
        trainer.epoch,
        trainer.config.epochs,
        trainer.global_step,
        latest.display()
    );
    Ok(())
}

fn checkpoint_path(layout: &Layout, given: Option<&Path>) -> PathBuf {
    given.map_or_else(|| layout.latest(), Path::to_path_buf)
}

pub fn eval(g: &Global, ckpt: Option<&Path>) -> Result<()> {
    let (cfg, _) = single_arm(g, load_config(g)?)?;
    let layout = Layout::new(&g.out);
    let ck = load_checkpoint(&checkpoint_path(&layout, ckpt), &cfg, g.force)?;
    let (data, prepared) = load_prepared(&layout, &cfg, g.force)?;
    let (report, _) = experiment::evaluate(&ck.trainer.model, &cfg, &data, &prepared).map_err(experiment_err)?;
    write_json(&layout.eval().join("report.json"), &report)?;
    append_ledger(&layout.eval().join("ledger.jsonl"), &report).map_err(usage)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(usage)?);
    print!("{}", report.per_character_table());
    Ok(())
}

fn png_bytes(img: &Image) -> Result<Vec<u8>> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec())
        .ok_or_else(|| Failure::Usage("image buffer does not match its size".into()))?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).map_err(usage)?;
    Ok(out.into_inner())
}

#[derive(Serialize)]
struct SampleRecord {
    sentences: Vec<String>,
    image_tokens: Vec<Vec<usize>>,
    pseudo_texts: Vec<String>,
}

pub fn sample(g: &Global, ckpt: Option<&Path>, texts: &[String], story: usize) -> Result<()> {
    let (cfg, _) = single_arm(g, load_config(g)?)?;
    let layout = Layout::new(&g.out);
    let ck = load_checkpoint(&checkpoint_path(&layout, ckpt), &cfg, g.force)?;
    let (vocab, codebook) = (&ck.meta.vocab, &ck.meta.codebook);
    let sentences: Vec<String> = if texts.is_empty() {
        let data = load_dataset(&layout, &cfg, g.force)?;
        data.test.get(story).ok_or_else(|| Failure::Usage(format!("test split has {} stories", data.test.len())))?.sentences.clone()
    } else {
        texts.to_vec()
    };
    let ids = sentences
        .iter()
        .map(|s| encode_text(s, vocab, cfg.model.t_text).map(|t| t.tokens().to_vec()))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(usage)?;
    let model = &ck.trainer.model;
    let (tokens, images) = generate_story(model, &ids, codebook).map_err(experiment_err)?;
    let pseudo_texts = caption_story(model, &tokens, vocab).map_err(experiment_err)?;
    let dir = layout.samples();
    for (i, img) in images.iter().enumerate() {
        let raw = dir.join(format!("frame_{i}.raw"));
        atomic_write(&raw, &img.to_raw_bytes()).map_err(io_err(&raw))?;
        let png = dir.join(format!("frame_{i}.png"));
        atomic_write(&png, &png_bytes(img)?).map_err(io_err(&png))?;
    }
    let record = SampleRecord { sentences, image_tokens: tokens, pseudo_texts };
    write_json(&dir.join("story.json"), &record)?;
    for (s, p) in record.sentences.iter().zip(&record.pseudo_texts) {
        println!("{s}  ->  {p}");
    }
    println!("wrote {} frames to {}", images.len(), dir.display());
    Ok(())
}

/// One attention weight of a memory operation.
#[derive(Serialize)]
struct AttentionRecord {
    frame: usize,
    layer: usize,
    kind: &'static str,
    head: usize,
    query: usize,
    key: usize,
    /// Token at the key position (summary) or the memory row (weighting).
    key_label: String,
    weight: f32,
}

pub fn inspect_memory(g: &Global, ckpt: Option<&Path>, story: usize) -> Result<()> {
    let (cfg, _) = single_arm(g, load_config(g)?)?;
    let layout = Layout::new(&g.out);
    let ck = load_checkpoint(&checkpoint_path(&layout, ckpt), &cfg, g.force)?;
    let (_, prepared) = load_prepared(&layout, &cfg, g.force)?;
    let st = prepared.test.get(story).ok_or_else(|| Failure::Usage(format!("test split has {} stories", prepared.test.len())))?;
    let model: &Model<f32> = &ck.trainer.model;
    if model.fusion_layers().is_empty() {
        return Err(Failure::Usage("this model has no memory (topology none)".into()));
    }

    let mut graph = Graph::with_params(&model.params);
    let mut chain: MemoryChain<Var> = model.new_chain();
    let mut records = Vec::new();
    let t_m = cfg.model.t_m;
    for (frame, (text, image)) in st.texts.iter().zip(&st.images).enumerate() {
        let seq = model.t2i_sequence(text, image).map_err(usage)?;
        let out = model.forward(&mut graph, &seq, Some(&chain)).map_err(usage)?;
        for (i, &layer) in model.fusion_layers().iter().enumerate() {
            let label = |k: usize| {
                let id = seq.ids[k];
                match prepared.vocab.word(id) {
                    Some(w) if id < cfg.model.text_vocab => w.to_string(),
                    _ => format!("image:{}", id.saturating_sub(cfg.model.text_vocab)),
                }
            };
            push_probs(&graph, out.summary_attention[i], frame + 1, layer, "summary", &label, &mut records);
            if let Some(w) = out.awm_attention[i] {
                let mem = |k: usize| format!("M_{}[{}]", k / t_m + 1, k % t_m);
                push_probs(&graph, w, frame + 1, layer, "attentive_weight", &mem, &mut records);
            }
        }
        chain.push(out.memories);
    }
    let dir = layout.memory();
    let mut body = Vec::new();
    for r in &records {
        body.extend(serde_json::to_vec(r).map_err(usage)?);
        body.push(b'\n');
    }
    let path = dir.join("attention.jsonl");
    atomic_write(&path, &body).map_err(io_err(&path))?;
    println!("wrote {} attention records for test story {story} to {}", records.len(), path.display());
    Ok(())
}

fn push_probs(
    graph: &Graph<'_, f32>,
    node: Var,
    frame: usize,
    layer: usize,
    kind: &'static str,
    label: &dyn Fn(usize) -> String,
    out: &mut Vec<AttentionRecord>,
) {
    let Some((heads, probs)) = graph.attention_probs(node) else { return };
    let value = graph.value(node);
    let queries = value.rows();
    let keys = probs.len() / (heads * queries).max(1);
    for h in 0..heads {
        for q in 0..queries {
            for k in 0..keys {
                let weight = probs[(h * queries + q) * keys + k];
                out.push(AttentionRecord { frame, layer, kind, head: h, query: q, key: k, key_label: label(k), weight });
            }
        }
    }
}

pub fn ablate(g: &Global, seeds: u64) -> Result<()> {
    let base = load_config(g)?;
    let layout = Layout::new(&g.out);
    let (data, prepared) = load_prepared(&layout, &base, g.force)?;
    let arms: Vec<Arm> = if g.arm.is_empty() {
        ARMS.to_vec()
    } else {
        g.arm.iter().map(|n| arm(n).ok_or_else(|| Failure::Usage(format!("unknown arm {n}; known: {}", arm_names())))).collect::<Result<_>>()?
    };
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be positive".into()));
    }
    let needs_captioner = arms.iter().any(|a| a.augmentation == Augmentation::Offline);
    let dir = layout.ablate();
    let mut reports: Vec<Vec<MetricReport>> = vec![Vec::new(); arms.len()];
    let mut params = vec![0; arms.len()];
    let reports_path = dir.join("reports.jsonl");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    if reports_path.exists() {
        fs::remove_file(&reports_path).map_err(io_err(&reports_path))?;
    }
    for seed in 0..seeds {
        let cfg = RunConfig { seed, ..base.clone() };
        let mut captioner: Option<Model<f32>> = None;
        let mut order: Vec<usize> = (0..arms.len()).collect();
        // The captioner arm runs first so the offline arm can use it.
        order.sort_by_key(|&i| arms[i].name != OFFLINE_CAPTIONER);
        if needs_captioner && !arms.iter().any(|a| a.name == OFFLINE_CAPTIONER) {
            let a = arm(OFFLINE_CAPTIONER).expect("known arm");
            eprintln!("seed {seed}: training {} as the offline captioner", a.name);
            captioner = Some(run_arm(a, &cfg, &data, &prepared, None, |_, _| {}).map_err(experiment_err)?.trainer.model);
        }
        for i in order {
            let a = arms[i];
            eprintln!("seed {seed}: arm {}", a.name);
            let run = run_arm(a, &cfg, &data, &prepared, captioner.as_ref(), |m, _| log::info!("{} epoch {}: loss {:.4}", a.name, m.epoch, m.mean_total))
                .map_err(experiment_err)?;
            write_toml(&dir.join(a.name).join(format!("config_seed{seed}.toml")), &run.config)?;
            append_line(&reports_path, &serde_json::json!({ "arm": a.name, "seed": seed, "report": run.report }))?;
            if a.name == OFFLINE_CAPTIONER {
                captioner = Some(run.trainer.model.clone());
            }
            params[i] = run.params;
            reports[i].push(run.report);
        }
    }
    let summaries: Vec<ArmSummary> = arms.iter().zip(&reports).zip(&params).map(|((a, r), &p)| ArmSummary::from_reports(a.name, p, r)).collect();
    let table = ablation_table(&summaries);
    atomic_write(&dir.join("table.txt"), table.as_bytes()).map_err(io_err(&dir))?;
    write_json(&dir.join("summary.json"), &summaries)?;
    print!("{table}");
    Ok(())
}
