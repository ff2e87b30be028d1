//! Command implementations. Every command works inside one experiment
//! directory (`--out-dir`) and writes a `manifest.json` recording the
//! effective config, seeds, and code version.

use crate::config::RunConfig;
use peftlab::dataset::{self, Corpus, CorpusSplit};
use peftlab::diffusion::{
    diffusion_data_from_corpus, p_sample_loop, DiffusionTrainConfig, DiffusionTrainer,
    NoisePredictor, PromptEmbedder,
};
use peftlab::error::{Error, Result};
use peftlab::metrics::{self, FeatureExtractor, GenReport, MetricReport};
use peftlab::vqa::{VqaModel, VqaTrainConfig, VqaTrainer};
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct Ctx {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
    pub epochs_override: Option<usize>,
}

impl Ctx {
    fn corpus_dir(&self) -> PathBuf {
        self.out_dir.join("corpus")
    }

    fn load_corpus(&self) -> Result<(Corpus, CorpusSplit)> {
        let dir = self.corpus_dir();
        if !dir.join("manifest.json").exists() {
            return Err(Error::Input(format!(
                "no corpus at {}; run `peftlab gen-data` first",
                dir.display()
            )));
        }
        dataset::load_corpus(&dir)
    }

    /// Records the run (config, seeds, code version) in the stage's
    /// manifest.json. An existing manifest (e.g. the corpus data
    /// manifest) keeps its fields; the run record lands under "run".
    fn write_manifest(&self, dir: &Path, command: &str, extra: serde_json::Value) -> Result<()> {
        let run = serde_json::json!({
            "command": command,
            "config": self.cfg,
            "epochs_override": self.epochs_override,
            "code_version": env!("CARGO_PKG_VERSION"),
            "extra": extra,
        });
        std::fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        let mut manifest = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str::<serde_json::Value>(&text)
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?,
            Err(_) => serde_json::json!({}),
        };
        manifest
            .as_object_mut()
            .ok_or_else(|| Error::Parse(format!("{}: not a JSON object", path.display())))?
            .insert("run".into(), run);
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?
                + "\n",
        )?;
        Ok(())
    }
}

pub fn gen_data(ctx: &Ctx) -> Result<()> {
    let d = &ctx.cfg.data;
    let corpus = dataset::generate_corpus(d.n_images, d.seed, d.image_size)?;
    let split = dataset::split_80_20(&corpus.examples, d.seed)?;
    let dir = ctx.corpus_dir();
    std::fs::create_dir_all(&dir)?;
    dataset::save_corpus(&corpus, &split, &dir)?;
    ctx.write_manifest(
        &dir,
        "gen-data",
        serde_json::json!({
            "n_images": d.n_images,
            "examples": corpus.examples.len(),
            "train_images": split.train_image_ids.len(),
            "val_images": split.val_image_ids.len(),
        }),
    )?;
    println!(
        "wrote corpus: {} images, {} examples -> {}",
        corpus.images.len(),
        corpus.examples.len(),
        dir.display()
    );
    Ok(())
}

fn vqa_train_config(ctx: &Ctx, train_len: usize, epochs: usize) -> VqaTrainConfig {
    let v = &ctx.cfg.vqa;
    let window = (v.batch_size * v.accumulation_steps).max(1);
    let steps_per_epoch = train_len.div_ceil(window) as u64;
    VqaTrainConfig {
        optimizer: ctx.cfg.vqa_optimizer(),
        schedule: ctx.cfg.vqa_schedule(steps_per_epoch * epochs as u64),
        epochs,
        batch_size: v.batch_size,
        accumulation_steps: v.accumulation_steps,
        vision_warmup_steps: v.vision_warmup_steps,
        seed: v.seed,
    }
}

pub fn train_vqa(ctx: &Ctx) -> Result<()> {
    let (corpus, split) = ctx.load_corpus()?;
    let epochs = ctx.epochs_override.unwrap_or(ctx.cfg.vqa.epochs);
    let model_cfg = ctx.cfg.vqa_model_config(corpus.tokenizer.vocab_size());
    let model = VqaModel::new(model_cfg, ctx.cfg.vqa.seed)?;
    let train_cfg = vqa_train_config(ctx, split.train.len(), epochs);
    let mut trainer = VqaTrainer::new(model, train_cfg);
    let reports = trainer.train(&corpus, &split, epochs)?;

    let dir = ctx.out_dir.join("vqa");
    std::fs::create_dir_all(&dir)?;
    let mut csv = String::from(MetricReport::csv_header());
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.metrics.csv_row(r.epoch));
        csv.push('\n');
    }
    std::fs::write(dir.join("vqa_metrics.csv"), csv)?;
    trainer.save_checkpoint(&dir.join("checkpoint"))?;
    ctx.write_manifest(
        &dir,
        "train-vqa",
        serde_json::json!({
            "epochs": epochs,
            "final_train_loss": reports.last().map(|r| r.train_loss),
            "vision_warmup_steps": ctx.cfg.vqa.vision_warmup_steps,
        }),
    )?;
    println!(
        "trained vqa for {epochs} epochs; final rougeL {:.4} -> {}",
        reports.last().map(|r| r.metrics.rouge_l).unwrap_or(0.0),
        dir.display()
    );
    Ok(())
}

pub fn eval_vqa(ctx: &Ctx) -> Result<()> {
    let (corpus, split) = ctx.load_corpus()?;
    let ckpt = ctx.out_dir.join("vqa").join("checkpoint");
    if !ckpt.join("manifest.json").exists() {
        return Err(Error::Input(format!(
            "no VQA checkpoint at {}; run `peftlab train-vqa` first",
            ckpt.display()
        )));
    }
    let mut trainer = VqaTrainer::load_checkpoint(&ckpt)?;
    let preds = trainer.predictions(&corpus, &split.validation)?;

    let dir = ctx.out_dir.join("vqa_eval");
    std::fs::create_dir_all(&dir)?;
    let pred_path = dir.join("predictions.jsonl");
    let mut f = std::fs::File::create(&pred_path)?;
    for p in &preds {
        writeln!(
            f,
            "{}",
            serde_json::to_string(p).map_err(|e| Error::Parse(e.to_string()))?
        )?;
    }
    drop(f);
    let report = metrics::evaluate_predictions_file(
        &pred_path,
        &dir.join("metrics.csv"),
        trainer.completed_epochs,
    )?;
    ctx.write_manifest(
        &dir,
        "eval-vqa",
        serde_json::json!({ "examples": preds.len(), "epoch": trainer.completed_epochs }),
    )?;
    println!(
        "evaluated {} validation examples: bleu {:.4} rouge1 {:.4} rougeL {:.4} meteor {:.4}",
        preds.len(),
        report.bleu,
        report.rouge1,
        report.rouge_l,
        report.meteor
    );
    Ok(())
}

fn diffusion_train_config(ctx: &Ctx, n_latents: usize, epochs: usize) -> DiffusionTrainConfig {
    let d = &ctx.cfg.diffusion;
    let window = (d.batch_size * d.accumulation_steps).max(1);
    let steps_per_epoch = n_latents.div_ceil(window) as u64;
    DiffusionTrainConfig {
        optimizer: ctx.cfg.diffusion_optimizer(),
        schedule: ctx.cfg.diffusion_schedule(steps_per_epoch * epochs as u64),
        epochs,
        batch_size: d.batch_size,
        accumulation_steps: d.accumulation_steps,
        lora: ctx.cfg.lora_config(),
        seed: d.seed,
        eval_batch: ctx.cfg.eval.eval_batch,
        eval_seed: ctx.cfg.eval.feature_seed,
    }
}

pub fn train_diffusion(ctx: &Ctx) -> Result<()> {
    let (corpus, _) = ctx.load_corpus()?;
    let epochs = ctx.epochs_override.unwrap_or(ctx.cfg.diffusion.epochs);
    let data = diffusion_data_from_corpus(&corpus, ctx.cfg.diffusion.latent_size)?;
    let embedder = PromptEmbedder::new(
        ctx.cfg.diffusion.prompt_embed_seed,
        ctx.cfg.diffusion.cond_dim,
    );
    let extractor = FeatureExtractor::new(ctx.cfg.eval.feature_seed);

    let model = NoisePredictor::new(ctx.cfg.diffusion_model_config(), ctx.cfg.diffusion.seed)?;
    let train_cfg = diffusion_train_config(ctx, data.latents.len(), epochs);
    let mut trainer = DiffusionTrainer::new(model, train_cfg)?;
    let reports = trainer.train(&data, &embedder, &extractor, epochs)?;

    let dir = ctx.out_dir.join("diffusion");
    std::fs::create_dir_all(&dir)?;
    let mut csv = String::from(GenReport::csv_header());
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.report.csv_row(r.epoch));
        csv.push('\n');
    }
    std::fs::write(dir.join("gen_metrics.csv"), csv)?;
    trainer.save_adapters(&dir.join("adapters"))?;
    ctx.write_manifest(
        &dir,
        "train-diffusion",
        serde_json::json!({
            "epochs": epochs,
            "rank": ctx.cfg.diffusion.rank,
            "trainable_values": trainer.model.params.trainable_values(),
            "final_train_loss": reports.last().map(|r| r.train_loss),
            "final_eval_loss": reports.last().map(|r| r.eval_loss),
        }),
    )?;
    println!(
        "trained diffusion adapters for {epochs} epochs; final fbd {:.4} -> {}",
        reports.last().map(|r| r.report.fbd).unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

pub fn generate(ctx: &Ctx) -> Result<()> {
    let (corpus, _) = ctx.load_corpus()?;
    let adapters_dir = ctx.out_dir.join("diffusion").join("adapters");
    if !adapters_dir.join("manifest.json").exists() {
        return Err(Error::Input(format!(
            "no adapters at {}; run `peftlab train-diffusion` first",
            adapters_dir.display()
        )));
    }
    let trainer = DiffusionTrainer::load_adapters(&adapters_dir)?;
    let embedder = PromptEmbedder::new(
        ctx.cfg.diffusion.prompt_embed_seed,
        ctx.cfg.diffusion.cond_dim,
    );
    let prompts = dataset::build_prompts(&corpus.images);

    let dir = ctx.out_dir.join("generated");
    std::fs::create_dir_all(&dir)?;
    let n = ctx.cfg.eval.gen_count;
    let mut prompt_lines = String::new();
    for i in 0..n {
        let prompt = &prompts[i % prompts.len()];
        let cond = embedder.embed(prompt);
        let sample_seed =
            peftlab::rng::derive_seed(ctx.cfg.diffusion.seed, "cli.generate", &[i as u64]);
        let latent = p_sample_loop(
            &trainer.model,
            &trainer.adapters,
            &trainer.schedule,
            &cond,
            sample_seed,
        )?;
        let pixels = peftlab::diffusion::decode_latent(&latent, ctx.cfg.data.image_size)?;
        dataset::save_png(
            &dir.join(format!("gen_{i:05}.png")),
            ctx.cfg.data.image_size,
            ctx.cfg.data.image_size,
            &pixels,
        )?;
        prompt_lines.push_str(prompt);
        prompt_lines.push('\n');
    }
    std::fs::write(dir.join("prompts.txt"), prompt_lines)?;
    ctx.write_manifest(&dir, "generate", serde_json::json!({ "count": n }))?;
    println!("wrote {n} generated images -> {}", dir.display());
    Ok(())
}

fn load_png_dir(dir: &Path) -> Result<Vec<Vec<f64>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("no PNG files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| dataset::load_png(p).map(|(_, _, px)| px))
        .collect()
}

pub fn eval_gen(ctx: &Ctx) -> Result<()> {
    let real = load_png_dir(&ctx.corpus_dir().join("images"))?;
    let gen_dir = ctx.out_dir.join("generated");
    let generated = load_png_dir(&gen_dir)?;
    let prompts_path = gen_dir.join("prompts.txt");
    let prompts: Vec<String> = std::fs::read_to_string(&prompts_path)
        .map_err(|e| Error::Input(format!("{}: {e}", prompts_path.display())))?
        .lines()
        .map(String::from)
        .collect();
    if prompts.len() != generated.len() {
        return Err(Error::Input(format!(
            "{} prompts for {} generated images",
            prompts.len(),
            generated.len()
        )));
    }
    let extractor = FeatureExtractor::new(ctx.cfg.eval.feature_seed);
    let embedder = PromptEmbedder::new(
        ctx.cfg.diffusion.prompt_embed_seed,
        ctx.cfg.diffusion.cond_dim,
    );
    let prompt_embs: Vec<Vec<f64>> = prompts.iter().map(|p| embedder.embed(p)).collect();

    let report = GenReport {
        fidelity: metrics::fidelity(&generated, &real, &extractor)?,
        agreement: metrics::agreement(&generated, &prompt_embs, &extractor)?,
        diversity: metrics::diversity(&generated, &extractor)?,
        fbd: metrics::fbd(&real, &generated, &extractor)?,
    };
    let dir = ctx.out_dir.join("gen_eval");
    std::fs::create_dir_all(&dir)?;
    let mut csv = String::from(GenReport::csv_header());
    csv.push('\n');
    csv.push_str(&report.csv_row(0));
    csv.push('\n');
    std::fs::write(dir.join("gen_report.csv"), csv)?;
    ctx.write_manifest(
        &dir,
        "eval-gen",
        serde_json::json!({ "real": real.len(), "generated": generated.len() }),
    )?;
    println!(
        "gen eval: fidelity {:.4} agreement {:.4} diversity {:.4} fbd {:.4}",
        report.fidelity, report.agreement, report.diversity, report.fbd
    );
    Ok(())
}

fn last_csv_row(path: &Path) -> Option<Vec<String>> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let _header = lines.next()?;
    lines
        .next_back()
        .map(|l| l.split(',').map(String::from).collect::<Vec<String>>())
        .filter(|row| row.len() == 5)
}

/// Merges per-stage CSVs into one experiment table (text metrics) plus a
/// generation table (FBD and friends), as CSV and JSON.
pub fn report(ctx: &Ctx) -> Result<()> {
    let mut text_rows: Vec<(String, Vec<String>)> = Vec::new();
    for (name, path) in [
        ("train-vqa", ctx.out_dir.join("vqa").join("vqa_metrics.csv")),
        ("eval-vqa", ctx.out_dir.join("vqa_eval").join("metrics.csv")),
    ] {
        if let Some(row) = last_csv_row(&path) {
            text_rows.push((name.to_string(), row));
        }
    }
    let mut gen_rows: Vec<(String, Vec<String>)> = Vec::new();
    for (name, path) in [
        (
            "train-diffusion",
            ctx.out_dir.join("diffusion").join("gen_metrics.csv"),
        ),
        (
            "eval-gen",
            ctx.out_dir.join("gen_eval").join("gen_report.csv"),
        ),
    ] {
        if let Some(row) = last_csv_row(&path) {
            gen_rows.push((name.to_string(), row));
        }
    }
    if text_rows.is_empty() && gen_rows.is_empty() {
        return Err(Error::Input(format!(
            "no metric CSVs under {}; nothing to report",
            ctx.out_dir.display()
        )));
    }

    let mut text_csv = String::from("experiment,bleu,rouge1,rougeL,meteor\n");
    for (name, row) in &text_rows {
        // Row layout: epoch,bleu,rouge1,rougeL,meteor.
        text_csv.push_str(&format!("{},{}\n", name, row[1..].join(",")));
    }
    std::fs::write(ctx.out_dir.join("report.csv"), &text_csv)?;

    let mut gen_csv = String::from("experiment,fidelity,agreement,diversity,fbd\n");
    for (name, row) in &gen_rows {
        gen_csv.push_str(&format!("{},{}\n", name, row[1..].join(",")));
    }
    std::fs::write(ctx.out_dir.join("report_gen.csv"), &gen_csv)?;

    let json = serde_json::json!({
        "text_metrics": text_rows
            .iter()
            .map(|(name, row)| {
                serde_json::json!({
                    "experiment": name,
                    "bleu": row[1], "rouge1": row[2], "rougeL": row[3], "meteor": row[4],
                })
            })
            .collect::<Vec<_>>(),
        "generation_metrics": gen_rows
            .iter()
            .map(|(name, row)| {
                serde_json::json!({
                    "experiment": name,
                    "fidelity": row[1], "agreement": row[2], "diversity": row[3], "fbd": row[4],
                })
            })
            .collect::<Vec<_>>(),
    });
    std::fs::write(
        ctx.out_dir.join("report.json"),
        serde_json::to_string_pretty(&json).map_err(|e| Error::Parse(e.to_string()))? + "\n",
    )?;
    ctx.write_manifest(&ctx.out_dir.clone(), "report", serde_json::json!({}))?;
    println!(
        "wrote report.csv, report_gen.csv, report.json -> {}",
        ctx.out_dir.display()
    );
    Ok(())
}
