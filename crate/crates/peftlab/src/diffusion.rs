//! Conditional denoising-diffusion generator with LoRA-wrappable
//! attention projections.
//!
//! The latent space is a raw `L x L x 3` grid tied to the corpus images by
//! a fixed linear encode/decode pair (no learned autoencoder). The noise
//! predictor treats latent cells as tokens, conditions on a timestep
//! feature and a pooled prompt embedding, and is trained by epsilon-MSE.
//! During adapter training the whole base network stays frozen; only the
//! injected low-rank pairs move.

use crate::archive::{self, TensorArchive};
use crate::dataset::{build_prompts, Corpus};
use crate::error::{Error, Result};
use crate::lora::{inject_many, AdapterSet, LoraConfig};
use crate::metrics::{self, FeatureExtractor, GenReport};
use crate::nn;
use crate::optim::{cosine_lr, AdamW, AdamWConfig, ScheduleConfig};
use crate::rng;
use crate::tensor::{Graph, ParamSet, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;

const MLP_RATIO: usize = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Latent grid side; the latent shape is `latent_size^2 x 3`.
    pub latent_size: usize,
    pub cond_dim: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            latent_size: 8,
            cond_dim: 32,
            hidden_dim: 32,
            n_blocks: 3,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_start > 0.0 && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start < end < 1, got {} .. {}",
                self.beta_start, self.beta_end
            )));
        }
        if self.timesteps < 2 {
            return Err(Error::Config("timesteps must be >= 2".into()));
        }
        Ok(())
    }

    pub fn latent_tokens(&self) -> usize {
        self.latent_size * self.latent_size
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_size, self.latent_size, 3]
    }
}

// ── Noise schedule ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule from `beta_start` to `beta_end`.
    pub fn new(cfg: &DiffusionConfig) -> Result<Self> {
        cfg.validate()?;
        let t = cfg.timesteps;
        let betas: Vec<f64> = (0..t)
            .map(|i| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }
}

/// Forward noising `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(schedule: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    if t >= schedule.len() {
        return Err(Error::Contract(format!(
            "timestep {t} out of range 0..{}",
            schedule.len()
        )));
    }
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "q_sample: x0 shape {:?} vs eps shape {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let ab = schedule.alpha_bars[t];
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data: Vec<f64> = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| sa * x + sn * e)
        .collect();
    Tensor::new(data, x0.shape())
}

// ── Prompt embedding ────────────────────────────────────────────────

/// Word-level embedding table (lazily hashed per word) with mean pooling
/// to `cond_dim`. Deterministic given the seed; never trained.
pub struct PromptEmbedder {
    seed: u64,
    cond_dim: usize,
    cache: RefCell<HashMap<String, Vec<f64>>>,
}

impl PromptEmbedder {
    pub fn new(seed: u64, cond_dim: usize) -> Self {
        PromptEmbedder {
            seed,
            cond_dim,
            cache: RefCell::new(HashMap::new()),
        }
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        if let Some(v) = self.cache.borrow().get(word) {
            return v.clone();
        }
        let mut r = rng::substream(
            self.seed,
            "prompt.word",
            &[rng::hash_bytes(word.as_bytes())],
        );
        let v = rng::randn_vec(&mut r, self.cond_dim, 1.0);
        self.cache.borrow_mut().insert(word.to_string(), v.clone());
        v
    }

    pub fn embed(&self, prompt: &str) -> Vec<f64> {
        let words = metrics::normalize(prompt);
        let mut out = vec![0.0; self.cond_dim];
        if words.is_empty() {
            return out;
        }
        for w in &words {
            for (o, v) in out.iter_mut().zip(self.word_vector(w)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= words.len() as f64;
        }
        out
    }
}

// ── Noise predictor ─────────────────────────────────────────────────

/// Residual attention network over latent tokens. Attention projections
/// are named `query`/`key`/`value`/`output` so the default LoRA target
/// set wraps them directly.
pub struct NoisePredictor {
    pub cfg: DiffusionConfig,
    pub params: ParamSet,
    pub seed: u64,
}

impl NoisePredictor {
    pub fn new(cfg: DiffusionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut r = rng::substream(seed, "diffusion.init", &[]);
        let h = cfg.hidden_dim;

        nn::init_linear_fan_in(&mut params, "input_proj.w", 3, h, &mut r);
        nn::init_bias(&mut params, "input_proj.b", h);
        params.register(
            "pos_embed",
            Tensor::randn(&[cfg.latent_tokens(), h], 0.1, &mut r),
        );
        nn::init_linear_fan_in(&mut params, "time_proj.w", h, h, &mut r);
        nn::init_linear_fan_in(&mut params, "cond_proj.w", cfg.cond_dim, h, &mut r);
        for i in 0..cfg.n_blocks {
            let p = format!("blocks.{i}");
            nn::init_layer_norm(&mut params, &format!("{p}.norm1"), h);
            nn::init_attention_fan_in(&mut params, &format!("{p}.attn"), h, &mut r);
            nn::init_layer_norm(&mut params, &format!("{p}.norm2"), h);
            nn::init_mlp_fan_in(&mut params, &format!("{p}.mlp"), h, MLP_RATIO * h, &mut r);
        }
        nn::init_layer_norm(&mut params, "out_norm", h);
        nn::init_linear_fan_in(&mut params, "out_proj.w", h, 3, &mut r);
        nn::init_bias(&mut params, "out_proj.b", 3);

        Ok(NoisePredictor { cfg, params, seed })
    }

    /// Attention block prefixes, the LoRA injection points.
    pub fn attention_prefixes(&self) -> Vec<String> {
        (0..self.cfg.n_blocks)
            .map(|i| format!("blocks.{i}.attn"))
            .collect()
    }

    /// Predicted noise for `x_t` (latent tensor) at timestep `t` under a
    /// prompt conditioning vector; output has the latent token shape.
    pub fn forward(
        &self,
        g: &mut Graph,
        adapters: &AdapterSet,
        x_t: &Tensor,
        t: usize,
        cond: &[f64],
    ) -> Result<Var> {
        let tokens = self.cfg.latent_tokens();
        if x_t.numel() != tokens * 3 {
            return Err(Error::Shape(format!(
                "latent has {} values, expected {}",
                x_t.numel(),
                tokens * 3
            )));
        }
        if cond.len() != self.cfg.cond_dim {
            return Err(Error::Shape(format!(
                "conditioning width {} != cond_dim {}",
                cond.len(),
                self.cfg.cond_dim
            )));
        }
        let h = self.cfg.hidden_dim;
        let x_leaf = g.leaf(x_t.data().to_vec(), &[tokens, 3], false)?;
        let mut x = nn::linear_with_bias(
            g,
            &self.params,
            adapters,
            x_leaf,
            "input_proj.w",
            "input_proj.b",
        )?;
        let pos_ids: Vec<usize> = (0..tokens).collect();
        let pos_table = g.param(self.params.get("pos_embed")?);
        let pos = g.embedding(pos_table, &pos_ids)?;
        x = g.add(x, pos)?;

        let tfeat = g.leaf(nn::sinusoidal_features(t as f64, h), &[1, h], false)?;
        let tw = g.param(self.params.get("time_proj.w")?);
        let tproj = g.matmul(tfeat, tw)?;
        x = g.add_bias(x, tproj)?;

        let cfeat = g.leaf(cond.to_vec(), &[1, self.cfg.cond_dim], false)?;
        let cw = g.param(self.params.get("cond_proj.w")?);
        let cproj = g.matmul(cfeat, cw)?;
        x = g.add_bias(x, cproj)?;

        for i in 0..self.cfg.n_blocks {
            let p = format!("blocks.{i}");
            let normed = nn::layer_norm(g, &self.params, x, &format!("{p}.norm1"))?;
            let attn = nn::multi_head_attention(
                g,
                &self.params,
                adapters,
                &format!("{p}.attn"),
                normed,
                normed,
                1,
                false,
            )?;
            x = g.add(x, attn)?;
            let normed = nn::layer_norm(g, &self.params, x, &format!("{p}.norm2"))?;
            let ff = nn::mlp(g, &self.params, adapters, &format!("{p}.mlp"), normed)?;
            x = g.add(x, ff)?;
        }
        let x = nn::layer_norm(g, &self.params, x, "out_norm")?;
        nn::linear_with_bias(g, &self.params, adapters, x, "out_proj.w", "out_proj.b")
    }

    /// No-grad prediction as a plain tensor in the latent shape.
    pub fn predict(
        &self,
        adapters: &AdapterSet,
        x_t: &Tensor,
        t: usize,
        cond: &[f64],
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, adapters, x_t, t, cond)?;
        Tensor::new(g.data(out).to_vec(), x_t.shape())
    }
}

/// Epsilon-MSE between drawn noise and the model prediction on one
/// latent: draws `t` uniformly and `eps ~ N(0, I)` from `rng`.
pub fn denoise_loss<R: Rng>(
    g: &mut Graph,
    model: &NoisePredictor,
    adapters: &AdapterSet,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    cond: &[f64],
    rng: &mut R,
) -> Result<Var> {
    let t = rng.gen_range(0..schedule.len());
    let eps = Tensor::new(rng::randn_vec(rng, x0.numel(), 1.0), x0.shape())?;
    let x_t = q_sample(schedule, x0, t, &eps)?;
    let pred = model.forward(g, adapters, &x_t, t, cond)?;
    eps_mse(g, &eps, pred)
}

/// Mean squared error between target noise and a prediction variable.
pub fn eps_mse(g: &mut Graph, eps: &Tensor, pred: Var) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    let target = g.leaf(eps.data().to_vec(), &shape, false)?;
    let diff = g.sub(target, pred)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq))
}

/// Ancestral reverse diffusion from seeded Gaussian noise; deterministic
/// given `(seed, cond, weights)`. Returns the final latent.
pub fn p_sample_loop(
    model: &NoisePredictor,
    adapters: &AdapterSet,
    schedule: &NoiseSchedule,
    cond: &[f64],
    seed: u64,
) -> Result<Tensor> {
    let shape = model.cfg.latent_shape();
    let numel = shape.iter().product();
    let mut r = rng::substream(seed, "diffusion.sample", &[]);
    let mut x = Tensor::new(rng::randn_vec(&mut r, numel, 1.0), &shape)?;

    for t in (0..schedule.len()).rev() {
        let eps_hat = model.predict(adapters, &x, t, cond)?;
        let (alpha, beta, ab) = (
            schedule.alphas[t],
            schedule.betas[t],
            schedule.alpha_bars[t],
        );
        let coef = beta / (1.0 - ab).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let mut next: Vec<f64> = x
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(xv, ev)| inv_sqrt_alpha * (xv - coef * ev))
            .collect();
        if t > 0 {
            let ab_prev = schedule.alpha_bars[t - 1];
            let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
            let z = rng::randn_vec(&mut r, numel, 1.0);
            for (n, zv) in next.iter_mut().zip(z) {
                *n += sigma * zv;
            }
        }
        x = Tensor::new(next, &shape)?;
    }
    Ok(x)
}

// ── Fixed linear latent <-> image maps ──────────────────────────────

/// Average-pools an image down to the latent grid and centers it into
/// [-1, 1].
pub fn encode_image(pixels: &[f64], image_size: usize, latent_size: usize) -> Result<Tensor> {
    if pixels.len() != image_size * image_size * 3 {
        return Err(Error::Shape(format!(
            "encode_image: {} values for size {image_size}",
            pixels.len()
        )));
    }
    if !image_size.is_multiple_of(latent_size) {
        return Err(Error::Config(format!(
            "image size {image_size} not divisible by latent size {latent_size}"
        )));
    }
    let f = image_size / latent_size;
    let mut data = vec![0.0; latent_size * latent_size * 3];
    for ly in 0..latent_size {
        for lx in 0..latent_size {
            for c in 0..3 {
                let mut sum = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        let (y, x) = (ly * f + dy, lx * f + dx);
                        sum += pixels[(y * image_size + x) * 3 + c];
                    }
                }
                data[(ly * latent_size + lx) * 3 + c] = (sum / (f * f) as f64 - 0.5) * 2.0;
            }
        }
    }
    Tensor::new(data, &[latent_size, latent_size, 3])
}

/// Nearest-neighbor upsampling of a latent back to image space, mapped
/// through the inverse affine and clamped to [0, 1].
pub fn decode_latent(latent: &Tensor, image_size: usize) -> Result<Vec<f64>> {
    let shape = latent.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Shape(format!(
            "decode_latent: latent shape {shape:?}"
        )));
    }
    let ls = shape[0];
    if !image_size.is_multiple_of(ls) {
        return Err(Error::Config(format!(
            "image size {image_size} not divisible by latent size {ls}"
        )));
    }
    let f = image_size / ls;
    let mut out = vec![0.0; image_size * image_size * 3];
    for y in 0..image_size {
        for x in 0..image_size {
            let (ly, lx) = (y / f, x / f);
            for c in 0..3 {
                let z = latent.data()[(ly * ls + lx) * 3 + c];
                out[(y * image_size + x) * 3 + c] = (0.5 + 0.5 * z).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

// ── Training ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub optimizer: AdamWConfig,
    pub schedule: Option<ScheduleConfig>,
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub lora: LoraConfig,
    pub seed: u64,
    /// Images generated per epoch for the metric pass.
    pub eval_batch: usize,
    pub eval_seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            optimizer: AdamWConfig::lora_default(),
            schedule: None,
            epochs: 10,
            batch_size: 4,
            accumulation_steps: 2,
            lora: LoraConfig::default(),
            seed: 0,
            eval_batch: 8,
            eval_seed: 1,
        }
    }
}

/// Latent/prompt pairs plus the real-image pool the metric pass compares
/// against.
pub struct DiffusionData {
    pub latents: Vec<Tensor>,
    pub prompts: Vec<String>,
    pub real_images: Vec<Vec<f64>>,
    pub image_size: usize,
}

pub fn diffusion_data_from_corpus(corpus: &Corpus, latent_size: usize) -> Result<DiffusionData> {
    let prompts = build_prompts(&corpus.images);
    let mut latents = Vec::with_capacity(corpus.images.len());
    let mut real_images = Vec::with_capacity(corpus.images.len());
    for img in &corpus.images {
        latents.push(encode_image(&img.pixels, img.width, latent_size)?);
        real_images.push(img.pixels.clone());
    }
    Ok(DiffusionData {
        latents,
        prompts,
        real_images,
        image_size: corpus.image_size,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenEpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    /// Denoise loss under fixed evaluation draws, comparable across epochs.
    pub eval_loss: f64,
    pub report: GenReport,
}

pub struct DiffusionTrainer {
    pub model: NoisePredictor,
    pub adapters: AdapterSet,
    pub optimizer: AdamW,
    pub schedule: NoiseSchedule,
    pub cfg: DiffusionTrainConfig,
    pub completed_epochs: usize,
}

impl DiffusionTrainer {
    /// Freezes the whole base network and injects fresh adapters into
    /// every attention block.
    pub fn new(mut model: NoisePredictor, cfg: DiffusionTrainConfig) -> Result<Self> {
        let schedule = NoiseSchedule::new(&model.cfg)?;
        model.params.freeze_all();
        let prefixes = model.attention_prefixes();
        let adapters = inject_many(&mut model.params, &prefixes, &cfg.lora, cfg.seed)?;
        let optimizer = AdamW::new(cfg.optimizer.clone());
        Ok(DiffusionTrainer {
            model,
            adapters,
            optimizer,
            schedule,
            cfg,
            completed_epochs: 0,
        })
    }

    /// Bit-level fingerprint of every non-adapter parameter.
    pub fn base_fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        for p in self.model.params.iter() {
            if !p.name.ends_with(".lora_a") && !p.name.ends_with(".lora_b") {
                bytes.extend_from_slice(p.name.as_bytes());
                for v in p.tensor.data() {
                    bytes.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
        }
        rng::hash_bytes(&bytes)
    }

    fn next_lr(&self) -> Result<f64> {
        match &self.cfg.schedule {
            None => Ok(self.cfg.optimizer.learning_rate),
            Some(s) => cosine_lr((self.optimizer.step_count + 1).min(s.total_steps), s),
        }
    }

    /// Mean denoise loss over the dataset under draws fixed by
    /// `eval_seed`, so values are comparable across epochs.
    pub fn eval_loss(&self, data: &DiffusionData, embedder: &PromptEmbedder) -> Result<f64> {
        let mut total = 0.0;
        for (i, (latent, prompt)) in data.latents.iter().zip(&data.prompts).enumerate() {
            let cond = embedder.embed(prompt);
            let mut r = rng::substream(self.cfg.eval_seed, "diffusion.evaldraw", &[i as u64]);
            let mut g = Graph::new();
            let loss = denoise_loss(
                &mut g,
                &self.model,
                &self.adapters,
                &self.schedule,
                latent,
                &cond,
                &mut r,
            )?;
            total += g.scalar(loss)?;
        }
        Ok(total / data.latents.len() as f64)
    }

    /// Generates the fixed-seed evaluation batch: prompts cycle through
    /// the dataset, per-sample streams derive from `(eval_seed, index)`
    /// so results are order-independent and identical across epochs.
    pub fn generate_eval_batch(
        &self,
        data: &DiffusionData,
        embedder: &PromptEmbedder,
    ) -> Result<(Vec<Vec<f64>>, Vec<String>)> {
        let mut images = Vec::with_capacity(self.cfg.eval_batch);
        let mut prompts = Vec::with_capacity(self.cfg.eval_batch);
        for i in 0..self.cfg.eval_batch {
            let prompt = &data.prompts[i % data.prompts.len()];
            let cond = embedder.embed(prompt);
            let sample_seed = rng::derive_seed(self.cfg.eval_seed, "diffusion.gen", &[i as u64]);
            let latent = p_sample_loop(
                &self.model,
                &self.adapters,
                &self.schedule,
                &cond,
                sample_seed,
            )?;
            images.push(decode_latent(&latent, data.image_size)?);
            prompts.push(prompt.clone());
        }
        Ok((images, prompts))
    }

    /// Full metric pass over a generated batch.
    pub fn gen_report(
        &self,
        data: &DiffusionData,
        embedder: &PromptEmbedder,
        extractor: &FeatureExtractor,
    ) -> Result<GenReport> {
        let (images, prompts) = self.generate_eval_batch(data, embedder)?;
        let prompt_embs: Vec<Vec<f64>> = prompts.iter().map(|p| embedder.embed(p)).collect();
        Ok(GenReport {
            fidelity: metrics::fidelity(&images, &data.real_images, extractor)?,
            agreement: metrics::agreement(&images, &prompt_embs, extractor)?,
            diversity: metrics::diversity(&images, extractor)?,
            fbd: metrics::fbd(&data.real_images, &images, extractor)?,
        })
    }

    /// Runs `epochs` adapter-training epochs; each epoch ends with the
    /// per-epoch metric pass (fidelity/agreement/diversity/FBD).
    pub fn train(
        &mut self,
        data: &DiffusionData,
        embedder: &PromptEmbedder,
        extractor: &FeatureExtractor,
        epochs: usize,
    ) -> Result<Vec<GenEpochReport>> {
        if data.prompts.is_empty() || data.latents.is_empty() {
            return Err(Error::Input("empty prompt set".into()));
        }
        if data.latents.len() != data.prompts.len() {
            return Err(Error::Input(format!(
                "{} latents but {} prompts",
                data.latents.len(),
                data.prompts.len()
            )));
        }
        let window = self.cfg.batch_size * self.cfg.accumulation_steps;
        let mut reports = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let epoch = self.completed_epochs;
            let mut order: Vec<usize> = (0..data.latents.len()).collect();
            order.shuffle(&mut rng::substream(
                self.cfg.seed,
                "diffusion.order",
                &[epoch as u64],
            ));

            let mut train_loss = 0.0;
            for chunk in order.chunks(window) {
                for &idx in chunk {
                    let cond = embedder.embed(&data.prompts[idx]);
                    let mut draw = rng::substream(
                        self.cfg.seed,
                        "diffusion.draw",
                        &[epoch as u64, idx as u64],
                    );
                    let mut g = Graph::new();
                    let loss = denoise_loss(
                        &mut g,
                        &self.model,
                        &self.adapters,
                        &self.schedule,
                        &data.latents[idx],
                        &cond,
                        &mut draw,
                    )?;
                    train_loss += g.scalar(loss)?;
                    let scaled = g.scale(loss, 1.0 / chunk.len() as f64);
                    g.backward(scaled)?;
                    g.accumulate_param_grads(&mut self.model.params)?;
                }
                let lr = self.next_lr()?;
                self.optimizer.step_with_lr(&mut self.model.params, lr)?;
            }
            train_loss /= data.latents.len() as f64;

            let eval_loss = self.eval_loss(data, embedder)?;
            let report = self.gen_report(data, embedder, extractor)?;
            log::info!(
                "diffusion epoch {epoch}: train {train_loss:.4} eval {eval_loss:.4} fbd {:.4}",
                report.fbd
            );
            reports.push(GenEpochReport {
                epoch,
                train_loss,
                eval_loss,
                report,
            });
            self.completed_epochs += 1;
        }
        Ok(reports)
    }

    /// Adapter checkpoint: LoRA tensors plus optimizer state; the frozen
    /// base is reconstructed from its seed at load time.
    pub fn save_adapters(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "diffusion-lora",
            "model_config": self.model.cfg,
            "train_config": self.cfg,
            "base_seed": self.model.seed,
            "adapters": self.adapters,
            "epoch": self.completed_epochs,
            "step_count": self.optimizer.step_count,
            "code_version": env!("CARGO_PKG_VERSION"),
        });
        let mut ar = TensorArchive::new(meta);
        for name in self.adapters.param_names() {
            ar.push(
                format!("param.{name}"),
                self.model.params.get(&name)?.tensor.clone(),
            );
        }
        archive::push_optimizer(&mut ar, &self.optimizer);
        ar.write(dir)
    }

    pub fn load_adapters(dir: &Path) -> Result<Self> {
        let ar = TensorArchive::read(dir)?;
        let model_cfg: DiffusionConfig = serde_json::from_value(ar.meta["model_config"].clone())
            .map_err(|e| Error::Parse(format!("adapter checkpoint model_config: {e}")))?;
        let train_cfg: DiffusionTrainConfig =
            serde_json::from_value(ar.meta["train_config"].clone())
                .map_err(|e| Error::Parse(format!("adapter checkpoint train_config: {e}")))?;
        let base_seed = ar.meta["base_seed"].as_u64().unwrap_or(0);
        let epoch = ar.meta["epoch"].as_u64().unwrap_or(0) as usize;
        let step_count = ar.meta["step_count"].as_u64().unwrap_or(0);

        let model = NoisePredictor::new(model_cfg, base_seed)?;
        let mut trainer = DiffusionTrainer::new(model, train_cfg)?;
        for name in trainer.adapters.param_names() {
            let t = ar
                .get(&format!("param.{name}"))
                .ok_or_else(|| Error::Parse(format!("adapter checkpoint missing '{name}'")))?;
            trainer.model.params.get_mut(&name)?.tensor = t.clone();
        }
        archive::restore_optimizer(&ar, &mut trainer.optimizer, step_count);
        trainer.completed_epochs = epoch;
        Ok(trainer)
    }
}

// ── Rank sweep harness ──────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct RankSweepRow {
    pub rank: usize,
    pub trainable_values: usize,
    pub final_eval_loss: f64,
}

/// Re-trains fresh adapters at each rank and reports trainable counts
/// and final losses.
pub fn rank_sweep(
    data: &DiffusionData,
    embedder: &PromptEmbedder,
    extractor: &FeatureExtractor,
    base_cfg: &DiffusionConfig,
    train_cfg: &DiffusionTrainConfig,
    ranks: &[usize],
    epochs: usize,
) -> Result<Vec<RankSweepRow>> {
    let mut rows = Vec::with_capacity(ranks.len());
    for &rank in ranks {
        let model = NoisePredictor::new(base_cfg.clone(), train_cfg.seed)?;
        let mut cfg = train_cfg.clone();
        cfg.lora = LoraConfig::with_rank(rank);
        let mut trainer = DiffusionTrainer::new(model, cfg)?;
        let trainable = trainer.model.params.trainable_values();
        trainer.train(data, embedder, extractor, epochs)?;
        let final_eval_loss = trainer.eval_loss(data, embedder)?;
        rows.push(RankSweepRow {
            rank,
            trainable_values: trainable,
            final_eval_loss,
        });
    }
    Ok(rows)
}
