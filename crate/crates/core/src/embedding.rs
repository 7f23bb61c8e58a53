//! Joint icon/tag embedding trained with a symmetric InfoNCE objective,
//! plus retrieval and pixel-similarity reporting.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icon::{rasterize, GrayscaleImage, VectorIcon};
use crate::learncore::{
    add_into, softmax, Activation, AdamConfig, DenseNet, NetCheckpoint, NetGrads, OptimizerState,
    Trace, CHECKPOINT_VERSION,
};
use crate::par;

/// Examples per batched encoder pass; fixed so sums do not depend on threads.
const GRAD_CHUNK: usize = 16;
pub const PROMPT_PREFIX: &str = "A icon looks like a ";
pub const DEFAULT_VOCAB_BUCKETS: usize = 1 << 14;
pub const DEFAULT_DIM: usize = 64;
pub const INIT_TEMPERATURE: f64 = 0.07;
pub const MIN_TEMPERATURE: f64 = 0.01;
pub const MAX_TEMPERATURE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub tokens: Vec<String>,
}

/// Wraps tags in the fixed sentence template; tokens are the lowercased
/// whitespace-separated words of the tags.
pub fn build_prompt<S: AsRef<str>>(tags: &[S]) -> Result<Prompt> {
    if tags.is_empty() {
        return Err(Error::InvalidArgument("prompt needs at least one tag".into()));
    }
    let joined = tags.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(", ");
    let tokens = tags
        .iter()
        .flat_map(|t| t.as_ref().split_whitespace())
        .map(str::to_lowercase)
        .collect::<Vec<_>>();
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("prompt tags are blank".into()));
    }
    Ok(Prompt {
        text: format!("{PROMPT_PREFIX}{joined}"),
        tokens,
    })
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `v`; a zero vector maps to the uniform direction.
    pub fn from_raw(v: &[f64]) -> Self {
        Self(l2_normalize(v).0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .clamp(-1.0, 1.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn l2_normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        let u = 1.0 / (v.len() as f64).sqrt();
        return (vec![u; v.len()], 0.0);
    }
    (v.iter().map(|x| x / norm).collect(), norm)
}

/// Backprop through `y = x / |x|`.
fn l2_normalize_backward(y: &[f64], norm: f64, dy: &[f64]) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; y.len()];
    }
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(yi, gi)| (gi - yi * dot) / norm).collect()
}

/// 64-bit FNV-1a, stable across platforms and runs.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub resolution: usize,
    pub image_hidden: usize,
    pub token_dim: usize,
    pub text_hidden: usize,
    pub vocab_buckets: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            resolution: 28,
            image_hidden: 128,
            token_dim: 32,
            text_hidden: 64,
            vocab_buckets: DEFAULT_VOCAB_BUCKETS,
            batch: 32,
            epochs: 30,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub resolution: usize,
    pub dim: usize,
    pub image_encoder: DenseNet,
    pub token_dim: usize,
    pub vocab_buckets: usize,
    /// `vocab_buckets × token_dim`, row-major.
    pub token_table: Vec<f64>,
    pub text_encoder: DenseNet,
    pub log_temperature: f64,
    pub seed: u64,
}

struct TextForward {
    buckets: Vec<usize>,
    trace: Trace,
    norm: f64,
    emb: Vec<f64>,
}

/// Gradients for every trainable tensor of an [`EmbeddingModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads {
    pub image: NetGrads,
    pub token_table: Vec<f64>,
    pub text: NetGrads,
    pub log_temperature: f64,
}

impl EmbeddingGrads {
    fn zeros_like(m: &EmbeddingModel) -> Self {
        Self {
            image: NetGrads::zeros_like(&m.image_encoder),
            token_table: vec![0.0; m.token_table.len()],
            text: NetGrads::zeros_like(&m.text_encoder),
            log_temperature: 0.0,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.image.flatten();
        v.extend_from_slice(&self.token_table);
        v.extend(self.text.flatten());
        v.push(self.log_temperature);
        v
    }
}

impl EmbeddingModel {
    pub fn new(config: &EmbeddingConfig) -> Result<Self> {
        if config.dim == 0 || config.vocab_buckets == 0 || config.token_dim == 0 {
            return Err(Error::InvalidArgument("zero-sized embedding config".into()));
        }
        if config.resolution < 4 {
            return Err(Error::InvalidArgument("resolution below 4".into()));
        }
        let pixels = config.resolution * config.resolution;
        let image_encoder = DenseNet::new(
            &[pixels, config.image_hidden, config.dim],
            &[Activation::Relu, Activation::Identity],
            config.seed,
        )?;
        let text_encoder = DenseNet::new(
            &[config.token_dim, config.text_hidden, config.dim],
            &[Activation::Relu, Activation::Identity],
            config.seed ^ 0x7465_7874,
        )?;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed ^ 0x746f_6b65);
        let token_table = (0..config.vocab_buckets * config.token_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Ok(Self {
            resolution: config.resolution,
            dim: config.dim,
            image_encoder,
            token_dim: config.token_dim,
            vocab_buckets: config.vocab_buckets,
            token_table,
            text_encoder,
            log_temperature: INIT_TEMPERATURE.ln(),
            seed: config.seed,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature
            .exp()
            .clamp(MIN_TEMPERATURE, MAX_TEMPERATURE)
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.vocab_buckets as u64) as usize
    }

    pub fn num_params(&self) -> usize {
        self.image_encoder.num_params() + self.token_table.len() + self.text_encoder.num_params() + 1
    }

    pub fn raster(&self, icon: &VectorIcon) -> Result<GrayscaleImage> {
        rasterize(icon, self.resolution)
    }

    fn forward_image(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        Ok(l2_normalize(&self.image_encoder.forward(pixels)?).0)
    }

    fn pooled_tokens(&self, buckets: &[usize]) -> Vec<f64> {
        let mut pooled = vec![0.0; self.token_dim];
        for &b in buckets {
            add_into(&mut pooled, &self.token_table[b * self.token_dim..(b + 1) * self.token_dim]);
        }
        let n = buckets.len() as f64;
        pooled.iter_mut().for_each(|v| *v /= n);
        pooled
    }

    fn forward_text(&self, prompt: &Prompt) -> Result<TextForward> {
        if prompt.tokens.is_empty() {
            return Err(Error::InvalidArgument("prompt has no tokens".into()));
        }
        let buckets: Vec<usize> = prompt.tokens.iter().map(|t| self.bucket(t)).collect();
        let trace = self.text_encoder.forward_trace(&self.pooled_tokens(&buckets))?;
        let (emb, norm) = l2_normalize(&trace.output);
        Ok(TextForward {
            buckets,
            trace,
            norm,
            emb,
        })
    }

    pub fn encode_image(&self, image: &GrayscaleImage) -> Result<Embedding> {
        if image.width() != self.resolution || image.height() != self.resolution {
            return Err(Error::DimensionMismatch {
                expected: self.resolution * self.resolution,
                got: image.width() * image.height(),
            });
        }
        Ok(Embedding(self.forward_image(image.pixels())?))
    }

    pub fn encode_icon(&self, icon: &VectorIcon) -> Result<Embedding> {
        self.encode_image(&self.raster(icon)?)
    }

    pub fn encode_text(&self, prompt: &Prompt) -> Result<Embedding> {
        Ok(Embedding(self.forward_text(prompt)?.emb))
    }

    pub fn encode_tags<S: AsRef<str>>(&self, tags: &[S]) -> Result<Embedding> {
        self.encode_text(&build_prompt(tags)?)
    }

    pub fn encode_images(&self, images: &[GrayscaleImage]) -> Result<Vec<Embedding>> {
        par::map(images, |img| self.encode_image(img))
            .into_iter()
            .collect()
    }

    /// Symmetric InfoNCE over one batch and gradients for every parameter.
    pub fn batch_loss_and_grads(
        &self,
        images: &[&[f64]],
        prompts: &[&Prompt],
    ) -> Result<(f64, EmbeddingGrads)> {
        if images.len() != prompts.len() || images.is_empty() {
            return Err(Error::InvalidArgument("batch needs matching non-empty sides".into()));
        }
        let chunks: Vec<&[&[f64]]> = images.chunks(GRAD_CHUNK).collect();
        let img_fw = par::map(&chunks, |chunk| {
            self.image_encoder.forward_batch(&chunk.concat(), chunk.len())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let normalized: Vec<(Vec<f64>, f64)> = img_fw
            .iter()
            .flat_map(|t| (0..t.batch()).map(move |b| l2_normalize(t.output(b))))
            .collect();
        let txt_fw = par::map(prompts, |p| self.forward_text(p))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let img_embs: Vec<Vec<f64>> = normalized.iter().map(|(e, _)| e.clone()).collect();
        let txt_embs: Vec<Vec<f64>> = txt_fw.iter().map(|f| f.emb.clone()).collect();
        let temperature = self.log_temperature.exp();
        let nce = infonce_loss(&img_embs, &txt_embs, temperature)?;

        let img_grads = par::map_range(img_fw.len(), |c| {
            let start = c * GRAD_CHUNK;
            let up: Vec<f64> = (start..start + img_fw[c].batch())
                .flat_map(|i| l2_normalize_backward(&normalized[i].0, normalized[i].1, &nce.grad_image[i]))
                .collect();
            self.image_encoder.backward_batch(&img_fw[c], &up).map(|(g, _)| g)
        });
        let txt_grads = par::map_range(prompts.len(), |i| {
            let f = &txt_fw[i];
            let up = l2_normalize_backward(&f.emb, f.norm, &nce.grad_text[i]);
            self.text_encoder.backward(&f.trace, &up)
        });

        let mut grads = EmbeddingGrads::zeros_like(self);
        for g in img_grads {
            grads.image.add_assign(&g?);
        }
        for (g, f) in txt_grads.into_iter().zip(&txt_fw) {
            let (g, gin) = g?;
            grads.text.add_assign(&g);
            let share = 1.0 / f.buckets.len() as f64;
            for &b in &f.buckets {
                let row = &mut grads.token_table[b * self.token_dim..(b + 1) * self.token_dim];
                row.iter_mut().zip(&gin).for_each(|(r, g)| *r += share * g);
            }
        }
        grads.log_temperature = nce.grad_log_temperature;
        Ok((nce.loss, grads))
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.image_encoder.param_tensors_mut();
        t.push(self.token_table.as_mut_slice());
        t.extend(self.text_encoder.param_tensors_mut());
        t.push(std::slice::from_mut(&mut self.log_temperature));
        t
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.image_encoder.flatten();
        v.extend_from_slice(&self.token_table);
        v.extend(self.text_encoder.flatten());
        v.push(self.log_temperature);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for t in self.param_tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> EmbeddingCheckpoint {
        EmbeddingCheckpoint {
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            arch: EmbeddingArch {
                resolution: self.resolution,
                token_dim: self.token_dim,
                image: self.image_encoder.to_checkpoint().arch,
                text: self.text_encoder.to_checkpoint().arch,
            },
            params: EmbeddingParams {
                image: self.image_encoder.to_checkpoint().params,
                text: self.text_encoder.to_checkpoint().params,
                token_table: self.token_table.clone(),
            },
            dim: self.dim,
            log_temperature: self.log_temperature,
            vocab_buckets: self.vocab_buckets,
        }
    }

    pub fn from_checkpoint(ck: &EmbeddingCheckpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", ck.version)));
        }
        let image_encoder = DenseNet::from_checkpoint(&NetCheckpoint {
            arch: ck.arch.image.clone(),
            params: ck.params.image.clone(),
        })?;
        let text_encoder = DenseNet::from_checkpoint(&NetCheckpoint {
            arch: ck.arch.text.clone(),
            params: ck.params.text.clone(),
        })?;
        if image_encoder.input_dim() != ck.arch.resolution * ck.arch.resolution
            || image_encoder.output_dim() != ck.dim
            || text_encoder.output_dim() != ck.dim
            || text_encoder.input_dim() != ck.arch.token_dim
            || ck.params.token_table.len() != ck.vocab_buckets * ck.arch.token_dim
        {
            return Err(Error::Parse("embedding checkpoint shapes are inconsistent".into()));
        }
        Ok(Self {
            resolution: ck.arch.resolution,
            dim: ck.dim,
            image_encoder,
            token_dim: ck.arch.token_dim,
            vocab_buckets: ck.vocab_buckets,
            token_table: ck.params.token_table.clone(),
            text_encoder,
            log_temperature: ck.log_temperature,
            seed: ck.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingArch {
    pub resolution: usize,
    pub token_dim: usize,
    pub image: Vec<crate::learncore::LayerArch>,
    pub text: Vec<crate::learncore::LayerArch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingParams {
    pub image: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
    pub token_table: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCheckpoint {
    pub version: u32,
    pub seed: u64,
    pub arch: EmbeddingArch,
    pub params: EmbeddingParams,
    #[serde(rename = "D")]
    pub dim: usize,
    pub log_temperature: f64,
    pub vocab_buckets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_image: Vec<Vec<f64>>,
    pub grad_text: Vec<Vec<f64>>,
    /// dLoss / d log(temperature)
    pub grad_log_temperature: f64,
}

/// `½·(mean row CE + mean column CE)` of `image · textᵀ / temperature`
/// against the diagonal.
pub fn infonce_loss(image: &[Vec<f64>], text: &[Vec<f64>], temperature: f64) -> Result<InfoNce> {
    let n = image.len();
    if n == 0 || text.len() != n {
        return Err(Error::InvalidArgument(format!(
            "InfoNCE needs equal non-empty batches, got {} and {}",
            n,
            text.len()
        )));
    }
    let d = image[0].len();
    if image.iter().chain(text).any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: 0 });
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::NonFinite("temperature"));
    }
    if image.iter().chain(text).flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embeddings"));
    }
    let logits: Vec<Vec<f64>> = image
        .iter()
        .map(|a| {
            text.iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / temperature)
                .collect()
        })
        .collect();
    let mut dlogits = vec![vec![0.0; n]; n];
    let mut loss = 0.0;
    let scale = 0.5 / n as f64;
    for i in 0..n {
        let p = softmax(&logits[i]);
        loss -= p[i].ln();
        for j in 0..n {
            dlogits[i][j] += scale * (p[j] - if i == j { 1.0 } else { 0.0 });
        }
    }
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| logits[i][j]).collect();
        let p = softmax(&col);
        loss -= p[j].ln();
        for i in 0..n {
            dlogits[i][j] += scale * (p[i] - if i == j { 1.0 } else { 0.0 });
        }
    }
    loss *= scale;

    let mut grad_image = vec![vec![0.0; d]; n];
    let mut grad_text = vec![vec![0.0; d]; n];
    let mut grad_log_t = 0.0;
    for i in 0..n {
        for j in 0..n {
            let g = dlogits[i][j];
            grad_log_t -= g * logits[i][j];
            let gs = g / temperature;
            grad_image[i].iter_mut().zip(&text[j]).for_each(|(o, t)| *o += gs * t);
            grad_text[j].iter_mut().zip(&image[i]).for_each(|(o, a)| *o += gs * a);
        }
    }
    Ok(InfoNce {
        loss,
        grad_image,
        grad_text,
        grad_log_temperature: grad_log_t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub loss_history: Vec<f64>,
    pub steps: u64,
}

/// Mini-batch Adam on the symmetric InfoNCE loss over `(raster, tags)` pairs.
pub fn train_embedding(
    dataset: &[(GrayscaleImage, Vec<String>)],
    config: &EmbeddingConfig,
) -> Result<(EmbeddingModel, TrainReport)> {
    if dataset.len() < 2 {
        return Err(Error::Degenerate("need at least 2 training pairs".into()));
    }
    if config.batch < 2 {
        return Err(Error::InvalidArgument("batch size must be at least 2".into()));
    }
    let mut model = EmbeddingModel::new(config)?;
    for (img, _) in dataset {
        if img.width() != model.resolution || img.height() != model.resolution {
            return Err(Error::DimensionMismatch {
                expected: model.resolution * model.resolution,
                got: img.width() * img.height(),
            });
        }
    }
    let prompts = dataset
        .iter()
        .map(|(_, tags)| build_prompt(tags))
        .collect::<Result<Vec<_>>>()?;
    let captions: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
    let shapes: Vec<usize> = model.param_tensors_mut().iter().map(|t| t.len()).collect();
    let mut opt = OptimizerState::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        &shapes,
    );
    let (lo, hi) = (MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln());
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_order(dataset.len(), config.seed, epoch);
        let mut losses = Vec::new();
        for batch in batches(&order, &captions, config.batch) {
            let imgs: Vec<&[f64]> = batch.iter().map(|&i| dataset[i].0.pixels()).collect();
            let ps: Vec<&Prompt> = batch.iter().map(|&i| &prompts[i]).collect();
            let (loss, grads) = model.batch_loss_and_grads(&imgs, &ps)?;
            losses.push(loss);
            let flat_grads = grad_tensors(&grads);
            let grad_refs: Vec<&[f64]> = flat_grads.iter().map(|v| v.as_slice()).collect();
            opt.step(&mut model.param_tensors_mut(), &grad_refs)?;
            model.log_temperature = model.log_temperature.clamp(lo, hi);
        }
        history.push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    Ok((
        model,
        TrainReport {
            loss_history: history,
            steps: opt.step,
        },
    ))
}

fn grad_tensors(g: &EmbeddingGrads) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = g.image.tensors().into_iter().map(<[f64]>::to_vec).collect();
    out.push(g.token_table.clone());
    out.extend(g.text.tensors().into_iter().map(<[f64]>::to_vec));
    out.push(vec![g.log_temperature]);
    out
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x2545_F491_4F6C_DD1D));
    order.shuffle(&mut rng);
    order
}

/// First-fit packing of `order` into batches of at most `size` in which no
/// caption appears twice, so that no positive is scored as a negative.
/// Singleton batches carry no contrast and are folded into a neighbor.
fn batches<'a>(order: &[usize], captions: &[&'a str], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<(Vec<usize>, HashSet<&'a str>)> = Vec::new();
    let mut open_from = 0;
    for &i in order {
        let key = captions[i];
        let slot = out[open_from..]
            .iter()
            .position(|(b, keys)| b.len() < size && !keys.contains(key));
        match slot {
            Some(s) => {
                let (b, keys) = &mut out[open_from + s];
                b.push(i);
                keys.insert(key);
            }
            None => out.push((vec![i], HashSet::from([key]))),
        }
        while open_from < out.len() && out[open_from].0.len() == size {
            open_from += 1;
        }
    }
    let mut merged: Vec<Vec<usize>> = Vec::with_capacity(out.len());
    let mut pending: Vec<usize> = Vec::new();
    for (b, _) in out {
        if b.len() == 1 {
            match merged.last_mut() {
                Some(prev) => prev.extend(b),
                None => pending.extend(b),
            }
        } else {
            merged.push(b);
            if !pending.is_empty() {
                merged.last_mut().unwrap().append(&mut pending);
            }
        }
    }
    if !pending.is_empty() {
        merged.push(pending);
    }
    merged
}

/// Corpus indices ranked by descending cosine similarity (ties by index).
pub fn nearest_neighbors(query: &Embedding, corpus: &[Embedding], k: usize) -> Result<Vec<(usize, f64)>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    if k > corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds corpus of {}",
            corpus.len()
        )));
    }
    let mut scored: Vec<(usize, f64)> = corpus
        .iter()
        .enumerate()
        .map(|(i, e)| (i, query.cosine(e)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// AP over a ranked relevance list, normalized by `min(k, total_relevant)`.
pub fn average_precision_at_k(ranked_relevance: &[bool], total_relevant: usize, k: usize) -> f64 {
    let denom = k.min(total_relevant);
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in ranked_relevance.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / denom as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map_at_k: f64,
    pub k: usize,
    pub queries: usize,
    pub skipped: usize,
}

fn shares_tag(a: &[String], b: &[String]) -> bool {
    a.iter().any(|t| b.contains(t))
}

/// Leave-one-out retrieval MAP@k within a labeled embedding set.
pub fn map_at_k(embeddings: &[Embedding], tags: &[Vec<String>], k: usize) -> Result<MapReport> {
    if embeddings.len() < 2 || embeddings.len() != tags.len() {
        return Err(Error::InvalidArgument(
            "MAP needs at least 2 labeled items".into(),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let per_query = par::map_range(embeddings.len(), |q| {
        let total = (0..embeddings.len())
            .filter(|&j| j != q && shares_tag(&tags[q], &tags[j]))
            .count();
        if total == 0 {
            return None;
        }
        let mut ranked: Vec<(usize, f64)> = (0..embeddings.len())
            .filter(|&j| j != q)
            .map(|j| (j, embeddings[q].cosine(&embeddings[j])))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let rel: Vec<bool> = ranked
            .iter()
            .take(k)
            .map(|(j, _)| shares_tag(&tags[q], &tags[*j]))
            .collect();
        Some(average_precision_at_k(&rel, total, k))
    });
    let aps: Vec<f64> = per_query.iter().flatten().copied().collect();
    let skipped = per_query.len() - aps.len();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    Ok(MapReport {
        map_at_k: map,
        k,
        queries: aps.len(),
        skipped,
    })
}

pub fn eval_map_at_k(
    model: &EmbeddingModel,
    test: &[(GrayscaleImage, Vec<String>)],
    k: usize,
) -> Result<MapReport> {
    let images: Vec<GrayscaleImage> = test.iter().map(|(i, _)| i.clone()).collect();
    let tags: Vec<Vec<String>> = test.iter().map(|(_, t)| t.clone()).collect();
    map_at_k(&model.encode_images(&images)?, &tags, k)
}

pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &GrayscaleImage, b: &GrayscaleImage) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::DimensionMismatch {
            expected: a.pixels().len(),
            got: b.pixels().len(),
        });
    }
    Ok(())
}

/// `10·log10(1 / MSE)`; identical images give `+∞`.
pub fn psnr(a: &GrayscaleImage, b: &GrayscaleImage) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.pixels().len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Mean SSIM over all 8×8 windows at stride 1 (population statistics,
/// dynamic range 1). Images smaller than a window use one full-image window.
pub fn ssim(a: &GrayscaleImage, b: &GrayscaleImage) -> Result<f64> {
    same_shape(a, b)?;
    let (w, h) = (a.width(), a.height());
    let (ww, wh) = (SSIM_WINDOW.min(w), SSIM_WINDOW.min(h));
    let n = (ww * wh) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - wh {
        for x0 in 0..=w - ww {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + wh {
                for x in x0..x0 + ww {
                    let (p, q) = (a.get(x, y), b.get(x, y));
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosestExample {
    pub index: usize,
    pub similarity: f64,
    /// `None` stands for an infinite PSNR (identical rasters).
    pub psnr: Option<f64>,
    pub ssim: f64,
}

/// Nearest dataset raster by embedding cosine, with its pixel similarity.
pub fn closest_example(
    model: &EmbeddingModel,
    raster: &GrayscaleImage,
    dataset: &[GrayscaleImage],
) -> Result<ClosestExample> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let query = model.encode_image(raster)?;
    let corpus = model.encode_images(dataset)?;
    let (index, similarity) = nearest_neighbors(&query, &corpus, 1)?[0];
    let p = psnr(raster, &dataset[index])?;
    Ok(ClosestExample {
        index,
        similarity,
        psnr: p.is_finite().then_some(p),
        ssim: ssim(raster, &dataset[index])?,
    })
}
