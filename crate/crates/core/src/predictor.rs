//! Perceptual usability classifier: a ReLU trunk over (image embedding,
//! prompt embedding, demographics) with two 5-way softmax heads.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingModel;
use crate::error::{Error, Result};
use crate::icon::VectorIcon;
use crate::learncore::{
    softmax, softmax_cross_entropy, Activation, AdamConfig, Dense, DenseNet, NetCheckpoint,
    NetGrads, OptimizerState, CHECKPOINT_VERSION,
};
use crate::par;
use crate::ratings::{AgeLevel, Demographics, Occupation, RatingLevel, RatingRecord, LEVELS};

pub const DEMOGRAPHICS_DIM: usize = 6;
pub const DEFAULT_HIDDEN: usize = 256;
const GRAD_CHUNK: usize = 16;
pub const DEFAULT_TRUNK_LAYERS: usize = 4;

/// One-hot age (teenager, adult, elder) followed by one-hot occupation
/// (technology, business, other).
pub fn encode_demographics(d: Demographics) -> [f64; DEMOGRAPHICS_DIM] {
    let mut v = [0.0; DEMOGRAPHICS_DIM];
    let age = AgeLevel::ALL.iter().position(|a| *a == d.age_level).unwrap();
    let occ = Occupation::ALL.iter().position(|o| *o == d.occupation).unwrap();
    v[age] = 1.0;
    v[3 + occ] = 1.0;
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsabilityPrediction {
    pub semantic_distance: [f64; LEVELS],
    pub familiarity: [f64; LEVELS],
}

impl UsabilityPrediction {
    pub fn uniform() -> Self {
        Self {
            semantic_distance: [1.0 / LEVELS as f64; LEVELS],
            familiarity: [1.0 / LEVELS as f64; LEVELS],
        }
    }
}

/// Probability of the top semantic-distance level.
pub fn phi_sd(p: &UsabilityPrediction) -> f64 {
    p.semantic_distance[LEVELS - 1]
}

/// Probability of the top familiarity level.
pub fn phi_fam(p: &UsabilityPrediction) -> f64 {
    p.familiarity[LEVELS - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelColor {
    Red,
    Black,
    Green,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelLabel {
    pub level: RatingLevel,
    pub label: &'static str,
    pub color: LevelColor,
}

/// Arg-max level (ties to the lower level) with its display label and color.
pub fn level_label(distribution: &[f64; LEVELS]) -> LevelLabel {
    let mut best = 0;
    for i in 1..LEVELS {
        if distribution[i] > distribution[best] {
            best = i;
        }
    }
    let level = RatingLevel::from_index(best);
    let color = match level.value() {
        1 | 2 => LevelColor::Red,
        3 => LevelColor::Black,
        _ => LevelColor::Green,
    };
    LevelLabel {
        level,
        label: level.label(),
        color,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub hidden: usize,
    pub trunk_layers: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Decoupled weight decay; shrinks weights the training tags never
    /// exercise instead of leaving them at their random init.
    #[serde(default)]
    pub weight_decay: f64,
    /// Probability of replacing a training example by a copy whose image and
    /// prompt embeddings share one random signed coordinate permutation.
    /// The pair's dot product survives while the tag's position does not,
    /// which pushes the trunk toward alignment features that carry over to
    /// prompts never seen in training.
    #[serde(default)]
    pub pair_augment: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            trunk_layers: DEFAULT_TRUNK_LAYERS,
            epochs: 100,
            batch: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            pair_augment: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub dim: usize,
    pub trunk: DenseNet,
    pub sd_head: DenseNet,
    pub fam_head: DenseNet,
    pub seed: u64,
}

/// A training or evaluation example with frozen embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorExample {
    pub icon_id: String,
    pub tag: String,
    pub image_emb: Vec<f64>,
    pub text_emb: Vec<f64>,
    pub demographics: Demographics,
    pub semantic_distance: RatingLevel,
    pub familiarity: RatingLevel,
}

impl PredictorExample {
    fn input(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.image_emb.len() * 2 + DEMOGRAPHICS_DIM);
        v.extend_from_slice(&self.image_emb);
        v.extend_from_slice(&self.text_emb);
        v.extend_from_slice(&encode_demographics(self.demographics));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorGrads {
    pub trunk: NetGrads,
    pub sd_head: NetGrads,
    pub fam_head: NetGrads,
}

impl PredictorGrads {
    fn zeros_like(m: &PredictorModel) -> Self {
        Self {
            trunk: NetGrads::zeros_like(&m.trunk),
            sd_head: NetGrads::zeros_like(&m.sd_head),
            fam_head: NetGrads::zeros_like(&m.fam_head),
        }
    }

    fn add_assign(&mut self, o: &PredictorGrads) {
        self.trunk.add_assign(&o.trunk);
        self.sd_head.add_assign(&o.sd_head);
        self.fam_head.add_assign(&o.fam_head);
    }

    fn scale(&mut self, s: f64) {
        self.trunk.scale(s);
        self.sd_head.scale(s);
        self.fam_head.scale(s);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.trunk.flatten();
        v.extend(self.sd_head.flatten());
        v.extend(self.fam_head.flatten());
        v
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.trunk.tensors();
        t.extend(self.sd_head.tensors());
        t.extend(self.fam_head.tensors());
        t
    }
}

impl PredictorModel {
    pub fn new(dim: usize, config: &PredictorConfig) -> Result<Self> {
        if config.trunk_layers == 0 || config.hidden == 0 || dim == 0 {
            return Err(Error::InvalidArgument("empty predictor architecture".into()));
        }
        let mut dims = vec![2 * dim + DEMOGRAPHICS_DIM];
        dims.extend(std::iter::repeat_n(config.hidden, config.trunk_layers));
        let acts = vec![Activation::Relu; config.trunk_layers];
        let trunk = DenseNet::new(&dims, &acts, config.seed)?;
        let sd_head = DenseNet::new(&[config.hidden, LEVELS], &[Activation::Identity], config.seed ^ 0x5344)?;
        let fam_head = DenseNet::new(&[config.hidden, LEVELS], &[Activation::Identity], config.seed ^ 0x0046_414d)?;
        Ok(Self {
            dim,
            trunk,
            sd_head,
            fam_head,
            seed: config.seed,
        })
    }

    /// Replaces both heads with all-zero layers (uniform output).
    pub fn zero_heads(&mut self) {
        let h = self.trunk.output_dim();
        self.sd_head = DenseNet::from_layers(vec![Dense::zeros(h, LEVELS, Activation::Identity)]).unwrap();
        self.fam_head = DenseNet::from_layers(vec![Dense::zeros(h, LEVELS, Activation::Identity)]).unwrap();
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn num_params(&self) -> usize {
        self.trunk.num_params() + self.sd_head.num_params() + self.fam_head.num_params()
    }

    fn check_dims(&self, image_emb: &[f64], text_emb: &[f64]) -> Result<()> {
        for len in [image_emb.len(), text_emb.len()] {
            if len != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: len,
                });
            }
        }
        Ok(())
    }

    fn forward_input(&self, input: &[f64]) -> Result<UsabilityPrediction> {
        let h = self.trunk.forward(input)?;
        let sd = softmax(&self.sd_head.forward(&h)?);
        let fam = softmax(&self.fam_head.forward(&h)?);
        Ok(UsabilityPrediction {
            semantic_distance: sd.try_into().unwrap(),
            familiarity: fam.try_into().unwrap(),
        })
    }

    pub fn predict(&self, image_emb: &[f64], text_emb: &[f64], demographics: Demographics) -> Result<UsabilityPrediction> {
        self.check_dims(image_emb, text_emb)?;
        let ex_input: Vec<f64> = image_emb
            .iter()
            .chain(text_emb)
            .copied()
            .chain(encode_demographics(demographics))
            .collect();
        self.forward_input(&ex_input)
    }

    /// Mean prediction over the nine demographic cells, renormalized.
    pub fn predict_general(&self, image_emb: &[f64], text_emb: &[f64]) -> Result<UsabilityPrediction> {
        let cells = Demographics::all();
        let mut acc = UsabilityPrediction {
            semantic_distance: [0.0; LEVELS],
            familiarity: [0.0; LEVELS],
        };
        for d in cells {
            let p = self.predict(image_emb, text_emb, d)?;
            for i in 0..LEVELS {
                acc.semantic_distance[i] += p.semantic_distance[i];
                acc.familiarity[i] += p.familiarity[i];
            }
        }
        let (s1, s2): (f64, f64) = (acc.semantic_distance.iter().sum(), acc.familiarity.iter().sum());
        acc.semantic_distance.iter_mut().for_each(|v| *v /= s1);
        acc.familiarity.iter_mut().for_each(|v| *v /= s2);
        Ok(acc)
    }

    /// Mean summed cross-entropy of both heads over `batch`, with gradients.
    pub fn loss_and_grads(&self, batch: &[&PredictorExample]) -> Result<(f64, PredictorGrads)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for ex in batch {
            self.check_dims(&ex.image_emb, &ex.text_emb)?;
        }
        // Fixed-size chunks keep the summation order independent of the
        // number of worker threads.
        let chunks: Vec<&[&PredictorExample]> = batch.chunks(GRAD_CHUNK).collect();
        let per = par::map(&chunks, |chunk| self.chunk_loss_and_grads(chunk));
        let mut grads = PredictorGrads::zeros_like(self);
        let mut loss = 0.0;
        for r in per {
            let (l, g) = r?;
            loss += l;
            grads.add_assign(&g);
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        Ok((loss / n, grads))
    }

    fn chunk_loss_and_grads(&self, chunk: &[&PredictorExample]) -> Result<(f64, PredictorGrads)> {
        let n = chunk.len();
        let inputs: Vec<f64> = chunk.iter().flat_map(|ex| ex.input()).collect();
        let t = self.trunk.forward_batch(&inputs, n)?;
        let hidden: Vec<f64> = (0..n).flat_map(|b| t.output(b).to_vec()).collect();
        let ts = self.sd_head.forward_batch(&hidden, n)?;
        let tf = self.fam_head.forward_batch(&hidden, n)?;
        let mut loss = 0.0;
        let mut gs = Vec::with_capacity(n * LEVELS);
        let mut gf = Vec::with_capacity(n * LEVELS);
        for (b, ex) in chunk.iter().enumerate() {
            let (ls, g) = softmax_cross_entropy(ts.output(b), ex.semantic_distance.index())?;
            gs.extend(g);
            let (lf, g) = softmax_cross_entropy(tf.output(b), ex.familiarity.index())?;
            gf.extend(g);
            loss += ls + lf;
        }
        let (g_sd, h_sd) = self.sd_head.backward_batch(&ts, &gs)?;
        let (g_fam, h_fam) = self.fam_head.backward_batch(&tf, &gf)?;
        let up: Vec<f64> = h_sd.iter().zip(&h_fam).map(|(a, b)| a + b).collect();
        let (g_trunk, _) = self.trunk.backward_batch(&t, &up)?;
        Ok((
            loss,
            PredictorGrads {
                trunk: g_trunk,
                sd_head: g_sd,
                fam_head: g_fam,
            },
        ))
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.trunk.param_tensors_mut();
        t.extend(self.sd_head.param_tensors_mut());
        t.extend(self.fam_head.param_tensors_mut());
        t
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.trunk.flatten();
        v.extend(self.sd_head.flatten());
        v.extend(self.fam_head.flatten());
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

    pub fn to_checkpoint(&self) -> PredictorCheckpoint {
        let (t, s, f) = (
            self.trunk.to_checkpoint(),
            self.sd_head.to_checkpoint(),
            self.fam_head.to_checkpoint(),
        );
        PredictorCheckpoint {
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            dim: self.dim,
            arch: PredictorArch {
                trunk: t.arch,
                sd_head: s.arch,
                fam_head: f.arch,
            },
            params: PredictorParams {
                trunk: t.params,
                sd_head: s.params,
                fam_head: f.params,
            },
        }
    }

    pub fn from_checkpoint(ck: &PredictorCheckpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", ck.version)));
        }
        let net = |arch: &Vec<crate::learncore::LayerArch>, params: &Vec<Vec<f64>>| {
            DenseNet::from_checkpoint(&NetCheckpoint {
                arch: arch.clone(),
                params: params.clone(),
            })
        };
        let trunk = net(&ck.arch.trunk, &ck.params.trunk)?;
        let sd_head = net(&ck.arch.sd_head, &ck.params.sd_head)?;
        let fam_head = net(&ck.arch.fam_head, &ck.params.fam_head)?;
        if trunk.input_dim() != 2 * ck.dim + DEMOGRAPHICS_DIM
            || sd_head.input_dim() != trunk.output_dim()
            || fam_head.input_dim() != trunk.output_dim()
            || sd_head.output_dim() != LEVELS
            || fam_head.output_dim() != LEVELS
        {
            return Err(Error::Parse("predictor checkpoint shapes are inconsistent".into()));
        }
        Ok(Self {
            dim: ck.dim,
            trunk,
            sd_head,
            fam_head,
            seed: ck.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorArch {
    pub trunk: Vec<crate::learncore::LayerArch>,
    pub sd_head: Vec<crate::learncore::LayerArch>,
    pub fam_head: Vec<crate::learncore::LayerArch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub trunk: Vec<Vec<f64>>,
    pub sd_head: Vec<Vec<f64>>,
    pub fam_head: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorCheckpoint {
    pub version: u32,
    pub seed: u64,
    #[serde(rename = "D")]
    pub dim: usize,
    pub arch: PredictorArch,
    pub params: PredictorParams,
}

/// Joins rating records with icon rasters and prompts, encoding each icon
/// and each tag once.
pub fn build_examples(
    embedding: &EmbeddingModel,
    icons: &[VectorIcon],
    records: &[RatingRecord],
) -> Result<Vec<PredictorExample>> {
    let by_id: HashMap<&str, &VectorIcon> = icons.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut icon_ids: Vec<&str> = records.iter().map(|r| r.icon_id.as_str()).collect();
    icon_ids.sort_unstable();
    icon_ids.dedup();
    let icon_embs = par::map(&icon_ids, |id| -> Result<Vec<f64>> {
        let icon = by_id
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("rating for unknown icon {id:?}")))?;
        Ok(embedding.encode_icon(icon)?.into_vec())
    });
    let mut image_cache = HashMap::new();
    for (id, e) in icon_ids.iter().zip(icon_embs) {
        image_cache.insert(*id, e?);
    }
    let mut text_cache: HashMap<&str, Vec<f64>> = HashMap::new();
    for r in records {
        if !text_cache.contains_key(r.tag.as_str()) {
            text_cache.insert(&r.tag, embedding.encode_tags(&[&r.tag])?.into_vec());
        }
    }
    Ok(records
        .iter()
        .map(|r| PredictorExample {
            icon_id: r.icon_id.clone(),
            tag: r.tag.clone(),
            image_emb: image_cache[r.icon_id.as_str()].clone(),
            text_emb: text_cache[r.tag.as_str()].clone(),
            demographics: r.demographics,
            semantic_distance: r.semantic_distance,
            familiarity: r.familiarity,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorTrainReport {
    pub loss_history: Vec<f64>,
    pub warnings: Vec<String>,
}

fn signed_permutation(ex: &PredictorExample, rng: &mut impl rand::Rng) -> PredictorExample {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..ex.image_emb.len()).collect();
    perm.shuffle(rng);
    let signs: Vec<f64> = perm.iter().map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let apply = |v: &[f64]| perm.iter().zip(&signs).map(|(&j, s)| s * v[j]).collect();
    PredictorExample {
        image_emb: apply(&ex.image_emb),
        text_emb: apply(&ex.text_emb),
        ..ex.clone()
    }
}

/// Mini-batch Adam on the summed two-head cross-entropy.
pub fn train_predictor(
    examples: &[PredictorExample],
    config: &PredictorConfig,
) -> Result<(PredictorModel, PredictorTrainReport)> {
    if examples.len() < 10 {
        return Err(Error::Degenerate(format!(
            "need at least 10 labeled records, got {}",
            examples.len()
        )));
    }
    if config.batch == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let dim = examples[0].image_emb.len();
    let mut warnings = Vec::new();
    let single = |f: fn(&PredictorExample) -> RatingLevel| examples.iter().all(|e| f(e) == f(&examples[0]));
    if single(|e| e.semantic_distance) && single(|e| e.familiarity) {
        warnings.push("degenerate labels: a single class on both heads".to_string());
    }
    let mut model = PredictorModel::new(dim, config)?;
    let shapes: Vec<usize> = model.param_tensors_mut().iter().map(|t| t.len()).collect();
    let mut opt = OptimizerState::new(
        AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        &shapes,
    );
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(
            config.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ));
        let mut aug_rng = rand_chacha::ChaCha8Rng::seed_from_u64(
            config.seed.wrapping_add(0xA5A5) ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03),
        );
        let mut total = 0.0;
        for chunk in order.chunks(config.batch) {
            let augmented: Vec<Option<PredictorExample>> = chunk
                .iter()
                .map(|&i| {
                    (config.pair_augment > 0.0 && aug_rng.random::<f64>() < config.pair_augment)
                        .then(|| signed_permutation(&examples[i], &mut aug_rng))
                })
                .collect();
            let batch: Vec<&PredictorExample> = chunk
                .iter()
                .zip(&augmented)
                .map(|(&i, a)| a.as_ref().unwrap_or(&examples[i]))
                .collect();
            let (loss, grads) = model.loss_and_grads(&batch)?;
            total += loss * chunk.len() as f64;
            opt.step(&mut model.param_tensors_mut(), &grads.tensors())?;
        }
        history.push(total / examples.len() as f64);
    }
    Ok((
        model,
        PredictorTrainReport {
            loss_history: history,
            warnings,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Sd,
    Fam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub head: Head,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub accuracy: f64,
    /// Rows are true levels, columns predicted levels.
    pub confusion: [[usize; LEVELS]; LEVELS],
}

/// Macro precision/recall from a confusion matrix, averaging only over
/// classes present in the ground truth.
pub fn head_report(head: Head, confusion: [[usize; LEVELS]; LEVELS]) -> HeadReport {
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..LEVELS).map(|c| confusion[c][c]).sum();
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    for c in 0..LEVELS {
        let truth: usize = confusion[c].iter().sum();
        if truth == 0 {
            continue;
        }
        let predicted: usize = (0..LEVELS).map(|r| confusion[r][c]).sum();
        let tp = confusion[c][c] as f64;
        recalls.push(tp / truth as f64);
        precisions.push(if predicted == 0 { 0.0 } else { tp / predicted as f64 });
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    HeadReport {
        head,
        macro_precision: mean(&precisions),
        macro_recall: mean(&recalls),
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        confusion,
    }
}

pub fn eval_precision_recall(model: &PredictorModel, examples: &[PredictorExample]) -> Result<[HeadReport; 2]> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let preds = par::map(examples, |ex| model.predict(&ex.image_emb, &ex.text_emb, ex.demographics))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut sd = [[0usize; LEVELS]; LEVELS];
    let mut fam = [[0usize; LEVELS]; LEVELS];
    for (ex, p) in examples.iter().zip(&preds) {
        sd[ex.semantic_distance.index()][level_label(&p.semantic_distance).level.index()] += 1;
        fam[ex.familiarity.index()][level_label(&p.familiarity).level.index()] += 1;
    }
    Ok([head_report(Head::Sd, sd), head_report(Head::Fam, fam)])
}
