//! Conditional Wasserstein GAN with gradient penalty over normalized
//! feature vectors.
//!
//! The critic scores packs of samples (several samples of one
//! participant/portion condition concatenated, so mode collapse within a
//! condition is visible to it), conditioned through learned embeddings. The
//! generator maps latent noise plus the same embeddings through a residual
//! trunk and squashes outputs into the clip range, so generated samples are
//! bounded by construction. Next to the adversarial objective the generator
//! minimizes a per-condition variance-matching term.

use crate::autodiff::{
    self, forward, Activation, MlpParams, MlpSpec, NodeId, Segment, Tape, Tensor,
};
use crate::data::{Dataset, Portion, Space};
use crate::normalize::ClipRange;
use crate::{Error, Result};
use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::{Path, PathBuf};

/// Generator architecture knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    /// Width of participant and portion embeddings alike.
    pub embedding_dim: usize,
    pub residual_blocks: usize,
    pub width: usize,
    /// Trunk activation; the default smooth tanh keeps the generator twice
    /// differentiable for finite-difference validation.
    pub activation: Activation,
    /// Output squashing range; must match the normalization clip range so
    /// generated samples live in the same box as real ones.
    pub clip: ClipRange,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            latent_dim: 64,
            embedding_dim: 16,
            residual_blocks: 3,
            width: 128,
            activation: Activation::SmoothTanh,
            clip: ClipRange::default(),
        }
    }
}

/// Critic architecture knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    /// Number of same-condition samples concatenated per critic input.
    pub pack_size: usize,
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
    pub embedding_dim: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            pack_size: 4,
            widths: vec![256, 256, 128],
            leaky_slope: 0.2,
            embedding_dim: 16,
        }
    }
}

/// Optimization schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_gp: f64,
    pub lambda_var: f64,
    pub critic_steps_per_gen_step: usize,
    /// Batch size in packs; each pack holds `pack_size` samples.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub generator_steps: usize,
    pub seed: u64,
    /// Write a checkpoint every this many generator steps (0 = final only).
    pub checkpoint_every: usize,
    /// Where periodic checkpoints go; none are written when unset.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_gp: 10.0,
            lambda_var: 1.0,
            critic_steps_per_gen_step: 5,
            batch_size: 32,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.9,
            generator_steps: 1800,
            seed: 7,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_gp < 0.0 || self.lambda_var < 0.0 {
            return Err(Error::InvalidConfig(
                "penalty weights must be nonnegative".into(),
            ));
        }
        if self.batch_size == 0 || self.critic_steps_per_gen_step == 0 {
            return Err(Error::InvalidConfig(
                "batch size and critic steps must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(
                    "moment coefficients must lie in [0, 1)".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Trained (or initialized) generator with its condition vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    /// Participant ids in embedding-row order.
    pub participants: Vec<String>,
    pub feature_names: Vec<String>,
    pub participant_embedding: Tensor,
    pub portion_embedding: Tensor,
    pub trunk_spec: MlpSpec,
    pub trunk: MlpParams,
}

/// Critic with its own condition embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticModel {
    pub config: CriticConfig,
    pub participants: Vec<String>,
    pub feature_dim: usize,
    pub participant_embedding: Tensor,
    pub portion_embedding: Tensor,
    pub trunk_spec: MlpSpec,
    pub trunk: MlpParams,
}

fn generator_trunk_spec(cfg: &GeneratorConfig, d: usize) -> MlpSpec {
    let mut segments = vec![Segment::Dense {
        output: cfg.width,
        activation: cfg.activation,
    }];
    for _ in 0..cfg.residual_blocks {
        segments.push(Segment::Residual {
            layers: vec![(cfg.width, cfg.activation), (cfg.width, Activation::Identity)],
        });
    }
    segments.push(Segment::Dense {
        output: d,
        activation: Activation::Identity,
    });
    MlpSpec {
        input: cfg.latent_dim + 2 * cfg.embedding_dim,
        segments,
    }
}

fn critic_trunk_spec(cfg: &CriticConfig, d: usize) -> MlpSpec {
    let mut layers: Vec<(usize, Activation)> = cfg
        .widths
        .iter()
        .map(|&w| (w, Activation::LeakyRectifier(cfg.leaky_slope)))
        .collect();
    layers.push((1, Activation::Identity));
    MlpSpec::feedforward(cfg.pack_size * d + 2 * cfg.embedding_dim, &layers)
}

const EMBEDDING_STD: f64 = 0.1;

fn init_embedding(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        EMBEDDING_STD * z
    })
}

impl GeneratorModel {
    pub fn init(
        cfg: &GeneratorConfig,
        participants: Vec<String>,
        feature_names: Vec<String>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if participants.is_empty() {
            return Err(Error::TooFewParticipants(0));
        }
        let trunk_spec = generator_trunk_spec(cfg, feature_names.len());
        let trunk = MlpParams::init(&trunk_spec, rng)?;
        Ok(GeneratorModel {
            participant_embedding: init_embedding(participants.len(), cfg.embedding_dim, rng),
            portion_embedding: init_embedding(Portion::ALL.len(), cfg.embedding_dim, rng),
            config: cfg.clone(),
            participants,
            feature_names,
            trunk_spec,
            trunk,
        })
    }

    pub fn participant_index(&self, participant: &str) -> Result<usize> {
        self.participants
            .iter()
            .position(|p| p == participant)
            .ok_or_else(|| Error::UnknownCondition(participant.to_string()))
    }

    /// All trainable tensors: both embedding tables, then the trunk.
    fn tensors(&self) -> Vec<&Tensor> {
        let mut t = vec![&self.participant_embedding, &self.portion_embedding];
        t.extend(self.trunk.tensors.iter());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = vec![&mut self.participant_embedding, &mut self.portion_embedding];
        t.extend(self.trunk.tensors.iter_mut());
        t
    }

    /// Draw `n` normalized feature vectors for one condition. Deterministic
    /// in `seed`; outputs are inside the clip box by construction.
    pub fn generate(&self, participant: &str, portion: Portion, n: usize, seed: u64) -> Result<Tensor> {
        let pidx = self.participant_index(participant)?;
        let d = self.feature_names.len();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut out = Array2::zeros((n, d));
        // Chunked so huge draws stay within modest memory.
        const CHUNK: usize = 4096;
        let mut written = 0usize;
        while written < n {
            let take = CHUNK.min(n - written);
            let z = Array2::from_shape_fn((take, self.config.latent_dim), |_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v
            });
            let conditions = vec![(pidx, portion); take];
            let samples = self.forward_samples(&z, &conditions)?;
            out.slice_mut(s![written..written + take, ..]).assign(&samples);
            written += take;
        }
        Ok(out)
    }

    /// Plain (gradient-free) forward pass for the given latent batch and
    /// per-row conditions.
    pub fn forward_samples(&self, z: &Tensor, conditions: &[(usize, Portion)]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ids = self.insert(&mut tape);
        let zid = tape.leaf(z.clone());
        let out = self.forward_on_tape(&mut tape, &ids, zid, conditions)?;
        Ok(tape.value(out).clone())
    }

    fn insert(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Taped forward: embeddings are selected by one-hot matmuls so their
    /// tables receive gradients, the trunk output is squashed into the clip
    /// range with a scaled tanh.
    fn forward_on_tape(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        z: NodeId,
        conditions: &[(usize, Portion)],
    ) -> Result<NodeId> {
        let n = tape.value(z).nrows();
        if conditions.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} conditions"),
                got: format!("{}", conditions.len()),
            });
        }
        for &(p, _) in conditions {
            if p >= self.participants.len() {
                return Err(Error::UnknownCondition(format!("participant index {p}")));
            }
        }
        let (p_onehot, t_onehot) = onehots(conditions, self.participants.len());
        let p_sel = tape.leaf(p_onehot);
        let t_sel = tape.leaf(t_onehot);
        let p_emb = tape.matmul(p_sel, ids[0]);
        let t_emb = tape.matmul(t_sel, ids[1]);
        let with_p = tape.hstack(z, p_emb);
        let input = tape.hstack(with_p, t_emb);
        let raw = forward(&self.trunk_spec, &ids[2..], tape, input)?;
        let squashed = tape.tanh(raw);
        let scaled = tape.scale(squashed, self.config.clip.half_width());
        Ok(tape.add_scalar(scaled, self.config.clip.center()))
    }
}

impl CriticModel {
    pub fn init(
        cfg: &CriticConfig,
        participants: Vec<String>,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if participants.is_empty() {
            return Err(Error::TooFewParticipants(0));
        }
        if cfg.pack_size == 0 {
            return Err(Error::InvalidConfig("pack size must be at least 1".into()));
        }
        let trunk_spec = critic_trunk_spec(cfg, feature_dim);
        let trunk = MlpParams::init(&trunk_spec, rng)?;
        Ok(CriticModel {
            participant_embedding: init_embedding(participants.len(), cfg.embedding_dim, rng),
            portion_embedding: init_embedding(Portion::ALL.len(), cfg.embedding_dim, rng),
            config: cfg.clone(),
            participants,
            feature_dim,
            trunk_spec,
            trunk,
        })
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut t = vec![&self.participant_embedding, &self.portion_embedding];
        t.extend(self.trunk.tensors.iter());
        t
    }

    /// Mutable views of all trainable tensors, embeddings first then the
    /// trunk; exposed so callers can script specific parameter settings.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = vec![&mut self.participant_embedding, &mut self.portion_embedding];
        t.extend(self.trunk.tensors.iter_mut());
        t
    }

    fn insert(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Critic values (`B x 1`) for packed features already on the tape.
    fn score_on_tape(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        packed_features: NodeId,
        conditions: &[(usize, Portion)],
    ) -> Result<NodeId> {
        let (p_onehot, t_onehot) = onehots(conditions, self.participants.len());
        let p_sel = tape.leaf(p_onehot);
        let t_sel = tape.leaf(t_onehot);
        let p_emb = tape.matmul(p_sel, ids[0]);
        let t_emb = tape.matmul(t_sel, ids[1]);
        let with_p = tape.hstack(packed_features, p_emb);
        let input = tape.hstack(with_p, t_emb);
        forward(&self.trunk_spec, &ids[2..], tape, input)
    }

    /// Assemble the critic's input vector for one pack: the samples
    /// concatenated in order, followed by the looked-up participant and
    /// portion embeddings.
    pub fn pack_input(&self, samples: &[crate::data::Sample]) -> Result<Vec<f64>> {
        let (mut input, (participant, portion)) = pack(samples)?;
        if input.len() != self.config.pack_size * self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.pack_size * self.feature_dim,
                got: input.len(),
            });
        }
        let pi = self
            .participants
            .iter()
            .position(|p| *p == participant)
            .ok_or(Error::UnknownCondition(participant))?;
        input.extend(self.participant_embedding.row(pi).iter());
        input.extend(self.portion_embedding.row(portion.index()).iter());
        Ok(input)
    }

    /// Plain critic scores for a packed batch, one scalar per pack.
    pub fn score(&self, packed_features: &Tensor, conditions: &[(usize, Portion)]) -> Result<Array1<f64>> {
        let mut tape = Tape::new();
        let ids = self.insert(&mut tape);
        let x = tape.leaf(packed_features.clone());
        let out = self.score_on_tape(&mut tape, &ids, x, conditions)?;
        Ok(tape.value(out).column(0).to_owned())
    }
}

fn onehots(conditions: &[(usize, Portion)], num_participants: usize) -> (Tensor, Tensor) {
    let n = conditions.len();
    let mut p = Array2::zeros((n, num_participants));
    let mut t = Array2::zeros((n, Portion::ALL.len()));
    for (i, &(pi, portion)) in conditions.iter().enumerate() {
        p[[i, pi]] = 1.0;
        t[[i, portion.index()]] = 1.0;
    }
    (p, t)
}

/// Concatenate same-condition samples into one critic feature vector.
/// All samples must share one (participant, portion) condition.
pub fn pack(samples: &[crate::data::Sample]) -> Result<(Vec<f64>, (String, Portion))> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidConfig("empty pack".into()))?;
    let condition = (first.participant_id.clone(), first.portion);
    let mut features = Vec::with_capacity(samples.len() * first.features.len());
    for s in samples {
        if s.participant_id != condition.0 || s.portion != condition.1 {
            return Err(Error::MixedConditionPack(format!(
                "({}, {}) mixed with ({}, {})",
                condition.0, condition.1, s.participant_id, s.portion
            )));
        }
        if s.features.len() != first.features.len() {
            return Err(Error::DimensionMismatch {
                expected: first.features.len(),
                got: s.features.len(),
            });
        }
        features.extend_from_slice(&s.features);
    }
    Ok((features, condition))
}

/// A batch of packed feature rows sharing per-row conditions.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    /// `B x (pack_size * d)`.
    pub features: Tensor,
    /// Participant-index and portion per pack row.
    pub conditions: Vec<(usize, Portion)>,
}

/// Components of one critic update's loss.
#[derive(Debug, Clone, Copy)]
pub struct CriticLossParts {
    pub total: f64,
    /// `E[D(real)] - E[D(fake)]`, the Wasserstein estimate.
    pub wasserstein: f64,
    pub grad_penalty: f64,
}

/// Critic loss `E[D(fake)] - E[D(real)] + lambda_gp * penalty(interp)` with
/// exact parameter gradients. Real, fake and interpolated batches must carry
/// matched conditions row for row.
pub fn critic_loss(
    critic: &CriticModel,
    real: &PackedBatch,
    fake: &PackedBatch,
    interp: &PackedBatch,
    lambda_gp: f64,
) -> Result<(CriticLossParts, Vec<Tensor>)> {
    if real.conditions != fake.conditions || real.conditions != interp.conditions {
        return Err(Error::MixedConditionPack(
            "real/fake/interpolated batches must be condition-matched".into(),
        ));
    }
    let b = real.features.nrows();
    let mut tape = Tape::new();
    let ids = critic.insert(&mut tape);

    let real_x = tape.leaf(real.features.clone());
    let fake_x = tape.leaf(fake.features.clone());
    let d_real = critic.score_on_tape(&mut tape, &ids, real_x, &real.conditions)?;
    let d_fake = critic.score_on_tape(&mut tape, &ids, fake_x, &fake.conditions)?;
    let sum_real = tape.sum_all(d_real);
    let sum_fake = tape.sum_all(d_fake);
    let mean_real = tape.scale(sum_real, 1.0 / b as f64);
    let mean_fake = tape.scale(sum_fake, 1.0 / b as f64);

    let interp_x = tape.leaf(interp.features.clone());
    let d_interp = critic.score_on_tape(&mut tape, &ids, interp_x, &interp.conditions)?;
    let sum_interp = tape.sum_all(d_interp);
    let grads = tape.grad(sum_interp, &[interp_x])?;
    let penalty = autodiff::penalty_of_gradient(&mut tape, grads[0], b)?;

    let adv = tape.sub(mean_fake, mean_real);
    let weighted = tape.scale(penalty, lambda_gp);
    let total = tape.add(adv, weighted);

    let parts = CriticLossParts {
        total: tape.value(total)[[0, 0]],
        wasserstein: tape.value(mean_real)[[0, 0]] - tape.value(mean_fake)[[0, 0]],
        grad_penalty: tape.value(penalty)[[0, 0]],
    };
    let param_grads = tape.grad(total, &ids)?;
    let tensors = param_grads.iter().map(|g| tape.value(*g).clone()).collect();
    Ok((parts, tensors))
}

/// Population variance per feature column.
fn column_variances(m: &ndarray::ArrayView2<f64>) -> Array1<f64> {
    let n = m.nrows() as f64;
    let mean = m.sum_axis(Axis(0)) / n;
    let mut var = Array1::zeros(m.ncols());
    for row in m.rows() {
        for (j, v) in row.iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    var / n
}

/// Condition-wise variance matching: mean over groups of the per-feature
/// mean squared difference between real and generated population variances.
/// Groups with fewer than two samples on either side are skipped; if none
/// remain the batch carries no variance signal and that is an error the
/// training loop downgrades to zero with a warning.
pub fn variance_loss(
    real: &Tensor,
    real_conditions: &[(usize, Portion)],
    generated: &Tensor,
    gen_conditions: &[(usize, Portion)],
) -> Result<f64> {
    let d = real.ncols();
    if generated.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: generated.ncols(),
        });
    }
    let mut groups: Vec<(usize, Portion)> = real_conditions.to_vec();
    groups.sort_unstable_by_key(|&(p, t)| (p, t.index()));
    groups.dedup();

    let mut total = 0.0;
    let mut counted = 0usize;
    for g in groups {
        let real_rows: Vec<usize> = real_conditions
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == g)
            .map(|(i, _)| i)
            .collect();
        let gen_rows: Vec<usize> = gen_conditions
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == g)
            .map(|(i, _)| i)
            .collect();
        if real_rows.len() < 2 || gen_rows.len() < 2 {
            continue;
        }
        let vr = column_variances(&real.select(Axis(0), &real_rows).view());
        let vg = column_variances(&generated.select(Axis(0), &gen_rows).view());
        let mut acc = 0.0;
        for j in 0..d {
            let diff = vr[j] - vg[j];
            acc += diff * diff;
        }
        total += acc / d as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::NoEligibleGroups);
    }
    Ok(total / counted as f64)
}

/// Components of one generator update's loss.
#[derive(Debug, Clone, Copy)]
pub struct GenLossParts {
    pub total: f64,
    /// `-E[D(fake)]`.
    pub adversarial: f64,
    pub l_var: f64,
    /// Number of condition groups that contributed to the variance term;
    /// zero means every group was skipped and `l_var` is vacuously zero.
    pub eligible_groups: usize,
}

/// Generator loss `-E[D(fake)] + lambda_var * L_var` with exact generator
/// gradients; critic parameters are on the tape but frozen (their gradients
/// are not applied). `z` has one row per sample, `sample_conditions` one
/// condition per row, grouped as `pack_size` consecutive rows per pack.
pub fn generator_loss(
    generator: &GeneratorModel,
    critic: &CriticModel,
    z: &Tensor,
    sample_conditions: &[(usize, Portion)],
    real_batch: &Tensor,
    real_conditions: &[(usize, Portion)],
    lambda_var: f64,
) -> Result<(GenLossParts, Vec<Tensor>)> {
    let m = critic.config.pack_size;
    let n = z.nrows();
    if n % m != 0 || n == 0 {
        return Err(Error::InvalidConfig(format!(
            "latent rows {n} not a positive multiple of pack size {m}"
        )));
    }
    let b = n / m;
    let d = generator.feature_names.len();
    for chunk in sample_conditions.chunks(m) {
        if chunk.iter().any(|c| *c != chunk[0]) {
            return Err(Error::MixedConditionPack(
                "pack spans multiple conditions".into(),
            ));
        }
    }
    let pack_conditions: Vec<(usize, Portion)> =
        sample_conditions.chunks(m).map(|c| c[0]).collect();

    let mut tape = Tape::new();
    let gen_ids = generator.insert(&mut tape);
    let critic_ids = critic.insert(&mut tape);
    let zid = tape.leaf(z.clone());
    let samples = generator.forward_on_tape(&mut tape, &gen_ids, zid, sample_conditions)?;
    let packed = tape.reshape(samples, (b, m * d));
    let scores = critic.score_on_tape(&mut tape, &critic_ids, packed, &pack_conditions)?;
    let sum_scores = tape.sum_all(scores);
    let mean_scores = tape.scale(sum_scores, 1.0 / b as f64);
    let adversarial = tape.scale(mean_scores, -1.0);

    let (l_var_node, l_var_value, eligible_groups) = variance_loss_on_tape(
        &mut tape,
        samples,
        sample_conditions,
        real_batch,
        real_conditions,
        d,
    )?;

    let total = match l_var_node {
        Some(lv) => {
            let weighted = tape.scale(lv, lambda_var);
            tape.add(adversarial, weighted)
        }
        None => adversarial,
    };
    let parts = GenLossParts {
        total: tape.value(total)[[0, 0]],
        adversarial: tape.value(adversarial)[[0, 0]],
        l_var: l_var_value,
        eligible_groups,
    };
    let grads = tape.grad(total, &gen_ids)?;
    let tensors = grads.iter().map(|g| tape.value(*g).clone()).collect();
    Ok((parts, tensors))
}

/// Taped version of [`variance_loss`]: generated-side variances are
/// differentiable, real-side variances are constants. Returns `None` when
/// no group is eligible (the caller logs and proceeds with zero).
fn variance_loss_on_tape(
    tape: &mut Tape,
    samples: NodeId,
    sample_conditions: &[(usize, Portion)],
    real_batch: &Tensor,
    real_conditions: &[(usize, Portion)],
    d: usize,
) -> Result<(Option<NodeId>, f64, usize)> {
    let mut groups: Vec<(usize, Portion)> = sample_conditions.to_vec();
    groups.sort_unstable_by_key(|&(p, t)| (p, t.index()));
    groups.dedup();

    let mut per_group: Vec<NodeId> = Vec::new();
    for g in groups {
        let gen_rows: Vec<usize> = sample_conditions
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == g)
            .map(|(i, _)| i)
            .collect();
        let real_rows: Vec<usize> = real_conditions
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == g)
            .map(|(i, _)| i)
            .collect();
        if gen_rows.len() < 2 || real_rows.len() < 2 {
            continue;
        }
        let vr = column_variances(&real_batch.select(Axis(0), &real_rows).view());
        let n_g = gen_rows.len();
        let mut sel = Array2::zeros((n_g, sample_conditions.len()));
        for (k, &row) in gen_rows.iter().enumerate() {
            sel[[k, row]] = 1.0;
        }
        let sel_id = tape.leaf(sel);
        let rows = tape.matmul(sel_id, samples);
        let sq = tape.mul(rows, rows);
        let m2 = tape.col_sums(sq);
        let m2 = tape.scale(m2, 1.0 / n_g as f64);
        let mu = tape.col_sums(rows);
        let mu = tape.scale(mu, 1.0 / n_g as f64);
        let mu2 = tape.mul(mu, mu);
        let vg = tape.sub(m2, mu2);
        let vr_id = tape.leaf(vr.insert_axis(Axis(0)));
        let diff = tape.sub(vr_id, vg);
        let diff2 = tape.mul(diff, diff);
        let sum = tape.sum_all(diff2);
        per_group.push(tape.scale(sum, 1.0 / d as f64));
    }
    if per_group.is_empty() {
        return Ok((None, 0.0, 0));
    }
    let mut acc = per_group[0];
    for id in &per_group[1..] {
        acc = tape.add(acc, *id);
    }
    let l_var = tape.scale(acc, 1.0 / per_group.len() as f64);
    Ok((Some(l_var), tape.value(l_var)[[0, 0]], per_group.len()))
}

/// One record per critic or generator update.
#[derive(Debug, Clone, PartialEq)]
pub enum LogRecord {
    Critic {
        /// Global critic-update index.
        step: usize,
        wasserstein: f64,
        grad_penalty: f64,
    },
    Generator {
        /// Global generator-update index.
        step: usize,
        adversarial: f64,
        l_var: f64,
    },
}

/// Append-only training history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn wasserstein_series(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Critic { wasserstein, .. } => Some(*wasserstein),
                _ => None,
            })
            .collect()
    }

    pub fn grad_penalty_series(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Critic { grad_penalty, .. } => Some(*grad_penalty),
                _ => None,
            })
            .collect()
    }

    /// CSV with header `step,kind,wasserstein,grad_penalty,l_var`. Critic
    /// rows fill the first two value columns; generator rows carry the
    /// adversarial term in the `wasserstein` column and their `l_var`.
    pub fn write_csv_to(&self, out: &mut impl IoWrite) -> std::io::Result<()> {
        writeln!(out, "step,kind,wasserstein,grad_penalty,l_var")?;
        for r in &self.records {
            match r {
                LogRecord::Critic {
                    step,
                    wasserstein,
                    grad_penalty,
                } => writeln!(out, "{step},critic,{wasserstein},{grad_penalty},")?,
                LogRecord::Generator {
                    step,
                    adversarial,
                    l_var,
                } => writeln!(out, "{step},generator,{adversarial},,{l_var}")?,
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
        );
        self.write_csv_to(&mut out)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Adaptive-moment optimizer state for one parameter list.
struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(shapes: &[&Tensor], cfg: &TrainConfig) -> Self {
        Adam {
            m: shapes.iter().map(|t| Array2::zeros(t.dim())).collect(),
            v: shapes.iter().map(|t| Array2::zeros(t.dim())).collect(),
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        self.step_scaled(params, grads, 1.0);
    }

    /// One update with the base learning rate multiplied by `scale`, so a
    /// caller can anneal without touching optimizer state.
    fn step_scaled(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], scale: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= scale * self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Outcome of a training run.
pub struct TrainResult {
    pub generator: GeneratorModel,
    pub critic: CriticModel,
    pub log: TrainingLog,
}

/// Groups of a dataset arranged for sampling.
struct GroupIndex {
    conditions: Vec<(usize, Portion)>,
    matrices: Vec<Tensor>,
}

fn index_groups(dataset: &Dataset, participants: &[String]) -> Result<GroupIndex> {
    let mut conditions = Vec::new();
    let mut matrices = Vec::new();
    for (pi, pid) in participants.iter().enumerate() {
        for portion in dataset.portions_of(pid) {
            conditions.push((pi, portion));
            matrices.push(dataset.group(pid, portion)?);
        }
    }
    if conditions.is_empty() {
        return Err(Error::NoEligibleGroups);
    }
    Ok(GroupIndex { conditions, matrices })
}

/// Alternating WGAN-GP training. Deterministic for a fixed config: a single
/// seeded RNG stream drives initialization and every sampling decision in
/// order.
pub fn train(
    dataset: &Dataset,
    gen_cfg: &GeneratorConfig,
    critic_cfg: &CriticConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainResult> {
    train_cfg.validate()?;
    if dataset.space != Space::Normalized {
        return Err(Error::InvalidConfig(
            "training expects a normalized dataset".into(),
        ));
    }
    if gen_cfg.embedding_dim != critic_cfg.embedding_dim {
        return Err(Error::InvalidConfig(
            "generator and critic embedding widths must match".into(),
        ));
    }
    let participants = dataset.participants();
    let d = dataset.schema.dimension();
    let m = critic_cfg.pack_size;
    let b = train_cfg.batch_size;
    let mut rng = ChaCha20Rng::seed_from_u64(train_cfg.seed);

    let mut generator = GeneratorModel::init(
        gen_cfg,
        participants.clone(),
        dataset.schema.names().to_vec(),
        &mut rng,
    )?;
    let mut critic = CriticModel::init(critic_cfg, participants.clone(), d, &mut rng)?;
    let groups = index_groups(dataset, &participants)?;

    let mut gen_opt = Adam::new(&generator.tensors(), train_cfg);
    let mut critic_opt = Adam::new(&critic.tensors(), train_cfg);
    let mut log = TrainingLog::default();
    let mut critic_step = 0usize;

    for gen_step in 0..train_cfg.generator_steps {
        // The second half of training anneals the learning rate linearly to
        // a tenth of its base value; per-condition statistics settle instead
        // of hovering at the optimizer's noise floor.
        let half = train_cfg.generator_steps / 2;
        let lr_scale = if gen_step < half || half == 0 {
            1.0
        } else {
            let frac =
                (gen_step - half) as f64 / (train_cfg.generator_steps - half) as f64;
            1.0 - 0.9 * frac
        };
        for _ in 0..train_cfg.critic_steps_per_gen_step {
            let (real, fake, interp) = sample_critic_batches(
                &groups, &generator, b, m, d, &mut rng,
            )?;
            let (parts, grads) = critic_loss(&critic, &real, &fake, &interp, train_cfg.lambda_gp)?;
            if !parts.total.is_finite() {
                return Err(Error::DivergenceDetected {
                    step: critic_step,
                    quantity: "critic loss".into(),
                });
            }
            critic_opt.step_scaled(&mut critic.tensors_mut(), &grads, lr_scale);
            log.records.push(LogRecord::Critic {
                step: critic_step,
                wasserstein: parts.wasserstein,
                grad_penalty: parts.grad_penalty,
            });
            critic_step += 1;
        }

        let (z, sample_conditions, real_batch, real_conditions) =
            sample_generator_batch(&groups, gen_cfg.latent_dim, b, m, &mut rng);
        let (parts, grads) = generator_loss(
            &generator,
            &critic,
            &z,
            &sample_conditions,
            &real_batch,
            &real_conditions,
            train_cfg.lambda_var,
        )?;
        if !parts.total.is_finite() {
            return Err(Error::DivergenceDetected {
                step: gen_step,
                quantity: "generator loss".into(),
            });
        }
        if parts.eligible_groups == 0 {
            eprintln!(
                "warning: generator step {gen_step} had no variance-eligible group; L_var = 0"
            );
        }
        gen_opt.step_scaled(&mut generator.tensors_mut(), &grads, lr_scale);
        log.records.push(LogRecord::Generator {
            step: gen_step,
            adversarial: parts.adversarial,
            l_var: parts.l_var,
        });

        if let Some(dir) = &train_cfg.checkpoint_dir {
            let due = train_cfg.checkpoint_every > 0
                && (gen_step + 1) % train_cfg.checkpoint_every == 0;
            if due {
                write_generator_checkpoint(
                    dir.join(format!("generator_{:06}.ckpt", gen_step + 1)),
                    &generator,
                )?;
            }
        }
    }
    if let Some(dir) = &train_cfg.checkpoint_dir {
        write_generator_checkpoint(dir.join("generator_final.ckpt"), &generator)?;
    }
    Ok(TrainResult {
        generator,
        critic,
        log,
    })
}

/// Draw condition-matched real, generated, and interpolated packed batches.
fn sample_critic_batches(
    groups: &GroupIndex,
    generator: &GeneratorModel,
    b: usize,
    m: usize,
    d: usize,
    rng: &mut ChaCha20Rng,
) -> Result<(PackedBatch, PackedBatch, PackedBatch)> {
    let mut conditions = Vec::with_capacity(b);
    let mut real = Array2::zeros((b, m * d));
    for pack in 0..b {
        let gi = rng.gen_range(0..groups.conditions.len());
        conditions.push(groups.conditions[gi]);
        let mat = &groups.matrices[gi];
        for k in 0..m {
            let row = rng.gen_range(0..mat.nrows());
            real.slice_mut(s![pack, k * d..(k + 1) * d])
                .assign(&mat.row(row));
        }
    }
    let sample_conditions: Vec<(usize, Portion)> = conditions
        .iter()
        .flat_map(|c| std::iter::repeat(*c).take(m))
        .collect();
    let z = Array2::from_shape_fn((b * m, generator.config.latent_dim), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v
    });
    let gen_samples = generator.forward_samples(&z, &sample_conditions)?;
    let fake = gen_samples
        .into_shape_with_order((b, m * d))
        .expect("pack reshape");

    let mut interp = Array2::zeros((b, m * d));
    for pack in 0..b {
        let t: f64 = rng.gen::<f64>();
        for j in 0..m * d {
            interp[[pack, j]] = t * real[[pack, j]] + (1.0 - t) * fake[[pack, j]];
        }
    }
    Ok((
        PackedBatch {
            features: real,
            conditions: conditions.clone(),
        },
        PackedBatch {
            features: fake,
            conditions: conditions.clone(),
        },
        PackedBatch {
            features: interp,
            conditions,
        },
    ))
}

/// Draw latent noise plus a condition-matched real batch for the variance
/// targets of one generator update.
fn sample_generator_batch(
    groups: &GroupIndex,
    latent_dim: usize,
    b: usize,
    m: usize,
    rng: &mut ChaCha20Rng,
) -> (Tensor, Vec<(usize, Portion)>, Tensor, Vec<(usize, Portion)>) {
    let d = groups.matrices[0].ncols();
    let mut sample_conditions = Vec::with_capacity(b * m);
    let mut real_batch = Array2::zeros((b * m, d));
    let mut real_conditions = Vec::with_capacity(b * m);
    for pack in 0..b {
        let gi = rng.gen_range(0..groups.conditions.len());
        let cond = groups.conditions[gi];
        let mat = &groups.matrices[gi];
        for k in 0..m {
            sample_conditions.push(cond);
            let row = rng.gen_range(0..mat.nrows());
            real_batch.row_mut(pack * m + k).assign(&mat.row(row));
            real_conditions.push(cond);
        }
    }
    let z = Array2::from_shape_fn((b * m, latent_dim), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v
    });
    (z, sample_conditions, real_batch, real_conditions)
}

const GENERATOR_MAGIC: &[u8; 8] = b"GENCKPT\0";
const GENERATOR_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GeneratorHeader {
    config: GeneratorConfig,
    participants: Vec<String>,
    feature_names: Vec<String>,
    trunk_spec: MlpSpec,
}

/// Serialize a generator: magic, version, JSON header (config echo,
/// condition vocabulary, trunk spec), embedding tables, trunk tensors.
pub fn write_generator_checkpoint(
    path: impl AsRef<Path>,
    model: &GeneratorModel,
) -> Result<()> {
    let path = path.as_ref();
    let err = |e| Error::io(path.display().to_string(), e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(err)?);
    out.write_all(GENERATOR_MAGIC).map_err(err)?;
    out.write_all(&GENERATOR_VERSION.to_le_bytes()).map_err(err)?;
    let header = GeneratorHeader {
        config: model.config.clone(),
        participants: model.participants.clone(),
        feature_names: model.feature_names.clone(),
        trunk_spec: model.trunk_spec.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    out.write_all(&(json.len() as u64).to_le_bytes()).map_err(err)?;
    out.write_all(&json).map_err(err)?;
    autodiff::write_tensor(&mut out, &model.participant_embedding).map_err(err)?;
    autodiff::write_tensor(&mut out, &model.portion_embedding).map_err(err)?;
    out.write_all(&(model.trunk.tensors.len() as u64).to_le_bytes())
        .map_err(err)?;
    for t in &model.trunk.tensors {
        autodiff::write_tensor(&mut out, t).map_err(err)?;
    }
    Ok(())
}

pub fn read_generator_checkpoint(path: impl AsRef<Path>) -> Result<GeneratorModel> {
    let path = path.as_ref();
    let err = |e| Error::io(path.display().to_string(), e);
    let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(err)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(err)?;
    if &magic != GENERATOR_MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf).map_err(err)?;
    if u32::from_le_bytes(u32buf) != GENERATOR_VERSION {
        return Err(Error::MalformedCheckpoint("unsupported version".into()));
    }
    let mut u64buf = [0u8; 8];
    file.read_exact(&mut u64buf).map_err(err)?;
    let len = u64::from_le_bytes(u64buf) as usize;
    if len > 1 << 20 {
        return Err(Error::MalformedCheckpoint("oversized header".into()));
    }
    let mut json = vec![0u8; len];
    file.read_exact(&mut json).map_err(err)?;
    let header: GeneratorHeader = serde_json::from_slice(&json)
        .map_err(|e| Error::MalformedCheckpoint(format!("header: {e}")))?;
    let participant_embedding = autodiff::read_tensor(&mut file)?;
    let portion_embedding = autodiff::read_tensor(&mut file)?;
    file.read_exact(&mut u64buf).map_err(err)?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(autodiff::read_tensor(&mut file)?);
    }
    let model = GeneratorModel {
        config: header.config,
        participants: header.participants,
        feature_names: header.feature_names,
        participant_embedding,
        portion_embedding,
        trunk_spec: header.trunk_spec,
        trunk: MlpParams { tensors },
    };
    if model.participant_embedding.nrows() != model.participants.len()
        || model.portion_embedding.nrows() != Portion::ALL.len()
    {
        return Err(Error::MalformedCheckpoint(
            "embedding table does not match vocabulary".into(),
        ));
    }
    model
        .trunk_spec
        .validate()
        .map_err(|e| Error::MalformedCheckpoint(format!("trunk spec: {e}")))?;
    Ok(model)
}
