//! Contrastive student training with in-batch negatives, binary
//! cross-entropy teacher training, and temperature-softened distillation.
//!
//! Every loop is single-threaded and driven by one seeded RNG, so a config
//! and a starting model fully determine the result.

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, adam_step, AdamConfig, Tape, Tensor, Var};
use crate::corpus::{Field, TrainGroup, Vocabulary};
use crate::error::{Error, Result};
use crate::models::{CrossScorer, FrozenScorer, Mode, Role, Student};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub teacher_batch_size: usize,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<u64>,
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub temperature: f64,
    pub distill_rate: f64,
    pub hard_weight: f64,
    /// Weight of the response score in decoupled (DQS) matching.
    pub lambda: f64,
    /// Per-teacher KL weights for DQS distillation: context, response.
    pub kl_weights: [f64; 2],
    /// Draw the query and positive context independently, so they can coincide.
    pub with_replacement: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            batch_size: 32,
            teacher_batch_size: 16,
            epochs: 1,
            max_steps: None,
            lr: adam.lr,
            warmup_steps: adam.warmup_steps,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            temperature: 3.0,
            distill_rate: 1.0,
            hard_weight: 1.0,
            lambda: 1.0,
            kl_weights: [1.0, 1.0],
            with_replacement: true,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            warmup_steps: self.warmup_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.teacher_batch_size < 2 {
            return Err(Error::invalid(
                "batch sizes must be at least 2 for in-batch negatives",
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if self.distill_rate < 0.0
            || self.hard_weight < 0.0
            || self.kl_weights.iter().any(|&w| w < 0.0)
        {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        Ok(())
    }
}

/// A training group in vocabulary ids, with each context's session
/// precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedGroup {
    pub response: Vec<u32>,
    pub contexts: Vec<Vec<u32>>,
    pub sessions: Vec<Vec<u32>>,
}

impl EncodedGroup {
    pub fn new(group: &TrainGroup, vocab: &Vocabulary) -> Self {
        EncodedGroup {
            response: vocab.encode_text(&group.response),
            contexts: group
                .contexts
                .iter()
                .map(|c| vocab.encode_context(c))
                .collect(),
            sessions: group
                .contexts
                .iter()
                .map(|c| vocab.encode_session(c, &group.response))
                .collect(),
        }
    }

    /// The candidate text of `field` for the pair formed by context `ctx`.
    pub fn candidate(&self, field: Field, ctx: usize) -> &[u32] {
        match field {
            Field::Context => &self.contexts[ctx],
            Field::Session => &self.sessions[ctx],
            Field::Response => &self.response,
        }
    }
}

pub fn encode_groups(groups: &[TrainGroup], vocab: &Vocabulary) -> Vec<EncodedGroup> {
    groups.iter().map(|g| EncodedGroup::new(g, vocab)).collect()
}

/// One instance: group index plus the context indices used as the query and
/// as the positive context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub group: usize,
    pub query: usize,
    pub positive: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn queries<'g>(&self, groups: &'g [EncodedGroup]) -> Vec<&'g [u32]> {
        self.items
            .iter()
            .map(|it| groups[it.group].contexts[it.query].as_slice())
            .collect()
    }

    pub fn candidates<'g>(&self, groups: &'g [EncodedGroup], field: Field) -> Vec<&'g [u32]> {
        self.items
            .iter()
            .map(|it| groups[it.group].candidate(field, it.positive))
            .collect()
    }
}

fn draw_pair(n: usize, with_replacement: bool, rng: &mut ChaCha8Rng) -> (usize, usize) {
    if with_replacement || n < 2 {
        (rng.gen_range(0..n), rng.gen_range(0..n))
    } else {
        let picked = (0..n).choose_multiple(rng, 2);
        (picked[0], picked[1])
    }
}

/// Pairs a query and positive context inside each of the given groups.
pub fn make_batch(
    groups: &[EncodedGroup],
    chosen: &[usize],
    with_replacement: bool,
    rng: &mut ChaCha8Rng,
) -> Batch {
    Batch {
        items: chosen
            .iter()
            .map(|&g| {
                let (query, positive) = draw_pair(groups[g].contexts.len(), with_replacement, rng);
                BatchItem {
                    group: g,
                    query,
                    positive,
                }
            })
            .collect(),
    }
}

/// `b` distinct groups drawn uniformly, each with a query/positive pair.
pub fn sample_batch(
    groups: &[EncodedGroup],
    b: usize,
    with_replacement: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if groups.len() < b {
        return Err(Error::Insufficient(format!(
            "batch of {b} needs at least {b} groups, have {}",
            groups.len()
        )));
    }
    let chosen = (0..groups.len()).choose_multiple(rng, b);
    Ok(make_batch(groups, &chosen, with_replacement, rng))
}

/// Contrastive loss for a single query over raw scores.
pub fn contrastive_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::invalid(
            "contrastive loss needs at least one positive",
        ));
    }
    let all: Vec<f64> = pos.iter().chain(neg).copied().collect();
    Ok(autodiff::logsumexp(&all) - autodiff::logsumexp(pos))
}

/// Binary cross-entropy on a logit.
pub fn teacher_loss(logit: f64, label: bool) -> f64 {
    if label {
        -autodiff::log_sigmoid(logit)
    } else {
        -autodiff::log_sigmoid(-logit)
    }
}

/// `KL(softmax(z_t / T) || softmax(z_s / T))`.
pub fn kl_divergence(z_s: &[f64], z_t: &[f64], temperature: f64) -> Result<f64> {
    if z_s.len() != z_t.len() {
        return Err(Error::DimMismatch {
            expected: z_t.len(),
            got: z_s.len(),
        });
    }
    let scaled = |z: &[f64]| -> Vec<f64> { z.iter().map(|v| v / temperature).collect() };
    let (s, t) = (scaled(z_s), scaled(z_t));
    let (ls, lt) = (autodiff::logsumexp(&s), autodiff::logsumexp(&t));
    Ok(s.iter()
        .zip(&t)
        .map(|(s, t)| {
            let p = (t - lt).exp();
            if p == 0.0 {
                0.0
            } else {
                p * ((t - lt) - (s - ls))
            }
        })
        .sum())
}

/// `hard_weight · CE(y, softmax(z_s)) + rate · T² · KL` for one query whose
/// positive sits at `positive`.
pub fn distill_loss(
    z_s: &[f64],
    z_t: &[f64],
    positive: usize,
    temperature: f64,
    rate: f64,
    hard_weight: f64,
) -> Result<f64> {
    if positive >= z_s.len() {
        return Err(Error::invalid("positive index outside the candidate list"));
    }
    let kl = kl_divergence(z_s, z_t, temperature)?;
    let hard = autodiff::logsumexp(z_s) - z_s[positive];
    Ok(hard_weight * hard + rate * temperature * temperature * kl)
}

/// Row-wise contrastive loss over an r x m score matrix, averaged over rows. `positive`
/// marks the positive entries of each row.
pub fn contrastive_loss_var(tape: &mut Tape<'_>, scores: Var, positive: &[bool]) -> Result<Var> {
    let all = tape.logsumexp(scores);
    let pos = tape.masked_logsumexp(scores, positive)?;
    let diff = tape.sub(all, pos)?;
    Ok(tape.mean(diff))
}

/// Mean binary cross-entropy of a column of logits.
pub fn bce_loss_var(tape: &mut Tape<'_>, logits: Var, labels: &[bool]) -> Result<Var> {
    let (r, c) = tape.shape(logits);
    if c != 1 || r != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "bce labels",
            left: (r, c),
            right: (labels.len(), 1),
        });
    }
    let signs: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { -1.0 }).collect();
    let signs = tape.constant(Tensor::from_vec(r, 1, signs)?);
    let margin = tape.mul(logits, signs)?;
    let ll = tape.log_sigmoid(margin);
    let mean = tape.mean(ll);
    Ok(tape.scalar_mul(mean, -1.0))
}

/// Row-averaged `T² · KL(softmax(z_t/T) || softmax(z_s/T))`. The teacher
/// scores enter as constants.
pub fn kl_loss_var(tape: &mut Tape<'_>, z_s: Var, z_t: &Tensor, temperature: f64) -> Result<Var> {
    let (r, c) = tape.shape(z_s);
    if z_t.shape() != (r, c) {
        return Err(Error::ShapeMismatch {
            op: "kl teacher scores",
            left: (r, c),
            right: z_t.shape(),
        });
    }
    let mut p = Tensor::zeros(r, c);
    let mut neg_entropy = 0.0;
    for i in 0..r {
        let row: Vec<f64> = z_t.row(i).iter().map(|v| v / temperature).collect();
        let lse = autodiff::logsumexp(&row);
        for (j, v) in row.iter().enumerate() {
            let lp = v - lse;
            let pv = lp.exp();
            p.row_mut(i)[j] = pv;
            if pv > 0.0 {
                neg_entropy += pv * lp;
            }
        }
    }
    let scaled = tape.scalar_mul(z_s, 1.0 / temperature);
    let log_q = tape.log_softmax(scaled);
    let p = tape.constant(p);
    let cross = tape.mul(p, log_q)?;
    let cross = tape.sum(cross);
    // Σ p log p − Σ p log q, averaged over rows and scaled by T².
    let t2 = temperature * temperature / r as f64;
    let base = tape.constant(Tensor::scalar(neg_entropy));
    let kl = tape.sub(base, cross)?;
    Ok(tape.scalar_mul(kl, t2))
}

/// Loss value and its parts for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub hard: f64,
    pub kl: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    /// Mean loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Student similarity matrix for a batch: one B x B block per candidate
/// field of the mode, side by side, plus the matching positive mask.
pub fn student_scores(
    student: &Student,
    tape: &mut Tape<'_>,
    groups: &[EncodedGroup],
    batch: &Batch,
) -> Result<(Vec<Var>, Vec<bool>)> {
    let b = batch.len();
    let q = student
        .tower(Role::Query)?
        .encode_batch(tape, &batch.queries(groups))?;
    let fields = student.mode().fields();
    let mut blocks = Vec::with_capacity(fields.len());
    for &field in fields {
        let tower = student.tower(Role::for_field(field))?;
        let k = tower.encode_batch(tape, &batch.candidates(groups, field))?;
        blocks.push(tape.matmul_nt(q, k)?);
    }
    let m = b * fields.len();
    let mut mask = vec![false; b * m];
    for i in 0..b {
        for f in 0..fields.len() {
            mask[i * m + f * b + i] = true;
        }
    }
    Ok((blocks, mask))
}

fn check_step(step: u64, parts: &StepLog) -> Result<()> {
    if !(parts.loss.is_finite() && parts.hard.is_finite() && parts.kl.is_finite()) {
        return Err(Error::NonFinite(format!(
            "loss at step {step}: total={} hard={} kl={}",
            parts.loss, parts.hard, parts.kl
        )));
    }
    Ok(())
}

/// Teacher score matrices aligned with `student_scores` blocks.
struct DistillTargets<'t> {
    teachers: Vec<(&'t FrozenScorer, Field, f64)>,
}

/// Runs one optimizer step of the student on `batch`.
fn student_step(
    student: &mut Student,
    groups: &[EncodedGroup],
    batch: &Batch,
    cfg: &TrainConfig,
    targets: Option<&DistillTargets<'_>>,
    step: u64,
) -> Result<StepLog> {
    let (grads, mut log) = {
        let mut tape = Tape::new(student.store());
        let (blocks, mask) = student_scores(student, &mut tape, groups, batch)?;
        let joint = if blocks.len() == 1 {
            blocks[0]
        } else {
            tape.concat_cols(&blocks)?
        };
        let hard = contrastive_loss_var(&mut tape, joint, &mask)?;
        let hard_value = tape.value(hard).item();
        let mut loss = tape.scalar_mul(hard, cfg.hard_weight);
        let mut kl_value = 0.0;
        if let Some(targets) = targets {
            let queries = batch.queries(groups);
            for (block, (teacher, field, weight)) in blocks.iter().zip(&targets.teachers) {
                let cands = batch.candidates(groups, *field);
                let mut z_t = Tensor::zeros(batch.len(), batch.len());
                for (i, q) in queries.iter().enumerate() {
                    for (j, c) in cands.iter().enumerate() {
                        z_t.row_mut(i)[j] = teacher.score(q, c)?;
                    }
                }
                let kl = kl_loss_var(&mut tape, *block, &z_t, cfg.temperature)?;
                kl_value += weight * tape.value(kl).item();
                let scaled = tape.scalar_mul(kl, cfg.distill_rate * weight);
                loss = tape.add(loss, scaled)?;
            }
        }
        let log = StepLog {
            step,
            loss: tape.value(loss).item(),
            hard: hard_value,
            kl: kl_value,
            lr: 0.0,
        };
        check_step(step, &log)?;
        (tape.backward(loss)?, log)
    };
    let store = student.store_mut();
    store.zero_grad();
    store.accumulate(&grads);
    log.lr = adam_step(store, &cfg.adam());
    Ok(log)
}

fn run_epochs<F>(
    n_groups: usize,
    b: usize,
    cfg: &TrainConfig,
    mut step_fn: F,
) -> Result<TrainReport>
where
    F: FnMut(&[usize], u64, &mut ChaCha8Rng) -> Result<StepLog>,
{
    if n_groups < b {
        return Err(Error::Insufficient(format!(
            "batch of {b} needs at least {b} training groups, have {n_groups}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..n_groups).collect();
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks_exact(b) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            step += 1;
            let log = step_fn(chunk, step, &mut rng)?;
            total += log.loss;
            count += 1;
            report.steps.push(log);
        }
        report.epoch_losses.push(total / count as f64);
    }
    Ok(report)
}

/// Contrastive training with in-batch negatives.
pub fn train_student(
    student: &mut Student,
    groups: &[EncodedGroup],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    run_epochs(groups.len(), cfg.batch_size, cfg, |chunk, step, rng| {
        let batch = make_batch(groups, chunk, cfg.with_replacement, rng);
        student_step(student, groups, &batch, cfg, None, step)
    })
}

/// One optimizer step on a fixed batch, for tests and diagnostics.
pub fn train_student_on_batch(
    student: &mut Student,
    groups: &[EncodedGroup],
    batch: &Batch,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepLog> {
    student_step(student, groups, batch, cfg, None, step)
}

fn check_teacher(student: &Student, teacher: &CrossScorer) -> Result<()> {
    let (s, t) = (student.config(), teacher.config());
    if s.vocab_size != t.vocab_size {
        return Err(Error::ConfigConflict {
            key: "vocab_size".into(),
            first: format!("student {}", s.vocab_size),
            second: format!("{} teacher {}", teacher.field(), t.vocab_size),
        });
    }
    Ok(())
}

/// Continues training a student with teacher soft targets added to the
/// contrastive loss. For DQS the context and response blocks each get their
/// own teacher and KL term.
pub fn distill_student(
    student: &mut Student,
    teachers: &[&CrossScorer],
    groups: &[EncodedGroup],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut frozen = Vec::new();
    for (f, &field) in student.mode().fields().iter().enumerate() {
        let teacher = teachers
            .iter()
            .find(|t| t.field() == field)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "no {field} teacher for a {} student",
                    student.mode()
                ))
            })?;
        check_teacher(student, teacher)?;
        let weight = if student.mode() == Mode::Dqs {
            cfg.kl_weights[f]
        } else {
            1.0
        };
        frozen.push((teacher.frozen(), field, weight));
    }
    let targets = DistillTargets {
        teachers: frozen.iter().map(|(t, f, w)| (t, *f, *w)).collect(),
    };
    run_epochs(groups.len(), cfg.batch_size, cfg, |chunk, step, rng| {
        let batch = make_batch(groups, chunk, cfg.with_replacement, rng);
        student_step(student, groups, &batch, cfg, Some(&targets), step)
    })
}

/// BCE training on positives from each group paired 1:1 with a negative
/// candidate from a uniformly drawn other group.
pub fn train_teacher(
    teacher: &mut CrossScorer,
    groups: &[EncodedGroup],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let field = teacher.field();
    let b = cfg.teacher_batch_size;
    run_epochs(groups.len(), b, cfg, |chunk, step, rng| {
        let mut pairs: Vec<(&[u32], &[u32])> = Vec::with_capacity(2 * chunk.len());
        let mut labels = Vec::with_capacity(2 * chunk.len());
        for &g in chunk {
            let (qi, pi) = draw_pair(groups[g].contexts.len(), cfg.with_replacement, rng);
            let query = groups[g].contexts[qi].as_slice();
            pairs.push((query, groups[g].candidate(field, pi)));
            labels.push(true);
            let mut other = rng.gen_range(0..groups.len() - 1);
            if other >= g {
                other += 1;
            }
            let oc = rng.gen_range(0..groups[other].contexts.len());
            pairs.push((query, groups[other].candidate(field, oc)));
            labels.push(false);
        }
        let (grads, mut log) = {
            let mut tape = Tape::new(teacher.store());
            let logits = teacher.score_batch(&mut tape, &pairs)?;
            let loss = bce_loss_var(&mut tape, logits, &labels)?;
            let value = tape.value(loss).item();
            let log = StepLog {
                step,
                loss: value,
                hard: value,
                kl: 0.0,
                lr: 0.0,
            };
            check_step(step, &log)?;
            (tape.backward(loss)?, log)
        };
        let store = teacher.store_mut();
        store.zero_grad();
        store.accumulate(&grads);
        log.lr = adam_step(store, &cfg.adam());
        Ok(log)
    })
}
