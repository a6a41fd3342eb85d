//! Tabular autoregressive models.
//!
//! A [`TabularLM`] is a finite-order Markov table: for every
//! `(instruction, window)` pair it stores one logit row over its output
//! alphabet. The same type backs the teacher (base alphabet only), the
//! tandem student (base tokens plus the teacher-call action, conditioned on
//! origin-tagged inputs) and the plain draft student used by the speculative
//! baseline.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng::{self, Rng};

/// Logit used for output columns that are structurally unavailable
/// (the origin-shifted block of a student). `exp` of it underflows to zero,
/// so these columns carry zero probability and zero gradient.
pub const MASKED_LOGIT: f64 = -1.0e4;

/// Initial logit of the teacher-call action in a freshly derived student.
pub const TAU_INIT_LOGIT: f64 = -12.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn from_index(i: usize) -> Self {
        TokenId(i as u32)
    }
}

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The base token alphabet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    eos_id: TokenId,
}

impl Vocab {
    pub fn new(size: usize, eos_id: TokenId) -> Result<Self> {
        if size < 2 {
            return Err(contract(format!("vocab size must be >= 2, got {size}")));
        }
        if eos_id.index() >= size {
            return Err(contract(format!("eos id {eos_id} outside vocab of size {size}")));
        }
        Ok(Vocab { size, eos_id })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> TokenId {
        self.eos_id
    }
}

/// Layout of a model's input and output symbol sets.
///
/// `Base`: outputs are the base tokens `0..n`; windows range over base tokens
/// plus a pad symbol `n`.
///
/// `Augmented`: outputs are `0..2n+1` where `n..2n` is the teacher-origin
/// block (never emitted, always masked) and `2n` is the teacher-call action.
/// Windows hold base or shifted teacher-origin tokens, padded with `2n+1`. The teacher-call id never appears in a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Base,
    Augmented,
}

/// The student's augmented symbol set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugAlphabet {
    base_size: usize,
}

impl AugAlphabet {
    pub fn new(base_size: usize) -> Self {
        AugAlphabet { base_size }
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    /// Id of the teacher-call action.
    pub fn tau(&self) -> TokenId {
        TokenId::from_index(2 * self.base_size)
    }

    pub fn pad(&self) -> TokenId {
        TokenId::from_index(2 * self.base_size + 1)
    }

    pub fn action_size(&self) -> usize {
        2 * self.base_size + 1
    }

    pub fn input_symbols(&self) -> usize {
        2 * self.base_size + 2
    }

    /// Tag a teacher-produced token with its origin.
    pub fn shifted(&self, token: TokenId) -> TokenId {
        TokenId::from_index(token.index() + self.base_size)
    }

    pub fn is_base(&self, token: TokenId) -> bool {
        token.index() < self.base_size
    }

    pub fn is_shifted(&self, token: TokenId) -> bool {
        (self.base_size..2 * self.base_size).contains(&token.index())
    }

    /// Map an input symbol back to the base token it carries.
    pub fn deshift(&self, token: TokenId) -> TokenId {
        if self.is_shifted(token) {
            TokenId::from_index(token.index() - self.base_size)
        } else {
            token
        }
    }
}

/// Who produced an emitted token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Student,
    Teacher,
}

/// A fixed-length conditioning window plus the instruction it belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Context {
    pub window: Vec<TokenId>,
    pub instruction_id: u32,
}

/// A probability vector over some alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn softmax(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Distribution { probs }
    }

    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(contract("distribution entries must be finite and non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(contract(format!("distribution sums to {total}, not 1")));
        }
        Ok(Distribution { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Distribution { probs: vec![1.0 / n as f64; n] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token.index()]
    }

    pub fn log_prob(&self, token: TokenId) -> f64 {
        self.probs[token.index()].ln()
    }

    /// Most likely token; ties go to the lowest index.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        TokenId::from_index(best)
    }

    /// Inverse-CDF lookup for a uniform draw `u` in `[0, 1)`.
    pub fn inverse_cdf(&self, u: f64) -> TokenId {
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
                acc += p;
                if u < acc {
                    return TokenId::from_index(i);
                }
            }
        }
        TokenId::from_index(last_positive)
    }

    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    /// Restrict to the first `n` entries and renormalize.
    pub fn restricted(&self, n: usize) -> Distribution {
        let mass: f64 = self.probs[..n].iter().sum();
        Distribution {
            probs: self.probs[..n].iter().map(|p| p / mass).collect(),
        }
    }

    /// Total-variation distance; both distributions must have equal length.
    pub fn total_variation(&self, other: &Distribution) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Anything that yields a next-token distribution for a history.
///
/// `history` is the full conditioning sequence (prompt prefix followed by the
/// tokens generated so far) and `step` counts generated tokens only.
pub trait Policy {
    fn output_size(&self) -> usize;

    fn distribution(&self, instruction: u32, history: &[TokenId], step: usize) -> Result<Distribution>;
}

/// Instruction plus the token prefix a generation starts from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    /// Teacher-side instruction (task) id.
    pub task: u32,
    pub prefix: Vec<TokenId>,
}

impl Prompt {
    pub fn new(task: u32, prefix: Vec<TokenId>) -> Self {
        Prompt { task, prefix }
    }
}

/// A student seen through the base alphabet: the instruction is remapped to
/// the student's `(task, budget)` row block and the output distribution is
/// renormalized over base tokens.
#[derive(Clone, Copy, Debug)]
pub struct StudentView<'a> {
    pub model: &'a TabularLM,
    pub budget_index: u32,
    pub budgets_per_task: u32,
}

impl<'a> StudentView<'a> {
    pub fn plain(model: &'a TabularLM) -> Self {
        StudentView {
            model,
            budget_index: 0,
            budgets_per_task: 1,
        }
    }

    pub fn with_budget(model: &'a TabularLM, budget_index: usize, budgets_per_task: usize) -> Self {
        StudentView {
            model,
            budget_index: budget_index as u32,
            budgets_per_task: budgets_per_task as u32,
        }
    }

    pub fn instruction(&self, task: u32) -> u32 {
        task * self.budgets_per_task + self.budget_index
    }
}

impl Policy for StudentView<'_> {
    fn output_size(&self) -> usize {
        self.model.base_size()
    }

    fn distribution(&self, task: u32, history: &[TokenId], step: usize) -> Result<Distribution> {
        let full = self.model.distribution(self.instruction(task), history, step)?;
        Ok(match self.model.kind() {
            ModelKind::Base => full,
            ModelKind::Augmented => full.restricted(self.model.base_size()),
        })
    }
}

/// Finite-order softmax table.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularLM {
    vocab: Vocab,
    kind: ModelKind,
    order: usize,
    n_instructions: usize,
    logits: Vec<f64>,
}

impl TabularLM {
    pub fn zeros(vocab: Vocab, kind: ModelKind, order: usize, n_instructions: usize) -> Result<Self> {
        if n_instructions == 0 {
            return Err(contract("a model needs at least one instruction"));
        }
        let mut model = TabularLM {
            vocab,
            kind,
            order,
            n_instructions,
            logits: Vec::new(),
        };
        let count = model
            .rows_per_instruction()
            .checked_mul(n_instructions)
            .and_then(|r| r.checked_mul(model.alphabet_size()))
            .ok_or_else(|| contract("table too large"))?;
        model.logits = vec![0.0; count];
        if kind == ModelKind::Augmented {
            let aug = model.aug();
            for row in 0..model.n_rows() {
                let r = model.logits_row_mut(row);
                for v in 0..aug.base_size() {
                    r[aug.shifted(TokenId::from_index(v)).index()] = MASKED_LOGIT;
                }
            }
        }
        Ok(model)
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n_instructions(&self) -> usize {
        self.n_instructions
    }

    pub fn base_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn aug(&self) -> AugAlphabet {
        AugAlphabet::new(self.vocab.size())
    }

    pub fn alphabet_size(&self) -> usize {
        match self.kind {
            ModelKind::Base => self.vocab.size(),
            ModelKind::Augmented => self.aug().action_size(),
        }
    }

    /// Number of distinct window symbols, pad included.
    pub fn context_symbols(&self) -> usize {
        match self.kind {
            ModelKind::Base => self.vocab.size() + 1,
            ModelKind::Augmented => self.aug().input_symbols(),
        }
    }

    pub fn pad(&self) -> TokenId {
        TokenId::from_index(self.context_symbols() - 1)
    }

    /// The teacher-call action, if this model has one.
    pub fn tau(&self) -> Option<TokenId> {
        match self.kind {
            ModelKind::Base => None,
            ModelKind::Augmented => Some(self.aug().tau()),
        }
    }

    pub fn rows_per_instruction(&self) -> usize {
        self.context_symbols().pow(self.order as u32)
    }

    pub fn n_rows(&self) -> usize {
        self.rows_per_instruction() * self.n_instructions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_row(&self, row: usize) -> &[f64] {
        let a = self.alphabet_size();
        &self.logits[row * a..(row + 1) * a]
    }

    pub fn logits_row_mut(&mut self, row: usize) -> &mut [f64] {
        let a = self.alphabet_size();
        &mut self.logits[row * a..(row + 1) * a]
    }

    pub fn row_distribution(&self, row: usize) -> Distribution {
        Distribution::softmax(self.logits_row(row))
    }

    fn is_window_symbol(&self, t: TokenId) -> bool {
        match self.kind {
            ModelKind::Base => t.index() <= self.vocab.size(),
            // the teacher-call id is an action, never an input symbol
            ModelKind::Augmented => t.index() < self.context_symbols() && t != self.aug().tau(),
        }
    }

    /// Window of the last `order` symbols of `history`, left-padded.
    pub fn context_for(&self, instruction: u32, history: &[TokenId]) -> Result<Context> {
        if instruction as usize >= self.n_instructions {
            return Err(Error::Config(format!(
                "unknown instruction {instruction} (model has {})",
                self.n_instructions
            )));
        }
        let take = history.len().min(self.order);
        let mut window = vec![self.pad(); self.order - take];
        window.extend_from_slice(&history[history.len() - take..]);
        Ok(Context {
            window,
            instruction_id: instruction,
        })
    }

    pub fn row_index(&self, ctx: &Context) -> Result<usize> {
        if ctx.instruction_id as usize >= self.n_instructions {
            return Err(Error::Config(format!(
                "unknown instruction {} (model has {})",
                ctx.instruction_id, self.n_instructions
            )));
        }
        if ctx.window.len() != self.order {
            return Err(contract(format!(
                "window length {} does not match model order {}",
                ctx.window.len(),
                self.order
            )));
        }
        let cs = self.context_symbols();
        let mut idx = 0usize;
        for &t in &ctx.window {
            if !self.is_window_symbol(t) {
                return Err(contract(format!("window symbol {t} outside the model's input alphabet")));
            }
            idx = idx * cs + t.index();
        }
        Ok(ctx.instruction_id as usize * self.rows_per_instruction() + idx)
    }

    pub fn row_of(&self, instruction: u32, history: &[TokenId]) -> Result<usize> {
        self.row_index(&self.context_for(instruction, history)?)
    }

    /// Inverse of [`Self::row_index`].
    pub fn context_of_row(&self, row: usize) -> Context {
        let rpi = self.rows_per_instruction();
        let cs = self.context_symbols();
        let instruction_id = (row / rpi) as u32;
        let mut rest = row % rpi;
        let mut window = vec![TokenId(0); self.order];
        for slot in window.iter_mut().rev() {
            *slot = TokenId::from_index(rest % cs);
            rest /= cs;
        }
        Context { window, instruction_id }
    }

    pub fn next_distribution(&self, ctx: &Context) -> Result<Distribution> {
        Ok(self.row_distribution(self.row_index(ctx)?))
    }

    /// Sum of per-step log-probabilities of `seq` following the prompt window.
    pub fn sequence_logprob(&self, prompt: &Context, seq: &[TokenId]) -> Result<f64> {
        let mut history = prompt.window.clone();
        let mut total = 0.0;
        for &t in seq {
            if t.index() >= self.alphabet_size() {
                return Err(contract(format!("token {t} outside alphabet of size {}", self.alphabet_size())));
            }
            let ctx = self.context_for(prompt.instruction_id, &history)?;
            total += self.next_distribution(&ctx)?.log_prob(t);
            history.push(t);
        }
        Ok(total)
    }

    /// Sample (or take the argmax of) the next token.
    pub fn sample_token(&self, ctx: &Context, rng_seed: u64, greedy: bool) -> Result<TokenId> {
        let dist = self.next_distribution(ctx)?;
        if greedy {
            return Ok(dist.argmax());
        }
        let mut rng = rng::seeded(rng_seed);
        Ok(dist.inverse_cdf(rng.random::<f64>()))
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.logits.iter().position(|z| !z.is_finite()) {
            return Err(Error::Numerical(format!("non-finite logit at flat index {i}")));
        }
        Ok(())
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            vocab_size: self.vocab.size(),
            eos_id: self.vocab.eos().0,
            kind: self.kind,
            order: self.order,
            alphabet_size: self.alphabet_size(),
            n_instructions: self.n_instructions,
            logits: self.logits.chunks(self.alphabet_size()).map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn from_document(doc: ModelDocument) -> Result<Self> {
        if doc.format != MODEL_FORMAT || doc.version != MODEL_VERSION {
            return Err(Error::Config(format!(
                "unsupported model document {} v{}",
                doc.format, doc.version
            )));
        }
        let vocab = Vocab::new(doc.vocab_size, TokenId(doc.eos_id))?;
        let mut model = TabularLM::zeros(vocab, doc.kind, doc.order, doc.n_instructions)?;
        if doc.alphabet_size != model.alphabet_size() || doc.logits.len() != model.n_rows() {
            return Err(Error::Config(format!(
                "model document shape mismatch: {} rows x {} columns, expected {} x {}",
                doc.logits.len(),
                doc.alphabet_size,
                model.n_rows(),
                model.alphabet_size()
            )));
        }
        for (row, values) in doc.logits.iter().enumerate() {
            if values.len() != model.alphabet_size() {
                return Err(Error::Config(format!("row {row} has {} entries", values.len())));
            }
            model.logits_row_mut(row).copy_from_slice(values);
        }
        model.check_finite()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_document())?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: ModelDocument = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        TabularLM::from_document(doc)
    }
}

impl Policy for TabularLM {
    fn output_size(&self) -> usize {
        self.alphabet_size()
    }

    fn distribution(&self, instruction: u32, history: &[TokenId], _step: usize) -> Result<Distribution> {
        Ok(self.row_distribution(self.row_of(instruction, history)?))
    }
}

pub const MODEL_FORMAT: &str = "tandem-kd/model";
pub const MODEL_VERSION: u32 = 1;

/// On-disk form of a [`TabularLM`]; logits are row-major, one array per row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub version: u32,
    pub vocab_size: usize,
    pub eos_id: u32,
    pub kind: ModelKind,
    pub order: usize,
    pub alphabet_size: usize,
    pub n_instructions: usize,
    pub logits: Vec<Vec<f64>>,
}

/// Random teacher whose logits are i.i.d. standard normal scaled by `concentration`.
pub fn random_teacher(
    seed: u64,
    order: usize,
    vocab: Vocab,
    concentration: f64,
    n_instructions: usize,
) -> Result<TabularLM> {
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(contract(format!("concentration must be positive, got {concentration}")));
    }
    let mut model = TabularLM::zeros(vocab, ModelKind::Base, order, n_instructions)?;
    let mut rng = rng::seeded(seed);
    for z in model.logits.iter_mut() {
        let draw: f64 = StandardNormal.sample(&mut rng);
        *z = concentration * draw;
    }
    Ok(model)
}

/// How a student table is derived from a teacher.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentInit {
    pub order: usize,
    /// Mixing weight toward the uniform distribution, in `[0, 1]`.
    pub smoothing: f64,
    pub kind: ModelKind,
    /// Student instructions per teacher instruction (one per budget keyword).
    pub budgets_per_task: usize,
}

/// Steps of teacher rollout used to weight contexts when marginalizing.
const VISITATION_HORIZON: usize = 32;

/// Expected visit mass of every teacher window under teacher rollouts started
/// from a uniformly random full-length prefix of non-eos tokens.
fn teacher_visitation(teacher: &TabularLM) -> Vec<f64> {
    let n = teacher.base_size();
    let eos = teacher.vocab().eos();
    let rpi = teacher.rows_per_instruction();
    let cs = teacher.context_symbols();
    let mut visits = vec![0.0; teacher.n_rows()];
    let starts: Vec<usize> = (0..rpi)
        .filter(|&w| {
            let ctx = teacher.context_of_row(w);
            ctx.window.iter().all(|&t| t.index() < n && t != eos)
        })
        .collect();
    if starts.is_empty() {
        return visits;
    }
    for instr in 0..teacher.n_instructions() {
        let base = instr * rpi;
        let mut mass = vec![0.0; rpi];
        for &w in &starts {
            mass[w] = 1.0 / starts.len() as f64;
        }
        for _ in 0..VISITATION_HORIZON {
            let mut next = vec![0.0; rpi];
            for (w, &m) in mass.iter().enumerate() {
                if m == 0.0 {
                    continue;
                }
                visits[base + w] += m;
                let dist = teacher.row_distribution(base + w);
                for (x, &p) in dist.probs().iter().enumerate() {
                    if x == eos.index() {
                        continue;
                    }
                    // shift the window left by one and append x
                    let shifted = if teacher.order() == 0 { 0 } else { (w * cs) % rpi + x };
                    next[shifted] += m * p;
                }
            }
            mass = next;
        }
    }
    visits
}

/// Build a capacity-limited student from a teacher.
///
/// Each student row is the teacher's next-token distribution averaged over
/// the teacher windows that share the student's (shorter) suffix, weighted by
/// teacher visitation, then mixed toward uniform by `smoothing`. Inputs
/// tagged as teacher-origin are read through their base token. Augmented
/// students start with the teacher-call action at [`TAU_INIT_LOGIT`].
pub fn derive_student_init(teacher: &TabularLM, init: &StudentInit) -> Result<TabularLM> {
    if init.order > teacher.order() {
        return Err(contract(format!(
            "student order {} exceeds teacher order {}",
            init.order,
            teacher.order()
        )));
    }
    if !(0.0..=1.0).contains(&init.smoothing) {
        return Err(contract("smoothing must lie in [0, 1]"));
    }
    if teacher.kind() != ModelKind::Base {
        return Err(contract("teacher must use the base alphabet"));
    }
    let budgets = init.budgets_per_task.max(1);
    let n = teacher.base_size();
    let mut student = TabularLM::zeros(
        teacher.vocab(),
        init.kind,
        init.order,
        teacher.n_instructions() * budgets,
    )?;
    let aug = student.aug();
    let visits = teacher_visitation(teacher);
    let t_rpi = teacher.rows_per_instruction();
    let teacher_pad = teacher.pad();

    // teacher window suffixes, precomputed per teacher row
    let teacher_windows: Vec<Vec<TokenId>> = (0..t_rpi).map(|w| teacher.context_of_row(w).window).collect();

    for row in 0..student.n_rows() {
        let ctx = student.context_of_row(row);
        if init.kind == ModelKind::Augmented && ctx.window.contains(&aug.tau()) {
            // never addressed; keep a well-formed row
            let r = student.logits_row_mut(row);
            for v in 0..n {
                r[v] = -(n as f64).ln();
            }
            r[aug.tau().index()] = TAU_INIT_LOGIT;
            continue;
        }
        let suffix: Vec<TokenId> = ctx
            .window
            .iter()
            .map(|&t| {
                if t == student.pad() {
                    teacher_pad
                } else {
                    aug.deshift(t)
                }
            })
            .collect();
        let task = ctx.instruction_id as usize / budgets;
        let matches: Vec<usize> = teacher_windows
            .iter()
            .enumerate()
            .filter(|(_, w)| w[w.len() - suffix.len()..] == suffix[..])
            .map(|(i, _)| task * t_rpi + i)
            .collect();
        let total_weight: f64 = matches.iter().map(|&r| visits[r]).sum();
        let mut mix = vec![0.0; n];
        for &r in &matches {
            let weight = if total_weight > 0.0 {
                visits[r] / total_weight
            } else {
                1.0 / matches.len() as f64
            };
            if weight == 0.0 {
                continue;
            }
            for (m, p) in mix.iter_mut().zip(teacher.row_distribution(r).probs()) {
                *m += weight * p;
            }
        }
        let r = student.logits_row_mut(row);
        for v in 0..n {
            let p = (1.0 - init.smoothing) * mix[v] + init.smoothing / n as f64;
            r[v] = if p > 0.0 { p.ln().max(MASKED_LOGIT) } else { MASKED_LOGIT };
        }
        if init.kind == ModelKind::Augmented {
            r[aug.tau().index()] = TAU_INIT_LOGIT;
        }
    }
    Ok(student)
}

/// Draw sampling decisions for decoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "seed")]
pub enum Sampling {
    Greedy,
    Seeded(u64),
}

/// Stateful token picker behind [`Sampling`].
pub struct Sampler {
    rng: Option<Rng>,
}

impl Sampler {
    pub fn new(sampling: Sampling) -> Self {
        Sampler {
            rng: match sampling {
                Sampling::Greedy => None,
                Sampling::Seeded(seed) => Some(rng::seeded(seed)),
            },
        }
    }

    pub fn greedy() -> Self {
        Sampler { rng: None }
    }

    pub fn from_rng(rng: Rng) -> Self {
        Sampler { rng: Some(rng) }
    }

    pub fn is_greedy(&self) -> bool {
        self.rng.is_none()
    }

    pub fn pick(&mut self, dist: &Distribution) -> TokenId {
        match self.rng.as_mut() {
            None => dist.argmax(),
            Some(rng) => dist.inverse_cdf(rng.random::<f64>()),
        }
    }
}
