//! Experiment driver. Builds task suites and scores methods on them, then
//! sweeps budgets against leniences into a CSV report.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::budget::{BudgetSpec, InstructionLayout};
use crate::error::{contract, Error, Result};
use crate::model::{derive_student_init, random_teacher, ModelKind, Prompt, Sampling, StudentInit, TabularLM, TokenId, Vocab};
use crate::rng::{self, derive_seed};
use crate::specdec::{lossy_spec_decode, reverse_kl_distill, teacher_greedy, DistillConfig, SpecConfig};
use crate::tandem::{score_trace, tandem_decode};
use crate::training::{
    phase1_train, phase2_train, random_prompt, select_checkpoint, Checkpoint, CheckpointSelector, Phase1Config, Phase2Config, Phase2Outcome, Selection,
};

pub const CONFIG_FORMAT: &str = "tandem-kd/config";
pub const SUITE_FORMAT: &str = "tandem-kd/suite";
pub const SCHEMA_VERSION: u32 = 1;

pub const REPORT_HEADER: &str = "method,param,draft_len,quality_nats_per_token,teacher_use_fraction,cost_per_token,n_prompts,seed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub tasks: usize,
    pub vocab_size: usize,
    pub eos: u32,
    pub teacher_order: usize,
    pub concentration: f64,
    pub student_order: usize,
    pub smoothing: f64,
    pub prefix_len: usize,
    pub max_len: usize,
    pub validation_prompts: usize,
    pub eval_prompts: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            tasks: 1,
            vocab_size: 6,
            eos: 0,
            teacher_order: 2,
            concentration: 3.0,
            student_order: 1,
            smoothing: 0.05,
            prefix_len: 2,
            max_len: 16,
            validation_prompts: 512,
            eval_prompts: 512,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub c_s: f64,
    pub c_t: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { c_s: 1.0, c_t: 10.0 }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_t > self.c_s && self.c_s > 0.0) {
            return Err(contract("cost model needs c_t > c_s > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub leniences: Vec<f64>,
    pub draft_lens: Vec<usize>,
    pub cost: CostModel,
    pub distill: DistillConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            leniences: (0..=10).map(|i| i as f64 / 10.0).collect(),
            draft_lens: vec![3, 5, 10],
            cost: CostModel::default(),
            distill: DistillConfig::default(),
        }
    }
}

/// The whole experiment as one versioned document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub format: String,
    pub version: u32,
    pub suite: SuiteConfig,
    pub budgets: Vec<BudgetSpec>,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub selector: CheckpointSelector,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::reference()
    }
}

impl ExperimentConfig {
    /// The reference task: order-2 teacher, order-1 student over six symbols.
    pub fn reference() -> Self {
        let suite = SuiteConfig::default();
        let mut phase2 = Phase2Config {
            max_len: suite.max_len,
            prefix_len: suite.prefix_len,
            ..Default::default()
        };
        phase2.pcl.tau = 0.25;
        phase2.pcl.lr_policy = 1.0;
        phase2.pcl.lr_value = 0.05;
        phase2.lambda_init = 0.5;
        ExperimentConfig {
            format: CONFIG_FORMAT.to_string(),
            version: SCHEMA_VERSION,
            phase1: Phase1Config {
                max_len: suite.max_len,
                prefix_len: suite.prefix_len,
                ..Default::default()
            },
            phase2,
            suite,
            budgets: BudgetSpec::shipped(),
            selector: CheckpointSelector::default(),
            sweep: SweepConfig::default(),
        }
    }

    pub fn layout(&self) -> InstructionLayout {
        InstructionLayout::new(self.suite.tasks, self.budgets.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CONFIG_FORMAT || self.version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "expected format {CONFIG_FORMAT:?} version {SCHEMA_VERSION}, got {:?} version {}",
                self.format, self.version
            )));
        }
        if self.budgets.is_empty() {
            return Err(Error::Config("at least one budget is required".into()));
        }
        for b in &self.budgets {
            BudgetSpec::new(b.keyword.clone(), b.b)?;
        }
        let s = &self.suite;
        if s.tasks == 0 || s.max_len == 0 || s.validation_prompts == 0 || s.eval_prompts == 0 {
            return Err(Error::Config("tasks, max_len and prompt counts must be positive".into()));
        }
        Vocab::new(s.vocab_size, TokenId(s.eos))?;
        self.sweep.cost.validate()?;
        for &l in &self.sweep.leniences {
            SpecConfig::new(1, l)?;
        }
        if self.sweep.draft_lens.contains(&0) {
            return Err(Error::Config("draft lengths must be positive".into()));
        }
        self.phase2.pcl.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Model settings plus fixed prompt lists, reproducible from the
/// suite seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub teacher_seed: u64,
    pub config: SuiteConfig,
    pub validation: Vec<Prompt>,
    pub eval: Vec<Prompt>,
}

impl TaskSuite {
    pub fn generate(config: &SuiteConfig, seed: u64) -> Result<Self> {
        let vocab = Vocab::new(config.vocab_size, TokenId(config.eos))?;
        let prompts = |stream: u64, count: usize| {
            let mut r = rng::rng_from(seed, &[stream]);
            (0..count)
                .map(|_| random_prompt(&mut r, config.tasks, config.prefix_len, vocab.size(), vocab.eos()))
                .collect::<Vec<_>>()
        };
        if config.validation_prompts == 0 || config.eval_prompts == 0 {
            return Err(contract("prompt lists must be non-empty"));
        }
        Ok(TaskSuite {
            format: SUITE_FORMAT.to_string(),
            version: SCHEMA_VERSION,
            seed,
            teacher_seed: derive_seed(seed, &[10]),
            config: config.clone(),
            validation: prompts(11, config.validation_prompts),
            eval: prompts(12, config.eval_prompts),
        })
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.config.vocab_size, TokenId(self.config.eos))
    }

    pub fn teacher(&self) -> Result<TabularLM> {
        random_teacher(self.teacher_seed, self.config.teacher_order, self.vocab()?, self.config.concentration, self.config.tasks)
    }

    pub fn student_init(&self, teacher: &TabularLM, kind: ModelKind, budgets_per_task: usize) -> Result<TabularLM> {
        derive_student_init(
            teacher,
            &StudentInit {
                order: self.config.student_order,
                smoothing: self.config.smoothing,
                kind,
                budgets_per_task,
            },
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// One decoded prompt, in method-independent terms.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptResult {
    pub x_out: Vec<TokenId>,
    pub student_passes: usize,
    pub teacher_passes: usize,
    /// Per-token teacher log-likelihood; `None` for an empty output.
    pub quality: Option<f64>,
    pub trace_csv: Option<String>,
}

impl PromptResult {
    pub fn teacher_use(&self) -> f64 {
        self.teacher_passes as f64 / self.x_out.len().max(1) as f64
    }

    pub fn cost(&self, cm: &CostModel) -> f64 {
        (self.student_passes as f64 * cm.c_s + self.teacher_passes as f64 * cm.c_t) / self.x_out.len().max(1) as f64
    }
}

/// Per-prompt results for one operating point. Aggregates are means over
/// prompts with non-empty output.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodEval {
    pub results: Vec<PromptResult>,
    pub quality: f64,
    pub teacher_use: f64,
    pub excluded: usize,
}

pub type TandemEval = MethodEval;

impl MethodEval {
    fn new(results: Vec<PromptResult>) -> Self {
        let kept: Vec<&PromptResult> = results.iter().filter(|r| r.quality.is_some()).collect();
        let n = kept.len().max(1) as f64;
        MethodEval {
            quality: kept.iter().map(|r| r.quality.unwrap()).sum::<f64>() / n,
            teacher_use: kept.iter().map(|r| r.teacher_use()).sum::<f64>() / n,
            excluded: results.len() - kept.len(),
            results,
        }
    }

    pub fn n_scored(&self) -> usize {
        self.results.len() - self.excluded
    }

    pub fn cost(&self, cm: &CostModel) -> f64 {
        let kept: Vec<&PromptResult> = self.results.iter().filter(|r| r.quality.is_some()).collect();
        kept.iter().map(|r| r.cost(cm)).sum::<f64>() / kept.len().max(1) as f64
    }
}

/// Summary of [`quality_metric`].
#[derive(Clone, Debug, PartialEq)]
pub struct QualityStats {
    pub mean: f64,
    pub per_prompt: Vec<Option<f64>>,
    pub excluded: usize,
}

/// Mean over outputs of the per-token teacher log-likelihood. Empty outputs
/// are excluded and counted.
pub fn quality_metric(teacher: &TabularLM, prompts: &[Prompt], outputs: &[Vec<TokenId>]) -> Result<QualityStats> {
    if prompts.len() != outputs.len() {
        return Err(contract("outputs must align with prompts"));
    }
    let per_prompt = prompts
        .iter()
        .zip(outputs)
        .map(|(p, x)| {
            if x.is_empty() {
                return Ok(None);
            }
            let ctx = teacher.context_for(p.task, &p.prefix)?;
            let lp = teacher.sequence_logprob(&ctx, x)?;
            Ok(Some(lp / x.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let kept: Vec<f64> = per_prompt.iter().flatten().copied().collect();
    Ok(QualityStats {
        mean: kept.iter().sum::<f64>() / kept.len().max(1) as f64,
        excluded: per_prompt.len() - kept.len(),
        per_prompt,
    })
}

/// Sampling seed of the `i`-th evaluation prompt, shared across methods and
/// operating points so comparisons are paired.
pub fn eval_sampling(seed: u64, i: usize) -> Sampling {
    Sampling::Seeded(derive_seed(seed, &[20, i as u64]))
}

/// Tandem decoding of every prompt at budget index `k`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_tandem(
    student: &TabularLM,
    teacher: &TabularLM,
    prompts: &[Prompt],
    layout: &InstructionLayout,
    k: usize,
    max_len: usize,
    seed: u64,
    traces: bool,
) -> Result<TandemEval> {
    let results = prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let instruction = layout.student_instruction(p.task, k);
            let mut out = tandem_decode(student, teacher, p, instruction, max_len, eval_sampling(seed, i))?;
            let q = quality_metric(teacher, std::slice::from_ref(p), std::slice::from_ref(&out.x_out))?.per_prompt[0];
            let trace_csv = if traces {
                score_trace(teacher, p, &out.x_out, &mut out.trace)?;
                Some(out.trace.to_csv())
            } else {
                None
            };
            Ok(PromptResult {
                student_passes: out.trace.len(),
                teacher_passes: out.trace.teacher_calls,
                x_out: out.x_out,
                quality: q,
                trace_csv,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MethodEval::new(results))
}

pub fn evaluate_specdec(draft: &TabularLM, teacher: &TabularLM, prompts: &[Prompt], max_len: usize, cfg: &SpecConfig, traces: bool) -> Result<MethodEval> {
    let eos = teacher.vocab().eos();
    let results = prompts
        .iter()
        .map(|p| {
            let out = lossy_spec_decode(teacher, draft, p, eos, max_len, cfg)?;
            let q = quality_metric(teacher, std::slice::from_ref(p), std::slice::from_ref(&out.x_out))?.per_prompt[0];
            let trace_csv = if traces {
                let mut h = p.prefix.clone();
                let mut lps = Vec::new();
                for (i, &t) in out.x_out.iter().enumerate() {
                    lps.push(crate::model::Policy::distribution(teacher, p.task, &h, i)?.log_prob(t));
                    h.push(t);
                }
                Some(out.trace.to_csv(&lps))
            } else {
                None
            };
            Ok(PromptResult {
                student_passes: out.trace.student_passes(),
                teacher_passes: out.trace.teacher_passes(),
                x_out: out.x_out,
                quality: q,
                trace_csv,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MethodEval::new(results))
}

/// Modeled cost per emitted token of a tandem trace.
pub fn tandem_cost(trace: &crate::tandem::DecodeTrace, cm: &CostModel) -> f64 {
    (trace.len() as f64 * cm.c_s + trace.teacher_calls as f64 * cm.c_t) / trace.len().max(1) as f64
}

/// Modeled cost per emitted token of a speculative trace.
pub fn spec_cost(trace: &crate::specdec::SpecTrace, cm: &CostModel) -> f64 {
    let emitted: usize = trace.cycles.iter().map(|c| c.emitted.len()).sum();
    (trace.student_passes() as f64 * cm.c_s + trace.teacher_passes() as f64 * cm.c_t) / emitted.max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    /// Budget `b` for tandem rows, lenience for speculative rows.
    pub param: f64,
    pub draft_len: Option<usize>,
    pub quality: f64,
    pub teacher_use: f64,
    pub cost: f64,
    pub n_prompts: usize,
    pub seed: u64,
}

impl RunReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method,
            self.param,
            self.draft_len.map(|k| k.to_string()).unwrap_or_default(),
            self.quality,
            self.teacher_use,
            self.cost,
            self.n_prompts,
            self.seed
        )
    }
}

pub fn report_to_csv(rows: &[RunReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

pub fn parse_report(text: &str) -> Result<Vec<RunReport>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(contract("unexpected report header"));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| contract(format!("bad number {s:?}: {e}")));
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(contract(format!("report row has {} fields", f.len())));
            }
            Ok(RunReport {
                method: f[0].to_string(),
                param: num(f[1])?,
                draft_len: if f[2].is_empty() {
                    None
                } else {
                    Some(f[2].parse().map_err(|e| contract(format!("bad draft length: {e}")))?)
                },
                quality: num(f[3])?,
                teacher_use: num(f[4])?,
                cost: num(f[5])?,
                n_prompts: f[6].parse().map_err(|e| contract(format!("bad count: {e}")))?,
                seed: f[7].parse().map_err(|e| contract(format!("bad seed: {e}")))?,
            })
        })
        .collect()
}

/// Phase 1 then phase 2 on the suite's teacher.
pub fn train(cfg: &ExperimentConfig, suite: &TaskSuite, seed: u64) -> Result<Phase2Outcome> {
    let teacher = suite.teacher()?;
    let layout = cfg.layout();
    let init = suite.student_init(&teacher, ModelKind::Augmented, layout.n_budgets())?;
    let warm = phase1_train(&init, &teacher, &layout, &cfg.phase1, derive_seed(seed, &[30]))?;
    phase2_train(&warm, &teacher, &layout, &cfg.phase2, derive_seed(seed, &[31]))
}

/// Draft model for the speculative baseline.
pub fn prepare_draft(cfg: &ExperimentConfig, suite: &TaskSuite, teacher: &TabularLM, seed: u64) -> Result<TabularLM> {
    let init = suite.student_init(teacher, ModelKind::Base, 1)?;
    let mut r = rng::rng_from(seed, &[40]);
    let vocab = suite.vocab()?;
    let prompts: Vec<Prompt> = (0..256)
        .map(|_| random_prompt(&mut r, suite.config.tasks, suite.config.prefix_len, vocab.size(), vocab.eos()))
        .collect();
    reverse_kl_distill(&init, teacher, &prompts, &cfg.sweep.distill, derive_seed(seed, &[41]))
}

pub struct SweepResult {
    pub rows: Vec<RunReport>,
    pub selection: Selection,
    pub tandem: Vec<MethodEval>,
    /// `(draft_len, lenience, eval)` per speculative operating point.
    pub specdec: Vec<(usize, f64, MethodEval)>,
    /// Teacher greedy decoding on the evaluation prompts.
    pub teacher_reference: f64,
}

/// Tandem rows for one checkpoint on the evaluation prompts.
pub fn tandem_rows(cfg: &ExperimentConfig, suite: &TaskSuite, model: &TabularLM, seed: u64, traces: bool) -> Result<(Vec<RunReport>, Vec<MethodEval>)> {
    let teacher = suite.teacher()?;
    let layout = cfg.layout();
    let mut rows = Vec::new();
    let mut evals = Vec::new();
    for (k, spec) in layout.budgets.iter().enumerate() {
        let e = evaluate_tandem(model, &teacher, &suite.eval, &layout, k, suite.config.max_len, derive_seed(seed, &[50]), traces)?;
        rows.push(RunReport {
            method: "tandem".into(),
            param: spec.b,
            draft_len: None,
            quality: e.quality,
            teacher_use: e.teacher_use,
            cost: e.cost(&cfg.sweep.cost),
            n_prompts: e.n_scored(),
            seed,
        });
        evals.push(e);
    }
    Ok((rows, evals))
}

/// Choose a checkpoint on the validation prompts.
pub fn choose(cfg: &ExperimentConfig, suite: &TaskSuite, checkpoints: &[Checkpoint], seed: u64) -> Result<Selection> {
    let teacher = suite.teacher()?;
    select_checkpoint(
        checkpoints,
        &teacher,
        &suite.validation,
        &cfg.layout(),
        &cfg.selector,
        suite.config.max_len,
        derive_seed(seed, &[51]),
    )
}

/// Tandem decoding at every budget and speculative decoding at every
/// `(draft length, lenience)` pair on the same evaluation prompts.
pub fn run_sweep(cfg: &ExperimentConfig, suite: &TaskSuite, checkpoints: &[Checkpoint], seed: u64) -> Result<SweepResult> {
    cfg.validate()?;
    let teacher = suite.teacher()?;
    let selection = choose(cfg, suite, checkpoints, seed)?;
    let model = &checkpoints[selection.index].model;
    let (mut rows, tandem) = tandem_rows(cfg, suite, model, seed, false)?;

    let draft = prepare_draft(cfg, suite, &teacher, seed)?;
    let mut specdec = Vec::new();
    for &k in &cfg.sweep.draft_lens {
        for &l in &cfg.sweep.leniences {
            let e = evaluate_specdec(&draft, &teacher, &suite.eval, suite.config.max_len, &SpecConfig::new(k, l)?, false)?;
            rows.push(RunReport {
                method: "specdec".into(),
                param: l,
                draft_len: Some(k),
                quality: e.quality,
                teacher_use: e.teacher_use,
                cost: e.cost(&cfg.sweep.cost),
                n_prompts: e.n_scored(),
                seed,
            });
            specdec.push((k, l, e));
        }
    }
    let eos = teacher.vocab().eos();
    let greedy = suite
        .eval
        .iter()
        .map(|p| teacher_greedy(&teacher, p, eos, suite.config.max_len))
        .collect::<Result<Vec<_>>>()?;
    let teacher_reference = quality_metric(&teacher, &suite.eval, &greedy)?.mean;
    Ok(SweepResult {
        rows,
        selection,
        tandem,
        specdec,
        teacher_reference,
    })
}

/// Write `contents` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| contract("output path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specdec::SpecCycle;
    use crate::tandem::{DecodeTrace, TraceStep};
    use crate::model::Origin;

    #[test]
    fn cost_examples() {
        let cm = CostModel::default();
        let student_step = TraceStep {
            origin: Origin::Student,
            action: TokenId(1),
            emitted: TokenId(1),
            teacher_logprob: None,
        };
        let teacher_step = TraceStep {
            origin: Origin::Teacher,
            ..student_step
        };
        let silent = DecodeTrace {
            steps: vec![student_step; 7],
            teacher_calls: 0,
            student_tokens: 7,
        };
        assert_eq!(tandem_cost(&silent, &cm), 1.0);
        let half = DecodeTrace {
            steps: [vec![student_step; 5], vec![teacher_step; 5]].concat(),
            teacher_calls: 5,
            student_tokens: 5,
        };
        assert!((tandem_cost(&half, &cm) - 6.0).abs() < 1e-12);
        let cycle = |emit: usize| SpecCycle {
            drafted: vec![TokenId(1); 3],
            accepted: 3,
            appended: Some(TokenId(2)),
            bonus: true,
            teacher_passes: 1,
            student_passes: 3,
            emitted: vec![TokenId(1); emit],
        };
        let spec = crate::specdec::SpecTrace { cycles: vec![cycle(4), cycle(4)] };
        assert!((spec_cost(&spec, &cm) - 3.25).abs() < 1e-12);
    }

    #[test]
    fn uniform_quality() {
        let v = Vocab::new(4, TokenId(0)).unwrap();
        let t = TabularLM::zeros(v, ModelKind::Base, 1, 1).unwrap();
        let mut r = rng::seeded(1);
        let prompts: Vec<Prompt> = (0..20).map(|_| random_prompt(&mut r, 1, 1, 4, TokenId(0))).collect();
        let outs: Vec<Vec<TokenId>> = (0..20).map(|i| vec![TokenId((i % 4) as u32); 1 + i % 5]).collect();
        let q = quality_metric(&t, &prompts, &outs).unwrap();
        assert!((q.mean + 4f64.ln()).abs() < 1e-12);
        let q = quality_metric(&t, &prompts[..2], &[vec![], vec![TokenId(1)]]).unwrap();
        assert_eq!(q.excluded, 1);
    }

    #[test]
    fn greedy_self_scoring() {
        let v = Vocab::new(5, TokenId(0)).unwrap();
        let t = random_teacher(2, 2, v, 2.0, 1).unwrap();
        let p = Prompt::new(0, vec![TokenId(1), TokenId(3)]);
        let out = teacher_greedy(&t, &p, TokenId(0), 10).unwrap();
        let q = quality_metric(&t, std::slice::from_ref(&p), std::slice::from_ref(&out)).unwrap();
        let ctx = t.context_for(0, &p.prefix).unwrap();
        let expected = t.sequence_logprob(&ctx, &out).unwrap() / out.len() as f64;
        assert!((q.mean - expected).abs() < 1e-15);
    }

    #[test]
    fn report_roundtrip_and_header() {
        let rows = vec![
            RunReport {
                method: "tandem".into(),
                param: 0.3,
                draft_len: None,
                quality: -1.25,
                teacher_use: 0.31,
                cost: 4.1,
                n_prompts: 512,
                seed: 7,
            },
            RunReport {
                method: "specdec".into(),
                param: 1.0,
                draft_len: Some(5),
                quality: -0.5,
                teacher_use: 0.2,
                cost: 3.0,
                n_prompts: 512,
                seed: 7,
            },
        ];
        let csv = report_to_csv(&rows);
        assert!(csv.starts_with("method,param,draft_len,quality_nats_per_token,teacher_use_fraction,cost_per_token,n_prompts,seed\n"));
        assert_eq!(parse_report(&csv).unwrap(), rows);
    }

    #[test]
    fn suite_is_reproducible() {
        let cfg = SuiteConfig::default();
        let a = TaskSuite::generate(&cfg, 3).unwrap().to_json().unwrap();
        let b = TaskSuite::generate(&cfg, 3).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, TaskSuite::generate(&cfg, 4).unwrap().to_json().unwrap());
        let s = TaskSuite::generate(&cfg, 3).unwrap();
        assert_eq!((s.validation.len(), s.eval.len()), (512, 512));
        assert!(s.eval.iter().all(|p| p.prefix.len() == 2 && !p.prefix.contains(&TokenId(0))));
    }

    #[test]
    fn config_roundtrip() {
        let cfg = ExperimentConfig::reference();
        cfg.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
