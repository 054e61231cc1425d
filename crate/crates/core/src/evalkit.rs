//! Evaluation metrics and the ablation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::heads::Phase;
use crate::losses::{TaskMask, BLANK};
use crate::model::{forward, ForwardPlan, FusionMode, ModelParams};
use crate::numerics::Tensor;
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub f1_macro: f64,
    pub f1_micro: f64,
    pub accuracy: f64,
}

/// Macro-F1 averages per-class F1 over the classes that occur in `labels`;
/// classes that are only predicted still count as false positives for the
/// classes they were confused with but do not enter the average. Micro-F1
/// pools true/false positive and negative counts over all classes.
pub fn classification_metrics(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<ClassMetrics> {
    if labels.is_empty() {
        return Err(Error::Empty {
            op: "classification_metrics",
            what: "labels",
        });
    }
    if preds.len() != labels.len() {
        return Err(Error::dim("classification_metrics", labels.len(), preds.len()));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    let mut present = vec![false; n_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        for (what, v) in [("prediction", p), ("label", y)] {
            if v >= n_classes {
                return Err(Error::LabelOutOfRange {
                    what,
                    value: v as i64,
                    limit: n_classes,
                });
            }
        }
        present[y] = true;
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * tp) as f64 / denom as f64
        }
    };
    let per_class: Vec<f64> = (0..n_classes)
        .filter(|&c| present[c])
        .map(|c| f1(tp[c], fp[c], fn_[c]))
        .collect();
    let f1_macro = per_class.iter().sum::<f64>() / per_class.len() as f64;
    let (t, p, n): (usize, usize, usize) = (tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(ClassMetrics {
        f1_macro,
        f1_micro: f1(t, p, n),
        accuracy: correct as f64 / labels.len() as f64,
    })
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn wer(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty {
            op: "wer",
            what: "reference",
        });
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Frame-wise argmax, repeats collapsed, blanks dropped.
pub fn greedy_ctc_decode(logits: &Tensor) -> Vec<usize> {
    let mut out = Vec::new();
    let mut last = None;
    for t in 0..logits.rows() {
        let row = logits.row(t);
        let best = argmax(row);
        if Some(best) != last && best != BLANK {
            out.push(best);
        }
        last = Some(best);
    }
    out
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Test-set metrics. Auxiliary entries are `None` when that head was not
/// part of the trained graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub emotion: ClassMetrics,
    pub gender: Option<ClassMetrics>,
    pub speaker: Option<ClassMetrics>,
    /// Corpus-level: total edits over total reference tokens.
    pub wer: Option<f64>,
    pub n_utterances: usize,
}

impl MetricsReport {
    /// Flat `metric name -> value` view for machine-readable output.
    pub fn flat(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        let mut put = |task: &str, c: &ClassMetrics| {
            m.insert(format!("{task}.f1_macro"), c.f1_macro);
            m.insert(format!("{task}.f1_micro"), c.f1_micro);
            m.insert(format!("{task}.accuracy"), c.accuracy);
        };
        put("emotion", &self.emotion);
        if let Some(g) = &self.gender {
            put("gender", g);
        }
        if let Some(s) = &self.speaker {
            put("speaker", s);
        }
        if let Some(w) = self.wer {
            m.insert("asr.wer".into(), w);
        }
        m.insert("n_utterances".into(), self.n_utterances as f64);
        m
    }
}

/// Runs the trained graph described by `plan` in eval mode over `utts`.
///
/// Speaker labels the head has never seen are scored as errors, which is
/// what a closed-set speaker classifier does on unseen speakers.
pub fn evaluate(params: &ModelParams, plan: &ForwardPlan, utts: &[Utterance]) -> Result<MetricsReport> {
    if utts.is_empty() {
        return Err(Error::Empty {
            op: "evaluate",
            what: "utterances",
        });
    }
    let mut emo = (Vec::new(), Vec::new());
    let mut gen = (Vec::new(), Vec::new());
    let mut spk = (Vec::new(), Vec::new());
    let (mut edits, mut ref_len) = (0usize, 0usize);
    for u in utts {
        u.validate()?;
        let (out, _) = forward(params, &u.stack, plan, &mut Phase::Eval)?;
        emo.0.push(argmax(out.emotion.data()));
        emo.1.push(u.emotion);
        if let Some(g) = &out.gender {
            gen.0.push(argmax(g.data()));
            gen.1.push(u.gender);
        }
        if let Some(s) = &out.speaker {
            spk.0.push(argmax(s.data()));
            spk.1.push(u.speaker);
        }
        if let Some(a) = &out.asr {
            edits += edit_distance(&u.tokens, &greedy_ctc_decode(a));
            ref_len += u.tokens.len();
        }
    }
    let dims = params.dims();
    let metrics = |(p, y): &(Vec<usize>, Vec<usize>), heads: usize| -> Result<Option<ClassMetrics>> {
        if y.is_empty() {
            return Ok(None);
        }
        let n = y.iter().copied().max().map_or(heads, |m| heads.max(m + 1));
        classification_metrics(p, y, n).map(Some)
    };
    Ok(MetricsReport {
        emotion: metrics(&emo, dims.n_emotions)?.expect("non-empty"),
        gender: metrics(&gen, dims.n_genders)?,
        speaker: metrics(&spk, dims.n_speakers)?,
        wer: plan.tasks.asr.then(|| edits as f64 / ref_len.max(1) as f64),
        n_utterances: utts.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    /// Component removal rows.
    Components,
    /// Auxiliary task combinations.
    Tasks,
    /// Last layer versus learned layer fusion.
    Fusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub name: String,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub kind: TableKind,
    pub configs: Vec<AblationConfig>,
}

fn entry(name: &str, train: TrainConfig) -> AblationConfig {
    AblationConfig {
        name: name.to_string(),
        train,
    }
}

impl AblationGrid {
    /// `baseline`, `no_mtl`, `no_coattention`, `no_swfc` and `full`, each
    /// derived from `full`. Without multi-task heads there is nothing to
    /// co-attend over, so `no_mtl` also drops co-attention.
    pub fn components(full: &TrainConfig) -> Self {
        let baseline = TrainConfig {
            use_mtl: false,
            use_coattention: false,
            use_swfc: false,
            ..full.clone()
        };
        let no_mtl = TrainConfig {
            use_mtl: false,
            use_coattention: false,
            ..full.clone()
        };
        let no_coattention = TrainConfig {
            use_coattention: false,
            ..full.clone()
        };
        let no_swfc = TrainConfig {
            use_swfc: false,
            ..full.clone()
        };
        AblationGrid {
            kind: TableKind::Components,
            configs: vec![
                entry("baseline", baseline),
                entry("no_mtl", no_mtl),
                entry("no_coattention", no_coattention),
                entry("no_swfc", no_swfc),
                entry("full", full.clone()),
            ],
        }
    }

    /// Emotion alone (the single-task baseline), emotion with each single
    /// auxiliary task, and emotion with all three.
    pub fn tasks(full: &TrainConfig) -> Self {
        let with = |asr, gender, speaker| TrainConfig {
            tasks: TaskMask { asr, gender, speaker },
            ..full.clone()
        };
        let ser = TrainConfig {
            use_mtl: false,
            use_coattention: false,
            use_swfc: false,
            ..full.clone()
        };
        AblationGrid {
            kind: TableKind::Tasks,
            configs: vec![
                entry("ser", ser),
                entry("ser+asr", with(true, false, false)),
                entry("ser+gender", with(false, true, false)),
                entry("ser+speaker", with(false, false, true)),
                entry("ser+asr+gender+speaker", with(true, true, true)),
            ],
        }
    }

    pub fn fusion(full: &TrainConfig) -> Self {
        AblationGrid {
            kind: TableKind::Fusion,
            configs: vec![
                entry(
                    "last",
                    TrainConfig {
                        fusion_mode: FusionMode::Last,
                        ..full.clone()
                    },
                ),
                entry(
                    "learnable",
                    TrainConfig {
                        fusion_mode: FusionMode::Learnable,
                        ..full.clone()
                    },
                ),
            ],
        }
    }

    pub fn single(kind: TableKind, name: &str, train: TrainConfig) -> Self {
        AblationGrid {
            kind,
            configs: vec![entry(name, train)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub runs: Vec<SeedRun>,
    /// Element-wise median over seeds.
    pub median: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: TableKind,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Median of a non-empty sample; the mean of the two middle values for an
/// even count.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn median_class(xs: &[Option<ClassMetrics>]) -> Option<ClassMetrics> {
    let xs: Vec<&ClassMetrics> = xs.iter().flatten().collect();
    if xs.is_empty() {
        return None;
    }
    let pick = |f: fn(&ClassMetrics) -> f64| median(&xs.iter().map(|c| f(c)).collect::<Vec<_>>());
    Some(ClassMetrics {
        f1_macro: pick(|c| c.f1_macro),
        f1_micro: pick(|c| c.f1_micro),
        accuracy: pick(|c| c.accuracy),
    })
}

fn median_report(reports: &[&MetricsReport]) -> MetricsReport {
    let wers: Vec<f64> = reports.iter().filter_map(|r| r.wer).collect();
    MetricsReport {
        emotion: median_class(&reports.iter().map(|r| Some(r.emotion)).collect::<Vec<_>>()).expect("non-empty"),
        gender: median_class(&reports.iter().map(|r| r.gender).collect::<Vec<_>>()),
        speaker: median_class(&reports.iter().map(|r| r.speaker).collect::<Vec<_>>()),
        wer: (!wers.is_empty()).then(|| median(&wers)),
        n_utterances: reports[0].n_utterances,
    }
}

/// Trains every config once per seed on `train_set` and scores it on
/// `test_set`. Runs execute in parallel; rows and runs come back in grid
/// order, then seed order.
pub fn run_ablation(
    grid: &AblationGrid,
    train_set: &[Utterance],
    test_set: &[Utterance],
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::config("ablate.seeds", "need at least one seed"));
    }
    let jobs: Vec<(usize, u64)> = (0..grid.configs.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<Result<MetricsReport>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let entry = &grid.configs[c];
            let cfg = TrainConfig {
                seed,
                ..entry.train.clone()
            };
            let run = || -> Result<MetricsReport> {
                let outcome = train(train_set, &cfg)?;
                evaluate(&outcome.params, &cfg.plan(), test_set)
            };
            log::info!("ablation run {} seed {seed}", entry.name);
            run().map_err(|e| Error::Run {
                name: entry.name.clone(),
                seed,
                source: Box::new(e),
            })
        })
        .collect();
    let mut results = results.into_iter();
    let mut rows = Vec::with_capacity(grid.configs.len());
    for entry in &grid.configs {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            runs.push(SeedRun {
                seed,
                metrics: results.next().expect("one result per job")?,
            });
        }
        let median = median_report(&runs.iter().map(|r| &r.metrics).collect::<Vec<_>>());
        rows.push(AblationRow {
            name: entry.name.clone(),
            runs,
            median,
        });
    }
    Ok(AblationTable {
        kind: grid.kind,
        seeds: seeds.to_vec(),
        rows,
    })
}

fn pct(v: f64) -> String {
    format!("{:5.2}", 100.0 * v)
}

fn pct_or_dash(v: Option<f64>) -> String {
    v.map_or_else(|| format!("{:>5}", "--"), pct)
}

/// Metric columns for one row, in the order of [`render_table`]'s header.
pub fn render_row(kind: TableKind, m: &MetricsReport) -> String {
    match kind {
        TableKind::Components | TableKind::Fusion => {
            format!("{} {} {}", pct(m.emotion.f1_macro), pct(m.emotion.f1_micro), pct(m.emotion.accuracy))
        }
        TableKind::Tasks => format!(
            "{} {} {} {} {}",
            pct(m.emotion.f1_macro),
            pct(m.emotion.accuracy),
            pct_or_dash(m.wer),
            pct_or_dash(m.gender.map(|g| g.accuracy)),
            pct_or_dash(m.speaker.map(|s| s.accuracy)),
        ),
    }
}

/// Aligned plain-text table of the per-config medians, in percent.
pub fn render_table(table: &AblationTable) -> String {
    let header = match table.kind {
        TableKind::Components | TableKind::Fusion => "F1-Ma F1-Mi   Acc",
        TableKind::Tasks => "F1-Ma   Acc   WER  GAcc  SAcc",
    };
    let title = match table.kind {
        TableKind::Components => "approach",
        TableKind::Tasks => "tasks",
        TableKind::Fusion => "features",
    };
    let width = table
        .rows
        .iter()
        .map(|r| r.name.len())
        .chain([title.len()])
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{title:<width$} {header}");
    for row in &table.rows {
        let _ = writeln!(out, "{:<width$} {}", row.name, render_row(table.kind, &row.median));
    }
    let seeds: Vec<String> = table.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(out, "median over seeds {}", seeds.join(","));
    out
}
