//! Paired experiments on one corpus and one set of frozen modules.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Result};
use mbcap_core::captioner::{CaptionExample, MappingNetwork, TrainMode};
use mbcap_core::corpus::{style_id, stylize, Corpus, Split};
use mbcap_core::metrics::{MetricReport, Prediction, Reference};
use mbcap_core::numerics::TrainLog;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{BridgeMode, RunConfig};
use crate::pipeline::{self, AudioInput, CaptionerSpec, Frozen};

pub const EXPERIMENTS: [&str; 3] = ["compare-modes", "augmented-text", "style"];
pub const DEFAULT_STDS: [f64; 8] = [0.0, 0.005, 0.01, 0.015, 0.05, 0.1, 0.5, 1.0];
pub const STYLE: &str = "humor";

/// One trained captioner and its held-out evaluation.
pub struct Outcome {
    pub mapper: MappingNetwork,
    pub log: TrainLog,
    pub predictions: Vec<Prediction>,
    pub report: MetricReport,
}

impl Outcome {
    pub fn mapper_hash(&self) -> String {
        checkpoint::fingerprint(&self.mapper.params)
    }
}

pub struct Session {
    pub cfg: RunConfig,
    pub corpus: Corpus,
    pub frozen: Frozen,
    /// Gap estimate from `cfg.gap_samples` held-in pairs.
    pub eps_hat: f64,
    pub test_inputs: Vec<AudioInput>,
    pub test_refs: Vec<Reference>,
    baseline: OnceCell<Outcome>,
}

impl Session {
    /// Generates the corpus and trains or loads the frozen modules.
    pub fn prepare(cfg: &RunConfig, cache: Option<&Path>) -> Result<Self> {
        let corpus = pipeline::generate(cfg)?;
        let mut frozen = pipeline::frozen_modules(cfg, &corpus, cache)?;
        if cfg.bridge.uses_adapter() {
            frozen.adapter = Some(pipeline::fit_adapter(cfg, &frozen.encoder, &corpus)?.0);
        }
        let eps_hat = pipeline::estimate_gap(cfg, &frozen.encoder, &corpus)?;
        let test = corpus.split(Split::Test);
        let test_inputs = pipeline::audio_inputs(&test)?;
        let test_refs = pipeline::references(test.iter().map(|r| (r.id.as_str(), r.caption.as_str())));
        Ok(Self { cfg: cfg.clone(), corpus, frozen, eps_hat, test_inputs, test_refs, baseline: OnceCell::new() })
    }

    /// Noise std for the configured bridge: explicit, else the estimate.
    pub fn noise_std(&self) -> f64 {
        self.cfg.noise_std.unwrap_or(self.eps_hat)
    }

    pub fn text_examples(&self) -> Result<Vec<CaptionExample>> {
        let train = self.corpus.split(Split::Train);
        pipeline::text_examples(train.iter().map(|r| r.caption.as_str()), &pipeline::vocabulary())
    }

    pub fn audio_examples(&self) -> Result<Vec<CaptionExample>> {
        pipeline::audio_examples(&self.corpus.split(Split::Train), &pipeline::vocabulary())
    }

    /// Trains a captioner on `data` and scores it on the test audio against `refs`.
    pub fn run(&self, spec: CaptionerSpec, data: &[CaptionExample], refs: &[Reference]) -> Result<Outcome> {
        let (mapper, log) = pipeline::train_mapper(&self.cfg, &self.frozen, spec, data)?;
        let predictions = pipeline::predict(&self.cfg, &mapper, &self.frozen, &self.test_inputs)?;
        let report = pipeline::score(&predictions, refs)?;
        Ok(Outcome { mapper, log, predictions, report })
    }

    pub fn text_only_spec(&self) -> CaptionerSpec {
        CaptionerSpec { mode: TrainMode::TextOnly, bridge: self.cfg.bridge, noise_std: self.noise_std() }
    }

    /// Text-only captioner with the configured bridge on the plain train captions.
    pub fn baseline(&self) -> Result<&Outcome> {
        if let Some(o) = self.baseline.get() {
            return Ok(o);
        }
        let o = self.run(self.text_only_spec(), &self.text_examples()?, &self.test_refs)?;
        Ok(self.baseline.get_or_init(|| o))
    }

    pub fn audio_text(&self) -> Result<Outcome> {
        let spec = CaptionerSpec { mode: TrainMode::AudioText, bridge: BridgeMode::None, noise_std: 0.0 };
        self.run(spec, &self.audio_examples()?, &self.test_refs)
    }

    /// Scores the baseline mapper with prefixes permuted across test inputs.
    pub fn shuffled_baseline(&self) -> Result<MetricReport> {
        let b = self.baseline()?;
        let preds = pipeline::predict_shuffled(&self.cfg, &b.mapper, &self.frozen, &self.test_inputs)?;
        pipeline::score(&preds, &self.test_refs)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Condition {
    pub name: String,
    pub metrics: MetricReport,
}

/// Conditions compared on a shared test split, plus derived quantities.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub conditions: Vec<Condition>,
    pub values: BTreeMap<String, f64>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    /// One row per metric, one column per condition.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric");
        for c in &self.conditions {
            s.push(',');
            s.push_str(&c.name);
        }
        s.push('\n');
        for (i, (m, _)) in MetricReport::entries(&self.conditions[0].metrics).iter().enumerate() {
            s.push_str(m);
            for c in &self.conditions {
                s.push_str(&format!(",{}", c.metrics.entries()[i].1));
            }
            s.push('\n');
        }
        s
    }

    pub fn metric(&self, condition: &str, metric: &str) -> Option<f64> {
        self.conditions.iter().find(|c| c.name == condition)?.metrics.get(metric)
    }
}

fn condition(name: &str, metrics: &MetricReport) -> Condition {
    Condition { name: name.into(), metrics: metrics.clone() }
}

pub fn compare_modes(s: &Session) -> Result<ExperimentReport> {
    let text = s.baseline()?;
    let audio = s.audio_text()?;
    let shuffled = s.shuffled_baseline()?;
    let (t, a) = (text.report.cider_d, audio.report.cider_d);
    let values = BTreeMap::from([
        ("noise_std".into(), s.noise_std()),
        ("cider_d_abs_diff".into(), (t - a).abs()),
        ("cider_d_ratio".into(), if a > 0.0 { t / a } else { f64::INFINITY }),
        ("shuffled_cider_d".into(), shuffled.cider_d),
    ]);
    Ok(ExperimentReport {
        experiment: "compare-modes".into(),
        conditions: vec![condition("text-only", &text.report), condition("audio-text", &audio.report)],
        values,
    })
}

pub fn augmented_text(s: &Session) -> Result<ExperimentReport> {
    let plain = s.baseline()?;
    let mut data = s.text_examples()?;
    let extra = pipeline::paraphrase_examples(&s.corpus, &pipeline::vocabulary(), s.cfg.seed)?;
    let n_extra = extra.len();
    data.extend(extra);
    let augmented = s.run(s.text_only_spec(), &data, &s.test_refs)?;
    Ok(ExperimentReport {
        experiment: "augmented-text".into(),
        conditions: vec![condition("text-only", &plain.report), condition("text-only+extra", &augmented.report)],
        values: BTreeMap::from([("extra_captions".into(), n_extra as f64), ("noise_std".into(), s.noise_std())]),
    })
}

pub fn style(s: &Session) -> Result<ExperimentReport> {
    let sid = style_id(STYLE).expect("registered style");
    let styled_refs: Vec<Reference> = s
        .test_refs
        .iter()
        .map(|r| Ok(Reference { id: r.id.clone(), captions: vec![stylize(&r.captions[0], sid)?] }))
        .collect::<Result<_>>()?;
    let plain = s.baseline()?;
    let plain_on_styled = pipeline::score(&plain.predictions, &styled_refs)?;
    let styled_train: Vec<String> = s.corpus.split(Split::Train).iter().map(|r| stylize(&r.caption, sid)).collect::<Result<_, _>>()?;
    let data = pipeline::text_examples(styled_train.iter().map(String::as_str), &pipeline::vocabulary())?;
    let styled = s.run(s.text_only_spec(), &data, &styled_refs)?;
    Ok(ExperimentReport {
        experiment: "style".into(),
        conditions: vec![condition("plain-trained", &plain_on_styled), condition(&format!("{STYLE}-trained"), &styled.report)],
        values: BTreeMap::from([("noise_std".into(), s.noise_std())]),
    })
}

pub fn run_experiment(s: &Session, name: &str) -> Result<ExperimentReport> {
    match name {
        "compare-modes" => compare_modes(s),
        "augmented-text" => augmented_text(s),
        "style" => style(s),
        _ => bail!("unknown experiment `{name}` (valid: {})", EXPERIMENTS.join(", ")),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub std: f64,
    pub metrics: MetricReport,
    pub final_loss: f64,
}

/// One text-only noise captioner per std, sorted by std.
pub fn sweep_noise(s: &Session, stds: &[f64]) -> Result<Vec<SweepRow>> {
    let data = s.text_examples()?;
    let mut stds = stds.to_vec();
    stds.sort_by(f64::total_cmp);
    stds.iter()
        .map(|&std| {
            let spec = CaptionerSpec { mode: TrainMode::TextOnly, bridge: BridgeMode::Noise, noise_std: std };
            let o = s.run(spec, &data, &s.test_refs)?;
            Ok(SweepRow { std, metrics: o.report, final_loss: o.log.last_loss().unwrap_or(f64::NAN) })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("std,bleu_1,bleu_2,bleu_3,bleu_4,rouge_l,cider_d\n");
    for r in rows {
        let m = &r.metrics;
        s.push_str(&format!("{},{},{},{},{},{},{}\n", r.std, m.bleu_1, m.bleu_2, m.bleu_3, m.bleu_4, m.rouge_l, m.cider_d));
    }
    s
}

/// Row with the highest CIDEr-D; ties go to the smaller std.
pub fn sweep_best(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter().fold(None, |best: Option<&SweepRow>, r| match best {
        Some(b) if b.metrics.cider_d >= r.metrics.cider_d => Some(b),
        _ => Some(r),
    })
}

pub fn parse_stds(list: &str) -> Result<Vec<f64>> {
    let stds = list
        .split(',')
        .map(|x| {
            let t = x.trim();
            match t.parse::<f64>() {
                Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
                _ => bail!("invalid noise std `{t}` in list"),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if stds.is_empty() {
        bail!("empty std list");
    }
    Ok(stds)
}

pub fn gnuplot_script(csv_name: &str) -> String {
    format!(
        "set datafile separator ','\n\
         set logscale x\n\
         set xlabel 'noise std'\n\
         set ylabel 'CIDEr-D'\n\
         set key off\n\
         plot '{csv_name}' every ::1 using ($1 > 0 ? $1 : 1e-4):7 with linespoints\n"
    )
}
