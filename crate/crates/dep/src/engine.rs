//! The decoding loop: probe, decouple, drift-correct, pick a token.
//!
//! Per step against any [`Model`]: one original forward, M perturbed
//! forwards, optionally two region-ablated forwards for the evidence path,
//! then the drift penalty and a greedy argmax. Every step leaves a
//! serializable [`StepTrace`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core::{
    argmax_token, softmax, AttentionMap, HiddenVector, ImageGrid, LogitVector, Prompt, TokenId,
    Vocab,
};
use crate::decouple::{
    ablate_region, attention_moments, binarize_masks, calibrate_hidden, region_scores,
    sensitivity_vectors, AttentionMoments, ConfidenceCoefficients, MaskConfig, MaskPair,
    SensitivityPair,
};
use crate::drift::{apply_drift_penalty, drift_direction, DriftVector};
use crate::error::{DepError, Result};
use crate::probe::{
    build_perturbation_set, effective_sample_size, Detector, Lexicon, PerturbationSet, ProbeMode,
    ProbeParams, StrategyKind,
};

/// Everything one model forward returns.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ForwardOutput {
    pub logits: LogitVector,
    pub attention: AttentionMap,
    pub hidden: HiddenVector,
}

/// The decoder contract. `forward` must be deterministic for fixed inputs,
/// and `project` applied to the returned hidden state must reproduce the
/// returned logits within 1e-9.
pub trait Model: Sync {
    fn forward(&self, img: &ImageGrid, prompt: &Prompt, prefix: &[TokenId])
        -> Result<ForwardOutput>;

    fn project(&self, hidden: &HiddenVector) -> Result<LogitVector>;

    /// Stop token for the decode loop, when the model has one.
    fn eos_token(&self) -> Option<TokenId> {
        None
    }
}

/// How the probe chooses strategies; parameters live flat in [`DepConfig`].
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    AdaptiveNeff,
    FixedP,
}

/// Full decoding configuration. Flat on purpose: every field maps 1:1 onto a
/// `key = value` config line.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct DepConfig {
    /// Number of perturbation variants per step.
    pub m: usize,
    /// Scheduler threshold on the effective sample size.
    pub delta: f64,
    /// Evidence re-enforcement strength.
    pub alpha: f64,
    /// Suspicious-region suppression strength.
    pub gamma: f64,
    /// Drift penalty strength.
    pub beta: f64,
    /// Confidence levels behind the three radii.
    pub conf_evidence: f64,
    pub conf_attention: f64,
    pub conf_stability: f64,
    /// Top-quantile fractions for the two masks.
    pub evidence_quantile: f64,
    pub suspicious_quantile: f64,
    /// Ablation blur width, in patch units.
    pub sigma_blur: f64,
    pub mode: ScheduleMode,
    /// Adversarial probability when `mode` is `fixed_p`.
    pub fixed_p: f64,
    /// The non-adversarial arm of the fixed-p coin.
    pub fixed_alt: StrategyKind,
    /// The visual-evidence path (moments, masks, ablation, calibration).
    pub enable_ve: bool,
    /// The prior-correction path (drift penalty).
    pub enable_pc: bool,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DepConfig {
    fn default() -> Self {
        DepConfig {
            m: 3,
            delta: 2.0,
            alpha: 0.2,
            gamma: 0.3,
            beta: 2.0,
            conf_evidence: 0.1,
            conf_attention: 0.1,
            conf_stability: 0.1,
            evidence_quantile: 0.20,
            suspicious_quantile: 0.10,
            sigma_blur: 1.0,
            mode: ScheduleMode::AdaptiveNeff,
            fixed_p: 0.5,
            fixed_alt: StrategyKind::AttributeWeaken,
            enable_ve: true,
            enable_pc: true,
            max_len: 8,
            seed: 0,
        }
    }
}

impl DepConfig {
    pub fn validate(&self) -> Result<()> {
        self.probe_params().validate()?;
        self.mask_config().validate()?;
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("beta", self.beta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(DepError::Config(format!(
                    "{name} = {v} must be a non-negative real"
                )));
            }
        }
        for (name, v) in [
            ("conf_evidence", self.conf_evidence),
            ("conf_attention", self.conf_attention),
            ("conf_stability", self.conf_stability),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(DepError::Config(format!("{name} = {v} outside (0, 1)")));
            }
        }
        if !self.sigma_blur.is_finite() || self.sigma_blur <= 0.0 {
            return Err(DepError::Config(format!(
                "sigma_blur = {} must be positive",
                self.sigma_blur
            )));
        }
        if self.max_len < 1 {
            return Err(DepError::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn probe_params(&self) -> ProbeParams {
        ProbeParams {
            m: self.m,
            delta: self.delta,
            mode: match self.mode {
                ScheduleMode::AdaptiveNeff => ProbeMode::AdaptiveNeff,
                ScheduleMode::FixedP => ProbeMode::FixedP {
                    p: self.fixed_p,
                    alt: self.fixed_alt,
                },
            },
        }
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            evidence_quantile: self.evidence_quantile,
            suspicious_quantile: self.suspicious_quantile,
        }
    }
}

pub const STEP_TRACE_SCHEMA: &str = "dep.step-trace.v1";

/// Complete record of one decoding step. Paths skipped by the toggles (or by
/// the degenerate probe floor) hold `None`.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct StepTrace {
    pub schema: String,
    pub step: usize,
    pub prompt: Prompt,
    pub prefix: Vec<TokenId>,
    pub original: ForwardOutput,
    pub neff: f64,
    pub perturbations: PerturbationSet,
    pub variant_logits: Vec<LogitVector>,
    pub variant_attention: Vec<AttentionMap>,
    /// True when every variant fell through to identity; the step then
    /// reduces to the baseline pick.
    pub probe_degenerate: bool,
    pub moments: Option<AttentionMoments>,
    pub masks: Option<MaskPair>,
    pub sensitivity: Option<SensitivityPair>,
    pub calibrated_hidden: Option<HiddenVector>,
    pub drift: Option<DriftVector>,
    pub final_logits: LogitVector,
    pub token: TokenId,
    /// Model forwards consumed by this step.
    pub forwards: u64,
}

/// Writes traces as JSON-lines, one step per line.
pub fn write_traces(path: &Path, traces: &[StepTrace]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for trace in traces {
        serde_json::to_writer(&mut out, trace)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSON-lines trace dump, rejecting unknown schema versions.
pub fn read_traces(path: &Path) -> Result<Vec<StepTrace>> {
    let mut traces = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: StepTrace = serde_json::from_str(&line)?;
        if trace.schema != STEP_TRACE_SCHEMA {
            return Err(DepError::Schema {
                expected: STEP_TRACE_SCHEMA.into(),
                found: trace.schema,
            });
        }
        traces.push(trace);
    }
    Ok(traces)
}

/// A full decode: the generated tokens and one trace per step.
#[derive(Clone, PartialEq, Debug)]
pub struct DecodeOutput {
    pub tokens: Vec<TokenId>,
    pub traces: Vec<StepTrace>,
}

/// Orchestrates the per-step loop against one model, vocab, lexicon, and
/// detector. One instance serves one decode at a time; distinct instances
/// are independent.
pub struct Engine<'a> {
    model: &'a dyn Model,
    vocab: &'a Vocab,
    lexicon: &'a Lexicon,
    detector: &'a dyn Detector,
    cfg: DepConfig,
}

impl<'a> Engine<'a> {
    pub fn new(
        model: &'a dyn Model,
        vocab: &'a Vocab,
        lexicon: &'a Lexicon,
        detector: &'a dyn Detector,
        cfg: DepConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Engine {
            model,
            vocab,
            lexicon,
            detector,
            cfg,
        })
    }

    pub fn cfg(&self) -> &DepConfig {
        &self.cfg
    }

    fn checked_forward(
        &self,
        img: &ImageGrid,
        prompt: &Prompt,
        prefix: &[TokenId],
        step: usize,
    ) -> Result<ForwardOutput> {
        let out = self.model.forward(img, prompt, prefix)?;
        if out.logits.len() != self.vocab.len() {
            return Err(DepError::Contract {
                step,
                detail: format!(
                    "logit length {} does not match vocab {}",
                    out.logits.len(),
                    self.vocab.len()
                ),
            });
        }
        if out.attention.len() != img.patch_count() {
            return Err(DepError::Contract {
                step,
                detail: format!(
                    "attention length {} does not match {} patches",
                    out.attention.len(),
                    img.patch_count()
                ),
            });
        }
        #[cfg(debug_assertions)]
        {
            let projected = self.model.project(&out.hidden)?;
            let err = projected
                .values()
                .iter()
                .zip(out.logits.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if err > 1e-9 {
                return Err(DepError::Contract {
                    step,
                    detail: format!("projection head drifts from forward logits by {err}"),
                });
            }
        }
        Ok(out)
    }

    /// One step of the closed loop. `step` only labels the trace and error
    /// messages.
    pub fn decode_step<R: Rng + ?Sized>(
        &self,
        img: &ImageGrid,
        x: &Prompt,
        prefix: &[TokenId],
        step: usize,
        rng: &mut R,
    ) -> Result<(TokenId, StepTrace)> {
        let original = self.checked_forward(img, x, prefix, step)?;
        let p = softmax(&original.logits);
        let neff = effective_sample_size(&p);

        let set = build_perturbation_set(
            x,
            img,
            &p,
            &self.cfg.probe_params(),
            self.vocab,
            self.lexicon,
            self.detector,
            rng,
        )?;
        let mut variant_logits = Vec::with_capacity(set.m());
        let mut variant_attention = Vec::with_capacity(set.m());
        for variant in set.variants() {
            let out = self.checked_forward(img, variant, prefix, step)?;
            variant_logits.push(out.logits);
            variant_attention.push(out.attention);
        }
        let mut forwards = 1 + set.m() as u64;
        let probe_degenerate = set.all_identity();

        let mut moments_out = None;
        let mut masks_out = None;
        let mut sensitivity_out = None;
        let mut calibrated_out = None;
        // A degenerate probe set carries no perturbation signal: the mean
        // attention alone would still binarize into a nonempty evidence mask,
        // so the step must bypass the whole path to stay at the baseline.
        let z_star = if self.cfg.enable_ve && !probe_degenerate {
            let moments = attention_moments(&variant_attention)?;
            let coeff = ConfidenceCoefficients::from_levels(
                self.cfg.m,
                self.cfg.conf_evidence,
                self.cfg.conf_attention,
                self.cfg.conf_stability,
            )?;
            let scores = region_scores(&moments, &coeff);
            let masks = binarize_masks(&scores, &self.cfg.mask_config())?;
            // An empty mask skips its ablated forward; reusing the original
            // hidden state makes that sensitivity exactly zero.
            let h_no_evidence = if masks.evidence_empty() {
                original.hidden.clone()
            } else {
                forwards += 1;
                let ablated = ablate_region(img, masks.evidence(), self.cfg.sigma_blur)?;
                self.checked_forward(&ablated, x, prefix, step)?.hidden
            };
            let h_no_suspicious = if masks.suspicious_empty() {
                original.hidden.clone()
            } else {
                forwards += 1;
                let ablated = ablate_region(img, masks.suspicious(), self.cfg.sigma_blur)?;
                self.checked_forward(&ablated, x, prefix, step)?.hidden
            };
            let sens = sensitivity_vectors(&original.hidden, &h_no_evidence, &h_no_suspicious)?;
            let h_star = calibrate_hidden(&original.hidden, &sens, self.cfg.alpha, self.cfg.gamma);
            let z_star = self.model.project(&h_star)?;
            if z_star.len() != self.vocab.len() {
                return Err(DepError::Contract {
                    step,
                    detail: format!(
                        "projected length {} does not match vocab {}",
                        z_star.len(),
                        self.vocab.len()
                    ),
                });
            }
            moments_out = Some(moments);
            masks_out = Some(masks);
            sensitivity_out = Some(sens);
            calibrated_out = Some(h_star);
            z_star
        } else {
            original.logits.clone()
        };

        let (final_logits, drift_out) = if self.cfg.enable_pc {
            let drift =
                drift_direction(&variant_logits, &original.logits)?.with_beta(self.cfg.beta)?;
            let z = apply_drift_penalty(&z_star, &drift, self.cfg.beta)?;
            (z, Some(drift))
        } else {
            (z_star, None)
        };

        let token = argmax_token(&final_logits);
        let trace = StepTrace {
            schema: STEP_TRACE_SCHEMA.into(),
            step,
            prompt: x.clone(),
            prefix: prefix.to_vec(),
            original,
            neff,
            perturbations: set,
            variant_logits,
            variant_attention,
            probe_degenerate,
            moments: moments_out,
            masks: masks_out,
            sensitivity: sensitivity_out,
            calibrated_hidden: calibrated_out,
            drift: drift_out,
            final_logits,
            token,
            forwards,
        };
        Ok((token, trace))
    }

    /// Greedy decode with the full loop, until the model's stop token or
    /// `max_len`.
    pub fn decode<R: Rng + ?Sized>(
        &self,
        img: &ImageGrid,
        x: &Prompt,
        rng: &mut R,
    ) -> Result<DecodeOutput> {
        let mut tokens = Vec::new();
        let mut traces = Vec::new();
        for step in 0..self.cfg.max_len {
            let (token, trace) = self.decode_step(img, x, &tokens, step, rng)?;
            tokens.push(token);
            traces.push(trace);
            if self.model.eos_token() == Some(token) {
                break;
            }
        }
        Ok(DecodeOutput { tokens, traces })
    }
}

/// Plain greedy decoding; the comparison anchor for every experiment.
pub fn baseline_decode(
    model: &dyn Model,
    img: &ImageGrid,
    x: &Prompt,
    max_len: usize,
) -> Result<Vec<TokenId>> {
    if max_len < 1 {
        return Err(DepError::invalid("decode", "max_len must be at least 1"));
    }
    let mut tokens = Vec::new();
    for _ in 0..max_len {
        let out = model.forward(img, x, &tokens)?;
        let token = argmax_token(&out.logits);
        tokens.push(token);
        if model.eos_token() == Some(token) {
            break;
        }
    }
    Ok(tokens)
}

/// Wraps a model and counts forwards; projections are not forwards.
pub struct CountingModel<'a> {
    inner: &'a dyn Model,
    forwards: AtomicU64,
}

impl<'a> CountingModel<'a> {
    pub fn new(inner: &'a dyn Model) -> Self {
        CountingModel {
            inner,
            forwards: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }
}

impl Model for CountingModel<'_> {
    fn forward(
        &self,
        img: &ImageGrid,
        prompt: &Prompt,
        prefix: &[TokenId],
    ) -> Result<ForwardOutput> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        self.inner.forward(img, prompt, prefix)
    }

    fn project(&self, hidden: &HiddenVector) -> Result<LogitVector> {
        self.inner.project(hidden)
    }

    fn eos_token(&self) -> Option<TokenId> {
        self.inner.eos_token()
    }
}
