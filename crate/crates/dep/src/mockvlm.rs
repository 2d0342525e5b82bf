//! A deterministic toy vision-language model with an injectable language
//! prior, plus the ground-truth oracles used to verify the decoder end to
//! end.
//!
//! The logits decompose exactly as
//!
//! ```text
//! logits = evidence_gain · E(image, prompt) + bias · P(prompt) + C
//! ```
//!
//! where E reads the image through an attention pattern keyed to the queried
//! noun, P is an image-independent prior over the prompt's nouns, and C is
//! fixed structure (answer base, stop-token base). The decomposition is
//! exposed to tests, which makes the drift-correction arithmetic provable
//! rather than merely plausible.
//!
//! The generated lexicon has three noun groups chosen so the benchmark's
//! adversarial machinery has analytically predictable behavior:
//!
//! * anchors: high frequency, high prior; linked weakly to each other,
//! * shadows: low frequency but strongly linked to anchors, so their prior
//!   is mid-range and their strongest partners are anchors,
//! * neutrals: mid frequency, weak links.
//!
//! An image containing an anchor makes its absent shadows the top
//! adversarial negatives; querying a shadow makes the adversarial
//! substitution swap in an anchor, whose strictly higher prior is what the
//! drift penalty needs to see.

pub mod reference;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core::{
    AttentionMap, HiddenVector, ImageGrid, LogitVector, PosTag, Prompt, TokenId, Vocab,
};
use crate::engine::{DepConfig, ForwardOutput, Model, ScheduleMode};
use crate::error::{DepError, Result};
use crate::probe::{Detector, Lexicon};
use crate::stablehash::{derive_seed, fnv1a64};

const OTHER_WORDS: [&str; 10] = [
    "is", "there", "a", "the", "near", "with", "and", "of", "to", "it",
];

const OBJECT_WORDS: [&str; 24] = [
    "cup", "table", "dog", "cat", "person", "car", "tree", "chair", "book", "bottle", "plate",
    "fork", "knife", "spoon", "bowl", "lamp", "phone", "bag", "shoe", "hat", "bird", "fish",
    "horse", "clock",
];

const ADJ_WORDS: [&str; 12] = [
    "red", "blue", "green", "small", "large", "old", "new", "bright", "dark", "round", "wooden",
    "metal",
];

const ANCHOR_COUNT: usize = 8;
const SHADOW_COUNT: usize = 8;

/// Frequency bands per noun group, on the raw 0..10 scale.
const ANCHOR_FREQ: (f64, f64) = (9.0, 10.0);
const SHADOW_FREQ: (f64, f64) = (1.5, 2.0);
const NEUTRAL_FREQ: (f64, f64) = (3.0, 6.0);

/// Co-occurrence strength bands. Shadow→anchor links must dominate
/// everything else so adversarial negative selection lands on shadows.
const SHADOW_STRENGTH: (f64, f64) = (0.80, 0.85);
const ANCHOR_STRENGTH: (f64, f64) = (0.70, 0.78);
const NEUTRAL_STRENGTH: (f64, f64) = (0.05, 0.30);

const SHADOW_PARTNERS: usize = 4;
const ANCHOR_PARTNERS: usize = 2;
const NEUTRAL_PARTNERS: usize = 2;
const WEAKEN_ALTERNATIVES: usize = 3;

/// Controls for the generated language side: lexicon tables and the noun
/// prior table.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct LanguageParams {
    pub seed: u64,
    /// Weight of normalized corpus frequency in the prior strength.
    pub prior_freq_weight: f64,
    /// Weight of the strongest co-occurrence partner in the prior strength.
    pub prior_cooc_weight: f64,
}

impl Default for LanguageParams {
    fn default() -> Self {
        LanguageParams {
            seed: 7,
            prior_freq_weight: 0.4,
            prior_cooc_weight: 0.6,
        }
    }
}

impl LanguageParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prior_freq_weight", self.prior_freq_weight),
            ("prior_cooc_weight", self.prior_cooc_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(DepError::invalid(
                    "language params",
                    format!("{name} = {v} must be a non-negative real"),
                ));
            }
        }
        Ok(())
    }
}

/// Vocabulary, lexicon, per-noun prior strengths, and per-noun visual
/// signatures, all derived deterministically from [`LanguageParams`].
#[derive(Clone, Debug)]
pub struct MockLanguage {
    params: LanguageParams,
    vocab: Vocab,
    lexicon: Lexicon,
    prior: BTreeMap<TokenId, f64>,
    signatures: BTreeMap<TokenId, Vec<f64>>,
    objects: Vec<TokenId>,
    adjectives: Vec<TokenId>,
    yes: TokenId,
    no: TokenId,
    eos: TokenId,
}

fn sample_in<R: Rng + ?Sized>(rng: &mut R, band: (f64, f64)) -> f64 {
    band.0 + rng.random::<f64>() * (band.1 - band.0)
}

/// In-place Fisher-Yates; one `random_range` per position, highest first.
fn shuffle<T, R: Rng + ?Sized>(values: &mut [T], rng: &mut R) {
    for i in (1..values.len()).rev() {
        let j = rng.random_range(0..=i);
        values.swap(i, j);
    }
}

/// Picks `count` distinct elements of `pool` (uniform order statistics).
fn sample_distinct<R: Rng + ?Sized>(pool: &[TokenId], count: usize, rng: &mut R) -> Vec<TokenId> {
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    shuffle(&mut indices, rng);
    indices.truncate(count);
    indices.into_iter().map(|i| pool[i]).collect()
}

impl MockLanguage {
    pub fn generate(params: LanguageParams) -> Result<Self> {
        params.validate()?;
        let mut entries: Vec<(String, PosTag)> = Vec::new();
        for w in OTHER_WORDS {
            entries.push((w.into(), PosTag::Other));
        }
        for w in OBJECT_WORDS {
            entries.push((w.into(), PosTag::Noun));
        }
        for w in ADJ_WORDS {
            entries.push((w.into(), PosTag::Adj));
        }
        entries.push(("yes".into(), PosTag::Other));
        entries.push(("no".into(), PosTag::Other));
        entries.push(("</s>".into(), PosTag::Other));
        let vocab = Vocab::new(entries)?;

        let objects: Vec<TokenId> = vocab.ids_tagged(PosTag::Noun).collect();
        let adjectives: Vec<TokenId> = vocab.ids_tagged(PosTag::Adj).collect();
        let yes = vocab.id("yes").expect("fixed vocab");
        let no = vocab.id("no").expect("fixed vocab");
        let eos = vocab.id("</s>").expect("fixed vocab");

        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

        // Draw order below is part of the determinism contract: groups,
        // then frequencies, then co-occurrence lists, then weaken tables.
        let mut shuffled = objects.clone();
        shuffle(&mut shuffled, &mut rng);
        let anchors: Vec<TokenId> = shuffled[..ANCHOR_COUNT].to_vec();
        let shadows: Vec<TokenId> = shuffled[ANCHOR_COUNT..ANCHOR_COUNT + SHADOW_COUNT].to_vec();
        let neutrals: Vec<TokenId> = shuffled[ANCHOR_COUNT + SHADOW_COUNT..].to_vec();

        let mut freq = BTreeMap::new();
        for group in [(&anchors, ANCHOR_FREQ), (&shadows, SHADOW_FREQ), (&neutrals, NEUTRAL_FREQ)]
        {
            for id in group.0 {
                freq.insert(*id, sample_in(&mut rng, group.1));
            }
        }

        let mut cooc: BTreeMap<TokenId, Vec<(TokenId, f64)>> = BTreeMap::new();
        for shadow in &shadows {
            let partners = sample_distinct(&anchors, SHADOW_PARTNERS, &mut rng);
            let list = partners
                .into_iter()
                .map(|p| (p, sample_in(&mut rng, SHADOW_STRENGTH)))
                .collect();
            cooc.insert(*shadow, sorted_partners(list));
        }
        for anchor in &anchors {
            let pool: Vec<TokenId> = anchors.iter().copied().filter(|a| a != anchor).collect();
            let partners = sample_distinct(&pool, ANCHOR_PARTNERS, &mut rng);
            let list = partners
                .into_iter()
                .map(|p| (p, sample_in(&mut rng, ANCHOR_STRENGTH)))
                .collect();
            cooc.insert(*anchor, sorted_partners(list));
        }
        for neutral in &neutrals {
            let pool: Vec<TokenId> = objects.iter().copied().filter(|o| o != neutral).collect();
            let partners = sample_distinct(&pool, NEUTRAL_PARTNERS, &mut rng);
            let list = partners
                .into_iter()
                .map(|p| (p, sample_in(&mut rng, NEUTRAL_STRENGTH)))
                .collect();
            cooc.insert(*neutral, sorted_partners(list));
        }

        let mut weaken = BTreeMap::new();
        for adj in &adjectives {
            let pool: Vec<TokenId> = adjectives.iter().copied().filter(|a| a != adj).collect();
            weaken.insert(*adj, sample_distinct(&pool, WEAKEN_ALTERNATIVES, &mut rng));
        }

        let lexicon = Lexicon::new(&vocab, weaken, freq, cooc)?;
        let prior = derive_prior(&lexicon, &objects, &params);
        let signatures = one_hot_signatures(&objects);

        Ok(MockLanguage {
            params,
            vocab,
            lexicon,
            prior,
            signatures,
            objects,
            adjectives,
            yes,
            no,
            eos,
        })
    }

    /// Same language with the lexicon and prior table replaced; used by
    /// constructed fixtures that need hand-picked prior arithmetic. The
    /// lexicon must already be valid for this vocabulary.
    pub fn with_tables(&self, lexicon: Lexicon, prior: BTreeMap<TokenId, f64>) -> Result<Self> {
        for (id, rho) in &prior {
            if !self.vocab.contains_id(*id) || self.vocab.tag(*id) != PosTag::Noun {
                return Err(DepError::invalid(
                    "prior table",
                    format!("key {id} is not a vocabulary noun"),
                ));
            }
            if !rho.is_finite() || *rho < 0.0 {
                return Err(DepError::invalid(
                    "prior table",
                    format!("strength {rho} must be a non-negative real"),
                ));
            }
        }
        let mut out = self.clone();
        out.lexicon = lexicon;
        out.prior = prior;
        Ok(out)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn params(&self) -> &LanguageParams {
        &self.params
    }

    pub fn yes(&self) -> TokenId {
        self.yes
    }

    pub fn no(&self) -> TokenId {
        self.no
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    /// Object nouns in token-id order.
    pub fn objects(&self) -> &[TokenId] {
        &self.objects
    }

    pub fn adjectives(&self) -> &[TokenId] {
        &self.adjectives
    }

    /// Signature feature dimension (= number of object nouns).
    pub fn d_img(&self) -> usize {
        self.objects.len()
    }

    /// Prior strength ρ of a noun; nouns outside the table carry none.
    pub fn prior_strength(&self, id: TokenId) -> f64 {
        self.prior.get(&id).copied().unwrap_or(0.0)
    }

    pub fn signature(&self, id: TokenId) -> Option<&[f64]> {
        self.signatures.get(&id).map(Vec::as_slice)
    }

    /// Sum of prior strengths over the prompt's noun positions.
    pub fn prior_sum(&self, prompt: &Prompt) -> f64 {
        prompt
            .ids()
            .iter()
            .filter(|id| self.vocab.tag(**id) == PosTag::Noun)
            .map(|id| self.prior_strength(*id))
            .sum()
    }

    /// The queried object of a prompt: its first noun.
    pub fn queried_object(&self, prompt: &Prompt) -> Option<TokenId> {
        prompt
            .first_tagged(&self.vocab, PosTag::Noun)
            .map(|(_, id)| id)
    }
}

fn sorted_partners(mut list: Vec<(TokenId, f64)>) -> Vec<(TokenId, f64)> {
    list.sort_by(|(aid, astr), (bid, bstr)| bstr.total_cmp(astr).then(aid.cmp(bid)));
    list
}

/// ρ(noun) = c_f · freq/10 + c_c · strongest-partner strength. Anchors end
/// high, shadows mid, neutrals low; the benchmark leans on that ordering.
fn derive_prior(
    lexicon: &Lexicon,
    objects: &[TokenId],
    params: &LanguageParams,
) -> BTreeMap<TokenId, f64> {
    let mut prior = BTreeMap::new();
    for id in objects {
        let freq_norm = lexicon.frequency(*id).unwrap_or(0.0) / 10.0;
        let top = lexicon.partners(*id).first().map(|(_, s)| *s).unwrap_or(0.0);
        prior.insert(
            *id,
            params.prior_freq_weight * freq_norm + params.prior_cooc_weight * top,
        );
    }
    prior
}

fn one_hot_signatures(objects: &[TokenId]) -> BTreeMap<TokenId, Vec<f64>> {
    let d = objects.len();
    objects
        .iter()
        .enumerate()
        .map(|(k, id)| {
            let mut sig = vec![0.0; d];
            sig[k] = 1.0;
            (*id, sig)
        })
        .collect()
}

/// Synthetic scene parameters.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct WorldParams {
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_objects: usize,
    /// Per-component uniform feature noise amplitude.
    pub feature_noise: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            grid_h: 5,
            grid_w: 5,
            n_objects: 5,
            feature_noise: 0.1,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(DepError::invalid("world params", "grid must be non-empty"));
        }
        if !self.feature_noise.is_finite() || self.feature_noise < 0.0 {
            return Err(DepError::invalid(
                "world params",
                format!("feature_noise {} must be a non-negative real", self.feature_noise),
            ));
        }
        Ok(())
    }
}

/// A placed scene: distinct object nouns at distinct patches. The rendered
/// image is a pure function of (language, params, seed).
#[derive(Clone, PartialEq, Debug)]
pub struct MockWorld {
    params: WorldParams,
    seed: u64,
    placements: BTreeMap<usize, TokenId>,
}

pub const WORLD_SCHEMA: &str = "dep.world.v1";

/// Serializable recipe for a world; seed plus params regenerate everything.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct WorldSpec {
    pub schema: String,
    pub seed: u64,
    pub params: WorldParams,
}

impl MockWorld {
    pub fn generate(lang: &MockLanguage, params: WorldParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let patches = params.grid_h * params.grid_w;
        if params.n_objects > patches {
            return Err(DepError::invalid(
                "world",
                format!("{} objects cannot fill {patches} patches", params.n_objects),
            ));
        }
        if params.n_objects > lang.objects().len() {
            return Err(DepError::invalid(
                "world",
                format!(
                    "{} objects requested from a vocabulary of {}",
                    params.n_objects,
                    lang.objects().len()
                ),
            ));
        }
        // Sub-seed 0 places objects; sub-seed 1 is reserved for rendering.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
        let chosen = sample_distinct(lang.objects(), params.n_objects, &mut rng);
        let mut patch_ids: Vec<usize> = (0..patches).collect();
        shuffle(&mut patch_ids, &mut rng);
        let placements = patch_ids.into_iter().zip(chosen).collect();
        Ok(MockWorld {
            params,
            seed,
            placements,
        })
    }

    pub fn params(&self) -> &WorldParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Patch index → object noun.
    pub fn placements(&self) -> &BTreeMap<usize, TokenId> {
        &self.placements
    }

    pub fn contains(&self, object: TokenId) -> bool {
        self.placements.values().any(|id| *id == object)
    }

    /// Nouns present in the scene, in token-id order.
    pub fn present_objects(&self) -> Vec<TokenId> {
        let mut present: Vec<TokenId> = self.placements.values().copied().collect();
        present.sort();
        present.dedup();
        present
    }

    /// Renders the feature grid: per-patch uniform noise, plus the object's
    /// signature at each placed patch, labels carrying the object words.
    pub fn render(&self, lang: &MockLanguage) -> Result<ImageGrid> {
        let (h, w) = (self.params.grid_h, self.params.grid_w);
        let d = lang.d_img();
        let patches = h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 1));
        let mut features = vec![0.0; patches * d];
        for value in features.iter_mut() {
            *value = (rng.random::<f64>() * 2.0 - 1.0) * self.params.feature_noise;
        }
        let mut labels = vec![None; patches];
        for (patch, object) in &self.placements {
            let sig = lang
                .signature(*object)
                .expect("placements reference object nouns");
            for (c, s) in sig.iter().enumerate() {
                features[patch * d + c] += s;
            }
            labels[*patch] = Some(lang.vocab().token(*object).to_string());
        }
        ImageGrid::new(h, w, d, features, labels)
    }

    /// Ground truth for an object-existence question: yes iff the prompt's
    /// first noun is placed. Prompts with no noun are rejected.
    pub fn oracle_answer(&self, lang: &MockLanguage, question: &Prompt) -> Result<bool> {
        let object = lang.queried_object(question).ok_or_else(|| {
            DepError::invalid("oracle", format!("no object noun in {:?}", question.surface()))
        })?;
        Ok(self.contains(object))
    }

    pub fn spec(&self) -> WorldSpec {
        WorldSpec {
            schema: WORLD_SCHEMA.into(),
            seed: self.seed,
            params: self.params,
        }
    }

    pub fn from_spec(lang: &MockLanguage, spec: &WorldSpec) -> Result<Self> {
        if spec.schema != WORLD_SCHEMA {
            return Err(DepError::Schema {
                expected: WORLD_SCHEMA.into(),
                found: spec.schema.clone(),
            });
        }
        MockWorld::generate(lang, spec.params, spec.seed)
    }
}

pub fn save_world_spec(path: &Path, spec: &WorldSpec) -> Result<()> {
    let out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(out, spec)?;
    Ok(())
}

pub fn load_world_spec(path: &Path) -> Result<WorldSpec> {
    let spec: WorldSpec = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if spec.schema != WORLD_SCHEMA {
        return Err(DepError::Schema {
            expected: WORLD_SCHEMA.into(),
            found: spec.schema,
        });
    }
    Ok(spec)
}

/// Presence oracle backed by rendered patch labels; exact by construction.
pub struct LabelDetector<'a> {
    vocab: &'a Vocab,
}

impl<'a> LabelDetector<'a> {
    pub fn new(vocab: &'a Vocab) -> Self {
        LabelDetector { vocab }
    }
}

impl Detector for LabelDetector<'_> {
    fn contains(&self, img: &ImageGrid, word: TokenId) -> bool {
        if !self.vocab.contains_id(word) {
            return false;
        }
        let token = self.vocab.token(word);
        img.labels()
            .iter()
            .any(|label| label.as_deref() == Some(token))
    }
}

/// Decoder-side parameters of the mock model.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct VlmParams {
    /// Language-prior strength b; zero disables the injected bias.
    pub bias: f64,
    /// Evidence gain g_v.
    pub evidence_gain: f64,
    /// Attention sharpness over patch match scores.
    pub attn_sharpness: f64,
    /// Amplitude of the surface-form-keyed attention perturbation; this is
    /// what makes different phrasings drift the visual grounding.
    pub surface_noise: f64,
    /// Evidence score counted as "object present" when above this.
    pub detect_threshold: f64,
    /// Base logit shared by the yes and no rows; raises answer mass above
    /// the tail so the scheduler sees a meaningful effective sample size.
    pub answer_base: f64,
    /// Stop-token base logit while answering.
    pub eos_base: f64,
    /// Stop-token boost once an answer token exists.
    pub eos_push: f64,
    /// Magnitude of the hash-signed projection entries on filler columns.
    pub filler_scale: f64,
    pub d_hidden: usize,
    /// Seeds the filler sign pattern of the projection matrix.
    pub seed: u64,
}

impl Default for VlmParams {
    fn default() -> Self {
        VlmParams {
            bias: 0.0,
            evidence_gain: 1.0,
            attn_sharpness: 12.0,
            surface_noise: 1.0,
            detect_threshold: 0.5,
            answer_base: 6.0,
            eos_base: -4.0,
            eos_push: 20.0,
            filler_scale: 0.05,
            d_hidden: 16,
            seed: 11,
        }
    }
}

impl VlmParams {
    pub fn validate(&self) -> Result<()> {
        if !self.bias.is_finite() || self.bias < 0.0 {
            return Err(DepError::invalid(
                "vlm params",
                format!("bias {} must be a non-negative real", self.bias),
            ));
        }
        if !self.evidence_gain.is_finite() || self.evidence_gain <= 0.0 {
            return Err(DepError::invalid(
                "vlm params",
                format!("evidence_gain {} must be positive", self.evidence_gain),
            ));
        }
        for (name, v) in [
            ("attn_sharpness", self.attn_sharpness),
            ("surface_noise", self.surface_noise),
            ("filler_scale", self.filler_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(DepError::invalid(
                    "vlm params",
                    format!("{name} = {v} must be a non-negative real"),
                ));
            }
        }
        for (name, v) in [
            ("detect_threshold", self.detect_threshold),
            ("answer_base", self.answer_base),
            ("eos_base", self.eos_base),
        ] {
            if !v.is_finite() {
                return Err(DepError::invalid(
                    "vlm params",
                    format!("{name} = {v} must be finite"),
                ));
            }
        }
        if !self.eos_push.is_finite() || self.eos_push <= 0.0 {
            return Err(DepError::invalid(
                "vlm params",
                format!("eos_push {} must be positive", self.eos_push),
            ));
        }
        if self.d_hidden < 4 {
            return Err(DepError::invalid(
                "vlm params",
                "d_hidden must be at least 4 (evidence, prior, stop, base axes)",
            ));
        }
        Ok(())
    }
}

/// The additive pieces of one forward's logits, each a full vocabulary
/// vector: `logits ≈ evidence + prior + constant` within 1e-12.
#[derive(Clone, PartialEq, Debug)]
pub struct Decomposition {
    pub evidence: Vec<f64>,
    pub prior: Vec<f64>,
    pub constant: Vec<f64>,
    /// The raw evidence score s of the queried object, before gain and
    /// threshold.
    pub evidence_scalar: f64,
    /// Sum of prior strengths over the prompt's nouns.
    pub prior_scalar: f64,
}

/// Latent axis layout: column 0 carries the evidence score, column 1 the
/// prior, column 2 the stop-token drive, column 3 the shared answer base.
const AXIS_EVIDENCE: usize = 0;
const AXIS_PRIOR: usize = 1;
const AXIS_EOS: usize = 2;
const AXIS_BASE: usize = 3;

/// The mock decoder. Immutable after construction; forwards are pure.
pub struct MockVlm<'a> {
    lang: &'a MockLanguage,
    params: VlmParams,
    /// Projection matrix, row-major |V| × d_hidden.
    w: Vec<f64>,
}

impl<'a> MockVlm<'a> {
    pub fn new(lang: &'a MockLanguage, params: VlmParams) -> Result<Self> {
        params.validate()?;
        let n = lang.vocab().len();
        let d = params.d_hidden;
        let mut w = vec![0.0; n * d];
        let yes = lang.yes().0;
        let no = lang.no().0;
        let eos = lang.eos().0;
        w[yes * d + AXIS_EVIDENCE] = 1.0;
        w[yes * d + AXIS_PRIOR] = 1.0;
        w[yes * d + AXIS_BASE] = 1.0;
        w[no * d + AXIS_EVIDENCE] = -1.0;
        w[no * d + AXIS_PRIOR] = -1.0;
        w[no * d + AXIS_BASE] = 1.0;
        w[eos * d + AXIS_EOS] = 1.0;
        for row in 0..n {
            if row == yes || row == no || row == eos {
                continue;
            }
            for col in AXIS_BASE + 1..d {
                let mut key = params.seed.to_le_bytes().to_vec();
                key.extend_from_slice(&(row as u64).to_le_bytes());
                key.extend_from_slice(&(col as u64).to_le_bytes());
                let sign = if fnv1a64(&key) & 1 == 0 { 1.0 } else { -1.0 };
                w[row * d + col] = sign * params.filler_scale;
            }
        }
        Ok(MockVlm { lang, params, w })
    }

    pub fn params(&self) -> &VlmParams {
        &self.params
    }

    pub fn language(&self) -> &MockLanguage {
        self.lang
    }

    fn matvec(&self, h: &[f64]) -> Vec<f64> {
        let n = self.lang.vocab().len();
        let d = self.params.d_hidden;
        let mut out = vec![0.0; n];
        for (row, value) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (col, x) in h.iter().enumerate() {
                acc += self.w[row * d + col] * x;
            }
            *value = acc;
        }
        out
    }

    /// Attention over patches for the queried signature plus the
    /// surface-keyed perturbation, and the resulting evidence score
    /// s = Σ_j A_j · ⟨feat_j, sig⟩.
    fn attend(&self, img: &ImageGrid, sig: Option<&[f64]>, surface: &str) -> (Vec<f64>, f64) {
        let patches = img.patch_count();
        let dots: Vec<f64> = (0..patches)
            .map(|j| match sig {
                Some(sig) => img
                    .patch(j)
                    .iter()
                    .zip(sig)
                    .map(|(f, s)| f * s)
                    .sum::<f64>(),
                None => 0.0,
            })
            .collect();
        let scores: Vec<f64> = dots
            .iter()
            .enumerate()
            .map(|(j, d)| {
                self.params.attn_sharpness * d
                    + self.params.surface_noise * surface_unit_noise(surface, j)
            })
            .collect();
        let logits = LogitVector::new(scores).expect("finite attention scores");
        let attention = crate::core::softmax(&logits).values().to_vec();
        let s = attention.iter().zip(&dots).map(|(a, d)| a * d).sum();
        (attention, s)
    }

    /// Full forward with the additive logit decomposition exposed.
    pub fn forward_decomposed(
        &self,
        img: &ImageGrid,
        prompt: &Prompt,
        prefix: &[TokenId],
    ) -> Result<(ForwardOutput, Decomposition)> {
        if img.dim() != self.lang.d_img() {
            return Err(DepError::invalid(
                "mock forward",
                format!(
                    "image feature dimension {} does not match signatures of {}",
                    img.dim(),
                    self.lang.d_img()
                ),
            ));
        }
        let patches = img.patch_count();
        let d = self.params.d_hidden;
        let answering = prefix.is_empty();

        let (attention, s, p_sum) = if answering {
            let sig = self
                .lang
                .queried_object(prompt)
                .and_then(|id| self.lang.signature(id));
            let (attention, s) = self.attend(img, sig, prompt.surface());
            (attention, s, self.lang.prior_sum(prompt))
        } else {
            // Once an answer token exists the model only wants to stop:
            // uniform attention, no evidence, no prior.
            (vec![1.0 / patches as f64; patches], 0.0, 0.0)
        };

        let mut u = vec![0.0; d];
        if answering {
            u[AXIS_EVIDENCE] = self.params.evidence_gain * (s - self.params.detect_threshold);
            u[AXIS_PRIOR] = self.params.bias * p_sum;
            u[AXIS_EOS] = self.params.eos_base;
        } else {
            u[AXIS_EOS] = self.params.eos_base + self.params.eos_push;
        }
        u[AXIS_BASE] = self.params.answer_base;

        let logits = self.matvec(&u);
        let mut u_evidence = vec![0.0; d];
        u_evidence[AXIS_EVIDENCE] = u[AXIS_EVIDENCE];
        let mut u_prior = vec![0.0; d];
        u_prior[AXIS_PRIOR] = u[AXIS_PRIOR];
        let mut u_const = u.clone();
        u_const[AXIS_EVIDENCE] = 0.0;
        u_const[AXIS_PRIOR] = 0.0;
        let decomposition = Decomposition {
            evidence: self.matvec(&u_evidence),
            prior: self.matvec(&u_prior),
            constant: self.matvec(&u_const),
            evidence_scalar: s,
            prior_scalar: p_sum,
        };

        let output = ForwardOutput {
            logits: LogitVector::new(logits)?,
            attention: AttentionMap::new(attention)?,
            hidden: HiddenVector::new(u)?,
        };
        Ok((output, decomposition))
    }
}

/// Deterministic surface-keyed noise in [-1, 1).
fn surface_unit_noise(surface: &str, patch: usize) -> f64 {
    let mut key = surface.as_bytes().to_vec();
    key.push(0x1f);
    key.extend_from_slice(&(patch as u64).to_le_bytes());
    let h = fnv1a64(&key);
    // Top 53 bits give an exact dyadic rational in [0, 1).
    ((h >> 11) as f64) / (1u64 << 53) as f64 * 2.0 - 1.0
}

impl Model for MockVlm<'_> {
    fn forward(&self, img: &ImageGrid, prompt: &Prompt, prefix: &[TokenId]) -> Result<ForwardOutput> {
        Ok(self.forward_decomposed(img, prompt, prefix)?.0)
    }

    fn project(&self, hidden: &HiddenVector) -> Result<LogitVector> {
        if hidden.len() != self.params.d_hidden {
            return Err(DepError::invalid(
                "projection",
                format!(
                    "hidden dimension {} does not match {}",
                    hidden.len(),
                    self.params.d_hidden
                ),
            ));
        }
        LogitVector::new(self.matvec(hidden.values()))
    }

    fn eos_token(&self) -> Option<TokenId> {
        Some(self.lang.eos())
    }
}

/// A constructed setup in which perturbations shift only the prior term, so
/// the drift penalty at β = 1 recovers the bias-free logits exactly.
///
/// The prompt queries "cup" (prior 0) next to "table" (prior 0.4); the only
/// co-occurrence entry sends "table" to "fork" (prior 0.8, absent from the
/// world), so every adversarial variant is "... near the fork" and the mean
/// perturbed prior, 0.8, is exactly twice the original 0.4. Surface noise is
/// off, keeping attention and evidence identical across variants.
pub struct DriftCancellationFixture {
    pub lang: MockLanguage,
    pub world: MockWorld,
    pub vlm_params: VlmParams,
    pub config: DepConfig,
    pub prompt_text: &'static str,
}

pub fn drift_cancellation_fixture(bias: f64) -> Result<DriftCancellationFixture> {
    let base = MockLanguage::generate(LanguageParams::default())?;
    let vocab = base.vocab();
    let cup = vocab.id("cup").expect("fixed vocab");
    let table = vocab.id("table").expect("fixed vocab");
    let fork = vocab.id("fork").expect("fixed vocab");

    let mut cooc = BTreeMap::new();
    cooc.insert(table, vec![(fork, 0.9)]);
    let lexicon = Lexicon::new(vocab, BTreeMap::new(), BTreeMap::new(), cooc)?;
    let mut prior = BTreeMap::new();
    prior.insert(cup, 0.0);
    prior.insert(table, 0.4);
    prior.insert(fork, 0.8);
    let lang = base.with_tables(lexicon, prior)?;

    let world_params = WorldParams::default();
    let mut world = None;
    for seed in 0..1000 {
        let candidate = MockWorld::generate(&lang, world_params, seed)?;
        if !candidate.contains(fork) {
            world = Some(candidate);
            break;
        }
    }
    let world = world.expect("a fork-free placement exists among 1000 seeds");

    let vlm_params = VlmParams {
        bias,
        surface_noise: 0.0,
        ..VlmParams::default()
    };
    vlm_params.validate()?;

    let config = DepConfig {
        mode: ScheduleMode::FixedP,
        fixed_p: 1.0,
        enable_ve: false,
        enable_pc: true,
        beta: 1.0,
        ..DepConfig::default()
    };

    Ok(DriftCancellationFixture {
        lang,
        world,
        vlm_params,
        config,
        prompt_text: "is there a cup near the table",
    })
}
