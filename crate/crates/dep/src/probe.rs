//! Text perturbation probe: builds the per-step set of M prompt variants.
//!
//! Three single-token strategies with different intensity, scheduled by the
//! shape of the next-token distribution:
//!
//! * attribute weakening swaps an adjective for a weaker alternative,
//! * high-frequency replacement swaps a noun for the most frequent noun
//!   not already in the prompt,
//! * co-occurrence adversarial substitution swaps a noun for its strongest
//!   co-occurrence partner that is absent from the image.
//!
//! A strategy that finds no target falls back down a fixed cascade ending at
//! the identity variant, so a probe set always has exactly M entries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core::{ImageGrid, PosTag, ProbabilityVector, Prompt, TokenId, Vocab};
use crate::error::{DepError, Result};

/// Substitution tables driving the three strategies.
///
/// Invariants: every referenced token exists in the vocab with the required
/// tag; co-occurrence partner lists are sorted by strength descending (ties
/// by ascending token id); no table maps a token to itself; frequencies are
/// non-negative; strengths lie in [0, 1]. All three tables may be empty.
#[derive(Clone, PartialEq, Debug)]
pub struct Lexicon {
    weaken: BTreeMap<TokenId, Vec<TokenId>>,
    freq: BTreeMap<TokenId, f64>,
    cooc: BTreeMap<TokenId, Vec<(TokenId, f64)>>,
}

impl Lexicon {
    pub fn new(
        vocab: &Vocab,
        weaken: BTreeMap<TokenId, Vec<TokenId>>,
        freq: BTreeMap<TokenId, f64>,
        cooc: BTreeMap<TokenId, Vec<(TokenId, f64)>>,
    ) -> Result<Self> {
        for (adj, alts) in &weaken {
            require_tag(vocab, *adj, PosTag::Adj, "weaken key")?;
            if alts.is_empty() {
                return Err(DepError::invalid("lexicon", format!("weaken entry {adj} is empty")));
            }
            let mut seen = Vec::new();
            for alt in alts {
                require_tag(vocab, *alt, PosTag::Adj, "weaken alternative")?;
                if alt == adj {
                    return Err(DepError::invalid(
                        "lexicon",
                        format!("weaken entry {adj} lists itself"),
                    ));
                }
                if seen.contains(alt) {
                    return Err(DepError::invalid(
                        "lexicon",
                        format!("weaken entry {adj} repeats alternative {alt}"),
                    ));
                }
                seen.push(*alt);
            }
        }
        for (noun, f) in &freq {
            require_tag(vocab, *noun, PosTag::Noun, "frequency key")?;
            if !f.is_finite() || *f < 0.0 {
                return Err(DepError::invalid(
                    "lexicon",
                    format!("frequency of {noun} is {f}, not a non-negative real"),
                ));
            }
        }
        for (noun, partners) in &cooc {
            require_tag(vocab, *noun, PosTag::Noun, "co-occurrence key")?;
            if partners.is_empty() {
                return Err(DepError::invalid(
                    "lexicon",
                    format!("co-occurrence entry {noun} is empty"),
                ));
            }
            let mut prev: Option<(f64, TokenId)> = None;
            for (partner, strength) in partners {
                require_tag(vocab, *partner, PosTag::Noun, "co-occurrence partner")?;
                if partner == noun {
                    return Err(DepError::invalid(
                        "lexicon",
                        format!("co-occurrence entry {noun} lists itself"),
                    ));
                }
                if !strength.is_finite() || *strength < 0.0 || *strength > 1.0 {
                    return Err(DepError::invalid(
                        "lexicon",
                        format!("co-occurrence strength {strength} outside [0, 1]"),
                    ));
                }
                if let Some((ps, pid)) = prev {
                    let ordered = *strength < ps || (*strength == ps && *partner > pid);
                    if !ordered {
                        return Err(DepError::invalid(
                            "lexicon",
                            format!("co-occurrence entry {noun} not sorted at partner {partner}"),
                        ));
                    }
                }
                prev = Some((*strength, *partner));
            }
        }
        Ok(Lexicon { weaken, freq, cooc })
    }

    /// A lexicon with all three tables empty. Every strategy then falls
    /// through to identity.
    pub fn empty() -> Self {
        Lexicon {
            weaken: BTreeMap::new(),
            freq: BTreeMap::new(),
            cooc: BTreeMap::new(),
        }
    }

    pub fn weaken_options(&self, adj: TokenId) -> Option<&[TokenId]> {
        self.weaken.get(&adj).map(Vec::as_slice)
    }

    pub fn frequency(&self, noun: TokenId) -> Option<f64> {
        self.freq.get(&noun).copied()
    }

    pub fn partners(&self, noun: TokenId) -> &[(TokenId, f64)] {
        self.cooc.get(&noun).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Highest-frequency noun for which `keep` holds, ties to the lowest
    /// token id.
    pub fn top_frequency_where(&self, mut keep: impl FnMut(TokenId) -> bool) -> Option<TokenId> {
        let mut best: Option<(f64, TokenId)> = None;
        for (noun, f) in &self.freq {
            if !keep(*noun) {
                continue;
            }
            let better = match best {
                None => true,
                Some((bf, bid)) => *f > bf || (*f == bf && *noun < bid),
            };
            if better {
                best = Some((*f, *noun));
            }
        }
        best.map(|(_, id)| id)
    }

    /// Canonical text form; parse + resolve of the output reproduces the
    /// lexicon exactly.
    pub fn to_text(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        for (adj, alts) in &self.weaken {
            let list = alts
                .iter()
                .map(|a| vocab.token(*a))
                .collect::<Vec<_>>()
                .join(",");
            writeln!(out, "T1 {} -> {list}", vocab.token(*adj)).unwrap();
        }
        for (noun, f) in &self.freq {
            writeln!(out, "FREQ {} {f}", vocab.token(*noun)).unwrap();
        }
        for (noun, partners) in &self.cooc {
            let list = partners
                .iter()
                .map(|(p, s)| format!("{}:{s}", vocab.token(*p)))
                .collect::<Vec<_>>()
                .join(",");
            writeln!(out, "COOC {} {list}", vocab.token(*noun)).unwrap();
        }
        out
    }
}

fn require_tag(vocab: &Vocab, id: TokenId, tag: PosTag, role: &str) -> Result<()> {
    if !vocab.contains_id(id) {
        return Err(DepError::invalid(
            "lexicon",
            format!("{role} {id} outside vocab of {}", vocab.len()),
        ));
    }
    if vocab.tag(id) != tag {
        return Err(DepError::invalid(
            "lexicon",
            format!("{role} {:?} is not tagged {tag:?}", vocab.token(id)),
        ));
    }
    Ok(())
}

/// Lexicon text parsed at the string level, before any vocabulary exists.
///
/// The two-stage split keeps the line-oriented grammar checkable on its own;
/// [`LexiconSource::resolve`] binds words to a vocab and applies the
/// [`Lexicon`] invariants.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct LexiconSource {
    weaken: BTreeMap<String, Vec<String>>,
    freq: BTreeMap<String, f64>,
    cooc: BTreeMap<String, Vec<(String, f64)>>,
}

impl LexiconSource {
    /// Parses the line-oriented lexicon format:
    ///
    /// ```text
    /// # comment
    /// T1 <adj> -> <alt>,<alt>
    /// FREQ <noun> <float>
    /// COOC <noun> <partner>:<strength>,<partner>:<strength>
    /// ```
    ///
    /// Blank lines are skipped. Errors carry 1-based line numbers.
    pub fn parse(text: &str) -> Result<Self> {
        let mut src = LexiconSource::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (kind, rest) = trimmed
                .split_once(char::is_whitespace)
                .ok_or_else(|| parse_err(line, "record has no body"))?;
            let rest = rest.trim();
            match kind {
                "T1" => {
                    let (adj, alts) = rest
                        .split_once("->")
                        .ok_or_else(|| parse_err(line, "T1 record has no '->'"))?;
                    let adj = one_word(line, adj, "T1 adjective")?;
                    let alts = split_list(line, alts, "T1 alternative")?;
                    if src.weaken.insert(adj.clone(), alts).is_some() {
                        return Err(parse_err(line, format!("duplicate T1 key {adj:?}")));
                    }
                }
                "FREQ" => {
                    let (noun, value) = rest
                        .split_once(char::is_whitespace)
                        .ok_or_else(|| parse_err(line, "FREQ record needs a value"))?;
                    let noun = one_word(line, noun, "FREQ noun")?;
                    let f: f64 = value
                        .trim()
                        .parse()
                        .map_err(|_| parse_err(line, format!("bad FREQ value {value:?}")))?;
                    if src.freq.insert(noun.clone(), f).is_some() {
                        return Err(parse_err(line, format!("duplicate FREQ key {noun:?}")));
                    }
                }
                "COOC" => {
                    let (noun, list) = rest
                        .split_once(char::is_whitespace)
                        .ok_or_else(|| parse_err(line, "COOC record needs partners"))?;
                    let noun = one_word(line, noun, "COOC noun")?;
                    let mut partners = Vec::new();
                    for item in list.split(',') {
                        let (partner, strength) = item
                            .trim()
                            .split_once(':')
                            .ok_or_else(|| parse_err(line, format!("COOC item {item:?} has no ':'")))?;
                        let partner = one_word(line, partner, "COOC partner")?;
                        let s: f64 = strength.trim().parse().map_err(|_| {
                            parse_err(line, format!("bad COOC strength {strength:?}"))
                        })?;
                        if partners.iter().any(|(p, _)| *p == partner) {
                            return Err(parse_err(line, format!("duplicate partner {partner:?}")));
                        }
                        partners.push((partner, s));
                    }
                    if partners.is_empty() {
                        return Err(parse_err(line, "COOC record has no partners"));
                    }
                    if src.cooc.insert(noun.clone(), partners).is_some() {
                        return Err(parse_err(line, format!("duplicate COOC key {noun:?}")));
                    }
                }
                other => {
                    return Err(parse_err(line, format!("unknown record kind {other:?}")));
                }
            }
        }
        Ok(src)
    }

    /// Binds the parsed words to `vocab`. Partner lists are sorted into the
    /// canonical order (strength descending, token id ascending) before the
    /// full invariant check.
    pub fn resolve(&self, vocab: &Vocab) -> Result<Lexicon> {
        let lookup = |word: &str| -> Result<TokenId> {
            vocab
                .id(word)
                .ok_or_else(|| DepError::invalid("lexicon", format!("unknown word {word:?}")))
        };
        let mut weaken = BTreeMap::new();
        for (adj, alts) in &self.weaken {
            let alts = alts.iter().map(|a| lookup(a)).collect::<Result<Vec<_>>>()?;
            weaken.insert(lookup(adj)?, alts);
        }
        let mut freq = BTreeMap::new();
        for (noun, f) in &self.freq {
            freq.insert(lookup(noun)?, *f);
        }
        let mut cooc = BTreeMap::new();
        for (noun, partners) in &self.cooc {
            let mut partners = partners
                .iter()
                .map(|(p, s)| Ok((lookup(p)?, *s)))
                .collect::<Result<Vec<_>>>()?;
            partners.sort_by(|(aid, astr), (bid, bstr)| {
                bstr.total_cmp(astr).then(aid.cmp(bid))
            });
            cooc.insert(lookup(noun)?, partners);
        }
        Lexicon::new(vocab, weaken, freq, cooc)
    }
}

fn parse_err(line: usize, detail: impl Into<String>) -> DepError {
    DepError::LexiconParse {
        line,
        detail: detail.into(),
    }
}

fn one_word(line: usize, raw: &str, role: &str) -> Result<String> {
    let word = raw.trim();
    if word.is_empty() || word.chars().any(char::is_whitespace) {
        return Err(parse_err(line, format!("{role} {raw:?} is not a single word")));
    }
    Ok(word.to_string())
}

fn split_list(line: usize, raw: &str, role: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for item in raw.split(',') {
        let word = one_word(line, item, role)?;
        if out.contains(&word) {
            return Err(parse_err(line, format!("duplicate {role} {word:?}")));
        }
        out.push(word);
    }
    if out.is_empty() {
        return Err(parse_err(line, format!("empty {role} list")));
    }
    Ok(out)
}

/// Which perturbation produced a variant.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    AttributeWeaken,
    HighFreqReplace,
    CooccurAdversarial,
    Identity,
}

/// Per-variant provenance. `position` and `replacement` are both present
/// exactly when the strategy is not [`StrategyKind::Identity`].
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: StrategyKind,
    pub position: Option<usize>,
    pub replacement: Option<TokenId>,
}

impl Provenance {
    pub fn identity() -> Self {
        Provenance {
            strategy: StrategyKind::Identity,
            position: None,
            replacement: None,
        }
    }
}

/// The M prompt variants probed at one decoding step.
///
/// Invariants: `variants` and `provenance` have equal length M ≥ 1; an
/// identity variant equals the original prompt; every other variant differs
/// from the original in exactly the provenance position, holding the
/// provenance replacement there.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct PerturbationSet {
    original: Prompt,
    variants: Vec<Prompt>,
    provenance: Vec<Provenance>,
}

impl PerturbationSet {
    pub fn new(original: Prompt, variants: Vec<Prompt>, provenance: Vec<Provenance>) -> Result<Self> {
        if variants.is_empty() || variants.len() != provenance.len() {
            return Err(DepError::invalid(
                "perturbation set",
                format!(
                    "{} variants with {} provenance records",
                    variants.len(),
                    provenance.len()
                ),
            ));
        }
        for (m, (variant, prov)) in variants.iter().zip(&provenance).enumerate() {
            let diff: Vec<usize> = (0..original.len())
                .filter(|i| {
                    variant.len() != original.len() || variant.token_at(*i) != original.token_at(*i)
                })
                .collect();
            match prov.strategy {
                StrategyKind::Identity => {
                    if variant != &original || prov.position.is_some() || prov.replacement.is_some()
                    {
                        return Err(DepError::invalid(
                            "perturbation set",
                            format!("identity variant {m} carries a diff or provenance"),
                        ));
                    }
                }
                _ => {
                    let (pos, rep) = match (prov.position, prov.replacement) {
                        (Some(p), Some(r)) => (p, r),
                        _ => {
                            return Err(DepError::invalid(
                                "perturbation set",
                                format!("variant {m} lacks position or replacement"),
                            ))
                        }
                    };
                    if variant.len() != original.len()
                        || diff != [pos]
                        || variant.token_at(pos) != rep
                    {
                        return Err(DepError::invalid(
                            "perturbation set",
                            format!("variant {m} does not match its provenance"),
                        ));
                    }
                }
            }
        }
        Ok(PerturbationSet {
            original,
            variants,
            provenance,
        })
    }

    pub fn m(&self) -> usize {
        self.variants.len()
    }

    pub fn original(&self) -> &Prompt {
        &self.original
    }

    pub fn variants(&self) -> &[Prompt] {
        &self.variants
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    /// True when every variant is the identity; the degenerate floor where
    /// probing carries no information.
    pub fn all_identity(&self) -> bool {
        self.provenance
            .iter()
            .all(|p| p.strategy == StrategyKind::Identity)
    }
}

/// Presence oracle standing in for an open-vocabulary detector. Must be
/// deterministic for fixed inputs. `Sync` so benchmark items can share one
/// detector across worker threads.
pub trait Detector: Sync {
    fn contains(&self, img: &ImageGrid, word: TokenId) -> bool;
}

/// Inverse squared L2 norm of the distribution; lies in [1, |V|]. Low values
/// mean the mass sits on few tokens.
pub fn effective_sample_size(p: &ProbabilityVector) -> f64 {
    let sum_sq: f64 = p.values().iter().map(|v| v * v).sum();
    1.0 / sum_sq
}

/// Threshold scheduler over distribution shape: concentrated distributions
/// get the mild attribute strategy, dispersed ones the adversarial strategy.
/// The high-frequency strategy is reached only through the fallback cascade.
pub fn select_strategy(p: &ProbabilityVector, delta: f64) -> Result<StrategyKind> {
    if !delta.is_finite() || delta < 1.0 {
        return Err(DepError::invalid(
            "scheduler",
            format!("delta {delta} below the N_eff floor of 1"),
        ));
    }
    if effective_sample_size(p) <= delta {
        Ok(StrategyKind::AttributeWeaken)
    } else {
        Ok(StrategyKind::CooccurAdversarial)
    }
}

/// A successful single-token substitution.
#[derive(Clone, PartialEq, Debug)]
pub struct Replacement {
    pub prompt: Prompt,
    pub position: usize,
    pub replaced: TokenId,
    pub replacement: TokenId,
}

impl Replacement {
    fn provenance(&self, strategy: StrategyKind) -> Provenance {
        Provenance {
            strategy,
            position: Some(self.position),
            replacement: Some(self.replacement),
        }
    }
}

/// Attribute weakening: a uniformly chosen adjective with a weaken entry is
/// replaced by a uniformly chosen alternative. None when no adjective in the
/// prompt has an entry.
pub fn apply_t1<R: Rng + ?Sized>(
    x: &Prompt,
    vocab: &Vocab,
    lex: &Lexicon,
    rng: &mut R,
) -> Option<Replacement> {
    let eligible: Vec<(usize, TokenId)> = x
        .positions_tagged(vocab, PosTag::Adj)
        .into_iter()
        .filter(|(_, id)| lex.weaken_options(*id).is_some())
        .collect();
    if eligible.is_empty() {
        return None;
    }
    let (position, replaced) = eligible[rng.random_range(0..eligible.len())];
    let options = lex.weaken_options(replaced).expect("filtered on entry");
    let replacement = options[rng.random_range(0..options.len())];
    let prompt = x
        .with_token(vocab, position, replacement)
        .expect("position and id validated");
    Some(Replacement {
        prompt,
        position,
        replaced,
        replacement,
    })
}

/// High-frequency replacement: a uniformly chosen noun position is replaced
/// by the globally highest-frequency noun not already in the prompt. None
/// when the prompt has no noun or the frequency table offers no replacement.
pub fn apply_t2<R: Rng + ?Sized>(
    x: &Prompt,
    vocab: &Vocab,
    lex: &Lexicon,
    rng: &mut R,
) -> Option<Replacement> {
    let nouns = x.positions_tagged(vocab, PosTag::Noun);
    if nouns.is_empty() {
        return None;
    }
    let replacement = lex.top_frequency_where(|noun| !x.contains(noun))?;
    let (position, replaced) = nouns[rng.random_range(0..nouns.len())];
    let prompt = x
        .with_token(vocab, position, replacement)
        .expect("position and id validated");
    Some(Replacement {
        prompt,
        position,
        replaced,
        replacement,
    })
}

/// Co-occurrence adversarial substitution. The source noun is the prompt
/// noun whose strongest partner is maximal (ties to the earliest position);
/// its partner list is scanned in stored order for the first word the
/// detector does not find in the image. Deterministic; consumes no
/// randomness. None when no source exists or every partner is visible.
pub fn apply_t3(
    x: &Prompt,
    vocab: &Vocab,
    lex: &Lexicon,
    det: &dyn Detector,
    img: &ImageGrid,
) -> Option<Replacement> {
    let mut source: Option<(usize, TokenId, f64)> = None;
    for (position, id) in x.positions_tagged(vocab, PosTag::Noun) {
        let partners = lex.partners(id);
        let Some((_, top)) = partners.first() else {
            continue;
        };
        let stronger = match source {
            None => true,
            Some((_, _, best)) => *top > best,
        };
        if stronger {
            source = Some((position, id, *top));
        }
    }
    let (position, replaced, _) = source?;
    for (partner, _) in lex.partners(replaced) {
        if !det.contains(img, *partner) {
            let prompt = x
                .with_token(vocab, position, *partner)
                .expect("position and id validated");
            return Some(Replacement {
                prompt,
                position,
                replaced,
                replacement: *partner,
            });
        }
    }
    None
}

/// How the per-variant strategy is chosen.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ProbeMode {
    /// Threshold scheduling on the effective sample size of the next-token
    /// distribution.
    AdaptiveNeff,
    /// Adversarial with probability `p`, otherwise `alt`; the fixed-rate
    /// baseline the scheduler is compared against.
    FixedP { p: f64, alt: StrategyKind },
}

/// Probe configuration: variant count, scheduler threshold, and mode.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct ProbeParams {
    pub m: usize,
    pub delta: f64,
    pub mode: ProbeMode,
}

impl ProbeParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(DepError::invalid("probe params", "m must be at least 1"));
        }
        if !self.delta.is_finite() || self.delta < 1.0 {
            return Err(DepError::invalid(
                "probe params",
                format!("delta {} below the N_eff floor of 1", self.delta),
            ));
        }
        if let ProbeMode::FixedP { p, alt } = self.mode {
            if !(0.0..=1.0).contains(&p) {
                return Err(DepError::invalid(
                    "probe params",
                    format!("fixed p {p} outside [0, 1]"),
                ));
            }
            if !matches!(
                alt,
                StrategyKind::AttributeWeaken | StrategyKind::HighFreqReplace
            ) {
                return Err(DepError::invalid(
                    "probe params",
                    format!("fixed alternative {alt:?} must be a non-adversarial strategy"),
                ));
            }
        }
        Ok(())
    }
}

/// Builds the M-variant probe set for one decoding step.
///
/// Each variant independently resolves its scheduled strategy through the
/// fallback cascade (adversarial → high-frequency → attribute → identity;
/// attribute → high-frequency → identity; high-frequency → attribute →
/// identity). Randomness is consumed in variant order, so a fixed rng state
/// reproduces the set bit-exactly.
pub fn build_perturbation_set<R: Rng + ?Sized>(
    x: &Prompt,
    img: &ImageGrid,
    p: &ProbabilityVector,
    params: &ProbeParams,
    vocab: &Vocab,
    lex: &Lexicon,
    det: &dyn Detector,
    rng: &mut R,
) -> Result<PerturbationSet> {
    params.validate()?;
    let mut variants = Vec::with_capacity(params.m);
    let mut provenance = Vec::with_capacity(params.m);
    for _ in 0..params.m {
        let scheduled = match params.mode {
            ProbeMode::AdaptiveNeff => select_strategy(p, params.delta)?,
            ProbeMode::FixedP { p: p_fixed, alt } => {
                if rng.random::<f64>() < p_fixed {
                    StrategyKind::CooccurAdversarial
                } else {
                    alt
                }
            }
        };
        let cascade: &[StrategyKind] = match scheduled {
            StrategyKind::CooccurAdversarial => &[
                StrategyKind::CooccurAdversarial,
                StrategyKind::HighFreqReplace,
                StrategyKind::AttributeWeaken,
            ],
            StrategyKind::AttributeWeaken => &[
                StrategyKind::AttributeWeaken,
                StrategyKind::HighFreqReplace,
            ],
            StrategyKind::HighFreqReplace => &[
                StrategyKind::HighFreqReplace,
                StrategyKind::AttributeWeaken,
            ],
            StrategyKind::Identity => &[],
        };
        let mut outcome = None;
        for strategy in cascade {
            let replacement = match strategy {
                StrategyKind::AttributeWeaken => apply_t1(x, vocab, lex, rng),
                StrategyKind::HighFreqReplace => apply_t2(x, vocab, lex, rng),
                StrategyKind::CooccurAdversarial => apply_t3(x, vocab, lex, det, img),
                StrategyKind::Identity => unreachable!("identity is the floor, never attempted"),
            };
            if let Some(r) = replacement {
                outcome = Some((r.prompt.clone(), r.provenance(*strategy)));
                break;
            }
        }
        let (variant, prov) = outcome.unwrap_or_else(|| (x.clone(), Provenance::identity()));
        variants.push(variant);
        provenance.push(prov);
    }
    PerturbationSet::new(x.clone(), variants, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::Vocab;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        Vocab::new(vec![
            ("is".into(), PosTag::Other),
            ("the".into(), PosTag::Other),
            ("on".into(), PosTag::Other),
            ("full".into(), PosTag::Adj),
            ("red".into(), PosTag::Adj),
            ("colored".into(), PosTag::Adj),
            ("cup".into(), PosTag::Noun),
            ("table".into(), PosTag::Noun),
            ("person".into(), PosTag::Noun),
            ("saucer".into(), PosTag::Noun),
        ])
        .unwrap()
    }

    fn id(v: &Vocab, w: &str) -> TokenId {
        v.id(w).unwrap()
    }

    struct FixedDetector(Vec<TokenId>);

    impl Detector for FixedDetector {
        fn contains(&self, _img: &ImageGrid, word: TokenId) -> bool {
            self.0.contains(&word)
        }
    }

    fn grid() -> ImageGrid {
        ImageGrid::new(2, 2, 3, vec![0.0; 12], vec![None; 4]).unwrap()
    }

    fn uniform(n: usize) -> ProbabilityVector {
        ProbabilityVector::new(vec![1.0 / n as f64; n]).unwrap()
    }

    fn one_hot(n: usize) -> ProbabilityVector {
        let mut v = vec![0.0; n];
        v[0] = 1.0;
        ProbabilityVector::new(v).unwrap()
    }

    #[test]
    fn effective_sample_size_matches_worked_values() {
        assert!((effective_sample_size(&one_hot(10)) - 1.0).abs() < 1e-12);
        assert!((effective_sample_size(&uniform(4)) - 4.0).abs() < 1e-12);
        let p = ProbabilityVector::new(vec![0.7, 0.3]).unwrap();
        assert!((effective_sample_size(&p) - 1.7241379310344829).abs() < 1e-12);
    }

    #[test]
    fn scheduler_switches_at_the_threshold() {
        assert_eq!(
            select_strategy(&one_hot(5), 2.0).unwrap(),
            StrategyKind::AttributeWeaken
        );
        assert_eq!(
            select_strategy(&uniform(8), 2.0).unwrap(),
            StrategyKind::CooccurAdversarial
        );
        let p = ProbabilityVector::new(vec![0.7, 0.3]).unwrap();
        assert_eq!(
            select_strategy(&p, 2.0).unwrap(),
            StrategyKind::AttributeWeaken
        );
        assert!(select_strategy(&uniform(2), 0.5).is_err());
    }

    fn demo_lexicon(v: &Vocab) -> Lexicon {
        let mut weaken = BTreeMap::new();
        weaken.insert(id(v, "red"), vec![id(v, "colored")]);
        let mut freq = BTreeMap::new();
        freq.insert(id(v, "person"), 10.0);
        freq.insert(id(v, "cup"), 2.0);
        let mut cooc = BTreeMap::new();
        cooc.insert(
            id(v, "cup"),
            vec![(id(v, "saucer"), 0.9), (id(v, "table"), 0.5)],
        );
        Lexicon::new(v, weaken, freq, cooc).unwrap()
    }

    #[test]
    fn t1_single_entry_table_forces_the_outcome() {
        let v = vocab();
        let lex = demo_lexicon(&v);
        let x = Prompt::parse(&v, "is the red cup on the table").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = apply_t1(&x, &v, &lex, &mut rng).unwrap();
        assert_eq!(r.prompt.surface(), "is the colored cup on the table");
        assert_eq!(r.position, 2);
        assert_eq!(r.replaced, id(&v, "red"));
    }

    #[test]
    fn t1_without_adjective_targets_is_none() {
        let v = vocab();
        let lex = demo_lexicon(&v);
        let x = Prompt::parse(&v, "is the cup on the table").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(apply_t1(&x, &v, &lex, &mut rng).is_none());
        // An adjective without a table entry is not a target either.
        let x = Prompt::parse(&v, "is the full cup").unwrap();
        assert!(apply_t1(&x, &v, &lex, &mut rng).is_none());
    }

    #[test]
    fn t2_takes_the_global_frequency_maximum() {
        let v = vocab();
        let lex = demo_lexicon(&v);
        let x = Prompt::parse(&v, "is the cup full").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = apply_t2(&x, &v, &lex, &mut rng).unwrap();
        assert_eq!(r.prompt.surface(), "is the person full");
        assert_eq!(r.replacement, id(&v, "person"));
    }

    #[test]
    fn t2_none_cases() {
        let v = vocab();
        let lex = demo_lexicon(&v);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let no_noun = Prompt::parse(&v, "is the red full").unwrap();
        assert!(apply_t2(&no_noun, &v, &lex, &mut rng).is_none());
        // Every frequency-table noun already present: no replacement exists.
        let saturated = Prompt::parse(&v, "is the person on the cup").unwrap();
        assert!(apply_t2(&saturated, &v, &lex, &mut rng).is_none());
    }

    #[test]
    fn t2_breaks_frequency_ties_by_lowest_id() {
        let v = vocab();
        let mut freq = BTreeMap::new();
        freq.insert(id(&v, "person"), 5.0);
        freq.insert(id(&v, "saucer"), 5.0);
        let lex = Lexicon::new(&v, BTreeMap::new(), freq, BTreeMap::new()).unwrap();
        let x = Prompt::parse(&v, "is the cup full").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = apply_t2(&x, &v, &lex, &mut rng).unwrap();
        // "person" has the lower token id of the two tied nouns.
        assert_eq!(r.replacement, id(&v, "person"));
    }

    #[test]
    fn t3_respects_visual_exclusion_over_the_sorted_list() {
        let v = vocab();
        let lex = demo_lexicon(&v);
        let x = Prompt::parse(&v, "is the cup full").unwrap();
        let det = FixedDetector(vec![id(&v, "saucer")]);
        let r = apply_t3(&x, &v, &lex, &det, &grid()).unwrap();
        assert_eq!(r.prompt.surface(), "is the table full");
        assert_eq!(r.replaced, id(&v, "cup"));

        let det_all = FixedDetector(vec![id(&v, "saucer"), id(&v, "table")]);
        assert!(apply_t3(&x, &v, &lex, &det_all, &grid()).is_none());
    }

    #[test]
    fn t3_without_cooccurrence_entries_is_none() {
        let v = vocab();
        let lex = demo_lexicon(&v);
        let det = FixedDetector(vec![]);
        // "table" and "person" have no co-occurrence entries.
        let x = Prompt::parse(&v, "is the table on the person").unwrap();
        assert!(apply_t3(&x, &v, &lex, &det, &grid()).is_none());
    }

    #[test]
    fn t3_picks_the_strongest_source_and_breaks_ties_by_position() {
        let v = vocab();
        let mut cooc = BTreeMap::new();
        cooc.insert(id(&v, "cup"), vec![(id(&v, "person"), 0.4)]);
        cooc.insert(id(&v, "table"), vec![(id(&v, "saucer"), 0.8)]);
        let lex = Lexicon::new(&v, BTreeMap::new(), BTreeMap::new(), cooc).unwrap();
        let det = FixedDetector(vec![]);
        let x = Prompt::parse(&v, "is the cup on the table").unwrap();
        let r = apply_t3(&x, &v, &lex, &det, &grid()).unwrap();
        assert_eq!(r.replaced, id(&v, "table"));

        let mut cooc = BTreeMap::new();
        cooc.insert(id(&v, "cup"), vec![(id(&v, "person"), 0.8)]);
        cooc.insert(id(&v, "table"), vec![(id(&v, "saucer"), 0.8)]);
        let lex = Lexicon::new(&v, BTreeMap::new(), BTreeMap::new(), cooc).unwrap();
        let r = apply_t3(&x, &v, &lex, &det, &grid()).unwrap();
        // Equal top strengths: the earlier prompt position wins.
        assert_eq!(r.replaced, id(&v, "cup"));
    }

    #[test]
    fn build_set_degenerate_floor_is_all_identity() {
        let v = vocab();
        let x = Prompt::parse(&v, "is the cup on the table").unwrap();
        let det = FixedDetector(vec![]);
        let params = ProbeParams {
            m: 3,
            delta: 2.0,
            mode: ProbeMode::AdaptiveNeff,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let set = build_perturbation_set(
            &x,
            &grid(),
            &uniform(10),
            &params,
            &v,
            &Lexicon::empty(),
            &det,
            &mut rng,
        )
        .unwrap();
        assert!(set.all_identity());
        assert_eq!(set.m(), 3);
        for variant in set.variants() {
            assert_eq!(variant, &x);
        }
    }

    #[test]
    fn build_set_confident_step_carries_attribute_provenance() {
        let v = vocab();
        let lex = demo_lexicon(&v);
        let x = Prompt::parse(&v, "is the red cup on the table").unwrap();
        let det = FixedDetector(vec![]);
        let params = ProbeParams {
            m: 3,
            delta: 2.0,
            mode: ProbeMode::AdaptiveNeff,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let set =
            build_perturbation_set(&x, &grid(), &one_hot(10), &params, &v, &lex, &det, &mut rng)
                .unwrap();
        for prov in set.provenance() {
            assert_eq!(prov.strategy, StrategyKind::AttributeWeaken);
        }
    }

    #[test]
    fn build_set_replays_bit_identically() {
        let v = vocab();
        let lex = demo_lexicon(&v);
        let x = Prompt::parse(&v, "is the red cup on the table").unwrap();
        let det = FixedDetector(vec![id(&v, "saucer")]);
        let params = ProbeParams {
            m: 4,
            delta: 2.0,
            mode: ProbeMode::FixedP {
                p: 0.5,
                alt: StrategyKind::AttributeWeaken,
            },
        };
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            build_perturbation_set(&x, &grid(), &uniform(10), &params, &v, &lex, &det, &mut rng)
                .unwrap()
        };
        assert_eq!(run(42), run(42));
    }

    #[test]
    fn fixed_p_extremes_degenerate_to_one_strategy() {
        let v = vocab();
        let lex = demo_lexicon(&v);
        let x = Prompt::parse(&v, "is the red cup on the table").unwrap();
        let det = FixedDetector(vec![]);
        let at_p = |p: f64| {
            let params = ProbeParams {
                m: 8,
                delta: 2.0,
                mode: ProbeMode::FixedP {
                    p,
                    alt: StrategyKind::AttributeWeaken,
                },
            };
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            build_perturbation_set(&x, &grid(), &uniform(10), &params, &v, &lex, &det, &mut rng)
                .unwrap()
        };
        for prov in at_p(1.0).provenance() {
            assert_eq!(prov.strategy, StrategyKind::CooccurAdversarial);
        }
        for prov in at_p(0.0).provenance() {
            assert_eq!(prov.strategy, StrategyKind::AttributeWeaken);
        }
    }

    #[test]
    fn lexicon_rejects_malformed_tables() {
        let v = vocab();
        let mut weaken = BTreeMap::new();
        weaken.insert(id(&v, "red"), vec![id(&v, "red")]);
        assert!(Lexicon::new(&v, weaken, BTreeMap::new(), BTreeMap::new()).is_err());

        let mut weaken = BTreeMap::new();
        weaken.insert(id(&v, "cup"), vec![id(&v, "colored")]);
        assert!(Lexicon::new(&v, weaken, BTreeMap::new(), BTreeMap::new()).is_err());

        let mut freq = BTreeMap::new();
        freq.insert(id(&v, "cup"), -1.0);
        assert!(Lexicon::new(&v, BTreeMap::new(), freq, BTreeMap::new()).is_err());

        let mut cooc = BTreeMap::new();
        cooc.insert(id(&v, "cup"), vec![(id(&v, "table"), 1.5)]);
        assert!(Lexicon::new(&v, BTreeMap::new(), BTreeMap::new(), cooc).is_err());

        let mut cooc = BTreeMap::new();
        cooc.insert(
            id(&v, "cup"),
            vec![(id(&v, "table"), 0.2), (id(&v, "saucer"), 0.8)],
        );
        assert!(Lexicon::new(&v, BTreeMap::new(), BTreeMap::new(), cooc).is_err());
    }

    #[test]
    fn lexicon_text_round_trips() {
        let v = vocab();
        let lex = demo_lexicon(&v);
        let text = lex.to_text(&v);
        let back = LexiconSource::parse(&text).unwrap().resolve(&v).unwrap();
        assert_eq!(back, lex);
    }

    #[test]
    fn lexicon_parse_reports_line_numbers() {
        let text = "# header\nFREQ cup 2.0\nT1 red colored\n";
        let err = LexiconSource::parse(text).unwrap_err();
        match err {
            DepError::LexiconParse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
        let dup = "FREQ cup 2.0\nFREQ cup 3.0\n";
        assert!(LexiconSource::parse(dup).is_err());
        let bad_strength = "COOC cup table:high\n";
        assert!(LexiconSource::parse(bad_strength).is_err());
    }

    #[test]
    fn lexicon_resolve_sorts_partner_lists() {
        let v = vocab();
        let text = "COOC cup table:0.5,saucer:0.9\n";
        let lex = LexiconSource::parse(text).unwrap().resolve(&v).unwrap();
        let partners = lex.partners(id(&v, "cup"));
        assert_eq!(partners[0], (id(&v, "saucer"), 0.9));
        assert_eq!(partners[1], (id(&v, "table"), 0.5));
    }

    proptest! {
        #[test]
        fn neff_stays_within_bounds(
            raw in proptest::collection::vec(1e-6f64..1.0, 2..30)
        ) {
            let sum: f64 = raw.iter().sum();
            let p = ProbabilityVector::new(raw.iter().map(|v| v / sum).collect()).unwrap();
            let neff = effective_sample_size(&p);
            prop_assert!(neff >= 1.0 - 1e-9);
            prop_assert!(neff <= p.len() as f64 + 1e-9);
        }

        #[test]
        fn scheduler_is_a_threshold_in_neff(
            raw in proptest::collection::vec(1e-6f64..1.0, 2..30),
            delta in 1.0f64..20.0
        ) {
            let sum: f64 = raw.iter().sum();
            let p = ProbabilityVector::new(raw.iter().map(|v| v / sum).collect()).unwrap();
            let kind = select_strategy(&p, delta).unwrap();
            let expect = if effective_sample_size(&p) <= delta {
                StrategyKind::AttributeWeaken
            } else {
                StrategyKind::CooccurAdversarial
            };
            prop_assert_eq!(kind, expect);
        }

        #[test]
        fn non_identity_variants_differ_in_exactly_one_position(seed in 0u64..500) {
            let v = vocab();
            let lex = demo_lexicon(&v);
            let det = FixedDetector(vec![id(&v, "saucer")]);
            let params = ProbeParams {
                m: 3,
                delta: 2.0,
                mode: ProbeMode::FixedP { p: 0.5, alt: StrategyKind::AttributeWeaken },
            };
            let x = Prompt::parse(&v, "is the red cup on the table").unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = build_perturbation_set(
                &x, &grid(), &uniform(10), &params, &v, &lex, &det, &mut rng,
            ).unwrap();
            for (variant, prov) in set.variants().iter().zip(set.provenance()) {
                let diffs = (0..x.len())
                    .filter(|i| variant.token_at(*i) != x.token_at(*i))
                    .count();
                match prov.strategy {
                    StrategyKind::Identity => prop_assert_eq!(diffs, 0),
                    _ => prop_assert_eq!(diffs, 1),
                }
            }
        }

        #[test]
        fn t2_replacement_never_already_in_prompt(seed in 0u64..500) {
            let v = vocab();
            let lex = demo_lexicon(&v);
            let x = Prompt::parse(&v, "is the cup on the table").unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if let Some(r) = apply_t2(&x, &v, &lex, &mut rng) {
                prop_assert!(!x.contains(r.replacement));
            }
        }

        #[test]
        fn t3_output_is_never_detected(present in proptest::collection::vec(0usize..10, 0..4)) {
            let v = vocab();
            let lex = demo_lexicon(&v);
            let det = FixedDetector(present.iter().map(|i| TokenId(*i)).collect());
            let x = Prompt::parse(&v, "is the cup full").unwrap();
            if let Some(r) = apply_t3(&x, &v, &lex, &det, &grid()) {
                prop_assert!(!det.contains(&grid(), r.replacement));
            }
        }
    }
}
