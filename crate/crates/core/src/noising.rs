//! Corruption procedures that build pre-training instances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::vocab::{is_special, TokenId, MASK, NUM_SPECIAL, PAD, SEP};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NoiseError {
    #[error("empty sentence")]
    Empty,
    #[error("special token {0} in plain input")]
    SpecialToken(TokenId),
    #[error("vocabulary of size {0} has no plain tokens to sample")]
    NoPlainTokens(usize),
    #[error("invalid noise config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub mask_rate: f64,
    pub p_mask_token: f64,
    pub p_random: f64,
    pub p_keep: f64,
    pub shuffle_window: usize,
    pub p_drop: f64,
    pub p_pad: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            p_mask_token: 0.8,
            p_random: 0.1,
            p_keep: 0.1,
            shuffle_window: 3,
            p_drop: 0.1,
            p_pad: 0.1,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), NoiseError> {
        let probs = [
            ("mask_rate", self.mask_rate),
            ("p_mask_token", self.p_mask_token),
            ("p_random", self.p_random),
            ("p_keep", self.p_keep),
            ("p_drop", self.p_drop),
            ("p_pad", self.p_pad),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(NoiseError::InvalidConfig(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        if self.mask_rate == 0.0 {
            return Err(NoiseError::InvalidConfig("mask_rate must be positive".into()));
        }
        if ((self.p_mask_token + self.p_random + self.p_keep) - 1.0).abs() > 1e-9 {
            return Err(NoiseError::InvalidConfig(
                "p_mask_token + p_random + p_keep must equal 1".into(),
            ));
        }
        if self.shuffle_window < 1 {
            return Err(NoiseError::InvalidConfig("shuffle_window must be at least 1".into()));
        }
        Ok(())
    }
}

/// A sentence with some positions hidden for masked prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedExample {
    pub corrupted: Vec<TokenId>,
    /// Strictly increasing.
    pub mask_positions: Vec<usize>,
    /// Original ids at `mask_positions`.
    pub targets: Vec<TokenId>,
    pub lang_tags: Vec<usize>,
}

/// A perturbed source paired with its pristine target.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedExample {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub src_lang: usize,
    pub tgt_lang: usize,
}

fn check_plain(x: &[TokenId]) -> Result<(), NoiseError> {
    if x.is_empty() {
        return Err(NoiseError::Empty);
    }
    match x.iter().find(|&&t| is_special(t)) {
        Some(&t) => Err(NoiseError::SpecialToken(t)),
        None => Ok(()),
    }
}

/// Masked positions and corrupted ids for one segment; positions are local.
fn mask_segment(
    x: &[TokenId],
    vocab_size: usize,
    cfg: &NoiseConfig,
    rng: &mut impl Rng,
) -> (Vec<TokenId>, Vec<usize>) {
    let positions = loop {
        let picked: Vec<usize> = (0..x.len()).filter(|_| rng.gen_bool(cfg.mask_rate)).collect();
        if !picked.is_empty() {
            break picked;
        }
    };
    let mut corrupted = x.to_vec();
    for &i in &positions {
        let u: f64 = rng.gen();
        if u < cfg.p_mask_token {
            corrupted[i] = MASK;
        } else if u < cfg.p_mask_token + cfg.p_random {
            corrupted[i] = rng.gen_range(NUM_SPECIAL as TokenId..vocab_size as TokenId);
        }
    }
    (corrupted, positions)
}

fn check_vocab(vocab_size: usize) -> Result<(), NoiseError> {
    if vocab_size <= NUM_SPECIAL {
        return Err(NoiseError::NoPlainTokens(vocab_size));
    }
    Ok(())
}

/// Hide a random subset of positions, at least one.
pub fn mask_mlm(
    x: &[TokenId],
    lang: usize,
    vocab_size: usize,
    cfg: &NoiseConfig,
    rng: &mut impl Rng,
) -> Result<MaskedExample, NoiseError> {
    check_plain(x)?;
    check_vocab(vocab_size)?;
    let (corrupted, mask_positions) = mask_segment(x, vocab_size, cfg, rng);
    Ok(MaskedExample {
        targets: mask_positions.iter().map(|&i| x[i]).collect(),
        corrupted,
        mask_positions,
        lang_tags: vec![lang; x.len()],
    })
}

/// Shuffle locally, drop, then replace with `[P]`, in that order.
pub fn noise_dae(
    x: &[TokenId],
    lang: usize,
    cfg: &NoiseConfig,
    rng: &mut impl Rng,
) -> Result<NoisedExample, NoiseError> {
    if x.is_empty() {
        return Err(NoiseError::Empty);
    }
    let k = cfg.shuffle_window as f64;
    let mut keyed: Vec<(f64, TokenId)> = x
        .iter()
        .enumerate()
        .map(|(i, &t)| (i as f64 + rng.gen::<f64>() * k, t))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));

    let keep: Vec<bool> = keyed.iter().map(|_| !rng.gen_bool(cfg.p_drop)).collect();
    let mut source: Vec<TokenId> = keyed
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|((_, t), _)| *t)
        .collect();
    if source.is_empty() {
        source.push(keyed[rng.gen_range(0..keyed.len())].1);
    }
    for t in source.iter_mut() {
        if rng.gen_bool(cfg.p_pad) {
            *t = PAD;
        }
    }
    Ok(NoisedExample {
        source,
        target: x.to_vec(),
        src_lang: lang,
        tgt_lang: lang,
    })
}

/// Mask both sides of a pair independently and join them with `[S]`.
pub fn build_xmlm(
    x: &[TokenId],
    y: &[TokenId],
    src_lang: usize,
    tgt_lang: usize,
    vocab_size: usize,
    cfg: &NoiseConfig,
    rng: &mut impl Rng,
) -> Result<MaskedExample, NoiseError> {
    check_plain(x)?;
    check_plain(y)?;
    check_vocab(vocab_size)?;
    let (cx, px) = mask_segment(x, vocab_size, cfg, rng);
    let (cy, py) = mask_segment(y, vocab_size, cfg, rng);
    let offset = x.len() + 1;
    let mut corrupted = cx;
    corrupted.push(SEP);
    corrupted.extend(cy);
    let mut targets: Vec<TokenId> = px.iter().map(|&i| x[i]).collect();
    targets.extend(py.iter().map(|&i| y[i]));
    let mut mask_positions = px;
    mask_positions.extend(py.iter().map(|&i| i + offset));
    let mut lang_tags = vec![src_lang; offset];
    lang_tags.extend(std::iter::repeat_n(tgt_lang, y.len()));
    Ok(MaskedExample {
        corrupted,
        mask_positions,
        targets,
        lang_tags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    const V: usize = 106;

    fn sentence(len: usize) -> Vec<TokenId> {
        (0..len).map(|i| (NUM_SPECIAL + i % (V - NUM_SPECIAL)) as TokenId).collect()
    }

    #[test]
    fn config_validation() {
        assert!(NoiseConfig::default().validate().is_ok());
        let bad = NoiseConfig {
            p_keep: 0.2,
            ..NoiseConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = NoiseConfig {
            p_drop: 1.5,
            ..NoiseConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_token_is_always_masked() {
        let mut r = rng::stream(0, "t");
        for _ in 0..50 {
            let ex = mask_mlm(&[9], 0, V, &NoiseConfig::default(), &mut r).unwrap();
            assert_eq!(ex.mask_positions, vec![0]);
            assert_eq!(ex.targets, vec![9]);
        }
    }

    #[test]
    fn keep_branch_leaves_sentence_intact() {
        let cfg = NoiseConfig {
            p_mask_token: 0.0,
            p_random: 0.0,
            p_keep: 1.0,
            ..NoiseConfig::default()
        };
        let x = sentence(30);
        let ex = mask_mlm(&x, 1, V, &cfg, &mut rng::stream(1, "t")).unwrap();
        assert_eq!(ex.corrupted, x);
        assert!(!ex.mask_positions.is_empty());
        assert_eq!(ex.lang_tags, vec![1; 30]);
    }

    #[test]
    fn random_replacements_are_plain_tokens() {
        let cfg = NoiseConfig {
            mask_rate: 1.0,
            p_mask_token: 0.0,
            p_random: 1.0,
            p_keep: 0.0,
            ..NoiseConfig::default()
        };
        let ex = mask_mlm(&sentence(2000), 0, V, &cfg, &mut rng::stream(2, "t")).unwrap();
        assert!(ex.corrupted.iter().all(|&t| !is_special(t) && (t as usize) < V));
    }

    #[test]
    fn masking_rejects_bad_input() {
        let cfg = NoiseConfig::default();
        let mut r = rng::stream(0, "t");
        assert_eq!(mask_mlm(&[], 0, V, &cfg, &mut r), Err(NoiseError::Empty));
        assert_eq!(mask_mlm(&[7, SEP], 0, V, &cfg, &mut r), Err(NoiseError::SpecialToken(SEP)));
        assert_eq!(
            build_xmlm(&[7], &[], 0, 1, V, &cfg, &mut r),
            Err(NoiseError::Empty)
        );
        assert_eq!(noise_dae(&[], 0, &cfg, &mut r), Err(NoiseError::Empty));
    }

    #[test]
    fn disabled_dae_noise_is_identity() {
        let cfg = NoiseConfig {
            shuffle_window: 1,
            p_drop: 0.0,
            p_pad: 0.0,
            ..NoiseConfig::default()
        };
        let x = sentence(40);
        let ex = noise_dae(&x, 0, &cfg, &mut rng::stream(3, "t")).unwrap();
        assert_eq!(ex.source, x);
        assert_eq!(ex.target, x);
    }

    #[test]
    fn saturated_padding_keeps_length() {
        let cfg = NoiseConfig {
            p_drop: 0.0,
            p_pad: 1.0,
            ..NoiseConfig::default()
        };
        let ex = noise_dae(&sentence(12), 0, &cfg, &mut rng::stream(4, "t")).unwrap();
        assert_eq!(ex.source, vec![PAD; 12]);
    }

    #[test]
    fn full_drop_keeps_one_token() {
        let cfg = NoiseConfig {
            p_drop: 1.0,
            p_pad: 0.0,
            ..NoiseConfig::default()
        };
        let x = sentence(5);
        let ex = noise_dae(&x, 0, &cfg, &mut rng::stream(5, "t")).unwrap();
        assert_eq!(ex.source.len(), 1);
        assert!(x.contains(&ex.source[0]));
    }

    #[test]
    fn xmlm_layout() {
        let x = sentence(6);
        let y: Vec<TokenId> = (60..64).collect();
        let ex = build_xmlm(&x, &y, 0, 1, V, &NoiseConfig::default(), &mut rng::stream(6, "t")).unwrap();
        assert_eq!(ex.corrupted.len(), 11);
        assert_eq!(ex.corrupted[6], SEP);
        assert_eq!(ex.lang_tags[..7], [0; 7]);
        assert_eq!(ex.lang_tags[7..], [1; 4]);
        assert!(ex.mask_positions.iter().any(|&p| p < 6));
        assert!(ex.mask_positions.iter().any(|&p| p > 6));
        assert!(!ex.mask_positions.contains(&6));
        let joined: Vec<TokenId> = x.iter().chain(&[SEP]).chain(&y).copied().collect();
        for (&p, &t) in ex.mask_positions.iter().zip(&ex.targets) {
            assert_eq!(joined[p], t);
        }
    }

    #[test]
    fn same_seed_same_noise() {
        let x = sentence(25);
        let cfg = NoiseConfig::default();
        let a = noise_dae(&x, 0, &cfg, &mut rng::stream(9, "t")).unwrap();
        let b = noise_dae(&x, 0, &cfg, &mut rng::stream(9, "t")).unwrap();
        assert_eq!(a, b);
        let a = mask_mlm(&x, 0, V, &cfg, &mut rng::stream(9, "t")).unwrap();
        let b = mask_mlm(&x, 0, V, &cfg, &mut rng::stream(9, "t")).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn masked_example_invariants(len in 1usize..40, seed in any::<u64>()) {
            let x = sentence(len);
            let ex = mask_mlm(&x, 0, V, &NoiseConfig::default(), &mut rng::stream(seed, "p")).unwrap();
            prop_assert_eq!(ex.mask_positions.len(), ex.targets.len());
            prop_assert!(!ex.mask_positions.is_empty());
            prop_assert!(ex.mask_positions.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(*ex.mask_positions.last().unwrap() < len);
            for i in 0..len {
                if !ex.mask_positions.contains(&i) {
                    prop_assert_eq!(ex.corrupted[i], x[i]);
                }
            }
            prop_assert!(ex.corrupted.iter().all(|&t| t == MASK || !is_special(t)));
        }

        #[test]
        fn shuffle_is_a_bounded_permutation(len in 1usize..60, k in 1usize..6, seed in any::<u64>()) {
            // Distinct tokens make displacement observable.
            let x: Vec<TokenId> = (0..len).map(|i| (NUM_SPECIAL + i) as TokenId).collect();
            let cfg = NoiseConfig { shuffle_window: k, p_drop: 0.0, p_pad: 0.0, ..NoiseConfig::default() };
            let ex = noise_dae(&x, 0, &cfg, &mut rng::stream(seed, "p")).unwrap();
            let mut sorted = ex.source.clone();
            sorted.sort();
            prop_assert_eq!(&sorted, &x);
            for (j, &t) in ex.source.iter().enumerate() {
                let i = t as usize - NUM_SPECIAL;
                prop_assert!(i.abs_diff(j) < k);
            }
        }

        #[test]
        fn dae_source_never_longer(len in 1usize..30, seed in any::<u64>()) {
            let ex = noise_dae(&sentence(len), 0, &NoiseConfig::default(), &mut rng::stream(seed, "p")).unwrap();
            prop_assert!(!ex.source.is_empty());
            prop_assert!(ex.source.len() <= ex.target.len());
        }
    }
}
