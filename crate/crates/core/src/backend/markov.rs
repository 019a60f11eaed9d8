//! Order-2 Markov model over token ids with back-off and a grammar mask.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::fixtures;
use crate::tokenizer::{tokenize, Token, TokenId, Vocab};

type Counts = BTreeMap<TokenId, u32>;

/// Grammar position after a token, used to mask illegal continuations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GrammarState {
    after: After,
    /// Offsets within the current segment may not go backwards.
    floor: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
enum After {
    #[default]
    Other,
    Note,
    Onset,
}

impl GrammarState {
    pub fn advance(self, token: Option<Token>) -> Self {
        match token {
            Some(Token::Segment) => Self {
                after: After::Other,
                floor: 0,
            },
            Some(Token::Note { .. }) => Self {
                after: After::Note,
                ..self
            },
            Some(Token::Onset(o)) => Self {
                after: After::Onset,
                floor: o,
            },
            Some(Token::PedalOn(o) | Token::PedalOff(o)) => Self {
                after: After::Other,
                floor: o,
            },
            Some(Token::Start | Token::End | Token::Dur(_)) | None => Self {
                after: After::Other,
                ..self
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct MarkovModel {
    vocab: Vocab,
    order2: BTreeMap<(TokenId, TokenId), Counts>,
    order1: BTreeMap<TokenId, Counts>,
    order0: Counts,
}

impl MarkovModel {
    pub fn fit(vocab: Vocab, sequences: &[Vec<TokenId>]) -> Self {
        let mut model = Self {
            vocab,
            order2: BTreeMap::new(),
            order1: BTreeMap::new(),
            order0: Counts::new(),
        };
        for seq in sequences {
            for (i, &tok) in seq.iter().enumerate() {
                *model.order0.entry(tok).or_default() += 1;
                if i >= 1 {
                    *model.order1.entry(seq[i - 1]).or_default().entry(tok).or_default() += 1;
                }
                if i >= 2 {
                    *model
                        .order2
                        .entry((seq[i - 2], seq[i - 1]))
                        .or_default()
                        .entry(tok)
                        .or_default() += 1;
                }
            }
        }
        model
    }

    /// Fitted on the bundled fixture pieces, each followed by `End`.
    pub fn from_fixtures(vocab: Vocab) -> Self {
        let config = *vocab.config();
        let seqs: Vec<Vec<TokenId>> = fixtures::all()
            .iter()
            .map(|p| {
                let mut toks = tokenize(&p.notes, &p.pedals, &config)
                    .expect("fixtures contain only closed notes");
                toks.push(Token::End);
                vocab.encode_all(&toks)
            })
            .collect();
        Self::fit(vocab, &seqs)
    }

    /// [`MarkovModel::from_fixtures`], fitted once per vocabulary.
    pub fn shared(vocab: &Vocab) -> Arc<Self> {
        static CACHE: OnceLock<Mutex<HashMap<String, Arc<MarkovModel>>>> = OnceLock::new();
        let mut cache = CACHE.get_or_init(Default::default).lock().unwrap();
        cache
            .entry(vocab.descriptor().to_string())
            .or_insert_with(|| Arc::new(Self::from_fixtures(vocab.clone())))
            .clone()
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn legal(&self, id: TokenId, state: GrammarState) -> bool {
        let v = &self.vocab;
        let offset_ok = |tok: Option<Token>| match tok {
            Some(Token::Onset(o) | Token::PedalOn(o) | Token::PedalOff(o)) => o >= state.floor,
            _ => true,
        };
        match state.after {
            After::Note => v.is_onset(id) && offset_ok(v.decode(id)),
            After::Onset => v.is_dur(id),
            After::Other => match v.decode(id) {
                Some(Token::Start | Token::Onset(_) | Token::Dur(_)) | None => false,
                tok => offset_ok(tok),
            },
        }
    }

    fn all_legal(&self, state: GrammarState) -> Vec<TokenId> {
        let v = &self.vocab;
        let mut ids: Vec<TokenId> = match state.after {
            After::Note => v.onset_ids().collect(),
            After::Onset => v.dur_ids().collect(),
            After::Other => [1, 2]
                .into_iter()
                .chain(v.pedal_on_ids())
                .chain(v.pedal_off_ids())
                .chain(v.note_ids())
                .collect(),
        };
        ids.retain(|&id| self.legal(id, state));
        ids
    }

    /// Legal continuations with their (unnormalized) counts, ascending by id.
    pub fn candidates(
        &self,
        prev2: Option<TokenId>,
        prev1: Option<TokenId>,
        state: GrammarState,
    ) -> Vec<(TokenId, f64)> {
        let pick = |counts: Option<&Counts>| -> Vec<(TokenId, f64)> {
            counts
                .map(|c| {
                    c.iter()
                        .filter(|(id, _)| self.legal(**id, state))
                        .map(|(id, n)| (*id, f64::from(*n)))
                        .collect()
                })
                .unwrap_or_default()
        };
        if let (Some(a), Some(b)) = (prev2, prev1) {
            let c = pick(self.order2.get(&(a, b)));
            if !c.is_empty() {
                return c;
            }
        }
        if let Some(b) = prev1 {
            let c = pick(self.order1.get(&b));
            if !c.is_empty() {
                return c;
            }
        }
        let c = pick(Some(&self.order0));
        if !c.is_empty() {
            return c;
        }
        self.all_legal(state).into_iter().map(|id| (id, 1.0)).collect()
    }
}

/// Temperature + nucleus sampling over `(id, count)` candidates. Ties and
/// the greedy limit resolve to the lowest id.
pub fn sample(
    candidates: &[(TokenId, f64)],
    temperature: f64,
    top_p: f64,
    rng: &mut ChaCha8Rng,
) -> TokenId {
    assert!(!candidates.is_empty(), "grammar always leaves a legal token");
    if temperature <= 1e-6 {
        let mut best = candidates[0];
        for &c in &candidates[1..] {
            if c.1 > best.1 {
                best = c;
            }
        }
        return best.0;
    }
    let max_log = candidates
        .iter()
        .map(|(_, n)| n.ln())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut weighted: Vec<(TokenId, f64)> = candidates
        .iter()
        .map(|&(id, n)| (id, ((n.ln() - max_log) / temperature).exp()))
        .collect();
    weighted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let total: f64 = weighted.iter().map(|(_, w)| w).sum();
    let mut kept = 0.0;
    let mut cut = weighted.len();
    for (i, (_, w)) in weighted.iter().enumerate() {
        kept += w;
        if kept >= top_p * total {
            cut = i + 1;
            break;
        }
    }
    weighted.truncate(cut);
    let kept_total: f64 = weighted.iter().map(|(_, w)| w).sum();
    let mut x = rng.gen::<f64>() * kept_total;
    for &(id, w) in &weighted {
        if x < w {
            return id;
        }
        x -= w;
    }
    weighted[weighted.len() - 1].0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TokenizerConfig;
    use rand::SeedableRng;

    #[test]
    fn greedy_picks_highest_count_lowest_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample(&[(5, 2.0), (3, 7.0), (9, 7.0)], 1e-9, 1.0, &mut rng), 3);
    }

    #[test]
    fn tiny_nucleus_is_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(sample(&[(1, 1.0), (2, 10.0), (3, 1.0)], 1.0, 0.01, &mut rng), 2);
        }
    }

    #[test]
    fn grammar_forces_onset_then_duration() {
        let vocab = Vocab::new(TokenizerConfig::default());
        let model = MarkovModel::from_fixtures(vocab.clone());
        let note = vocab.encode(Token::Note { pitch: 60, vel_bucket: 8 });
        let s = GrammarState::default().advance(Some(Token::Onset(1200)));
        let s = s.advance(Some(Token::Dur(100))).advance(vocab.decode(note));
        let c = model.candidates(None, Some(note), s);
        assert!(!c.is_empty());
        for (id, _) in c {
            match vocab.decode(id) {
                Some(Token::Onset(o)) => assert!(o >= 1200),
                other => panic!("expected onset, got {other:?}"),
            }
        }
        let s = s.advance(Some(Token::Onset(1300)));
        let onset = vocab.encode(Token::Onset(1300));
        assert!(model
            .candidates(Some(note), Some(onset), s)
            .iter()
            .all(|(id, _)| vocab.is_dur(*id)));
    }
}
