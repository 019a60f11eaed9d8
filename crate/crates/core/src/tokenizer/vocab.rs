//! Dense integer ids for tokens, as exchanged with model backends.

use super::{Token, TokenizerConfig};

pub type TokenId = u32;

/// Id layout: `Start`, `End`, `Segment`, then one block per offset-carrying
/// kind (`PedalOn`, `PedalOff`, `Onset`), one for `Dur`, and `Note` ids
/// covering pitch x velocity bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    config: TokenizerConfig,
    slots: u32,
    durations: u32,
    descriptor: String,
}

const PEDAL_ON_BASE: u32 = 3;

impl Vocab {
    pub fn new(config: TokenizerConfig) -> Self {
        let slots = config.segment_ms / config.time_resolution_ms;
        let durations = config.max_duration_ms / config.time_resolution_ms;
        let descriptor = format!(
            "duet-v1/res{}/seg{}/vel{}/dur{}",
            config.time_resolution_ms,
            config.segment_ms,
            config.velocity_buckets,
            config.max_duration_ms
        );
        Self {
            config,
            slots,
            durations,
            descriptor,
        }
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    /// Identity of this vocabulary; backends must report the same string.
    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    fn pedal_off_base(&self) -> u32 {
        PEDAL_ON_BASE + self.slots
    }

    fn onset_base(&self) -> u32 {
        PEDAL_ON_BASE + 2 * self.slots
    }

    fn dur_base(&self) -> u32 {
        PEDAL_ON_BASE + 3 * self.slots
    }

    fn note_base(&self) -> u32 {
        self.dur_base() + self.durations
    }

    pub fn size(&self) -> u32 {
        self.note_base() + 128 * self.config.velocity_buckets
    }

    pub fn encode(&self, token: Token) -> TokenId {
        let res = self.config.time_resolution_ms;
        match token {
            Token::Start => 0,
            Token::End => 1,
            Token::Segment => 2,
            Token::PedalOn(off) => PEDAL_ON_BASE + off / res,
            Token::PedalOff(off) => self.pedal_off_base() + off / res,
            Token::Onset(off) => self.onset_base() + off / res,
            Token::Dur(d) => self.dur_base() + d / res - 1,
            Token::Note { pitch, vel_bucket } => {
                self.note_base()
                    + u32::from(pitch) * self.config.velocity_buckets
                    + u32::from(vel_bucket)
            }
        }
    }

    pub fn decode(&self, id: TokenId) -> Option<Token> {
        let res = self.config.time_resolution_ms;
        Some(match id {
            0 => Token::Start,
            1 => Token::End,
            2 => Token::Segment,
            _ if id < self.pedal_off_base() => Token::PedalOn((id - PEDAL_ON_BASE) * res),
            _ if id < self.onset_base() => Token::PedalOff((id - self.pedal_off_base()) * res),
            _ if id < self.dur_base() => Token::Onset((id - self.onset_base()) * res),
            _ if id < self.note_base() => Token::Dur((id - self.dur_base() + 1) * res),
            _ if id < self.size() => {
                let k = id - self.note_base();
                Token::Note {
                    pitch: (k / self.config.velocity_buckets) as u8,
                    vel_bucket: (k % self.config.velocity_buckets) as u8,
                }
            }
            _ => return None,
        })
    }

    pub fn encode_all(&self, tokens: &[Token]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.encode(*t)).collect()
    }

    pub fn is_onset(&self, id: TokenId) -> bool {
        (self.onset_base()..self.dur_base()).contains(&id)
    }

    pub fn is_dur(&self, id: TokenId) -> bool {
        (self.dur_base()..self.note_base()).contains(&id)
    }

    pub fn is_note(&self, id: TokenId) -> bool {
        (self.note_base()..self.size()).contains(&id)
    }

    pub fn onset_ids(&self) -> std::ops::Range<TokenId> {
        self.onset_base()..self.dur_base()
    }

    pub fn dur_ids(&self) -> std::ops::Range<TokenId> {
        self.dur_base()..self.note_base()
    }

    pub fn note_ids(&self) -> std::ops::Range<TokenId> {
        self.note_base()..self.size()
    }

    pub fn pedal_on_ids(&self) -> std::ops::Range<TokenId> {
        PEDAL_ON_BASE..self.pedal_off_base()
    }

    pub fn pedal_off_ids(&self) -> std::ops::Range<TokenId> {
        self.pedal_off_base()..self.onset_base()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_id_decodes_and_re_encodes() {
        let v = Vocab::new(TokenizerConfig::default());
        assert_eq!(v.size(), 3 + 3 * 500 + 1000 + 128 * 16);
        for id in 0..v.size() {
            let tok = v.decode(id).unwrap();
            assert_eq!(v.encode(tok), id);
        }
        assert_eq!(v.decode(v.size()), None);
    }

    #[test]
    fn descriptor_tracks_config() {
        let a = Vocab::new(TokenizerConfig::default());
        let b = Vocab::new(TokenizerConfig {
            velocity_buckets: 32,
            ..TokenizerConfig::default()
        });
        assert_ne!(a.descriptor(), b.descriptor());
    }
}
