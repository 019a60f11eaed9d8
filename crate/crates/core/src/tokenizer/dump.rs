//! Plain-text token dump: one token per line, `KIND value [value]`.

use super::{Token, TokenizerError};

pub fn write_dump(tokens: &[Token]) -> String {
    let mut out = String::new();
    for t in tokens {
        let line = match t {
            Token::Start => "START".to_string(),
            Token::End => "END".to_string(),
            Token::Segment => "SEGMENT".to_string(),
            Token::Note { pitch, vel_bucket } => format!("NOTE {pitch} {vel_bucket}"),
            Token::Onset(v) => format!("ONSET {v}"),
            Token::Dur(v) => format!("DUR {v}"),
            Token::PedalOn(v) => format!("PEDAL_ON {v}"),
            Token::PedalOff(v) => format!("PEDAL_OFF {v}"),
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn parse_dump(text: &str) -> Result<Vec<Token>, TokenizerError> {
    let mut tokens = Vec::new();
    for (index, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let bad = || TokenizerError::Malformed {
            index,
            reason: format!("unparseable dump line {line:?}"),
        };
        let mut parts = line.split_whitespace();
        let kind = parts.next().ok_or_else(bad)?;
        let mut num = || -> Result<u32, TokenizerError> {
            parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)
        };
        let tok = match kind {
            "START" => Token::Start,
            "END" => Token::End,
            "SEGMENT" => Token::Segment,
            "NOTE" => {
                let pitch = num()?;
                let vel = num()?;
                if pitch > 127 || vel > 127 {
                    return Err(bad());
                }
                Token::Note {
                    pitch: pitch as u8,
                    vel_bucket: vel as u8,
                }
            }
            "ONSET" => Token::Onset(num()?),
            "DUR" => Token::Dur(num()?),
            "PEDAL_ON" => Token::PedalOn(num()?),
            "PEDAL_OFF" => Token::PedalOff(num()?),
            _ => return Err(bad()),
        };
        tokens.push(tok);
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_dump() {
        let toks = [
            Token::Start,
            Token::PedalOn(0),
            Token::Note { pitch: 60, vel_bucket: 8 },
            Token::Onset(0),
            Token::Dur(500),
            Token::Segment,
            Token::PedalOff(20),
            Token::End,
        ];
        let text = write_dump(&toks);
        assert_eq!(
            text,
            "START\nPEDAL_ON 0\nNOTE 60 8\nONSET 0\nDUR 500\nSEGMENT\nPEDAL_OFF 20\nEND\n"
        );
        assert_eq!(parse_dump(&text).unwrap(), toks);
    }

    #[test]
    fn rejects_unknown_kind() {
        assert!(parse_dump("START\nCHORD 1\n").is_err());
    }
}
