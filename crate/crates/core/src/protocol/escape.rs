//! C-style escaping so arbitrary payload bytes fit in one space-separated token.
//!
//! `\n`, `\r`, `\t` and `\\` use their usual escapes; space and every other
//! byte outside printable ASCII become a three-digit octal escape (`\040`).

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EscapeError {
    #[error("dangling backslash")]
    Dangling,
    #[error("unknown escape \\{0}")]
    Unknown(char),
    #[error("bad octal escape")]
    BadOctal,
    #[error("raw byte {0:#04x} must be escaped")]
    Raw(u8),
}

pub fn escape(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'\n' => out.push_str("\\n"),
            b'\r' => out.push_str("\\r"),
            b'\t' => out.push_str("\\t"),
            b'\\' => out.push_str("\\\\"),
            b'!'..=b'~' => out.push(b as char),
            _ => out.push_str(&format!("\\{b:03o}")),
        }
    }
    out
}

pub fn unescape(token: &str) -> Result<Vec<u8>, EscapeError> {
    let bytes = token.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b != b'\\' {
            if !(b'!'..=b'~').contains(&b) {
                return Err(EscapeError::Raw(b));
            }
            out.push(b);
            i += 1;
            continue;
        }
        let next = *bytes.get(i + 1).ok_or(EscapeError::Dangling)?;
        match next {
            b'n' => out.push(b'\n'),
            b'r' => out.push(b'\r'),
            b't' => out.push(b'\t'),
            b'\\' => out.push(b'\\'),
            b'0'..=b'7' => {
                let digits = bytes.get(i + 1..i + 4).ok_or(EscapeError::BadOctal)?;
                if !digits.iter().all(|d| (b'0'..=b'7').contains(d)) {
                    return Err(EscapeError::BadOctal);
                }
                let v = digits.iter().fold(0u32, |acc, d| acc * 8 + u32::from(d - b'0'));
                out.push(u8::try_from(v).map_err(|_| EscapeError::BadOctal)?);
                i += 4;
                continue;
            }
            other => return Err(EscapeError::Unknown(other as char)),
        }
        i += 2;
    }
    Ok(out)
}
