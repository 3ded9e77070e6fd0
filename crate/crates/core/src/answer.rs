//! Unit-free answers shared by CoT records, gold files and predictions.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq)]
pub enum Answer {
    Number { value: f64, percent: bool },
    Text(String),
}

fn thousands_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[-+]?\d{1,3}(,\d{3})+(\.\d+)?$").expect("static regex"))
}

impl Answer {
    pub fn number(value: f64) -> Self {
        Answer::Number { value, percent: false }
    }

    pub fn percent(value: f64) -> Self {
        Answer::Number { value, percent: true }
    }

    /// Interpret a short answer string: strips a trailing `%` (setting the
    /// percent flag) and thousands separators; anything non-numeric is text.
    pub fn from_text(raw: &str) -> Self {
        let t = raw.trim();
        let (body, percent) = match t.strip_suffix('%') {
            Some(b) => (b.trim_end(), true),
            None => (t, false),
        };
        let cleaned = if thousands_re().is_match(body) {
            body.replace(',', "")
        } else {
            body.to_string()
        };
        match cleaned.parse::<f64>() {
            Ok(v) if v.is_finite() && !cleaned.is_empty() && looks_numeric(&cleaned) => {
                Answer::Number { value: v, percent }
            }
            _ => Answer::Text(t.to_string()),
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Answer::Number { value, .. } => Some(*value),
            Answer::Text(_) => None,
        }
    }
}

// Rejects "inf", "NaN" and friends that f64::from_str accepts.
fn looks_numeric(s: &str) -> bool {
    s.bytes().all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E'))
        && s.bytes().any(|b| b.is_ascii_digit())
}

pub fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Number { value, percent } => {
                write!(f, "{}{}", format_number(*value), if *percent { "%" } else { "" })
            }
            Answer::Text(t) => f.write_str(t),
        }
    }
}

impl Serialize for Answer {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Answer::Number { value, percent: false } => s.serialize_f64(*value),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Answer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Num(v) => Answer::number(v),
            Raw::Str(s) => Answer::from_text(&s),
        })
    }
}
