//! Discrete vocabulary, trajectory <-> token serialization, and the
//! structural-format validation used by the format reward.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::microworld::geometry::Vec2;

/// Waypoints per trajectory (0.5 s spacing, 3 s horizon).
pub const T_F: usize = 6;
/// Waypoint spacing in seconds.
pub const WAYPOINT_DT: f64 = 0.5;
/// Coordinate bound in meters.
pub const COORD_BOUND: f64 = 32.0;
/// Ego speed/acceleration buckets in the prompt.
pub const N_EGO_BUCKETS: usize = 16;

pub type TokenId = u16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Instruction {
    Straight,
    Left,
    Right,
    Stop,
}

impl Instruction {
    pub const ALL: [Instruction; 4] = [
        Instruction::Straight,
        Instruction::Left,
        Instruction::Right,
        Instruction::Stop,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Instruction::Straight => "straight",
            Instruction::Left => "left",
            Instruction::Right => "right",
            Instruction::Stop => "stop",
        }
    }
}

/// Planned or ground-truth path: exactly [`T_F`] ego-frame waypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Vec2>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<Vec2>) -> Result<Self, TokenizerError> {
        if waypoints.len() != T_F {
            return Err(TokenizerError::Syntax(format!(
                "trajectory needs {T_F} waypoints, got {}",
                waypoints.len()
            )));
        }
        for w in &waypoints {
            if !w.x.is_finite() || !w.y.is_finite() || w.x.abs() > COORD_BOUND || w.y.abs() > COORD_BOUND
            {
                return Err(TokenizerError::Encoding(format!(
                    "waypoint ({}, {}) outside [-{COORD_BOUND}, {COORD_BOUND}]",
                    w.x, w.y
                )));
            }
        }
        Ok(Self { waypoints })
    }

    /// Snap every coordinate to the 0.1 m serialization grid.
    pub fn quantized(&self) -> Trajectory {
        Trajectory {
            waypoints: self
                .waypoints
                .iter()
                .map(|w| Vec2::new(quantize_tenths(w.x) as f64 / 10.0, quantize_tenths(w.y) as f64 / 10.0))
                .collect(),
        }
    }

    pub fn endpoint(&self) -> Vec2 {
        *self.waypoints.last().unwrap()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    /// A required structural tag is missing, duplicated, or out of order.
    #[error("tag error: {0}")]
    Tag(String),
    /// The answer body does not match the waypoint grammar.
    #[error("syntax error: {0}")]
    Syntax(String),
    /// Input cannot be rendered on the token grid.
    #[error("encoding error: {0}")]
    Encoding(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatCheck {
    pub tags_ok: bool,
    pub syntax_ok: bool,
}

/// Round `x * 10` to the nearest integer, halves to even.
pub fn quantize_tenths(x: f64) -> i64 {
    let y = x * 10.0;
    let f = y.floor();
    let r = y - f;
    let lo = f as i64;
    if r > 0.5 {
        lo + 1
    } else if r < 0.5 {
        lo
    } else if lo % 2 == 0 {
        lo
    } else {
        lo + 1
    }
}

/// Render tenths as a signed fixed-point decimal, e.g. -32 -> "-3.2".
pub fn render_tenths(n: i64) -> String {
    let sign = if n < 0 { "-" } else { "" };
    let a = n.abs();
    format!("{sign}{}.{}", a / 10, a % 10)
}

pub const TOK_PAD: &str = "<pad>";
pub const TOK_BOS: &str = "<bos>";
pub const TOK_EOS: &str = "<eos>";
pub const TOK_LATENT_START_WM: &str = "<latent_start_wm>";
pub const TOK_LATENT_END_WM: &str = "<latent_end_wm>";
pub const TOK_LATENT_START_3D: &str = "<latent_start_3d>";
pub const TOK_LATENT_END_3D: &str = "<latent_end_3d>";
pub const TOK_ANSWER_OPEN: &str = "<answer>";
pub const TOK_ANSWER_CLOSE: &str = "</answer>";

pub const VOCAB_FORMAT: &str = "lastlab-vocab-v1";

/// The fixed token inventory. Ids are dense from 0 in declaration order.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut tokens: Vec<String> = vec![TOK_PAD.into(), TOK_BOS.into(), TOK_EOS.into()];
        for d in 0..10u8 {
            tokens.push(((b'0' + d) as char).to_string());
        }
        for p in ["-", ".", ",", ";"] {
            tokens.push(p.into());
        }
        for t in [
            TOK_LATENT_START_WM,
            TOK_LATENT_END_WM,
            TOK_LATENT_START_3D,
            TOK_LATENT_END_3D,
            TOK_ANSWER_OPEN,
            TOK_ANSWER_CLOSE,
        ] {
            tokens.push(t.into());
        }
        for ins in Instruction::ALL {
            tokens.push(ins.word().into());
        }
        for i in 0..N_EGO_BUCKETS {
            tokens.push(format!("<spd_{i}>"));
        }
        for i in 0..N_EGO_BUCKETS {
            tokens.push(format!("<acc_{i}>"));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        *self
            .index
            .get(token)
            .unwrap_or_else(|| panic!("unknown token {token:?}"))
    }

    pub fn text(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn instruction_id(&self, ins: Instruction) -> TokenId {
        self.id(ins.word())
    }

    pub fn speed_bucket_id(&self, v: f64) -> TokenId {
        let b = ((v / 0.5).floor() as i64).clamp(0, N_EGO_BUCKETS as i64 - 1);
        self.id(&format!("<spd_{b}>"))
    }

    pub fn accel_bucket_id(&self, a: f64) -> TokenId {
        let b = (((a + 4.0) / 0.5).floor() as i64).clamp(0, N_EGO_BUCKETS as i64 - 1);
        self.id(&format!("<acc_{b}>"))
    }

    /// Tokenize a string of digit/punctuation characters.
    pub fn encode_chars(&self, s: &str) -> Vec<TokenId> {
        s.chars().map(|c| self.id(&c.to_string())).collect()
    }

    /// Tokens a generated answer body may contain: digits, '-', '.', ',', ';'
    /// plus the closing tag. Everything else is grammar-forced.
    pub fn answer_alphabet(&self) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = ('0'..='9').map(|c| self.id(&c.to_string())).collect();
        for p in ["-", ".", ",", ";"] {
            ids.push(self.id(p));
        }
        ids.push(self.id(TOK_ANSWER_CLOSE));
        ids
    }

    /// Versioned vocab listing, one token per line.
    pub fn to_file_string(&self) -> String {
        let mut s = String::from(VOCAB_FORMAT);
        s.push('\n');
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Vocabulary({} tokens)", self.tokens.len())
    }
}

/// Serialize a trajectory to `<answer>x,y;...;x,y</answer>` tokens on the
/// 0.1 m grid.
pub fn serialize_trajectory(
    vocab: &Vocabulary,
    traj: &Trajectory,
) -> Result<Vec<TokenId>, TokenizerError> {
    if traj.waypoints.len() != T_F {
        return Err(TokenizerError::Encoding(format!(
            "expected {T_F} waypoints, got {}",
            traj.waypoints.len()
        )));
    }
    let mut body = String::new();
    for (i, w) in traj.waypoints.iter().enumerate() {
        if !w.x.is_finite() || !w.y.is_finite() || w.x.abs() > COORD_BOUND || w.y.abs() > COORD_BOUND
        {
            return Err(TokenizerError::Encoding(format!(
                "waypoint {i} ({}, {}) out of range",
                w.x, w.y
            )));
        }
        if i > 0 {
            body.push(';');
        }
        body.push_str(&render_tenths(quantize_tenths(w.x)));
        body.push(',');
        body.push_str(&render_tenths(quantize_tenths(w.y)));
    }
    let mut out = vec![vocab.id(TOK_ANSWER_OPEN)];
    out.extend(vocab.encode_chars(&body));
    out.push(vocab.id(TOK_ANSWER_CLOSE));
    Ok(out)
}

fn parse_fixed_point(s: &str) -> Result<f64, TokenizerError> {
    let bytes = s.as_bytes();
    let (sign, rest) = if bytes.first() == Some(&b'-') {
        (-1.0, &s[1..])
    } else {
        (1.0, s)
    };
    let Some(dot) = rest.find('.') else {
        return Err(TokenizerError::Syntax(format!("number {s:?} lacks a decimal point")));
    };
    let (int_part, frac_part) = (&rest[..dot], &rest[dot + 1..]);
    if int_part.is_empty()
        || int_part.len() > 3
        || frac_part.len() != 1
        || !int_part.bytes().all(|b| b.is_ascii_digit())
        || !frac_part.bytes().all(|b| b.is_ascii_digit())
    {
        return Err(TokenizerError::Syntax(format!("malformed number {s:?}")));
    }
    let tenths = int_part.parse::<i64>().unwrap() * 10 + frac_part.parse::<i64>().unwrap();
    let v = sign * tenths as f64 / 10.0;
    if v.abs() > COORD_BOUND {
        return Err(TokenizerError::Syntax(format!("coordinate {v} out of range")));
    }
    Ok(v)
}

/// Inverse of [`serialize_trajectory`]. Distinguishes missing/duplicated tags
/// ([`TokenizerError::Tag`]) from body grammar failures
/// ([`TokenizerError::Syntax`]).
pub fn parse_trajectory(
    vocab: &Vocabulary,
    tokens: &[TokenId],
) -> Result<Trajectory, TokenizerError> {
    let open = vocab.id(TOK_ANSWER_OPEN);
    let close = vocab.id(TOK_ANSWER_CLOSE);
    let opens: Vec<usize> = tokens.iter().enumerate().filter(|(_, &t)| t == open).map(|(i, _)| i).collect();
    let closes: Vec<usize> = tokens.iter().enumerate().filter(|(_, &t)| t == close).map(|(i, _)| i).collect();
    if opens.len() != 1 || closes.len() != 1 {
        return Err(TokenizerError::Tag(format!(
            "need exactly one answer tag pair, got {} open / {} close",
            opens.len(),
            closes.len()
        )));
    }
    if closes[0] < opens[0] {
        return Err(TokenizerError::Tag("answer tags out of order".into()));
    }
    let body: String = tokens[opens[0] + 1..closes[0]]
        .iter()
        .map(|&t| vocab.text(t))
        .collect();
    if body
        .chars()
        .any(|c| !(c.is_ascii_digit() || c == '-' || c == '.' || c == ',' || c == ';'))
    {
        return Err(TokenizerError::Syntax("non-waypoint token in answer body".into()));
    }
    let pairs: Vec<&str> = body.split(';').collect();
    if pairs.len() != T_F {
        return Err(TokenizerError::Syntax(format!(
            "expected {T_F} waypoints, got {}",
            pairs.len()
        )));
    }
    let mut waypoints = Vec::with_capacity(T_F);
    for pair in pairs {
        let mut it = pair.split(',');
        let (Some(xs), Some(ys), None) = (it.next(), it.next(), it.next()) else {
            return Err(TokenizerError::Syntax(format!("malformed pair {pair:?}")));
        };
        waypoints.push(Vec2::new(parse_fixed_point(xs)?, parse_fixed_point(ys)?));
    }
    Ok(Trajectory { waypoints })
}

/// Total structural check: the six structural tags each appear exactly once,
/// in canonical order, and the answer body parses.
pub fn validate_format(vocab: &Vocabulary, tokens: &[TokenId]) -> FormatCheck {
    let required = [
        vocab.id(TOK_LATENT_START_WM),
        vocab.id(TOK_LATENT_END_WM),
        vocab.id(TOK_LATENT_START_3D),
        vocab.id(TOK_LATENT_END_3D),
        vocab.id(TOK_ANSWER_OPEN),
        vocab.id(TOK_ANSWER_CLOSE),
    ];
    let mut tags_ok = true;
    let mut last_pos: i64 = -1;
    for id in required {
        let hits: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == id)
            .map(|(i, _)| i)
            .collect();
        if hits.len() != 1 || (hits[0] as i64) <= last_pos {
            tags_ok = false;
            break;
        }
        last_pos = hits[0] as i64;
    }
    let syntax_ok = parse_trajectory(vocab, tokens).is_ok();
    FormatCheck { tags_ok, syntax_ok }
}
