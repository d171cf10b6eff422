//! Output vocabulary, canonical `[x,y,w,h]a` serialization and the strict
//! parser that defines the format reward.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::bbox::BBox;
use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 19;
/// Maximum sequence length, EOS included.
pub const DEFAULT_MAX_LEN: usize = 20;

const SYMBOLS: [char; VOCAB_SIZE - 1] = [
    '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '[', ']', ',', 'a', 'b', 'c', 'd', 's',
];
/// Character used for EOS in debug renderings.
pub const EOS_CHAR: char = '$';

/// Index into the fixed vocabulary: digits 0-9, `[`, `]`, `,`, action
/// characters `a b c d s`, then EOS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(u8);

impl Token {
    pub const OPEN: Token = Token(10);
    pub const CLOSE: Token = Token(11);
    pub const COMMA: Token = Token(12);
    pub const EOS: Token = Token(18);

    pub fn from_index(i: usize) -> Option<Token> {
        (i < VOCAB_SIZE).then_some(Token(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn from_char(c: char) -> Option<Token> {
        if c == EOS_CHAR {
            return Some(Token::EOS);
        }
        SYMBOLS.iter().position(|&s| s == c).map(|i| Token(i as u8))
    }

    pub fn to_char(self) -> char {
        SYMBOLS.get(self.index()).copied().unwrap_or(EOS_CHAR)
    }

    pub fn digit(d: u32) -> Token {
        debug_assert!(d < 10);
        Token(d as u8)
    }

    pub fn as_digit(self) -> Option<u32> {
        (self.0 < 10).then_some(self.0 as u32)
    }

    pub fn as_action(self) -> Option<Action> {
        Action::from_symbol(self.to_char()).filter(|_| self != Token::EOS)
    }

    pub fn action(a: Action) -> Token {
        Token::from_char(a.symbol()).expect("action symbols are in the vocabulary")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Instruction {
    /// Action only.
    #[serde(rename = "I_a")]
    Ia,
    /// Bounding box followed by action.
    #[serde(rename = "I_b")]
    Ib,
}

impl Instruction {
    pub const ALL: [Instruction; 2] = [Instruction::Ia, Instruction::Ib];

    pub fn code(self) -> &'static str {
        match self {
            Instruction::Ia => "I_a",
            Instruction::Ib => "I_b",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(pub Vec<Token>);

impl TokenSequence {
    pub fn new(tokens: Vec<Token>) -> Self {
        TokenSequence(tokens)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ends_with_eos(&self) -> bool {
        self.0.last() == Some(&Token::EOS)
    }

    /// Canonical text form: every token's character, with a single
    /// terminating EOS left implicit.
    pub fn to_canonical(&self) -> String {
        let body = if self.ends_with_eos() {
            &self.0[..self.0.len() - 1]
        } else {
            &self.0[..]
        };
        body.iter().map(|t| t.to_char()).collect()
    }

    /// Inverse of [`to_canonical`](Self::to_canonical) for EOS-terminated
    /// sequences; EOS is appended.
    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut tokens = text
            .chars()
            .map(|c| Token::from_char(c).ok_or_else(|| Error::OutputShape(format!("character {c:?} not in vocabulary"))))
            .collect::<Result<Vec<_>>>()?;
        tokens.push(Token::EOS);
        Ok(TokenSequence(tokens))
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.0 {
            write!(f, "{}", t.to_char())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MalformedReason {
    Empty,
    MissingEos,
    TrailingTokens,
    ExpectedOpenBracket,
    MissingField,
    ExtraField,
    EmptyNumber,
    LeadingZero,
    OutOfRange,
    ZeroExtent,
    UnexpectedToken,
    MissingAction,
    ExtraAfterAction,
    TooLong,
}

/// Rejection with the first offending token position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Malformed {
    pub reason: MalformedReason,
    pub position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedOutput {
    pub bbox: Option<BBox>,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    #[default]
    Strict,
    /// Accepts a single space after each comma in text input.
    Lenient,
}

fn check_range(b: &BBox, image_size: u32) -> Result<()> {
    let fields = b.to_array();
    if fields.iter().any(|&v| v >= image_size) || b.w == 0 || b.h == 0 {
        return Err(Error::BoxRange(fields, image_size));
    }
    Ok(())
}

pub fn serialize(bbox: Option<BBox>, action: Action, instruction: Instruction, image_size: u32) -> Result<TokenSequence> {
    let mut tokens = Vec::with_capacity(DEFAULT_MAX_LEN);
    match (instruction, bbox) {
        (Instruction::Ib, Some(b)) => {
            check_range(&b, image_size)?;
            tokens.push(Token::OPEN);
            for (i, v) in b.to_array().into_iter().enumerate() {
                if i > 0 {
                    tokens.push(Token::COMMA);
                }
                tokens.extend(v.to_string().chars().map(|c| Token::digit(c.to_digit(10).unwrap())));
            }
            tokens.push(Token::CLOSE);
        }
        (Instruction::Ia, None) => {}
        (Instruction::Ib, None) => return Err(Error::OutputShape("I_b output requires a bounding box".into())),
        (Instruction::Ia, Some(_)) => return Err(Error::OutputShape("I_a output carries no bounding box".into())),
    }
    tokens.push(Token::action(action));
    tokens.push(Token::EOS);
    Ok(TokenSequence(tokens))
}

fn reject<T>(reason: MalformedReason, position: usize) -> std::result::Result<T, Malformed> {
    Err(Malformed { reason, position })
}

/// Strict parser accepting exactly the language produced by [`serialize`].
pub fn parse(seq: &TokenSequence, instruction: Instruction, image_size: u32) -> std::result::Result<ParsedOutput, Malformed> {
    let tokens = seq.tokens();
    if tokens.is_empty() {
        return reject(MalformedReason::Empty, 0);
    }
    if tokens.len() > DEFAULT_MAX_LEN {
        return reject(MalformedReason::TooLong, DEFAULT_MAX_LEN);
    }
    let Some(eos) = tokens.iter().position(|&t| t == Token::EOS) else {
        return reject(MalformedReason::MissingEos, tokens.len());
    };
    if eos + 1 != tokens.len() {
        return reject(MalformedReason::TrailingTokens, eos + 1);
    }
    let body = &tokens[..eos];
    let mut pos = 0;

    let bbox = match instruction {
        Instruction::Ia => None,
        Instruction::Ib => {
            if body.first() != Some(&Token::OPEN) {
                return reject(MalformedReason::ExpectedOpenBracket, 0);
            }
            pos = 1;
            let max_digits = (image_size.max(1) - 1).to_string().len();
            let mut fields = [0u32; 4];
            let mut count = 0;
            loop {
                let start = pos;
                while pos < body.len() && body[pos].as_digit().is_some() {
                    pos += 1;
                }
                let run = &body[start..pos];
                if run.is_empty() {
                    let reason = match body.get(pos) {
                        Some(&Token::CLOSE) if count > 0 => MalformedReason::MissingField,
                        None => MalformedReason::MissingField,
                        _ => MalformedReason::EmptyNumber,
                    };
                    return reject(reason, pos);
                }
                if run.len() > 1 && run[0] == Token::digit(0) {
                    return reject(MalformedReason::LeadingZero, start);
                }
                if run.len() > max_digits {
                    return reject(MalformedReason::OutOfRange, start);
                }
                let value = run.iter().fold(0u32, |acc, t| acc * 10 + t.as_digit().unwrap());
                if value >= image_size {
                    return reject(MalformedReason::OutOfRange, start);
                }
                if count == 4 {
                    return reject(MalformedReason::ExtraField, start);
                }
                fields[count] = value;
                count += 1;
                match body.get(pos) {
                    Some(&Token::COMMA) => {
                        if count == 4 {
                            return reject(MalformedReason::ExtraField, pos);
                        }
                        pos += 1;
                    }
                    Some(&Token::CLOSE) => {
                        if count < 4 {
                            return reject(MalformedReason::MissingField, pos);
                        }
                        pos += 1;
                        break;
                    }
                    Some(_) => return reject(MalformedReason::UnexpectedToken, pos),
                    None => return reject(MalformedReason::MissingField, pos),
                }
            }
            if fields[2] == 0 || fields[3] == 0 {
                return reject(MalformedReason::ZeroExtent, pos - 1);
            }
            Some(BBox::from(fields))
        }
    };

    let Some(&tok) = body.get(pos) else {
        return reject(MalformedReason::MissingAction, pos);
    };
    let Some(action) = tok.as_action() else {
        return reject(MalformedReason::MissingAction, pos);
    };
    if pos + 1 != body.len() {
        return reject(MalformedReason::ExtraAfterAction, pos + 1);
    }
    Ok(ParsedOutput { bbox, action })
}

/// Parses a logged text rendering (canonical form, EOS implicit).
pub fn parse_text(
    text: &str,
    instruction: Instruction,
    image_size: u32,
    strictness: Strictness,
) -> std::result::Result<ParsedOutput, Malformed> {
    let normalized;
    let text = match strictness {
        Strictness::Strict => text,
        Strictness::Lenient => {
            normalized = text.replace(", ", ",");
            &normalized
        }
    };
    let mut tokens = Vec::with_capacity(text.len() + 1);
    for (i, c) in text.chars().enumerate() {
        match Token::from_char(c) {
            Some(t) => tokens.push(t),
            None => return reject(MalformedReason::UnexpectedToken, i),
        }
    }
    if tokens.last() != Some(&Token::EOS) {
        tokens.push(Token::EOS);
    }
    parse(&TokenSequence(tokens), instruction, image_size)
}
