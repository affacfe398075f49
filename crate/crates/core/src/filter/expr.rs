//! Filter expressions and the query text grammar.
//!
//! ```text
//! expr    := or_term ("AND" or_term)*
//! or_term := factor ("OR" factor)*
//! factor  := ["NOT"] (leaf | "(" expr ")")
//! leaf    := name "=" value
//! ```
//!
//! OR binds tighter than AND, so `a = 1 OR a = 2 AND b = 3` groups as
//! `(a = 1 OR a = 2) AND b = 3`. Names resolve through the feature schema
//! (a bare integer is taken as a raw feature id). Quoted values resolve
//! through the value dictionary; bare integers are raw values. Keywords are
//! case-insensitive.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::catalog::{FeatureDictionary, FeatureValue};

use super::FilterError;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterExpr {
    Leaf(FeatureValue),
    And(Vec<FilterExpr>),
    Or(Vec<FilterExpr>),
    Not(Box<FilterExpr>),
}

impl FilterExpr {
    pub fn leaf(feature_id: u64, value: u64) -> Self {
        Self::Leaf(FeatureValue::new(feature_id, value))
    }

    pub fn not(child: FilterExpr) -> Self {
        Self::Not(Box::new(child))
    }

    pub fn contains_not(&self) -> bool {
        match self {
            Self::Leaf(_) => false,
            Self::Not(_) => true,
            Self::And(cs) | Self::Or(cs) => cs.iter().any(Self::contains_not),
        }
    }

    pub fn leaves(&self) -> Vec<FeatureValue> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<FeatureValue>) {
        match self {
            Self::Leaf(fv) => out.push(*fv),
            Self::Not(c) => c.collect_leaves(out),
            Self::And(cs) | Self::Or(cs) => cs.iter().for_each(|c| c.collect_leaves(out)),
        }
    }

    /// Evaluates against a leaf oracle.
    pub fn eval_with(&self, leaf: &mut impl FnMut(FeatureValue) -> bool) -> bool {
        match self {
            Self::Leaf(fv) => leaf(*fv),
            Self::Not(c) => !c.eval_with(leaf),
            Self::And(cs) => cs.iter().all(|c| c.eval_with(leaf)),
            Self::Or(cs) => cs.iter().any(|c| c.eval_with(leaf)),
        }
    }

    /// Renders the expression in the query grammar using `dict` for names.
    pub fn display<'a>(&'a self, dict: &'a FeatureDictionary) -> ExprDisplay<'a> {
        ExprDisplay { expr: self, dict }
    }
}

pub struct ExprDisplay<'a> {
    expr: &'a FilterExpr,
    dict: &'a FeatureDictionary,
}

impl fmt::Display for ExprDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(self.expr, self.dict, f)
    }
}

fn write_expr(e: &FilterExpr, dict: &FeatureDictionary, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    let paren = |c: &FilterExpr, need: bool, f: &mut fmt::Formatter<'_>| -> fmt::Result {
        if need {
            write!(f, "(")?;
            write_expr(c, dict, f)?;
            write!(f, ")")
        } else {
            write_expr(c, dict, f)
        }
    };
    match e {
        FilterExpr::Leaf(fv) => {
            match dict.feature_name(fv.feature_id) {
                Some(name) => write!(f, "{name}")?,
                None => write!(f, "{}", fv.feature_id)?,
            }
            match dict.value_name(fv.feature_id, fv.value) {
                Some(v) => write!(f, " = {}", quote(v)),
                None => write!(f, " = {}", fv.value),
            }
        }
        FilterExpr::Not(c) => {
            write!(f, "NOT ")?;
            paren(c, !matches!(**c, FilterExpr::Leaf(_)), f)
        }
        FilterExpr::And(cs) => {
            for (i, c) in cs.iter().enumerate() {
                if i > 0 {
                    write!(f, " AND ")?;
                }
                paren(c, matches!(c, FilterExpr::And(_)), f)?;
            }
            Ok(())
        }
        FilterExpr::Or(cs) => {
            for (i, c) in cs.iter().enumerate() {
                if i > 0 {
                    write!(f, " OR ")?;
                }
                paren(c, matches!(c, FilterExpr::And(_) | FilterExpr::Or(_)), f)?;
            }
            Ok(())
        }
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for ch in s.chars() {
        if ch == '"' || ch == '\\' {
            out.push('\\');
        }
        out.push(ch);
    }
    out.push('"');
    out
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Str(String),
    Eq,
    LParen,
    RParen,
    And,
    Or,
    Not,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>, FilterError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'(' => {
                out.push((i, Tok::LParen));
                i += 1;
            }
            b')' => {
                out.push((i, Tok::RParen));
                i += 1;
            }
            b'=' => {
                out.push((i, Tok::Eq));
                i += 1;
            }
            b'"' => {
                let start = i;
                i += 1;
                let mut s = String::new();
                loop {
                    let Some(ch) = text[i..].chars().next() else {
                        return Err(FilterError::syntax(start, "unterminated string"));
                    };
                    i += ch.len_utf8();
                    match ch {
                        '"' => break,
                        '\\' => {
                            let Some(esc) = text[i..].chars().next() else {
                                return Err(FilterError::syntax(start, "unterminated string"));
                            };
                            i += esc.len_utf8();
                            s.push(esc);
                        }
                        _ => s.push(ch),
                    }
                }
                out.push((start, Tok::Str(s)));
            }
            c if c.is_ascii_alphanumeric() || c == b'_' || c == b'.' || c == b'-' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || matches!(bytes[i], b'_' | b'.' | b'-'))
                {
                    i += 1;
                }
                let w = &text[start..i];
                let tok = match w.to_ascii_uppercase().as_str() {
                    "AND" => Tok::And,
                    "OR" => Tok::Or,
                    "NOT" => Tok::Not,
                    _ => Tok::Word(w.to_string()),
                };
                out.push((start, tok));
            }
            _ => return Err(FilterError::syntax(i, "unexpected character")),
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
    dict: &'a FeatureDictionary,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(o, _)| *o)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<FilterExpr, FilterError> {
        let mut terms = vec![self.or_term()?];
        while self.peek() == Some(&Tok::And) {
            self.pos += 1;
            terms.push(self.or_term()?);
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { FilterExpr::And(terms) })
    }

    fn or_term(&mut self) -> Result<FilterExpr, FilterError> {
        let mut terms = vec![self.factor()?];
        while self.peek() == Some(&Tok::Or) {
            self.pos += 1;
            terms.push(self.factor()?);
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { FilterExpr::Or(terms) })
    }

    fn factor(&mut self) -> Result<FilterExpr, FilterError> {
        let negate = if self.peek() == Some(&Tok::Not) {
            self.pos += 1;
            true
        } else {
            false
        };
        let at = self.offset();
        let inner = match self.next() {
            Some(Tok::LParen) => {
                let e = self.expr()?;
                match self.next() {
                    Some(Tok::RParen) => e,
                    _ => return Err(FilterError::syntax(self.prev_offset(), "expected ')'")),
                }
            }
            Some(Tok::Word(name)) => self.leaf(&name)?,
            _ => return Err(FilterError::syntax(at, "expected a term or '('")),
        };
        Ok(if negate { FilterExpr::not(inner) } else { inner })
    }

    fn prev_offset(&self) -> usize {
        self.toks.get(self.pos.saturating_sub(1)).map_or(self.end, |(o, _)| *o)
    }

    fn leaf(&mut self, name: &str) -> Result<FilterExpr, FilterError> {
        let feature_id = match self.dict.feature_id(name) {
            Some(id) => id,
            None => name
                .parse::<u64>()
                .map_err(|_| FilterError::UnknownFeature(name.to_string()))?,
        };
        if self.next() != Some(Tok::Eq) {
            return Err(FilterError::syntax(self.prev_offset(), "expected '='"));
        }
        let at = self.offset();
        let value = match self.next() {
            Some(Tok::Str(s)) => self.dict.value_id(feature_id, &s).ok_or(FilterError::UnknownValue {
                feature: name.to_string(),
                value: s,
            })?,
            Some(Tok::Word(w)) => w
                .parse::<u64>()
                .map_err(|_| FilterError::syntax(at, "value must be a quoted string or an integer"))?,
            _ => return Err(FilterError::syntax(at, "expected a value")),
        };
        Ok(FilterExpr::leaf(feature_id, value))
    }
}

pub fn parse_filter(text: &str, dict: &FeatureDictionary) -> Result<FilterExpr, FilterError> {
    let toks = tokenize(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: text.len(),
        dict,
    };
    let e = p.expr()?;
    if p.pos < p.toks.len() {
        return Err(FilterError::syntax(p.offset(), "unexpected trailing input"));
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn dict() -> FeatureDictionary {
        let mut d = FeatureDictionary::default();
        d.insert_feature(1, "country");
        d.insert_feature(2, "lang");
        d.insert_value(1, "US", 10);
        d.insert_value(1, "CA", 11);
        d.insert_value(2, "EN", 20);
        d.insert_value(2, "ES", 21);
        d
    }

    #[test]
    fn canonical_query_shape() {
        let e = parse_filter(r#"country = "US" AND (lang = "EN" OR lang = "ES")"#, &dict()).unwrap();
        assert_eq!(
            e,
            FilterExpr::And(vec![
                FilterExpr::leaf(1, 10),
                FilterExpr::Or(vec![FilterExpr::leaf(2, 20), FilterExpr::leaf(2, 21)]),
            ])
        );
    }

    #[test]
    fn single_leaf() {
        assert_eq!(parse_filter(r#"lang = "EN""#, &dict()).unwrap(), FilterExpr::leaf(2, 20));
    }

    #[test]
    fn or_binds_tighter_than_and() {
        let e = parse_filter("lang = 20 OR lang = 21 AND country = 10", &dict()).unwrap();
        assert_eq!(
            e,
            FilterExpr::And(vec![
                FilterExpr::Or(vec![FilterExpr::leaf(2, 20), FilterExpr::leaf(2, 21)]),
                FilterExpr::leaf(1, 10),
            ])
        );
    }

    #[test]
    fn not_and_raw_ids() {
        let e = parse_filter("not 7 = 3 and NOT (lang = 1)", &dict()).unwrap();
        assert_eq!(
            e,
            FilterExpr::And(vec![
                FilterExpr::not(FilterExpr::leaf(7, 3)),
                FilterExpr::not(FilterExpr::leaf(2, 1)),
            ])
        );
    }

    #[test]
    fn errors() {
        let d = dict();
        assert_eq!(parse_filter("size = 1", &d), Err(FilterError::UnknownFeature("size".into())));
        assert!(matches!(parse_filter(r#"lang = "FR""#, &d), Err(FilterError::UnknownValue { .. })));
        assert!(matches!(parse_filter("lang = ", &d), Err(FilterError::Syntax { position: 7, .. })));
        assert!(matches!(parse_filter("(lang = 1", &d), Err(FilterError::Syntax { .. })));
        assert!(matches!(parse_filter("lang = 1 lang", &d), Err(FilterError::Syntax { position: 9, .. })));
        assert!(matches!(parse_filter("lang = \"EN", &d), Err(FilterError::Syntax { .. })));
        assert!(matches!(parse_filter("", &d), Err(FilterError::Syntax { .. })));
    }

    #[test]
    fn display_round_trips() {
        let d = dict();
        for s in [
            r#"country = "US" AND (lang = "EN" OR lang = "ES")"#,
            "NOT (lang = 20 AND country = 11) OR lang = 5",
            "(lang = 1 AND lang = 2) AND lang = 3",
            "(lang = 1 OR lang = 2) OR NOT NOT lang = 3",
        ] {
            let e = parse_filter(s, &d);
            if let Ok(e) = e {
                let printed = e.display(&d).to_string();
                assert_eq!(parse_filter(&printed, &d).unwrap(), e, "{printed}");
            }
        }
    }
}
