//! Ground-truth substrates as boolean combinations of thresholded Gaussian
//! blobs.

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::grids::{unflatten, VolumeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub name: String,
    pub center: Vec<f64>,
    /// Per-axis standard deviation, voxels.
    pub scale: Vec<f64>,
    #[serde(default = "one")]
    pub amplitude: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstrateSpec {
    pub blobs: Vec<Blob>,
    pub blob_threshold: f64,
    /// Boolean expression over blob names using `&`, `|` and parentheses.
    pub formula: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Formula {
    Blob(usize),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
}

impl Formula {
    /// Parses `text`, resolving names against `names`. `&` binds tighter
    /// than `|`.
    pub fn parse(text: &str, names: &[&str]) -> Result<Self, SimError> {
        let tokens = tokenize(text)?;
        let mut p = Parser {
            tokens,
            pos: 0,
            names,
        };
        let f = p.or_expr()?;
        if p.pos != p.tokens.len() {
            return Err(SimError::Formula(format!(
                "unexpected {:?} in {text:?}",
                p.tokens[p.pos]
            )));
        }
        Ok(f)
    }

    pub fn eval(&self, member: &[bool]) -> bool {
        match self {
            Formula::Blob(i) => member[*i],
            Formula::And(a, b) => a.eval(member) && b.eval(member),
            Formula::Or(a, b) => a.eval(member) || b.eval(member),
        }
    }

    pub fn is_disjunction(&self) -> bool {
        match self {
            Formula::Blob(_) => true,
            Formula::Or(a, b) => a.is_disjunction() && b.is_disjunction(),
            Formula::And(..) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Name(String),
    And,
    Or,
    Open,
    Close,
}

fn tokenize(text: &str) -> Result<Vec<Token>, SimError> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            ' ' | '\t' | '\n' => {
                chars.next();
            }
            '&' => {
                chars.next();
                out.push(Token::And);
            }
            '|' => {
                chars.next();
                out.push(Token::Or);
            }
            '(' => {
                chars.next();
                out.push(Token::Open);
            }
            ')' => {
                chars.next();
                out.push(Token::Close);
            }
            c if c.is_alphanumeric() || c == '_' => {
                let mut name = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_alphanumeric() || c == '_' {
                        name.push(c);
                        chars.next();
                    } else {
                        break;
                    }
                }
                out.push(Token::Name(name));
            }
            other => return Err(SimError::Formula(format!("unexpected character {other:?}"))),
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    names: &'a [&'a str],
}

impl Parser<'_> {
    fn or_expr(&mut self) -> Result<Formula, SimError> {
        let mut lhs = self.and_expr()?;
        while self.tokens.get(self.pos) == Some(&Token::Or) {
            self.pos += 1;
            lhs = Formula::Or(Box::new(lhs), Box::new(self.and_expr()?));
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Formula, SimError> {
        let mut lhs = self.atom()?;
        while self.tokens.get(self.pos) == Some(&Token::And) {
            self.pos += 1;
            lhs = Formula::And(Box::new(lhs), Box::new(self.atom()?));
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> Result<Formula, SimError> {
        match self.tokens.get(self.pos).cloned() {
            Some(Token::Name(n)) => {
                self.pos += 1;
                self.names
                    .iter()
                    .position(|&k| k == n)
                    .map(Formula::Blob)
                    .ok_or(SimError::Formula(format!("unknown blob name {n:?}")))
            }
            Some(Token::Open) => {
                self.pos += 1;
                let f = self.or_expr()?;
                if self.tokens.get(self.pos) != Some(&Token::Close) {
                    return Err(SimError::Formula("unbalanced parenthesis".into()));
                }
                self.pos += 1;
                Ok(f)
            }
            other => Err(SimError::Formula(format!("expected a name, found {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Substrate {
    pub blob_masks: Vec<(String, VolumeGrid)>,
    pub ground_truth: VolumeGrid,
}

pub fn blob_field(blob: &Blob, dims: &[usize]) -> Vec<f64> {
    let n: usize = dims.iter().product();
    (0..n)
        .map(|i| {
            let c = unflatten(dims, i);
            let q: f64 = c
                .iter()
                .zip(&blob.center)
                .zip(&blob.scale)
                .map(|((&p, &m), &s)| ((p as f64 - m) / s).powi(2))
                .sum();
            blob.amplitude * (-0.5 * q).exp()
        })
        .collect()
}

pub fn realize_substrate(spec: &SubstrateSpec, dims: &[usize]) -> Result<Substrate, SimError> {
    VolumeGrid::zeros_binary(dims)?;
    let names: Vec<&str> = spec.blobs.iter().map(|b| b.name.as_str()).collect();
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(SimError::Spec(format!("duplicate blob name {n:?}")));
        }
    }
    let formula = Formula::parse(&spec.formula, &names)?;
    let mut masks = Vec::with_capacity(spec.blobs.len());
    for b in &spec.blobs {
        if b.center.len() != dims.len() || b.scale.len() != dims.len() {
            return Err(SimError::Spec(format!("blob {:?} has wrong rank", b.name)));
        }
        if b.scale.iter().any(|&s| !(s > 0.0)) {
            return Err(SimError::Spec(format!("blob {:?} needs positive scales", b.name)));
        }
        if b.center.iter().zip(dims).any(|(&c, &d)| c < 0.0 || c > (d - 1) as f64) {
            return Err(SimError::Spec(format!("blob {:?} centre outside grid", b.name)));
        }
        let mask: Vec<bool> = blob_field(b, dims)
            .into_iter()
            .map(|v| v > spec.blob_threshold)
            .collect();
        if !mask.iter().any(|&m| m) {
            return Err(SimError::EmptyBlob(b.name.clone()));
        }
        masks.push(mask);
    }
    let n: usize = dims.iter().product();
    let mut member = vec![false; masks.len()];
    let gt: Vec<bool> = (0..n)
        .map(|i| {
            for (m, mask) in member.iter_mut().zip(&masks) {
                *m = mask[i];
            }
            formula.eval(&member)
        })
        .collect();
    if !gt.iter().any(|&g| g) {
        return Err(SimError::EmptySubstrate);
    }
    let blob_masks = spec
        .blobs
        .iter()
        .zip(&masks)
        .map(|(b, m)| Ok((b.name.clone(), VolumeGrid::from_mask(dims, m)?)))
        .collect::<Result<_, SimError>>()?;
    Ok(Substrate {
        blob_masks,
        ground_truth: VolumeGrid::from_mask(dims, &gt)?,
    })
}
