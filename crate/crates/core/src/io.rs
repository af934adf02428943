//! Versioned plain-text instance format.
//!
//! ```text
//! format shuffling-instance 1
//! dim 2
//! n 2
//! mu_f 0
//! regularizer l1 lambda=0.1
//! component lsq target=1.5 row=0.5,-1 L=1.25
//! component lad target=0 row=3,4 G=5
//! ```
//!
//! Floats are written in shortest round-trip form so a read-back instance is
//! bit-identical to the one written.

use std::fmt::Write as _;

use itertools::Itertools;
use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::problem::{Component, ComponentKind, FiniteSumProblem};
use crate::prox::Regularizer;
use crate::descriptor::{parse_f64, Descriptor};
use crate::Vector;

pub const FORMAT_HEADER: &str = "format shuffling-instance 1";

fn list<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    values.map(|v| format!("{v:?}")).join(",")
}

pub fn write_instance(p: &FiniteSumProblem) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{FORMAT_HEADER}");
    let _ = writeln!(out, "dim {}", p.dim());
    let _ = writeln!(out, "n {}", p.n());
    let _ = writeln!(out, "mu_f {:?}", p.mu_f);
    let _ = writeln!(out, "regularizer {}", p.reg.descriptor_string());
    for c in &p.components {
        let body = match &c.kind {
            ComponentKind::Quadratic { hessian, linear, offset } => format!(
                "quad offset={offset:?} linear={} hessian={}",
                list(linear.iter()),
                list(hessian.transpose().iter())
            ),
            ComponentKind::LeastSquares { row, target } => {
                format!("lsq target={target:?} row={}", list(row.iter()))
            }
            ComponentKind::Lad { row, target } => {
                format!("lad target={target:?} row={}", list(row.iter()))
            }
            ComponentKind::Hinge { row, label } => {
                format!("hinge label={label:?} row={}", list(row.iter()))
            }
        };
        let mut line = format!("component {body}");
        if let Some(l) = c.smooth_l {
            let _ = write!(line, " L={l:?}");
        }
        if let Some(g) = c.lip_g {
            let _ = write!(line, " G={g:?}");
        }
        let _ = writeln!(out, "{line}");
    }
    out
}

fn required_list(desc: &Descriptor, key: &str) -> Result<Vec<f64>> {
    desc.get_list(key)?
        .ok_or_else(|| Error::parse(&desc.name, format!("missing '{key}'")))
}

fn parse_component(text: &str, line_no: usize) -> Result<Component> {
    let ctx = |e: Error| match e {
        Error::Parse { message, .. } => Error::parse(format!("instance line {line_no}"), message),
        other => other,
    };
    let desc = Descriptor::parse(text).map_err(ctx)?;
    let build = || -> Result<Component> {
        let mut comp = match desc.name.as_str() {
            "quad" => {
                let linear = Vector::from_vec(required_list(&desc, "linear")?);
                let d = linear.len();
                let h = required_list(&desc, "hessian")?;
                if h.len() != d * d {
                    return Err(Error::DimensionMismatch { expected: d * d, got: h.len() });
                }
                Component::quadratic(
                    DMatrix::from_row_slice(d, d, &h),
                    linear,
                    desc.require_f64("offset")?,
                )?
            }
            "lsq" => Component::least_squares(
                Vector::from_vec(required_list(&desc, "row")?),
                desc.require_f64("target")?,
            )?,
            "lad" => Component::lad(
                Vector::from_vec(required_list(&desc, "row")?),
                desc.require_f64("target")?,
            )?,
            "hinge" => Component::hinge(
                Vector::from_vec(required_list(&desc, "row")?),
                desc.require_f64("label")?,
            )?,
            other => {
                return Err(Error::parse("component", format!("unknown kind '{other}'")));
            }
        };
        if let Some(l) = desc.get_f64("L")? {
            comp.smooth_l = Some(l);
        }
        if let Some(g) = desc.get_f64("G")? {
            comp.lip_g = Some(g);
        }
        desc.ensure_consumed()?;
        Ok(comp)
    };
    build().map_err(ctx)
}

pub fn read_instance(text: &str) -> Result<FiniteSumProblem> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, FORMAT_HEADER)) => {}
        Some((_, other)) => {
            return Err(Error::parse("instance", format!("unsupported header '{other}'")))
        }
        None => return Err(Error::parse("instance", "empty file")),
    }
    let mut dim = None;
    let mut n = None;
    let mut mu_f = 0.0;
    let mut reg = Regularizer::Zero;
    let mut comps = Vec::new();
    for (no, line) in lines {
        let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        let ctx = format!("instance line {no}");
        match key {
            "dim" => dim = Some(rest.parse::<usize>().map_err(|e| Error::parse(&ctx, e.to_string()))?),
            "n" => n = Some(rest.parse::<usize>().map_err(|e| Error::parse(&ctx, e.to_string()))?),
            "mu_f" => mu_f = parse_f64(&ctx, rest)?,
            "regularizer" => reg = Regularizer::parse(rest)?,
            "component" => comps.push(parse_component(rest, no)?),
            other => return Err(Error::parse(ctx, format!("unknown key '{other}'"))),
        }
    }
    if let Some(n) = n {
        if n != comps.len() {
            return Err(Error::parse("instance", format!("declared n = {n}, found {}", comps.len())));
        }
    }
    let p = FiniteSumProblem::new(comps, reg, mu_f)?;
    if let Some(d) = dim {
        if d != p.dim() {
            return Err(Error::DimensionMismatch { expected: d, got: p.dim() });
        }
    }
    Ok(p)
}

/// SHA-256 of the canonical instance text.
pub fn instance_digest(p: &FiniteSumProblem) -> String {
    hex::encode(Sha256::digest(write_instance(p).as_bytes()))
}

pub fn read_file(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
